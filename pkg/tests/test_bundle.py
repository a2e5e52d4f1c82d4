"""Tests for the feature-bundle format, manifests and splits."""

import struct

import numpy as np
import pytest

from mcf_fusion.api.dto import Geometry, Task
from mcf_fusion.core.errors import (
    BadMagicError,
    BundleSizeError,
    DataError,
    ParameterError,
    RecordError,
    TruncatedBundleError,
    UnsupportedVersionError,
)
from mcf_fusion.services.bundle import (
    HEADER,
    FeatureBundle,
    decode_bundle,
    encode_bundle,
    manifest_path,
    read_bundle,
    read_manifest,
    split_dataset,
    split_indices,
    write_bundle,
    write_manifest,
)


def _random_bundle(gen: np.random.Generator, task: Task, n: int) -> FeatureBundle:
    g = Geometry(**{k: int(v) for k, v in zip(
        ("t_pe", "d_pe", "t_fg", "d_fg", "t_vs", "d_vs"), gen.integers(1, 5, size=6)
    )})
    n_disc = int(gen.integers(1, 6)) if task is Task.MULTILABEL_CONT else int(gen.integers(2, 8))
    lengths = gen.integers(1, g.t_fg + 1, size=n)
    bundle = FeatureBundle(
        task=task, n_disc=n_disc, geometry=g,
        e_pe=gen.standard_normal((n, g.t_pe, g.d_pe)).astype(np.float32),
        e_fg=gen.standard_normal((n, g.t_fg, g.d_fg)).astype(np.float32),
        e_vs=gen.standard_normal((n, g.t_vs, g.d_vs)).astype(np.float32),
        fg_mask=np.arange(g.t_fg)[None, :] < lengths[:, None],
    )
    if task is Task.MULTILABEL_CONT:
        bundle.y_disc = gen.integers(0, 2, size=(n, n_disc)).astype(np.uint8)
        bundle.y_cont = gen.random((n, 3)).astype(np.float32)
    else:
        bundle.y_class = gen.integers(0, n_disc, size=n).astype(np.uint16)
    return bundle


def _assert_same(a: FeatureBundle, b: FeatureBundle) -> None:
    assert (a.task, a.n_disc, a.geometry) == (b.task, b.n_disc, b.geometry)
    for field in ("e_pe", "e_fg", "e_vs", "fg_mask", "y_disc", "y_cont", "y_class"):
        left, right = getattr(a, field), getattr(b, field)
        if left is None:
            assert right is None
        else:
            np.testing.assert_array_equal(left, right)


class TestRoundTrip:
    """Test encode/decode fidelity."""

    def test_randomized_bundles(self):
        gen = np.random.default_rng(2024)
        for _ in range(100):
            task = Task.MULTILABEL_CONT if gen.random() < 0.5 else Task.SINGLE_LABEL
            bundle = _random_bundle(gen, task, int(gen.integers(0, 4)))
            _assert_same(decode_bundle(encode_bundle(bundle)), bundle)

    def test_empty_bundle_is_a_bare_header(self):
        bundle = FeatureBundle.empty(Task.MULTILABEL_CONT, 26, Geometry.full())
        data = encode_bundle(bundle)
        assert len(data) == HEADER.size == 27
        decoded = decode_bundle(data)
        assert len(decoded) == 0
        assert decoded.geometry == Geometry.full()
        assert decoded.n_disc == 26

    def test_record_size(self, toy_linear_bundle):
        g = toy_linear_bundle.geometry
        expected = 4 * (g.t_pe * g.d_pe + g.t_fg * g.d_fg + g.t_vs * g.d_vs) + g.t_fg + 5 + 12
        assert toy_linear_bundle.header.record_size == expected

    def test_file_round_trip(self, tmp_path, toy_xor_bundle):
        path = tmp_path / "data.mcfb"
        written = write_bundle(path, toy_xor_bundle)
        assert written == path.stat().st_size
        _assert_same(read_bundle(path), toy_xor_bundle)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_bundle(tmp_path / "nope.mcfb")


class TestCorruptBundles:
    """Test decode failures on damaged input."""

    @pytest.fixture
    def data(self, toy_xor_bundle) -> bytes:
        return encode_bundle(toy_xor_bundle.subset(range(5)))

    def test_truncated_inside_record(self, data, toy_xor_bundle):
        record = toy_xor_bundle.header.record_size
        with pytest.raises(TruncatedBundleError) as exc:
            decode_bundle(data[: HEADER.size + 2 * record + 3])
        assert exc.value.sample_index == 2

    def test_truncated_inside_header(self, data):
        with pytest.raises(TruncatedBundleError) as exc:
            decode_bundle(data[:10])
        assert exc.value.sample_index == 0

    def test_bad_magic(self, data):
        with pytest.raises(BadMagicError):
            decode_bundle(b"XXXX" + data[4:])

    def test_unsupported_version(self, data):
        with pytest.raises(UnsupportedVersionError):
            decode_bundle(data[:4] + struct.pack("<I", 2) + data[8:])

    def test_trailing_bytes(self, data):
        with pytest.raises(BundleSizeError):
            decode_bundle(data + b"\x00")

    def test_class_index_out_of_range(self, data, toy_xor_bundle):
        end_of_second = HEADER.size + 2 * toy_xor_bundle.header.record_size
        corrupt = data[: end_of_second - 2] + struct.pack("<H", 5) + data[end_of_second:]
        with pytest.raises(RecordError) as exc:
            decode_bundle(corrupt)
        assert exc.value.field == "y_class"
        assert exc.value.sample_index == 1


class TestRecordValidation:
    """Test record invariants enforced when encoding."""

    def test_empty_foreground_mask(self, toy_linear_bundle):
        toy_linear_bundle.fg_mask[3] = False
        with pytest.raises(RecordError) as exc:
            encode_bundle(toy_linear_bundle)
        assert exc.value.field == "fg_mask"
        assert exc.value.sample_index == 3

    def test_class_not_below_n_disc(self, toy_xor_bundle):
        toy_xor_bundle.y_class[0] = 2
        with pytest.raises(RecordError) as exc:
            encode_bundle(toy_xor_bundle)
        assert exc.value.field == "y_class"

    def test_continuous_label_out_of_range(self, toy_linear_bundle):
        toy_linear_bundle.y_cont[1, 2] = 1.5
        with pytest.raises(RecordError) as exc:
            encode_bundle(toy_linear_bundle)
        assert exc.value.field == "y_cont"
        assert exc.value.sample_index == 1

    def test_non_finite_stream(self, toy_linear_bundle):
        toy_linear_bundle.e_vs[4, 0, 0] = np.nan
        with pytest.raises(RecordError) as exc:
            encode_bundle(toy_linear_bundle)
        assert exc.value.field == "e_VS"

    def test_wrong_label_shape(self, toy_linear_bundle):
        toy_linear_bundle.y_disc = toy_linear_bundle.y_disc[:, :3]
        with pytest.raises(RecordError) as exc:
            encode_bundle(toy_linear_bundle)
        assert exc.value.field == "y_disc"


class TestManifest:
    """Test the sidecar manifest."""

    def test_round_trip_with_timestamp(self, tmp_path):
        path = manifest_path(tmp_path / "data.mcfb")
        assert path.name == "data.mcfb.manifest"
        write_manifest(path, {"mode": "xor", "samples": 4}, timestamp=True)
        assert path.read_text().startswith("# created ")
        assert read_manifest(path) == {"mode": "xor", "samples": "4"}

    def test_without_timestamp_is_stable(self, tmp_path):
        a, b = tmp_path / "a.manifest", tmp_path / "b.manifest"
        write_manifest(a, {"seed": 3}, timestamp=False)
        write_manifest(b, {"seed": 3}, timestamp=False)
        assert a.read_bytes() == b.read_bytes() == b"seed = 3\n"


class TestSplits:
    """Test seeded dataset splits."""

    def test_disjoint_partition(self):
        train, val, test = split_indices(8, (0.5, 0.25, 0.25), seed=0)
        assert (len(train), len(val), len(test)) == (4, 2, 2)
        assert sorted(np.concatenate([train, val, test]).tolist()) == list(range(8))

    def test_single_fraction(self):
        train, val, test = split_indices(10, (1.0,), seed=1)
        assert sorted(train.tolist()) == list(range(10))
        assert len(val) == len(test) == 0

    def test_deterministic(self):
        first = split_indices(50, (0.8, 0.2), seed=9)
        second = split_indices(50, (0.8, 0.2), seed=9)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("fractions", [(), (0.5, 0.2, 0.2, 0.1), (0.0, 0.5), (0.7, 0.4)])
    def test_invalid_fractions(self, fractions):
        with pytest.raises(ParameterError):
            split_indices(10, fractions, seed=0)

    def test_split_dataset_keeps_labels(self, toy_xor_bundle):
        train, val, _ = split_dataset(toy_xor_bundle, (0.75, 0.25), seed=0)
        assert len(train) == 24 and len(val) == 8
        assert train.y_class.shape == (24,)
        assert train.geometry == toy_xor_bundle.geometry
