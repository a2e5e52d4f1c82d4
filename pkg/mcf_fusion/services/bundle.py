"""Feature-bundle file format, sidecar manifests and dataset splits.

Layout (little-endian, no padding):

    header   magic "MCFB" | version u32 | task u8 | n_disc u16 | count u32 |
             T_PE, d_PE, T_FG, d_FG, T_VS, d_VS as u16
    records  e_PE f32[T_PE·d_PE] | e_FG f32[T_FG·d_FG] | e_VS f32[T_VS·d_VS] |
             fg_mask u8[T_FG] | task 0: y_disc u8[n_disc], y_cont f32[3]
                              | task 1: y_class u16
"""

import os
import struct
import tempfile
from collections.abc import Sequence
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np
import structlog

from mcf_fusion.api.dto import AVD_DIMS, Geometry, Task
from mcf_fusion.core.config import format_key_value, read_key_value_file
from mcf_fusion.core.errors import (
    BadMagicError,
    BundleSizeError,
    DataError,
    ParameterError,
    RecordError,
    TruncatedBundleError,
    UnsupportedVersionError,
)
from mcf_fusion.services.model import StreamBatch

logger = structlog.get_logger(__name__)

MAGIC = b"MCFB"
VERSION = 1
HEADER = struct.Struct("<4sIBHI6H")
MANIFEST_SUFFIX = ".manifest"

_GEOMETRY_FIELDS = ("t_pe", "d_pe", "t_fg", "d_fg", "t_vs", "d_vs")
_FIELD_LABELS = {
    "t_pe": "T_PE", "d_pe": "d_PE", "t_fg": "T_FG",
    "d_fg": "d_FG", "t_vs": "T_VS", "d_vs": "d_VS",
}


@dataclass(frozen=True)
class BundleHeader:
    task: Task
    n_disc: int
    count: int
    geometry: Geometry

    def pack(self) -> bytes:
        g = self.geometry
        return HEADER.pack(
            MAGIC, VERSION, self.task.code, self.n_disc, self.count,
            g.t_pe, g.d_pe, g.t_fg, g.d_fg, g.t_vs, g.d_vs,
        )

    @classmethod
    def unpack(cls, data: bytes) -> "BundleHeader":
        if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
            raise BadMagicError("not a feature bundle (bad magic)", {"magic": data[:4].hex()})
        if len(data) < HEADER.size:
            raise TruncatedBundleError(
                "bundle ends inside the header", 0, {"length": len(data), "header_size": HEADER.size}
            )
        _, version, task, n_disc, count, *dims = HEADER.unpack_from(data)
        if version != VERSION:
            raise UnsupportedVersionError(
                f"unsupported bundle version {version}", {"version": version}
            )
        if task not in (0, 1):
            raise RecordError(f"header task byte must be 0 or 1, got {task}", "task")
        if n_disc < 1:
            raise RecordError("header n_disc must be >= 1", "n_disc")
        for name, value in zip(_GEOMETRY_FIELDS, dims):
            if value < 1:
                raise RecordError(f"header {_FIELD_LABELS[name]} must be >= 1", _FIELD_LABELS[name])
        geometry = Geometry(**dict(zip(_GEOMETRY_FIELDS, dims)))
        return cls(task=Task.from_code(task), n_disc=n_disc, count=count, geometry=geometry)

    def record_dtype(self) -> np.dtype:
        g = self.geometry
        fields: list[tuple[Any, ...]] = [
            ("e_pe", "<f4", (g.t_pe, g.d_pe)),
            ("e_fg", "<f4", (g.t_fg, g.d_fg)),
            ("e_vs", "<f4", (g.t_vs, g.d_vs)),
            ("fg_mask", "u1", (g.t_fg,)),
        ]
        if self.task is Task.MULTILABEL_CONT:
            fields += [("y_disc", "u1", (self.n_disc,)), ("y_cont", "<f4", (AVD_DIMS,))]
        else:
            fields += [("y_class", "<u2")]
        return np.dtype(fields)

    @property
    def record_size(self) -> int:
        return self.record_dtype().itemsize


@dataclass
class FeatureBundle:
    """An in-memory bundle: stacked stream tensors, masks and labels."""
    task: Task
    n_disc: int
    geometry: Geometry
    e_pe: np.ndarray
    e_fg: np.ndarray
    e_vs: np.ndarray
    fg_mask: np.ndarray
    y_disc: Optional[np.ndarray] = None
    y_cont: Optional[np.ndarray] = None
    y_class: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.e_pe.shape[0])

    @property
    def header(self) -> BundleHeader:
        return BundleHeader(self.task, self.n_disc, len(self), self.geometry)

    @classmethod
    def empty(cls, task: Task, n_disc: int, geometry: Geometry) -> "FeatureBundle":
        g = geometry
        labels: dict[str, np.ndarray] = (
            {"y_disc": np.zeros((0, n_disc), np.uint8), "y_cont": np.zeros((0, AVD_DIMS), np.float32)}
            if task is Task.MULTILABEL_CONT
            else {"y_class": np.zeros(0, np.uint16)}
        )
        return cls(
            task=task, n_disc=n_disc, geometry=g,
            e_pe=np.zeros((0, g.t_pe, g.d_pe), np.float32),
            e_fg=np.zeros((0, g.t_fg, g.d_fg), np.float32),
            e_vs=np.zeros((0, g.t_vs, g.d_vs), np.float32),
            fg_mask=np.zeros((0, g.t_fg), bool),
            **labels,
        )

    def subset(self, indices: np.ndarray | Sequence[int]) -> "FeatureBundle":
        idx = np.asarray(indices, dtype=np.int64)

        def take(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return None if a is None else a[idx]

        return FeatureBundle(
            task=self.task, n_disc=self.n_disc, geometry=self.geometry,
            e_pe=self.e_pe[idx], e_fg=self.e_fg[idx], e_vs=self.e_vs[idx],
            fg_mask=self.fg_mask[idx],
            y_disc=take(self.y_disc), y_cont=take(self.y_cont), y_class=take(self.y_class),
        )

    def batch(self, indices: np.ndarray | Sequence[int]) -> StreamBatch:
        idx = np.asarray(indices, dtype=np.int64)
        return StreamBatch(self.e_pe[idx], self.e_fg[idx], self.e_vs[idx], self.fg_mask[idx])

    def labels(self, indices: np.ndarray | Sequence[int]) -> dict[str, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        if self.task is Task.MULTILABEL_CONT:
            assert self.y_disc is not None and self.y_cont is not None
            return {"y_disc": self.y_disc[idx], "y_cont": self.y_cont[idx]}
        assert self.y_class is not None
        return {"y_class": self.y_class[idx]}

    def validate(self) -> None:
        """Check shapes and record invariants; raise RecordError naming the field."""
        g, n = self.geometry, len(self)
        expected = {
            "e_PE": (self.e_pe, (n, g.t_pe, g.d_pe)),
            "e_FG": (self.e_fg, (n, g.t_fg, g.d_fg)),
            "e_VS": (self.e_vs, (n, g.t_vs, g.d_vs)),
            "fg_mask": (self.fg_mask, (n, g.t_fg)),
        }
        if self.task is Task.MULTILABEL_CONT:
            expected["y_disc"] = (self.y_disc, (n, self.n_disc))
            expected["y_cont"] = (self.y_cont, (n, AVD_DIMS))
        else:
            expected["y_class"] = (self.y_class, (n,))
        for field, (array, shape) in expected.items():
            if array is None or array.shape != shape:
                got = None if array is None else array.shape
                raise RecordError(f"{field} has shape {got}, expected {shape}", field)
        _check_records(
            fg_mask=self.fg_mask, y_disc=self.y_disc, y_cont=self.y_cont,
            y_class=self.y_class, n_disc=self.n_disc,
            streams={"e_PE": self.e_pe, "e_FG": self.e_fg, "e_VS": self.e_vs},
        )


def _first_bad(rows: np.ndarray) -> int:
    return int(np.flatnonzero(rows)[0])


def _check_records(
    fg_mask: np.ndarray,
    y_disc: Optional[np.ndarray],
    y_cont: Optional[np.ndarray],
    y_class: Optional[np.ndarray],
    n_disc: int,
    streams: dict[str, np.ndarray],
) -> None:
    n = fg_mask.shape[0]
    if n == 0:
        return
    for field, array in streams.items():
        bad = ~np.isfinite(array.reshape(n, -1)).all(axis=1)
        if bad.any():
            i = _first_bad(bad)
            raise RecordError(f"sample {i}: {field} has non-finite values", field, i)

    mask = np.asarray(fg_mask)
    bad = ~np.isin(mask, (0, 1)).all(axis=1) if mask.dtype != bool else np.zeros(n, bool)
    if bad.any():
        i = _first_bad(bad)
        raise RecordError(f"sample {i}: fg_mask bytes must be 0 or 1", "fg_mask", i)
    bad = ~mask.astype(bool).any(axis=1)
    if bad.any():
        i = _first_bad(bad)
        raise RecordError(f"sample {i}: fg_mask has no valid token", "fg_mask", i)

    if y_disc is not None:
        bad = ~np.isin(y_disc, (0, 1)).all(axis=1)
        if bad.any():
            i = _first_bad(bad)
            raise RecordError(f"sample {i}: y_disc bytes must be 0 or 1", "y_disc", i)
    if y_cont is not None:
        bad = ~(np.isfinite(y_cont) & (y_cont >= 0.0) & (y_cont <= 1.0)).all(axis=1)
        if bad.any():
            i = _first_bad(bad)
            raise RecordError(f"sample {i}: y_cont must lie in [0, 1]", "y_cont", i)
    if y_class is not None:
        bad = np.asarray(y_class) >= n_disc
        if bad.any():
            i = _first_bad(bad)
            raise RecordError(
                f"sample {i}: y_class {int(y_class[i])} is not below n_disc={n_disc}", "y_class", i
            )


def encode_bundle(bundle: FeatureBundle) -> bytes:
    bundle.validate()
    header = bundle.header
    records = np.zeros(len(bundle), dtype=header.record_dtype())
    records["e_pe"] = bundle.e_pe
    records["e_fg"] = bundle.e_fg
    records["e_vs"] = bundle.e_vs
    records["fg_mask"] = bundle.fg_mask.astype(np.uint8)
    if bundle.task is Task.MULTILABEL_CONT:
        records["y_disc"] = bundle.y_disc
        records["y_cont"] = bundle.y_cont
    else:
        records["y_class"] = bundle.y_class
    return header.pack() + records.tobytes()


def decode_bundle(data: bytes) -> FeatureBundle:
    header = BundleHeader.unpack(data)
    record_size = header.record_size
    expected = HEADER.size + header.count * record_size
    if len(data) < expected:
        index = (len(data) - HEADER.size) // record_size
        raise TruncatedBundleError(
            f"bundle truncated inside sample {index} of {header.count}",
            index,
            {"length": len(data), "expected": expected},
        )
    if len(data) > expected:
        raise BundleSizeError(
            f"bundle has {len(data) - expected} bytes beyond its declared {header.count} records",
            {"length": len(data), "expected": expected},
        )

    records = np.frombuffer(data, dtype=header.record_dtype(), count=header.count, offset=HEADER.size)
    fg_bytes = records["fg_mask"]
    labels: dict[str, np.ndarray] = {}
    if header.task is Task.MULTILABEL_CONT:
        labels["y_disc"] = records["y_disc"].astype(np.uint8)
        labels["y_cont"] = records["y_cont"].astype(np.float32)
    else:
        labels["y_class"] = records["y_class"].astype(np.uint16)
    streams = {
        "e_PE": records["e_pe"].astype(np.float32),
        "e_FG": records["e_fg"].astype(np.float32),
        "e_VS": records["e_vs"].astype(np.float32),
    }
    _check_records(
        fg_mask=fg_bytes, y_disc=labels.get("y_disc"), y_cont=labels.get("y_cont"),
        y_class=labels.get("y_class"), n_disc=header.n_disc, streams=streams,
    )
    return FeatureBundle(
        task=header.task, n_disc=header.n_disc, geometry=header.geometry,
        e_pe=streams["e_PE"], e_fg=streams["e_FG"], e_vs=streams["e_VS"],
        fg_mask=fg_bytes.astype(bool), **labels,
    )


def atomic_write(path: Path, data: bytes | str) -> None:
    """Write through a temp file in the target directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_bundle(path: Path, bundle: FeatureBundle) -> int:
    """Write `bundle` to `path`; returns the byte count."""
    data = encode_bundle(bundle)
    atomic_write(path, data)
    logger.info("Wrote feature bundle", path=str(path), samples=len(bundle), bytes=len(data))
    return len(data)


def read_bundle(path: Path) -> FeatureBundle:
    path = Path(path)
    if not path.exists():
        raise DataError(f"bundle not found: {path}", {"path": str(path)})
    bundle = decode_bundle(path.read_bytes())
    logger.info("Read feature bundle", path=str(path), samples=len(bundle), task=bundle.task.value)
    return bundle


def manifest_path(bundle_path: Path) -> Path:
    return Path(str(bundle_path) + MANIFEST_SUFFIX)


def write_manifest(path: Path, entries: dict[str, Any], timestamp: bool = True) -> None:
    """Sidecar `key = value` manifest; `timestamp` adds a leading `# created` comment."""
    text = format_key_value(entries)
    if timestamp:
        created = datetime.now(timezone.utc).isoformat(timespec="seconds")
        text = f"# created {created}\n" + text
    atomic_write(path, text)


def read_manifest(path: Path) -> dict[str, str]:
    return read_key_value_file(Path(path))


def split_indices(n: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Seeded permutation cut into contiguous slices of floor(f·n) samples."""
    if not 1 <= len(fractions) <= 3:
        raise ParameterError("split needs one to three fractions", {"fractions": list(fractions)})
    if any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-9:
        raise ParameterError(
            "split fractions must be positive and sum to at most 1",
            {"fractions": list(fractions)},
        )
    order = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for fraction in fractions:
        size = int(np.floor(fraction * n + 1e-9))
        parts.append(order[start:start + size])
        start += size
    while len(parts) < 3:
        parts.append(order[:0])
    return parts


def split_dataset(
    bundle: FeatureBundle, fractions: Sequence[float], seed: int
) -> tuple[FeatureBundle, FeatureBundle, FeatureBundle]:
    train, val, test = (bundle.subset(idx) for idx in split_indices(len(bundle), fractions, seed))
    logger.debug("Split dataset", train=len(train), val=len(val), test=len(test), seed=seed)
    return train, val, test
