"""Tests for MCF model assembly and forward pass."""

import numpy as np
import pytest

from mcf_fusion.api.dto import Geometry, RunConfig, StreamSet, Task
from mcf_fusion.core.config import get_preset
from mcf_fusion.core.errors import DataError, DimensionError, GeometryMismatchError
from mcf_fusion.nn.encoders import EncoderVariant
from mcf_fusion.nn.layers import LayerNorm, Linear
from mcf_fusion.nn.ops import Mode
from mcf_fusion.nn.tensor import RngState, Tensor
from mcf_fusion.services.evaluate import predict
from mcf_fusion.services.losses import task_loss
from mcf_fusion.services.model import (
    McfModel,
    StreamBatch,
    foreground_stream,
    fuse,
    fusion_vector,
    heads_forward,
    mcf_forward,
    project_stream,
    visual_stream,
)
from tests.factories import standardized, toy_config


def _sample(rng, t_pe=4, t_fg=6, t_vs=5, d=16, valid_fg=4) -> StreamBatch:
    return StreamBatch(
        e_pe=rng.standard_normal((t_pe, d)),
        e_fg=rng.standard_normal((t_fg, d)),
        e_vs=rng.standard_normal((t_vs, d)),
        fg_mask=np.arange(t_fg) < valid_fg,
    )


def _batch(rng, size=3, t_pe=4, t_fg=6, t_vs=5, d=16) -> StreamBatch:
    lengths = np.array([6, 3, 1][:size])
    return StreamBatch(
        e_pe=rng.standard_normal((size, t_pe, d)),
        e_fg=rng.standard_normal((size, t_fg, d)),
        e_vs=rng.standard_normal((size, t_vs, d)),
        fg_mask=np.arange(t_fg)[None, :] < lengths[:, None],
    )


def _zero_block_sublayers(model: McfModel, block_name: str) -> None:
    for layer in getattr(model, block_name).layers:
        layer.mha.W_o.data = np.zeros_like(layer.mha.W_o.data)
        layer.mha.b_o.data = np.zeros_like(layer.mha.b_o.data)
        for _, p in layer.ffn.named_parameters():
            p.data = np.zeros_like(p.data)


class TestProjectStream:
    """Test per-stream adapters."""

    def test_identity_adapter(self, rng):
        x = rng.standard_normal((3, 4))
        adapter = Linear(4, 4, rng, identity=True)
        np.testing.assert_array_equal(project_stream(x, adapter).data, x)

    def test_widening_adapter_shape(self, rng):
        out = project_stream(rng.standard_normal((49, 512)).astype(np.float32), Linear(512, 768, rng))
        assert out.shape == (49, 768)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            project_stream(np.ones((2, 3)), Linear(4, 4, rng))

    def test_frozen_adapter_gets_no_gradient(self, rng, toy_model):
        toy_model.freeze(["adapter_pe"])
        sample = _batch(rng, size=2)
        out = mcf_forward(toy_model, sample)
        labels = {"y_disc": np.ones((2, 5)), "y_cont": np.full((2, 3), 0.5)}
        task_loss(out.disc_logits, out.cont, labels, toy_model.config).backward()
        assert toy_model.adapter_pe.W.grad is None
        assert np.abs(toy_model.adapter_fg.W.grad).sum() > 0


class TestContextStreams:
    """Test the foreground and visual-scene streams."""

    def test_foreground_shape(self, rng, toy_model):
        assert foreground_stream(toy_model, _sample(rng)).shape == (4, 16)

    def test_masked_foreground_padding_is_ignored(self, rng, toy_model):
        sample = _sample(rng)
        padded = StreamBatch(
            e_pe=sample.e_pe,
            e_fg=np.concatenate([sample.e_fg, rng.standard_normal((2, 16)) * 10.0]),
            e_vs=sample.e_vs,
            fg_mask=np.concatenate([sample.fg_mask, [False, False]]),
        )
        np.testing.assert_allclose(
            foreground_stream(toy_model, padded).data,
            foreground_stream(toy_model, sample).data,
            atol=1e-5,
        )

    def test_degenerate_block_returns_normalized_person_tokens(self, rng, toy_model):
        _zero_block_sublayers(toy_model, "fg_block")
        sample = _sample(rng)
        sample.e_pe = standardized(sample.e_pe)
        expected = LayerNorm(16)(Tensor(sample.e_pe)).data
        np.testing.assert_allclose(foreground_stream(toy_model, sample).data, expected, atol=1e-5)

    def test_visual_shape_with_197_tokens(self, rng, toy_model):
        sample = _sample(rng, t_vs=197)
        assert visual_stream(toy_model, sample).shape == (4, 16)

    def test_streams_have_separate_parameters(self, rng, toy_model):
        sample = _sample(rng)
        before = visual_stream(toy_model, sample).data
        for p in toy_model.fg_block.parameters():
            p.data = p.data + 1.0
        np.testing.assert_array_equal(visual_stream(toy_model, sample).data, before)

    def test_missing_stream_rejected(self, rng):
        model = McfModel(toy_config(streams=StreamSet.VS))
        with pytest.raises(DataError):
            foreground_stream(model, _sample(rng))


class TestFusion:
    """Test pooling, concatenation and heads."""

    @pytest.mark.parametrize("d_model", [512, 768])
    def test_fusion_width(self, d_model):
        tokens = Tensor(np.zeros((49, d_model), dtype=np.float32))
        assert fuse(tokens, tokens).shape == (2 * d_model,)

    def test_constant_tokens(self):
        fused = fuse(Tensor(np.full((4, 3), 2.0)), Tensor(np.full((4, 2), -1.0)))
        np.testing.assert_array_equal(fused.data, [2.0, 2.0, 2.0, -1.0, -1.0])

    def test_multilabel_heads(self):
        model = McfModel(toy_config(n_disc=26))
        out = heads_forward(model, Tensor(np.ones(32)))
        assert out.disc_logits.shape == (26,)
        assert out.cont.shape == (3,)

    def test_single_label_head(self):
        model = McfModel(toy_config(task=Task.SINGLE_LABEL, n_disc=7))
        out = heads_forward(model, Tensor(np.ones(32)))
        assert out.disc_logits.shape == (7,)
        assert out.cont is None

    def test_zero_head_weights_give_biases(self, rng, toy_model):
        head = toy_model.head_disc.out
        head.W.data = np.zeros_like(head.W.data)
        head.b.data = np.arange(5, dtype=np.float32)
        out = heads_forward(toy_model, Tensor(rng.standard_normal(32)))
        np.testing.assert_array_equal(out.disc_logits.data, np.arange(5))

    def test_hidden_head_layout(self):
        model = McfModel(toy_config(task=Task.SINGLE_LABEL, head_hidden=8))
        names = [name for name, _ in model.named_parameters() if name.startswith("head_disc")]
        assert names == ["head_disc/hidden/W", "head_disc/hidden/b", "head_disc/out/W", "head_disc/out/b"]

    def test_fusion_width_mismatch(self, toy_model):
        with pytest.raises(DimensionError):
            heads_forward(toy_model, Tensor(np.ones(16)))

    @pytest.mark.parametrize(
        "streams,width",
        [(StreamSet.BOTH, 32), (StreamSet.FG, 16), (StreamSet.VS, 16), (StreamSet.NONE, 16), (StreamSet.LATE, 32)],
    )
    def test_stream_selection(self, rng, streams, width):
        model = McfModel(toy_config(streams=streams))
        assert fusion_vector(model, _sample(rng)).shape == (width,)
        assert mcf_forward(model, _sample(rng)).disc_logits.shape == (5,)

    def test_late_fusion_uses_person_pool_and_scene_summary(self, rng):
        model = McfModel(toy_config(streams=StreamSet.LATE))
        assert model.fg_block is None and model.vs_block is None and model.adapter_fg is None
        sample = _sample(rng)
        expected = np.concatenate([
            model.adapter_pe(Tensor(sample.e_pe)).data.mean(axis=0),
            model.adapter_vs(Tensor(sample.e_vs[:1])).data[0],
        ])
        np.testing.assert_allclose(fusion_vector(model, sample).data, expected, rtol=1e-5, atol=1e-6)

    def test_late_fusion_ignores_non_summary_scene_tokens(self, rng):
        model = McfModel(toy_config(streams=StreamSet.LATE))
        sample = _sample(rng)
        before = fusion_vector(model, sample).data
        sample.e_vs[1:] = rng.standard_normal(sample.e_vs[1:].shape)
        np.testing.assert_array_equal(fusion_vector(model, sample).data, before)

    def test_late_fusion_batch_of_one_matches_batch(self, rng):
        model = McfModel(toy_config(streams=StreamSet.LATE))
        batch = _batch(rng)
        together = mcf_forward(model, batch).disc_logits.data
        for i in range(3):
            alone = mcf_forward(model, StreamBatch(
                batch.e_pe[i], batch.e_fg[i], batch.e_vs[i], batch.fg_mask[i]
            )).disc_logits.data
            np.testing.assert_array_equal(together[i], alone)


class TestMcfForward:
    """Test the full forward pass."""

    def test_batch_of_one_matches_batch(self, rng, toy_model):
        batch = _batch(rng)
        together = mcf_forward(toy_model, batch)
        for i in range(3):
            alone = mcf_forward(toy_model, StreamBatch(
                batch.e_pe[i], batch.e_fg[i], batch.e_vs[i], batch.fg_mask[i]
            ))
            np.testing.assert_array_equal(together.disc_logits.data[i], alone.disc_logits.data)
            np.testing.assert_array_equal(together.cont.data[i], alone.cont.data)

    @pytest.mark.parametrize("head_hidden", [0, 8])
    def test_heads_are_row_independent(self, rng, head_hidden):
        model = McfModel(toy_config(head_hidden=head_hidden))
        rows = rng.standard_normal((9, 32)).astype(np.float32)
        together = heads_forward(model, Tensor(rows))
        for i in range(9):
            alone = heads_forward(model, Tensor(rows[i]))
            np.testing.assert_array_equal(together.disc_logits.data[i], alone.disc_logits.data)
            np.testing.assert_array_equal(together.cont.data[i], alone.cont.data)

    def test_predictions_do_not_depend_on_batch_size(self, toy_model, toy_linear_bundle):
        one = predict(toy_model, toy_linear_bundle, batch_size=1)
        many = predict(toy_model, toy_linear_bundle, batch_size=len(toy_linear_bundle))
        np.testing.assert_array_equal(one.disc_logits, many.disc_logits)
        np.testing.assert_array_equal(one.cont, many.cont)

    def test_eval_is_repeatable(self, rng, toy_single_label_model):
        batch = _batch(rng)
        first = mcf_forward(toy_single_label_model, batch).disc_logits.data
        second = mcf_forward(toy_single_label_model, batch).disc_logits.data
        np.testing.assert_array_equal(first, second)

    def test_train_mode_uses_dropout(self, rng):
        model = McfModel(toy_config(dropout_p=0.1))
        batch = _batch(rng)
        a = mcf_forward(model, batch, Mode.TRAIN, RngState(1)).disc_logits.data
        b = mcf_forward(model, batch, Mode.TRAIN, RngState(1)).disc_logits.data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, mcf_forward(model, batch).disc_logits.data)

    def test_swapping_blocks_swaps_fusion_halves(self, rng, toy_model):
        tokens = rng.standard_normal((5, 16))
        sample = StreamBatch(rng.standard_normal((4, 16)), tokens, tokens, np.ones(5, bool))
        before = fusion_vector(toy_model, sample).data

        swap = {"fg_block": "vs_block", "vs_block": "fg_block"}
        state = {}
        for name, value in toy_model.state_dict().items():
            head, _, rest = name.partition("/")
            state[f"{swap.get(head, head)}/{rest}" if rest else name] = value
        toy_model.load_state_dict(state)

        after = fusion_vector(toy_model, sample).data
        np.testing.assert_array_equal(after[:16], before[16:])
        np.testing.assert_array_equal(after[16:], before[:16])

    def test_silenced_foreground_stream_ignores_its_input(self, rng, toy_model):
        _zero_block_sublayers(toy_model, "fg_block")
        sample = _sample(rng)
        before = mcf_forward(toy_model, sample).disc_logits.data
        sample.e_fg = sample.e_fg + rng.standard_normal(sample.e_fg.shape)
        np.testing.assert_array_equal(mcf_forward(toy_model, sample).disc_logits.data, before)

    def test_same_seed_same_initialization(self):
        a, b = McfModel(toy_config(), seed=3), McfModel(toy_config(), seed=3)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)

    def test_adapters_start_as_identity(self, toy_model):
        np.testing.assert_array_equal(toy_model.adapter_pe.W.data, np.eye(16))

    def test_mask_shape_checked(self, rng):
        with pytest.raises(DimensionError):
            StreamBatch(np.ones((4, 16)), np.ones((6, 16)), np.ones((5, 16)), np.ones(5, bool))


class TestModelChecks:
    """Test geometry and task validation."""

    def test_foreground_width_mismatch_is_named(self, toy_model):
        with pytest.raises(GeometryMismatchError) as exc:
            toy_model.check_geometry(Geometry(t_pe=4, d_pe=16, t_fg=6, d_fg=8, t_vs=5, d_vs=16))
        assert exc.value.field == "d_FG"
        assert "d_FG" in exc.value.message

    def test_token_counts_are_free(self, toy_model):
        toy_model.check_geometry(Geometry(t_pe=49, d_pe=16, t_fg=512, d_fg=16, t_vs=197, d_vs=16))

    def test_task_mismatch(self, toy_model):
        with pytest.raises(DataError):
            toy_model.check_task(Task.SINGLE_LABEL, 5)
        with pytest.raises(GeometryMismatchError):
            toy_model.check_task(Task.MULTILABEL_CONT, 26)


@pytest.mark.slow
class TestPresetConstruction:
    """Test that the named presets build the documented architectures."""

    def test_emotic_mha(self):
        config = RunConfig(**get_preset("emotic-mha")).to_mcf_config()
        model = McfModel(config)
        assert (config.variant, config.layers, config.heads, config.d_model) == (
            EncoderVariant.MHA_ENC, 4, 8, 512
        )
        assert config.fusion_width == 1024
        assert model.head_disc.out.W.shape == (1024, 26)
        assert model.head_cont.out.W.shape == (1024, 3)
        assert model.parameter_count() == 17_902_109

    def test_caer_sag(self):
        config = RunConfig(**get_preset("caer-sag")).to_mcf_config()
        model = McfModel(config)
        assert (config.variant, config.layers, config.heads, config.d_model) == (
            EncoderVariant.SAG_MHA_ENC, 3, 8, 768
        )
        assert config.fusion_width == 1536
        assert model.head_disc.out.W.shape == (1536, 7)
        assert model.head_cont is None
        assert model.parameter_count() == 44_131_591
