"""Tests for scaled dot-product and multi-head attention."""

import numpy as np
import pytest

from mcf_fusion.core.errors import DimensionError, InvalidMaskError, ParameterError
from mcf_fusion.nn.attention import MhaParams, multi_head_attention, scaled_dot_attention
from mcf_fusion.nn.tensor import Tensor


def _t(values) -> Tensor:
    return Tensor(np.asarray(values, dtype=np.float64))


class TestScaledDotAttention:
    """Test single-head attention."""

    def test_single_key_gets_all_weight(self, rng):
        V = rng.standard_normal((1, 3))
        context, weights = scaled_dot_attention(
            _t(rng.standard_normal((4, 3))), _t(rng.standard_normal((1, 3))), _t(V)
        )
        np.testing.assert_array_equal(weights.data, np.ones((4, 1)))
        np.testing.assert_allclose(context.data, np.tile(V, (4, 1)))

    def test_zero_queries_average_values(self, rng):
        V = rng.standard_normal((5, 2))
        context, weights = scaled_dot_attention(
            _t(np.zeros((3, 2))), _t(rng.standard_normal((5, 2))), _t(V)
        )
        np.testing.assert_allclose(weights.data, np.full((3, 5), 0.2))
        np.testing.assert_allclose(context.data, np.tile(V.mean(axis=0), (3, 1)))

    def test_hand_example(self):
        context, weights = scaled_dot_attention(
            _t([[1.0], [0.0]]), _t([[1.0], [-1.0]]), _t([[2.0], [4.0]])
        )
        np.testing.assert_allclose(weights.data[0], [0.8808, 0.1192], atol=1e-4)
        assert context.data[0, 0] == pytest.approx(2.2384, abs=1e-4)

    def test_key_value_length_mismatch(self):
        with pytest.raises(DimensionError):
            scaled_dot_attention(_t(np.ones((2, 2))), _t(np.ones((3, 2))), _t(np.ones((4, 2))))

    def test_fully_masked_keys(self):
        with pytest.raises(InvalidMaskError):
            scaled_dot_attention(
                _t(np.ones((2, 2))), _t(np.ones((3, 2))), _t(np.ones((3, 2))),
                np.zeros(3, dtype=bool),
            )


class TestMultiHeadAttention:
    """Test multi-head attention with projections."""

    def test_single_identity_head_reduces_to_scaled_dot(self, rng):
        p = MhaParams(4, 1, rng)
        for name in ("W_q", "W_k", "W_v", "W_o"):
            getattr(p, name).data = np.eye(4)
        Q, K, V = (_t(rng.standard_normal(shape)) for shape in ((3, 4), (5, 4), (5, 4)))
        expected, _ = scaled_dot_attention(Q, K, V)
        np.testing.assert_allclose(multi_head_attention(p, Q, K, V).data, expected.data, atol=1e-12)

    def test_zero_output_projection(self, rng):
        p = MhaParams(8, 2, rng)
        p.W_o.data = np.zeros_like(p.W_o.data)
        out = multi_head_attention(p, _t(rng.standard_normal((3, 8))),
                                   _t(rng.standard_normal((5, 8))), _t(rng.standard_normal((5, 8))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_per_head_weights_are_distributions(self, rng):
        p = MhaParams(8, 4, rng)
        captured = []
        kv = _t(rng.standard_normal((6, 8)))
        multi_head_attention(p, _t(rng.standard_normal((3, 8))), kv, kv, on_weights=captured.append)
        (weights,) = captured
        assert weights.shape == (4, 3, 6)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
        assert not weights.flags.writeable

    def test_key_permutation_invariance(self, rng):
        p = MhaParams(8, 2, rng)
        Q = _t(rng.standard_normal((3, 8)))
        kv = rng.standard_normal((5, 8))
        mask = np.array([True, False, True, True, False])
        perm = np.array([3, 0, 4, 1, 2])
        out = multi_head_attention(p, Q, _t(kv), _t(kv), mask).data
        permuted = multi_head_attention(p, Q, _t(kv[perm]), _t(kv[perm]), mask[perm]).data
        np.testing.assert_allclose(permuted, out, atol=1e-5)

    def test_batch_composition_invariance(self, rng):
        p = MhaParams(8, 2, rng)
        Q = rng.standard_normal((3, 4, 8))
        kv = rng.standard_normal((3, 5, 8))
        batched = multi_head_attention(p, _t(Q), _t(kv), _t(kv)).data
        for i in range(3):
            alone = multi_head_attention(p, _t(Q[i]), _t(kv[i]), _t(kv[i])).data
            np.testing.assert_array_equal(batched[i], alone)

    def test_width_mismatch(self, rng):
        p = MhaParams(8, 2, rng)
        with pytest.raises(DimensionError):
            multi_head_attention(p, _t(np.ones((2, 6))), _t(np.ones((3, 8))), _t(np.ones((3, 8))))

    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ParameterError):
            MhaParams(6, 4, rng)

    def test_parameter_layout(self, rng):
        names = [name for name, _ in MhaParams(8, 2, rng).named_parameters("mha")]
        assert names == [
            "mha/W_q", "mha/b_q", "mha/W_k", "mha/b_k", "mha/W_v", "mha/b_v", "mha/W_o", "mha/b_o",
        ]
