"""
Tests for the linear attention reference forms and the softmax baseline.
"""
import numpy as np
import pytest

from linear_attention import (FeatureMap, causal_mask, lin_attn_normalized,
                              lin_attn_normalized_streaming, lin_attn_simple, softmax_attention)
from tensor import ConfigError, DegenerateNormalizerError, ShapeError, Tensor


@pytest.fixture
def qkv(rng):
    return tuple(Tensor(rng.standard_normal((12, 4))) for _ in range(3))


class TestNormalized:
    def test_batch_matches_streaming(self, qkv):
        phi = FeatureMap("elu_plus_one")
        batch = lin_attn_normalized(*qkv, phi=phi).data
        streaming = lin_attn_normalized_streaming(*qkv, phi=phi).data
        np.testing.assert_allclose(batch, streaming, atol=1e-10)

    def test_first_row_is_first_value(self, qkv):
        q, k, v = qkv
        out = lin_attn_normalized(q, k, v, phi=FeatureMap("elu_plus_one")).data
        np.testing.assert_allclose(out[0], v.data[0], atol=1e-12)

    def test_degenerate_normalizer_raises(self):
        q = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        k = Tensor(np.array([[0.0, 1.0], [0.0, 1.0]]))
        v = Tensor(np.ones((2, 3)))
        with pytest.raises(DegenerateNormalizerError):
            lin_attn_normalized(q, k, v)
        with pytest.raises(DegenerateNormalizerError):
            lin_attn_normalized_streaming(q, k, v)

    def test_unknown_feature_map(self):
        with pytest.raises(ConfigError):
            FeatureMap("relu")


class TestSimple:
    def test_matches_masked_product(self, qkv):
        q, k, v = qkv
        scores = np.where(causal_mask(12), 0.0, q.data @ k.data.T)
        np.testing.assert_allclose(lin_attn_simple(q, k, v).data, scores @ v.data, atol=1e-10)

    def test_rejects_batched_input(self, rng):
        x = Tensor(rng.standard_normal((2, 5, 3)))
        with pytest.raises(ShapeError):
            lin_attn_simple(x, x, x)

    def test_width_mismatch(self, rng):
        q = Tensor(rng.standard_normal((5, 3)))
        k = Tensor(rng.standard_normal((5, 4)))
        with pytest.raises(ShapeError):
            lin_attn_simple(q, k, k)


class TestSoftmax:
    def test_uniform_scores_average_values(self, rng):
        q = Tensor(np.zeros((6, 4)))
        v = Tensor(rng.standard_normal((6, 3)))
        out = softmax_attention(q, q, v).data
        np.testing.assert_allclose(out, np.broadcast_to(v.data.mean(0), (6, 3)), atol=1e-12)

    def test_causal_first_token_sees_itself(self, rng):
        q, k, v = (Tensor(rng.standard_normal((2, 5, 4))) for _ in range(3))
        out = softmax_attention(q, k, v, causal=True).data
        np.testing.assert_allclose(out[:, 0], v.data[:, 0], atol=1e-12)


class TestCausality:
    @pytest.mark.parametrize("attend", [
        lin_attn_simple,
        lambda q, k, v: lin_attn_normalized(q, k, v, phi=FeatureMap("elu_plus_one")),
        lambda q, k, v: lin_attn_normalized_streaming(q, k, v, phi=FeatureMap("elu_plus_one")),
        lambda q, k, v: softmax_attention(q, k, v, causal=True),
    ], ids=["simple", "normalized", "streaming", "softmax"])
    @pytest.mark.parametrize("j", [0, 5, 11])
    def test_future_tokens_do_not_leak(self, qkv, rng, attend, j):
        q, k, v = qkv
        base = attend(q, k, v).data
        bumped = [t.data.copy() for t in qkv]
        for arr in bumped:
            arr[j] += rng.standard_normal(arr.shape[-1])
        out = attend(*(Tensor(arr) for arr in bumped)).data
        np.testing.assert_allclose(out[:j], base[:j], atol=1e-12)
        assert np.abs(out[j:] - base[j:]).max(axis=-1).min() > 0
