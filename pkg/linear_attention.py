"""
Linear attention module for the DiG desk implementation.
Reference forms of kernelized linear attention (normalized and simplified),
used as oracles for the gated cell, plus the quadratic softmax baseline that
the benchmarks race against.
"""
from dataclasses import dataclass

import numpy as np

from tensor import (ConfigError, DegenerateNormalizerError, ShapeError, Tensor, elu, masked_fill,
                    matmul, softmax, stack)

DEGENERATE_THRESHOLD = 1e-12


@dataclass(frozen=True)
class FeatureMap:
    """Similarity feature map phi applied row-wise."""

    kind: str = "identity"

    def __post_init__(self):
        if self.kind not in ("identity", "elu_plus_one"):
            raise ConfigError(f"unknown feature map {self.kind!r}")

    def __call__(self, x):
        if self.kind == "identity":
            return x
        return elu(x) + 1.0


@dataclass
class LinAttnState:
    """Running sums S = sum phi(K_i)^T V_i and z = sum phi(K_i)^T."""

    S: Tensor
    z: Tensor

    @classmethod
    def zeros(cls, d_k, d_v, dtype=np.float64):
        return cls(Tensor.zeros((d_k, d_v), dtype), Tensor.zeros((d_k, 1), dtype))

    def update(self, k_row, v_row):
        """Fold one (phi(K_t), V_t) row pair into the sums."""
        k_col = k_row.reshape(-1, 1)
        self.S = self.S + k_col @ v_row.reshape(1, -1)
        self.z = self.z + k_col


def _check_qkv(q, k, v):
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[:-1] != v.shape[:-1] or q.shape[:-1] != k.shape[:-1]:
        raise ShapeError(f"sequence shapes differ: {q.shape}, {k.shape}, {v.shape}")


def causal_mask(length):
    """Boolean [L, L] mask that is True strictly above the diagonal."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def lin_attn_normalized(q, k, v, phi=FeatureMap()):
    """Causal normalized linear attention, batch formula.

    O_t = sum_{i<=t} <phi(Q_t), phi(K_i)> V_i / sum_{i<=t} <phi(Q_t), phi(K_i)>
    """
    _check_qkv(q, k, v)
    fq, fk = phi(q), phi(k)
    scores = masked_fill(fq @ fk.swapaxes(-1, -2), causal_mask(q.shape[-2]), 0.0)
    den = scores.sum(-1, keepdims=True)
    if np.any(np.abs(den.data) < DEGENERATE_THRESHOLD):
        raise DegenerateNormalizerError("normalizer below 1e-12 in linear attention")
    return (scores @ v) / den


def lin_attn_normalized_streaming(q, k, v, phi=FeatureMap()):
    """Same quantity through the recurrent (S_t, z_t) state, one token at a time."""
    _check_qkv(q, k, v)
    if q.ndim != 2:
        raise ShapeError(f"streaming form takes [L, d] inputs, got {q.shape}")
    fq, fk = phi(q), phi(k)
    state = LinAttnState.zeros(k.shape[-1], v.shape[-1], q.dtype)
    rows = []
    for t in range(q.shape[0]):
        state.update(fk[t], v[t])
        q_row = fq[t].reshape(1, -1)
        den = q_row @ state.z
        if abs(den.item()) < DEGENERATE_THRESHOLD:
            raise DegenerateNormalizerError(f"normalizer below 1e-12 at token {t}")
        rows.append(((q_row @ state.S) / den).reshape(-1))
    return stack(rows, axis=0)


def lin_attn_simple(q, k, v):
    """Unnormalized recurrence S_t = S_{t-1} + K_t^T V_t, O_t = Q_t S_t."""
    _check_qkv(q, k, v)
    if q.ndim != 2:
        raise ShapeError(f"lin_attn_simple takes [L, d] inputs, got {q.shape}")
    S = Tensor.zeros((k.shape[-1], v.shape[-1]), q.dtype)
    rows = []
    for t in range(q.shape[0]):
        S = S + k[t].reshape(-1, 1) @ v[t].reshape(1, -1)
        rows.append((q[t].reshape(1, -1) @ S).reshape(-1))
    return stack(rows, axis=0)


def softmax_attention(q, k, v, causal=False):
    """Scaled dot-product attention over the last two axes."""
    _check_qkv(q, k, v)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if causal:
        scores = masked_fill(scores, causal_mask(q.shape[-2]), -np.inf)
    return softmax(scores, axis=-1) @ v
