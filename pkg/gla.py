"""
Gated linear attention module for the DiG desk implementation.
Implements the gated cell: sigmoid gates with temperature, the matrix-valued
recurrence S_t = G_t * S_{t-1} + K_t^T V_t read out as O_t = Q_t S_t, the
chunk-parallel form of the same scan, and the swish-gated output path.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from layers import Linear, Module
from tensor import (ConfigError, NumericError, ShapeError, Tensor, cumsum, einsum, exp,
                    layer_norm, log_sigmoid, masked_fill, pad_axis, stack, swish)
from linear_attention import causal_mask

logger = logging.getLogger(__name__)

MODES = ("recurrent", "chunked")


@dataclass(frozen=True)
class ChunkSpec:
    """Chunk length M of the parallel scan."""

    M: int = 64

    def __post_init__(self):
        if int(self.M) < 1:
            raise ConfigError(f"chunk length must be >= 1, got {self.M}")


@dataclass
class Gates:
    """Gate factors in log form; G_t = alpha_t^T beta_t."""

    log_alpha: Tensor
    log_beta: Tensor

    @property
    def alpha(self):
        return exp(self.log_alpha)

    @property
    def beta(self):
        return exp(self.log_beta)

    @property
    def matrix(self):
        """Full [..., L, d_k, d_v] gate tensor."""
        a = self.alpha
        b = self.beta
        return a.reshape(*a.shape, 1) * b.reshape(*b.shape[:-1], 1, b.shape[-1])

    def __iter__(self):
        return iter((self.alpha, self.beta, self.matrix))

    def split_heads(self, heads):
        return Gates(split_heads(self.log_alpha, heads), split_heads(self.log_beta, heads))


@dataclass
class GLAState:
    """Recurrent state S of one scan, shape [..., d_k, d_v]."""

    S: Tensor

    @classmethod
    def zeros(cls, lead, d_k, d_v, dtype=np.float64):
        return cls(Tensor.zeros(tuple(lead) + (d_k, d_v), dtype))

    def step(self, q_t, k_t, v_t, g_t):
        """Advance by one token and return O_t = Q_t S_t."""
        outer = k_t.reshape(*k_t.shape, 1) @ v_t.reshape(*v_t.shape[:-1], 1, v_t.shape[-1])
        self.S = g_t * self.S + outer
        o = q_t.reshape(*q_t.shape[:-1], 1, q_t.shape[-1]) @ self.S
        return o.reshape(*o.shape[:-2], o.shape[-1])


def default_heads(dim, d_k, d_v):
    """Largest h <= max(1, dim // 64) dividing dim, d_k and d_v."""
    for h in range(max(1, dim // 64), 0, -1):
        if dim % h == 0 and d_k % h == 0 and d_v % h == 0:
            return h
    return 1


def split_heads(t, heads):
    """[..., L, h*d] -> [..., h, L, d]."""
    if t.shape[-1] % heads:
        raise ShapeError(f"width {t.shape[-1]} not divisible by {heads} heads")
    t = t.reshape(*t.shape[:-1], heads, t.shape[-1] // heads)
    return t.swapaxes(-2, -3)


def merge_heads(t):
    """[..., h, L, d] -> [..., L, h*d]."""
    t = t.swapaxes(-2, -3)
    return t.reshape(*t.shape[:-2], t.shape[-2] * t.shape[-1])


class GatedLinearAttention(Module):
    """Parameters of one multi-head gated linear attention cell."""

    def __init__(self, dim, d_k, d_v, heads=None, tau=16.0, mode="chunked", chunk=64,
                 rng=None):
        if tau <= 0:
            raise ConfigError(f"temperature must be positive, got {tau}")
        if mode not in MODES:
            raise ConfigError(f"unknown scan mode {mode!r}")
        heads = heads or default_heads(dim, d_k, d_v)
        if dim % heads or d_k % heads or d_v % heads:
            raise ConfigError(f"heads={heads} must divide d={dim}, d_k={d_k}, d_v={d_v}")
        self.dim, self.d_k, self.d_v = dim, d_k, d_v
        self.heads = heads
        self.tau = float(tau)
        self.mode = mode
        self.chunk = ChunkSpec(chunk)
        self.q_proj = Linear(dim, d_k, bias=False, rng=rng)
        self.k_proj = Linear(dim, d_k, bias=False, rng=rng)
        self.v_proj = Linear(dim, d_v, bias=False, rng=rng)
        self.alpha_proj = Linear(dim, d_k, rng=rng)
        self.beta_proj = Linear(dim, d_v, rng=rng)
        self.r_proj = Linear(dim, d_v, rng=rng)
        self.o_proj = Linear(d_v, dim, bias=False, rng=rng)

    def forward(self, x, mode=None, spec=None):
        return gla_forward(x, self, mode or self.mode, spec or self.chunk)


def gla_gates(x, p):
    """alpha = sigmoid(x W_a + b_a)^(1/tau), beta likewise, kept as logs."""
    inv_tau = 1.0 / p.tau
    return Gates(log_sigmoid(p.alpha_proj(x)) * inv_tau,
                 log_sigmoid(p.beta_proj(x)) * inv_tau)


def _check_scan_inputs(q, k, v):
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"scan inputs disagree: q{q.shape} k{k.shape} v{v.shape}")


def _check_finite(o, what):
    if not np.all(np.isfinite(o.data)):
        raise NumericError(f"non-finite values in {what} output")
    return o


def gla_scan(q, k, v, G):
    """Token-recurrent scan over axis -2 with full gate matrices G [..., L, d_k, d_v]."""
    _check_scan_inputs(q, k, v)
    if G.shape != q.shape + (v.shape[-1],):
        raise ShapeError(f"gate shape {G.shape} does not match q{q.shape}, v{v.shape}")
    state = GLAState.zeros(q.shape[:-2], q.shape[-1], v.shape[-1], q.dtype)
    rows = [state.step(q[..., t, :], k[..., t, :], v[..., t, :], G[..., t, :, :])
            for t in range(q.shape[-2])]
    return _check_finite(stack(rows, axis=-2), "recurrent scan")


def safe_log_decay(dtype):
    """Largest cumulative log-decay a chunk may carry in the factored intra-chunk form."""
    return math.log(np.finfo(dtype).max) - 8.0


def _intra_factored(q, k, v, la, lb, m):
    """Intra-chunk term via exp(+-cumulative log-gates); exact while decays stay in range."""
    scores = masked_fill((q * exp(la)) @ (k * exp(-la)).swapaxes(-1, -2), causal_mask(m), 0.0)
    return (scores @ (v * exp(-lb))) * exp(lb)


def _pair_decay(log_gate, m):
    """exp(l_i - l_j) for j <= i as a [b, n, m, m, d] tensor; 1 above the diagonal."""
    b, n, _, d = log_gate.shape
    diff = log_gate.reshape(b, n, m, 1, d) - log_gate.reshape(b, n, 1, m, d)
    return exp(masked_fill(diff, causal_mask(m)[:, :, None], 0.0))


def _intra_pairwise(q, k, v, la, lb, m):
    """Intra-chunk term from pairwise log-gate differences, all exponents <= 0."""
    lead, n, d_k, d_v = q.shape[:-3], q.shape[-3], q.shape[-1], v.shape[-1]
    b = int(np.prod(lead, dtype=np.int64))
    q, k, la = (t.reshape(b, n, m, d_k) for t in (q, k, la))
    v, lb = (t.reshape(b, n, m, d_v) for t in (v, lb))
    scores = einsum("bcid,bcjd,bcijd->bcij", q, k, _pair_decay(la, m))
    scores = masked_fill(scores, causal_mask(m), 0.0)
    intra = einsum("bcij,bcje,bcije->bcie", scores, v, _pair_decay(lb, m))
    return intra.reshape(*lead, n, m, d_v)


def gla_scan_chunked(q, k, v, gates, spec=ChunkSpec()):
    """Chunk-parallel scan: dense causal products inside chunks, carried state between.

    Gate products inside a chunk come from cumulative log-gates relative to
    the chunk start. While a chunk's total log-decay stays within
    safe_log_decay they are exponentiated once per factor; beyond it the
    intra-chunk products are formed pairwise. The last chunk is zero-padded to M.
    """
    _check_scan_inputs(q, k, v)
    if gates.log_alpha.shape != q.shape or gates.log_beta.shape != v.shape:
        raise ShapeError("gate factors do not match q/v shapes")
    length, d_k, d_v = q.shape[-2], q.shape[-1], v.shape[-1]
    m = min(spec.M, length)
    n = -(-length // m)
    pad = n * m - length
    lead = q.shape[:-2]

    def chunked(t):
        t = pad_axis(t, -2, pad)
        return t.reshape(*lead, n, m, t.shape[-1])

    q, k, v = chunked(q), chunked(k), chunked(v)
    la = cumsum(chunked(gates.log_alpha), -2)
    lb = cumsum(chunked(gates.log_beta), -2)
    la_last = la[..., m - 1:, :]
    lb_last = lb[..., m - 1:, :]
    worst = -min(float(la_last.data.min()), float(lb_last.data.min()))
    if worst > safe_log_decay(q.dtype):
        logger.debug("chunk log-decay %.1f exceeds the %s range at M=%d; pairwise intra-chunk "
                     "products", worst, q.dtype, m)
        intra = _intra_pairwise(q, k, v, la, lb, m)
    else:
        intra = _intra_factored(q, k, v, la, lb, m)

    qa = q * exp(la)
    eb = exp(lb)
    kd = k * exp(la_last - la)
    vd = v * exp(lb_last - lb)
    updates = kd.swapaxes(-1, -2) @ vd
    decay = exp(la_last).swapaxes(-1, -2) * exp(lb_last)
    S = Tensor.zeros(tuple(lead) + (d_k, d_v), q.dtype)
    carried = []
    for c in range(n):
        carried.append(S)
        S = decay[..., c, :, :] * S + updates[..., c, :, :]
    inter = (qa @ stack(carried, axis=-3)) * eb

    o = (intra + inter).reshape(*lead, n * m, d_v)
    if pad:
        o = o[..., :length, :]
    return _check_finite(o, "chunked scan")


def gla_output(o, x, p):
    """Y = (swish(x W_r + b_r) * LN(O)) W_O, LN per head over its d_v slice."""
    if o.shape[-1] != p.d_v or o.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"output path expects O[..., {p.d_v}] aligned with X, got {o.shape}")
    heads = p.heads
    normed = layer_norm(o.reshape(*o.shape[:-1], heads, p.d_v // heads))
    normed = normed.reshape(*o.shape)
    return p.o_proj(swish(p.r_proj(x)) * normed)


def gla_forward(x, p, mode="chunked", spec=None):
    """Full cell: project, gate, scan per head, gated output."""
    if x.shape[-1] != p.dim:
        raise ShapeError(f"GLA expects width {p.dim}, got {x.shape}")
    if mode not in MODES:
        raise ConfigError(f"unknown scan mode {mode!r}")
    h = p.heads
    q = split_heads(p.q_proj(x), h)
    k = split_heads(p.k_proj(x), h)
    v = split_heads(p.v_proj(x), h)
    gates = gla_gates(x, p).split_heads(h)
    if mode == "recurrent":
        o = gla_scan(q, k, v, gates.matrix)
    else:
        o = gla_scan_chunked(q, k, v, gates, spec or p.chunk)
    return gla_output(merge_heads(o), x, p)
