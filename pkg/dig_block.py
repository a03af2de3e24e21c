"""
DiG block module for the DiG desk implementation.
One block: adaLN parameter regression from the conditioning vector, the
modulated gated-linear-attention and feed-forward residual branches, and the
spatial reorient and enhancement step at a configurable position.
"""
from layers import FeedForward, LayerNorm, Linear, Module
from gla import GatedLinearAttention
from srem import DepthwiseConv2d, OpCounter, reorient, scan_4directional, scan_bidirectional
from tensor import ConfigError, ShapeError, silu

SREM_POSITIONS = ("after_ffn", "before_attn", "between_attn_ffn")
SCANS = ("block", "causal", "bidirectional", "four_direction")
DWCONV_MODES = ("identity", "random", "none")


def modulate(x, shift, scale):
    """x * (1 + scale) + shift, with [B, D] modulation broadcast over tokens."""
    return x * (1.0 + _over_tokens(scale)) + _over_tokens(shift)


def _over_tokens(v):
    return v.reshape(*v.shape[:-1], 1, v.shape[-1])


def adaln_modulation(t_emb, y_emb, linear):
    """Six modulation vectors (alpha1, beta1, gamma1, alpha2, beta2, gamma2)."""
    if t_emb.shape != y_emb.shape:
        raise ShapeError(f"timestep and label embeddings differ: {t_emb.shape} vs {y_emb.shape}")
    out = linear(silu(t_emb + y_emb))
    width = out.shape[-1] // 6
    return tuple(out[..., i * width:(i + 1) * width] for i in range(6))


class DiGBlock(Module):
    """adaLN-zero block around a gated linear attention cell."""

    def __init__(self, dim, cond_dim, d_k, d_v, heads=None, tau=16.0, mode="chunked",
                 chunk=64, scan="block", dwconv="identity", srem_position="after_ffn",
                 rng=None):
        if scan not in SCANS:
            raise ConfigError(f"unknown scan strategy {scan!r}")
        if dwconv not in DWCONV_MODES:
            raise ConfigError(f"unknown dwconv mode {dwconv!r}")
        if srem_position not in SREM_POSITIONS:
            raise ConfigError(f"unknown SREM position {srem_position!r}")
        self.dim = dim
        self.scan = scan
        self.srem_position = srem_position
        self.norm1 = LayerNorm(dim)
        self.gla = GatedLinearAttention(dim, d_k, d_v, heads, tau, mode, chunk, rng=rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng=rng)
        self.dwconv = None if dwconv == "none" else DepthwiseConv2d(dim, dwconv, rng=rng)
        self.adaln = Linear(cond_dim, 6 * dim, init="zero")

    @property
    def reorients(self):
        return self.scan == "block"

    def mix(self, h, counter=None):
        """Token mixing of the attention branch under the configured strategy."""
        if self.scan == "bidirectional":
            return scan_bidirectional(h, self.gla, counter)
        if self.scan == "four_direction":
            return scan_4directional(h, self.gla, counter)
        return self.gla(h)

    def srem(self, z, layer_index, counter=None):
        if self.dwconv is not None:
            z = self.dwconv(z)
        if self.reorients:
            z = reorient(z, layer_index, counter)
        return z

    def forward(self, z, t_emb, y_emb, layer_index, counter=None):
        if z.shape[-1] != self.dim:
            raise ShapeError(f"block expects width {self.dim}, got {z.shape}")
        counter = counter if counter is not None else OpCounter()
        a1, b1, g1, a2, b2, g2 = adaln_modulation(t_emb, y_emb, self.adaln)
        if self.srem_position == "before_attn":
            z = self.srem(z, layer_index, counter)
        z = z + _over_tokens(a1) * self.mix(modulate(self.norm1(z), b1, g1), counter)
        if self.srem_position == "between_attn_ffn":
            z = self.srem(z, layer_index, counter)
        z = z + _over_tokens(a2) * self.ffn(modulate(self.norm2(z), b2, g2))
        if self.srem_position == "after_ffn":
            z = self.srem(z, layer_index, counter)
        return z
