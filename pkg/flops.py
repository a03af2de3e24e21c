"""
FLOP module for the DiG desk implementation.
Analytic multiply-accumulate counts of DiG and U-DiG forwards and of the
softmax-attention DiT baseline, plus an analytic parameter count.
"""
from dataclasses import asdict, dataclass

from tensor import ConfigError

# depth, hidden size of the DiT reference models
DIT_PRESETS = {
    "dit-s": (12, 384),
    "dit-b": (12, 768),
    "dit-l": (24, 1024),
    "dit-xl": (28, 1152),
}

FREQUENCY_SIZE = 256
SCAN_CALLS = {"block": 1, "causal": 1, "bidirectional": 2, "four_direction": 4}


@dataclass
class FlopReport:
    """MACs of one forward of one sample; gflops counts one flop per MAC."""

    name: str
    macs: int
    reference: str
    reference_macs: int
    params: int

    @property
    def gflops(self):
        return self.macs / 1e9

    @property
    def gflops_2x(self):
        return 2 * self.macs / 1e9

    @property
    def reference_gflops(self):
        return self.reference_macs / 1e9

    @property
    def ratio_vs_dit(self):
        return self.macs / self.reference_macs

    def to_dict(self):
        out = asdict(self)
        out.update(gflops=round(self.gflops, 4), gflops_2x=round(self.gflops_2x, 4),
                   reference_gflops=round(self.reference_gflops, 4),
                   ratio_vs_dit=round(self.ratio_vs_dit, 4),
                   params_m=round(self.params / 1e6, 3))
        return out


def gla_macs(cfg, width, tokens):
    """Projections, gates, output path and scan of one GLA call."""
    d_k, d_v = cfg.key_width(width), cfg.value_width(width)
    heads = cfg.heads_for(width)
    hk, hv = d_k // heads, d_v // heads
    projections = tokens * (3 * width * d_k + 4 * width * d_v)
    if cfg.mode == "recurrent":
        scan = heads * tokens * 2 * hk * hv
    else:
        m = min(cfg.chunk, tokens)
        chunks = -(-tokens // m)
        scan = heads * chunks * (m * m * (hk + hv) + 2 * m * hk * hv)
    return projections + scan


def block_macs(cfg, width, tokens):
    """One DiG block at the given width on `tokens` tokens."""
    macs = SCAN_CALLS[cfg.scan] * gla_macs(cfg, width, tokens)
    macs += cfg.hidden_size * 6 * width
    macs += tokens * 8 * width * width
    if cfg.dwconv != "none":
        macs += tokens * 9 * width
    return macs


def _embedding_and_head_macs(hidden, tokens, patch_size, patch_dim, out_channels):
    patch = tokens * patch_dim * hidden
    timestep = FREQUENCY_SIZE * hidden + hidden * hidden
    head = hidden * 2 * hidden + tokens * hidden * patch_size * patch_size * out_channels
    return patch + timestep + head


def dit_macs(depth, hidden, tokens, patch_size, in_channels, learn_sigma=True):
    """Softmax-attention DiT: QKV, T^2 scores and weighted sum, projection, FFN, adaLN."""
    out_channels = 2 * in_channels if learn_sigma else in_channels
    per_block = tokens * (12 * hidden * hidden + 2 * tokens * hidden) + 6 * hidden * hidden
    patch_dim = patch_size * patch_size * in_channels
    return depth * per_block + _embedding_and_head_macs(hidden, tokens, patch_size, patch_dim,
                                                        out_channels)


def model_macs(cfg):
    """MACs of one forward of cfg's backbone for a single sample."""
    total = _embedding_and_head_macs(cfg.hidden_size, cfg.num_tokens, cfg.patch_size,
                                     cfg.patch_dim, cfg.out_channels)
    if cfg.variant == "plain":
        return total + cfg.depth * block_macs(cfg, cfg.hidden_size, cfg.num_tokens)
    widths = cfg.resolved_stage_widths()
    tokens = cfg.stage_token_counts()
    for depth, level, count in zip(cfg.resolved_stage_depths(), cfg.stage_levels(), tokens):
        total += depth * block_macs(cfg, widths[level], count)
    if cfg.hierarchy:
        for i in range(len(widths) - 1):
            finer = cfg.num_tokens // 4 ** i
            total += (finer // 4) * 4 * widths[i] * widths[i + 1]
            total += (finer // 4) * widths[i + 1] * 4 * widths[i]
    return total


def reference_config(cfg):
    """(name, depth, hidden, patch) of the DiT the ratio column compares against."""
    if cfg.reference:
        if cfg.reference not in DIT_PRESETS:
            raise ConfigError(f"unknown reference {cfg.reference!r}")
        depth, hidden = DIT_PRESETS[cfg.reference]
        patch = cfg.patch_size if cfg.variant == "plain" else 2
        return cfg.reference, depth, hidden, patch
    if cfg.variant != "plain":
        raise ConfigError("U-shaped configs need an explicit reference DiT")
    return "dit-equal", cfg.depth, cfg.hidden_size, cfg.patch_size


def flops_estimate(cfg):
    """FlopReport for cfg against its DiT reference."""
    name, depth, hidden, patch = reference_config(cfg)
    tokens = (cfg.input_size // patch) ** 2
    reference = dit_macs(depth, hidden, tokens, patch, cfg.in_channels, cfg.learn_sigma)
    return FlopReport(cfg.name, model_macs(cfg), f"{name}/{patch}", reference,
                      params_estimate(cfg))


def _block_params(cfg, width):
    d_k, d_v = cfg.key_width(width), cfg.value_width(width)
    adaln = cfg.hidden_size * 6 * width + 6 * width
    gla = 3 * width * d_k + 4 * width * d_v + d_k + 2 * d_v
    ffn = 8 * width * width + 5 * width
    dwconv = 0 if cfg.dwconv == "none" else 9 * width
    return adaln + gla + ffn + dwconv


def params_estimate(cfg):
    """Trainable scalars of the instantiated backbone."""
    hidden = cfg.hidden_size
    pixels = cfg.patch_size * cfg.patch_size * cfg.out_channels
    total = cfg.patch_dim * hidden
    total += FREQUENCY_SIZE * hidden + hidden + hidden * hidden + hidden
    total += cfg.num_classes * hidden
    total += hidden * 2 * hidden + 2 * hidden + hidden * pixels + pixels
    widths = cfg.resolved_stage_widths()
    for depth, level in zip(cfg.resolved_stage_depths(), cfg.stage_levels()):
        total += depth * _block_params(cfg, widths[level])
    if cfg.variant == "ushape" and cfg.hierarchy:
        for i in range(len(widths) - 1):
            total += 4 * widths[i] * widths[i + 1] + widths[i + 1]
            total += widths[i + 1] * 4 * widths[i] + 4 * widths[i]
    return total
