"""
Model module for the DiG desk implementation.
Assembles the diffusion backbone: patch embedding with frequency positional
embeddings, timestep and label embedders, the stack of DiG blocks (plain or
U-shaped with down/up-sampling and shortcuts) and the adaLN-modulated head
that predicts noise and covariance.
"""
import dataclasses
import logging
import math
import tomllib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dig_block import DWCONV_MODES, SCANS, SREM_POSITIONS, DiGBlock, modulate
from gla import MODES, default_heads
from layers import Embedding, LayerNorm, Linear, Module
from srem import ReorientSchedule, grid_side, reshape2d, restore_order
from tensor import ConfigError, IndexRangeError, ShapeError, Tensor, as_tensor, silu

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).resolve().parent / "presets"
VARIANTS = ("plain", "ushape")


@dataclass(frozen=True)
class ModelConfig:
    """Backbone configuration; widths, depths and ablation switches."""

    name: str = "custom"
    variant: str = "plain"
    depth: int = 12
    hidden_size: int = 384
    patch_size: int = 2
    input_size: int = 32
    in_channels: int = 4
    num_classes: int = 1000
    heads: int = 0
    expand_k: float = 0.1875
    expand_v: float = 0.1875
    tau: float = 16.0
    chunk: int = 64
    mode: str = "chunked"
    scan: str = "block"
    dwconv: str = "identity"
    srem_position: str = "after_ffn"
    stage_depths: tuple = ()
    stage_widths: tuple = ()
    shortcuts: bool = True
    hierarchy: bool = True
    learn_sigma: bool = True
    timesteps: int = 1000
    reference: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "stage_widths", tuple(self.stage_widths))
        checks = [
            (self.variant in VARIANTS, f"unknown variant {self.variant!r}"),
            (self.mode in MODES, f"unknown scan mode {self.mode!r}"),
            (self.scan in SCANS, f"unknown scan strategy {self.scan!r}"),
            (self.dwconv in DWCONV_MODES, f"unknown dwconv mode {self.dwconv!r}"),
            (self.srem_position in SREM_POSITIONS, f"unknown SREM position {self.srem_position!r}"),
            (self.depth >= 0, "depth must be non-negative"),
            (self.patch_size >= 1 and self.input_size >= 1, "sizes must be positive"),
            (self.patch_size < 1 or self.input_size % self.patch_size == 0,
             f"input size {self.input_size} not divisible by patch size {self.patch_size}"),
            (self.hidden_size % 2 == 0, f"hidden size {self.hidden_size} must be even"),
            (self.tau > 0, "tau must be positive"),
            (self.chunk >= 1, "chunk must be >= 1"),
            (self.num_classes >= 1 and self.timesteps >= 1, "counts must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        for width in set(self.resolved_stage_widths()):
            self.key_width(width)
            self.value_width(width)
        if self.variant == "ushape":
            self._check_ushape()

    def _check_ushape(self):
        widths = self.resolved_stage_widths()
        depths = self.resolved_stage_depths()
        if len(depths) != 2 * len(widths) - 1:
            raise ConfigError(f"{len(widths)} levels need {2 * len(widths) - 1} stage depths")
        if sum(depths) != self.depth:
            raise ConfigError(f"stage depths {depths} do not sum to depth {self.depth}")
        if widths[0] != self.hidden_size:
            raise ConfigError("first stage width must equal hidden_size")
        if self.hierarchy:
            factor = 2 ** (len(widths) - 1)
            if self.grid % factor:
                raise ConfigError(f"token grid {self.grid} not divisible by total "
                                  f"down-sampling {factor}")
        elif len(set(widths)) != 1:
            raise ConfigError("stages without hierarchy share one width")

    @property
    def grid(self):
        return self.input_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.in_channels

    @property
    def out_channels(self):
        return 2 * self.in_channels if self.learn_sigma else self.in_channels

    def key_width(self, width):
        return _scaled(width, self.expand_k, "expand_k")

    def value_width(self, width):
        return _scaled(width, self.expand_v, "expand_v")

    def heads_for(self, width):
        if self.heads:
            return self.heads
        return default_heads(width, self.key_width(width), self.value_width(width))

    def resolved_stage_widths(self):
        if self.variant == "plain":
            return (self.hidden_size,)
        if self.stage_widths:
            return self.stage_widths
        if self.hierarchy:
            return tuple(self.hidden_size * 2 ** i for i in range(3))
        return (self.hidden_size,) * 3

    def resolved_stage_depths(self):
        if self.variant == "plain":
            return (self.depth,)
        if self.stage_depths:
            return self.stage_depths
        stages = 2 * len(self.resolved_stage_widths()) - 1
        base, extra = divmod(self.depth, stages)
        depths = [base] * stages
        depths[stages // 2] += extra
        return tuple(depths)

    def stage_levels(self):
        """Resolution level of every stage, encoder to decoder."""
        levels = len(self.resolved_stage_widths())
        return tuple(range(levels)) + tuple(range(levels - 2, -1, -1))

    def stage_token_counts(self):
        return tuple(self.num_tokens // (4 ** lvl if self.hierarchy else 1)
                     for lvl in self.stage_levels())

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["stage_depths"] = list(self.stage_depths)
        out["stage_widths"] = list(self.stage_widths)
        return out

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**values)


def _scaled(width, factor, what):
    value = width * factor
    if value < 1 or abs(value - round(value)) > 1e-9:
        raise ConfigError(f"{what}={factor} gives a non-integer width at {width}")
    return int(round(value))


def read_toml(path):
    """Parse a TOML file, mapping syntax errors to ConfigError."""
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc


def load_model_config(path):
    """Read the [model] table of a TOML config file."""
    data = read_toml(path)
    if "model" not in data:
        raise ConfigError(f"{path}: missing [model] table")
    return ModelConfig.from_dict(data["model"])


def preset_names():
    return sorted(p.stem for p in PRESET_DIR.glob("*.toml"))


def preset_path(name):
    path = PRESET_DIR / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return path


def load_preset(name):
    return load_model_config(preset_path(name))


# Embeddings

def _sincos_1d(dim, positions):
    if dim == 0:
        return np.zeros((len(positions), 0))
    half = dim // 2
    omega = 1.0 / 10000 ** (np.arange(half, dtype=np.float64) / half)
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def pos_embed_frequency(num_tokens, dim):
    """Fixed 2-D sin/cos embedding of the token grid, [T, D].

    The first 2*ceil(D/4) channels encode the grid row, the rest the column.
    """
    if dim % 2:
        raise ConfigError(f"positional embedding width must be even, got {dim}")
    side = grid_side(num_tokens)
    row_dim = 2 * math.ceil(dim / 4)
    rows, cols = np.divmod(np.arange(num_tokens), side)
    return np.concatenate([_sincos_1d(row_dim, rows), _sincos_1d(dim - row_dim, cols)], axis=1)


def timestep_embedding(t, dim=256, max_period=10000):
    """Sinusoidal timestep features [B, dim] as [cos, sin]."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class TimestepEmbedder(Module):
    """Sinusoidal features followed by a two-layer SiLU MLP."""

    def __init__(self, hidden_size, num_steps, frequency_size=256, rng=None):
        self.num_steps = num_steps
        self.frequency_size = frequency_size
        self.fc1 = Linear(frequency_size, hidden_size, init="normal", rng=rng)
        self.fc2 = Linear(hidden_size, hidden_size, init="normal", rng=rng)

    def forward(self, t):
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.num_steps):
            raise IndexRangeError(f"timestep outside [0, {self.num_steps})")
        freq = Tensor(timestep_embedding(t, self.frequency_size))
        return self.fc2(silu(self.fc1(freq)))


class LabelEmbedder(Module):
    """Class-label lookup table."""

    def __init__(self, num_classes, hidden_size, rng=None):
        self.num_classes = num_classes
        self.embedding = Embedding(num_classes, hidden_size, rng=rng)

    def forward(self, y):
        y = np.asarray(y).reshape(-1)
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise IndexRangeError(f"label outside [0, {self.num_classes})")
        return self.embedding(y)


# Patches

def patchify(z, weight, pos=None, patch_size=2):
    """[..., C, I, I] -> [..., T, D]: row-major P x P patches, projected, plus E_pos."""
    z = as_tensor(z)
    channels, height, width = z.shape[-3:]
    if height != width or height % patch_size:
        raise ConfigError(f"latent {height}x{width} not divisible into {patch_size}-patches")
    side = height // patch_size
    lead = z.shape[:-3]
    n = len(lead)
    x = z.reshape(*lead, channels, side, patch_size, side, patch_size)
    axes = tuple(range(n)) + tuple(n + a for a in (1, 3, 2, 4, 0))
    x = x.transpose(axes).reshape(*lead, side * side, patch_size * patch_size * channels)
    tokens = x @ weight
    if pos is not None:
        tokens = tokens + pos
    return tokens


def unpatchify(tokens, channels, patch_size):
    """[..., T, P*P*C] -> [..., C, I, I]."""
    side = grid_side(tokens.shape[-2])
    if tokens.shape[-1] != patch_size * patch_size * channels:
        raise ShapeError(f"token width {tokens.shape[-1]} != {patch_size}^2 * {channels}")
    lead = tokens.shape[:-2]
    n = len(lead)
    x = tokens.reshape(*lead, side, side, patch_size, patch_size, channels)
    axes = tuple(range(n)) + tuple(n + a for a in (4, 0, 2, 1, 3))
    return x.transpose(axes).reshape(*lead, channels, side * patch_size, side * patch_size)


class FinalLayer(Module):
    """Modulated norm and zero-initialized projection to patch pixels."""

    def __init__(self, hidden_size, cond_size, patch_size, out_channels):
        self.norm = LayerNorm(hidden_size)
        self.adaln = Linear(cond_size, 2 * hidden_size, init="zero")
        self.linear = Linear(hidden_size, patch_size * patch_size * out_channels, init="zero")

    def forward(self, x, c):
        mod = self.adaln(silu(c))
        width = mod.shape[-1] // 2
        shift, scale = mod[..., :width], mod[..., width:]
        return self.linear(modulate(self.norm(x), shift, scale))


class PatchMerge(Module):
    """Down-sampling: each 2x2 token group -> one token of width w_out."""

    def __init__(self, in_width, out_width, rng=None):
        self.linear = Linear(4 * in_width, out_width, rng=rng)

    def forward(self, z):
        grid = reshape2d(z)
        side, width = grid.shape[-2], grid.shape[-1]
        lead = grid.shape[:-3]
        x = grid.reshape(*lead, side // 2, 2, side // 2, 2, width).swapaxes(-4, -3)
        return self.linear(x.reshape(*lead, (side // 2) ** 2, 4 * width))


class PatchExpand(Module):
    """Up-sampling: each token -> a 2x2 token group of width w_out."""

    def __init__(self, in_width, out_width, rng=None):
        self.out_width = out_width
        self.linear = Linear(in_width, 4 * out_width, rng=rng)

    def forward(self, z):
        side = grid_side(z.shape[-2])
        lead = z.shape[:-2]
        x = self.linear(z).reshape(*lead, side, side, 2, 2, self.out_width).swapaxes(-4, -3)
        return x.reshape(*lead, 4 * side * side, self.out_width)


def make_block(cfg, width, rng):
    return DiGBlock(width, cfg.hidden_size, cfg.key_width(width), cfg.value_width(width),
                    heads=cfg.heads_for(width), tau=cfg.tau, mode=cfg.mode, chunk=cfg.chunk,
                    scan=cfg.scan, dwconv=cfg.dwconv, srem_position=cfg.srem_position, rng=rng)


class Stage(Module):
    """Consecutive blocks on one token grid, leaving tokens in row-major order."""

    def __init__(self, cfg, width, depth, num_tokens, start, rng=None):
        self.start = start
        self.blocks = [make_block(cfg, width, rng) for _ in range(depth)]
        self.schedule = ReorientSchedule(depth, num_tokens, start)
        self.reorients = cfg.scan == "block"

    def forward(self, z, t_emb, y_emb, counter=None):
        for i, block in enumerate(self.blocks):
            z = block(z, t_emb, y_emb, self.start + i, counter)
        if self.reorients:
            z = restore_order(z, self.schedule)
        return z


class Backbone(Module):
    """Shared embedding, conditioning and head of both variants."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        size = cfg.hidden_size
        self.x_embedder = Linear(cfg.patch_dim, size, bias=False, rng=rng)
        self.pos_embed = Tensor(pos_embed_frequency(cfg.num_tokens, size))
        self.t_embedder = TimestepEmbedder(size, cfg.timesteps, rng=rng)
        self.y_embedder = LabelEmbedder(cfg.num_classes, size, rng=rng)

    def trunk(self, z, t_emb, y_emb, counter=None):
        raise NotImplementedError

    def forward(self, x, t, y, counter=None):
        """Return (noise_pred, cov_raw), each [B, C, I, I]; cov_raw is None without learn_sigma."""
        cfg = self.cfg
        x = as_tensor(x)
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"expected input [B, {expected[0]}, {expected[1]}, {expected[2]}], "
                             f"got {x.shape}")
        t = np.asarray(t).reshape(-1)
        y = np.asarray(y).reshape(-1)
        if len(t) != x.shape[0] or len(y) != x.shape[0]:
            raise ShapeError(f"need one timestep and label per sample, got {len(t)} and {len(y)}")
        t_emb = self.t_embedder(t)
        y_emb = self.y_embedder(y)
        z = patchify(x, self.x_embedder.weight, self.pos_embed, cfg.patch_size)
        z = self.trunk(z, t_emb, y_emb, counter)
        out = unpatchify(self.final_layer(z, t_emb + y_emb), cfg.out_channels, cfg.patch_size)
        if not cfg.learn_sigma:
            return out, None
        c = cfg.in_channels
        return out[:, :c], out[:, c:]


class DiG(Backbone):
    """Plain DiG: a single stage of blocks at patch resolution."""

    def __init__(self, cfg, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(cfg, rng)
        self.stage = Stage(cfg, cfg.hidden_size, cfg.depth, cfg.num_tokens, 0, rng)
        self.final_layer = FinalLayer(cfg.hidden_size, cfg.hidden_size, cfg.patch_size,
                                      cfg.out_channels)

    @property
    def blocks(self):
        return self.stage.blocks

    def trunk(self, z, t_emb, y_emb, counter=None):
        return self.stage(z, t_emb, y_emb, counter)


class UDiG(Backbone):
    """U-shaped DiG: encoder stages, a middle stage and decoder stages with shortcuts."""

    def __init__(self, cfg, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(cfg, rng)
        widths = cfg.resolved_stage_widths()
        depths = cfg.resolved_stage_depths()
        levels = cfg.stage_levels()
        tokens = cfg.stage_token_counts()
        self.num_levels = len(widths)
        self.stages = []
        start = 0
        for depth, level, count in zip(depths, levels, tokens):
            self.stages.append(Stage(cfg, widths[level], depth, count, start, rng))
            start += depth
        self.downs = []
        self.ups = []
        if cfg.hierarchy:
            self.downs = [PatchMerge(widths[i], widths[i + 1], rng)
                          for i in range(self.num_levels - 1)]
            self.ups = [PatchExpand(widths[i + 1], widths[i], rng)
                        for i in reversed(range(self.num_levels - 1))]
        self.final_layer = FinalLayer(cfg.hidden_size, cfg.hidden_size, cfg.patch_size,
                                      cfg.out_channels)

    def trunk(self, z, t_emb, y_emb, counter=None):
        encoders = self.num_levels - 1
        skips = []
        for i in range(encoders):
            z = self.stages[i](z, t_emb, y_emb, counter)
            skips.append(z)
            if self.downs:
                z = self.downs[i](z)
        z = self.stages[encoders](z, t_emb, y_emb, counter)
        for i in range(encoders):
            if self.ups:
                z = self.ups[i](z)
            if self.cfg.shortcuts:
                z = z + skips[encoders - 1 - i]
            z = self.stages[encoders + 1 + i](z, t_emb, y_emb, counter)
        return z


def build_ushape(cfg, rng=None):
    if cfg.variant != "ushape":
        raise ConfigError(f"build_ushape needs variant 'ushape', got {cfg.variant!r}")
    return UDiG(cfg, rng)


def build_model(cfg, seed=0):
    """Instantiate the configured backbone with a seeded initializer."""
    rng = np.random.default_rng(seed)
    model = build_ushape(cfg, rng) if cfg.variant == "ushape" else DiG(cfg, rng)
    logger.debug("built %s (%s, depth %d, width %d)", cfg.name, cfg.variant, cfg.depth,
                 cfg.hidden_size)
    return model


def model_forward(model, x, t, y):
    """Single-sample forward: LatentImage [C, I, I] and scalar t, y."""
    x = as_tensor(x)
    noise, cov = model(x.reshape(1, *x.shape), [t], [y])
    return noise[0], (cov[0] if cov is not None else None)
