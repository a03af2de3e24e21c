"""
Spatial reorient and enhancement module for the DiG desk implementation.
Token-grid permutations, the identity-initialized depthwise 3x3 convolution,
the per-layer reorientation schedule, and the multi-path scanning baselines
with their extra-operation counters.
"""
import math
from dataclasses import dataclass

import numpy as np

from layers import Module, parameter
from tensor import ConfigError, ShapeError, Tensor, concat, einsum, flip, getitem, stack

DWCONV_INITS = ("identity", "random")


def grid_side(num_tokens):
    """Side of the square token grid, or ShapeError."""
    side = math.isqrt(num_tokens)
    if side * side != num_tokens:
        raise ShapeError(f"token count {num_tokens} is not a perfect square")
    return side


def reshape2d(tokens):
    """[..., T, D] -> [..., s, s, D] in row-major order."""
    side = grid_side(tokens.shape[-2])
    return tokens.reshape(*tokens.shape[:-2], side, side, tokens.shape[-1])


def flatten(grid):
    """[..., s, s, D] -> [..., s*s, D]."""
    return grid.reshape(*grid.shape[:-3], grid.shape[-3] * grid.shape[-2], grid.shape[-1])


def transpose2d(grid):
    """Swap the two grid axes of [..., s, s, D]."""
    return grid.swapaxes(-3, -2)


def flip_seq(tokens):
    """Reverse the token axis of [..., T, D]."""
    return flip(tokens, -2)


@dataclass
class OpCounter:
    """Extra matrix operations and extra scans spent by one strategy call."""

    matrix_ops: int = 0
    scan_ops: int = 0

    def reset(self):
        self.matrix_ops = 0
        self.scan_ops = 0

    def matrix(self, n=1):
        self.matrix_ops += n

    def scan(self, n=1):
        self.scan_ops += n

    def as_tuple(self):
        return (self.matrix_ops, self.scan_ops)


def identity_init(dim):
    """Kernel [D, 3, 3] with centre 1 and zeros around it."""
    if dim < 1:
        raise ConfigError(f"channel count must be >= 1, got {dim}")
    kernel = np.zeros((dim, 3, 3))
    kernel[:, 1, 1] = 1.0
    return kernel


def _pad_grid(grid):
    """Zero-pad one cell on each side of both grid axes."""
    lead, side, dim = grid.shape[:-3], grid.shape[-2], grid.shape[-1]
    zeros_row = Tensor(np.zeros(lead + (1, side, dim), dtype=grid.dtype))
    grid = concat([zeros_row, grid, zeros_row], axis=-3)
    zeros_col = Tensor(np.zeros(lead + (side + 2, 1, dim), dtype=grid.dtype))
    return concat([zeros_col, grid, zeros_col], axis=-2)


def dwconv2d(grid, kernel):
    """Per-channel 3x3 cross-correlation, stride 1, zero padding.

    grid [..., s, s, D]; kernel [D, 3, 3]; out[y, x, d] sums
    kernel[d, i, j] * grid[y + i - 1, x + j - 1, d].
    """
    if grid.ndim < 3 or grid.shape[-3] != grid.shape[-2]:
        raise ShapeError(f"dwconv2d expects a square grid [..., s, s, D], got {grid.shape}")
    dim = grid.shape[-1]
    if kernel.shape != (dim, 3, 3):
        raise ShapeError(f"kernel must be [{dim}, 3, 3], got {kernel.shape}")
    side = grid.shape[-2]
    padded = _pad_grid(grid)
    taps = [padded[..., i:i + side, j:j + side, :] for i in range(3) for j in range(3)]
    patches = stack(taps, axis=-2)
    rows = patches.reshape(-1, 9, dim)
    out = einsum("npd,dp->nd", rows, kernel.reshape(dim, 9))
    return out.reshape(*grid.shape)


class DepthwiseConv2d(Module):
    """3x3 depthwise convolution applied to a token sequence on its grid."""

    def __init__(self, dim, init="identity", rng=None):
        if init == "identity":
            kernel = identity_init(dim)
        elif init == "random":
            rng = rng if rng is not None else np.random.default_rng(0)
            kernel = rng.normal(0.0, 1.0 / 3.0, (dim, 3, 3))
        else:
            raise ConfigError(f"unknown dwconv init {init!r}")
        self.weight = parameter(kernel)

    def forward(self, tokens):
        return flatten(dwconv2d(reshape2d(tokens), self.weight))


def layer_permutation(num_tokens, layer_index):
    """Index array p with reorient(x, l) == x[p] for token sequences."""
    side = grid_side(num_tokens)
    idx = np.arange(num_tokens)
    if layer_index % 2 == 0:
        return idx.reshape(side, side).T.reshape(-1)
    return idx[::-1].copy()


class ReorientSchedule:
    """Per-layer reorientation plan of a stack of blocks on one token grid."""

    def __init__(self, num_layers, num_tokens, start=0):
        self.num_layers = num_layers
        self.num_tokens = num_tokens
        self.start = start
        grid_side(num_tokens)

    def perm(self, layer_index):
        return layer_permutation(self.num_tokens, layer_index)

    def cumulative_perm(self, upto):
        """Permutation after layers start..upto: tokens_out = tokens_in[perm]."""
        cum = np.arange(self.num_tokens)
        for l in range(self.start, upto + 1):
            cum = cum[self.perm(l)]
        return cum

    def window_perm(self, first, width=4):
        """Composite permutation of `width` consecutive layers from `first`."""
        cum = np.arange(self.num_tokens)
        for l in range(first, first + width):
            cum = cum[self.perm(l)]
        return cum

    def reading_order(self, layer_index):
        """Original token positions in the order layer `layer_index` reads them."""
        if layer_index <= self.start:
            return np.arange(self.num_tokens)
        return self.cumulative_perm(layer_index - 1)

    def restore_index(self):
        """Index that puts the stack's output back into row-major order."""
        if self.num_layers == 0:
            return np.arange(self.num_tokens)
        return np.argsort(self.cumulative_perm(self.start + self.num_layers - 1))

    def needs_restore(self):
        return self.num_layers % 4 != 0


def restore_order(tokens, schedule):
    """Undo a schedule's cumulative reorientation on [..., T, D] tokens."""
    if not schedule.needs_restore():
        return tokens
    return getitem(tokens, (Ellipsis, schedule.restore_index(), slice(None)))


def reorient(tokens, layer_index, counter=None):
    """Even layer: transpose the token grid; odd layer: reverse the sequence."""
    if layer_index % 2 == 0:
        out = flatten(transpose2d(reshape2d(tokens)))
    else:
        grid_side(tokens.shape[-2])
        out = flip_seq(tokens)
    if counter is not None:
        counter.matrix(2)
    return out


def scan_bidirectional(x, gla, counter=None):
    """GLA(x) + flip(GLA(flip(x)))."""
    counter = counter if counter is not None else OpCounter()
    out1 = gla(x)
    x2 = flip_seq(x)
    counter.matrix()
    out2 = gla(x2)
    counter.scan()
    out21 = flip_seq(out2)
    counter.matrix()
    z = out1 + out21
    counter.matrix()
    return z


def scan_4directional(x, gla, counter=None):
    """Sum of row-forward, row-backward, column-forward and column-backward scans."""
    counter = counter if counter is not None else OpCounter()
    out1 = gla(x)

    x2 = flip_seq(x)
    counter.matrix()
    out2 = gla(x2)
    counter.scan()
    out21 = flip_seq(out2)
    counter.matrix()

    x3 = flatten(transpose2d(reshape2d(x)))
    counter.matrix(2)
    out3 = gla(x3)
    counter.scan()
    out31 = flatten(transpose2d(reshape2d(out3)))
    counter.matrix(2)

    x4 = flip_seq(x3)
    counter.matrix()
    out4 = gla(x4)
    counter.scan()
    out41 = flatten(transpose2d(reshape2d(flip_seq(out4))))
    counter.matrix(3)

    z = out1 + out21 + out31 + out41
    counter.matrix(3)
    return z


def scan_block(x, gla, layer_index, counter=None):
    """One scan, then this layer's reorientation."""
    counter = counter if counter is not None else OpCounter()
    return reorient(gla(x), layer_index, counter)
