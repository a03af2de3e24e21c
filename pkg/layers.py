"""
Layers module for the DiG desk implementation.
A small parameter-container base class and the standard layers built on the
tensor tape: linear maps, layer norm, embedding tables and the feed-forward
block.
"""
import numpy as np

from tensor import ConfigError, ShapeError, Tensor, gelu, layer_norm, take


def parameter(data):
    """Wrap an array as a trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


class Module:
    """Base class: parameters are tensor attributes with requires_grad set."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix=""):
        """Yield (dotted name, tensor) for every parameter, in definition order."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        """Copy every parameter array into a name-keyed dict."""
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        """Replace parameter arrays from a name-keyed dict of arrays."""
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ConfigError(f"state does not match model: missing {missing[:3]}, "
                              f"unexpected {unexpected[:3]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)


def count_parameters(module):
    """Total number of trainable scalars."""
    return sum(p.size for p in module.parameters())


class Linear(Module):
    """y = x W + b with W stored as [in, out]."""

    def __init__(self, in_features, out_features, bias=True, init="xavier", rng=None):
        self.in_features = in_features
        self.out_features = out_features
        if init == "zero":
            w = np.zeros((in_features, out_features))
        elif init == "normal":
            w = _rng(rng).normal(0.0, 0.02, (in_features, out_features))
        elif init == "xavier":
            limit = np.sqrt(6.0 / (in_features + out_features))
            w = _rng(rng).uniform(-limit, limit, (in_features, out_features))
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last axis {self.in_features}, got {x.shape}")
        y = x @ self.weight
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    """Layer norm over the last axis, eps 1e-6, optionally affine."""

    def __init__(self, dim, eps=1e-6, affine=False):
        self.dim = dim
        self.eps = eps
        self.weight = parameter(np.ones(dim)) if affine else None
        self.bias = parameter(np.zeros(dim)) if affine else None

    def forward(self, x):
        return layer_norm(x, self.eps, self.weight, self.bias)


class Embedding(Module):
    """Lookup table of learned rows."""

    def __init__(self, num_embeddings, dim, rng=None):
        self.num_embeddings = num_embeddings
        self.table = parameter(_rng(rng).normal(0.0, 0.02, (num_embeddings, dim)))

    def forward(self, indices):
        return take(self.table, indices)


class FeedForward(Module):
    """D -> 4D -> D with GELU."""

    def __init__(self, dim, hidden_ratio=4, rng=None):
        self.fc1 = Linear(dim, dim * hidden_ratio, rng=rng)
        self.fc2 = Linear(dim * hidden_ratio, dim, rng=rng)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)
