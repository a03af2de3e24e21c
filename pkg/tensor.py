"""
Tensor module for the DiG desk implementation.
Dense numpy-backed tensors with a dynamic reverse-mode tape, the error
hierarchy shared by every module, gradient checking and blob serialization.
"""
import json
import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class DiGError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DiGError, ValueError):
    """Operand shapes do not fit the operation."""


class NumericError(DiGError, ArithmeticError):
    """A computation produced a non-finite or invalid value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateNormalizerError(NumericError):
    """A linear-attention normalizer fell below the degeneracy threshold."""


class EvaluationError(NumericError):
    """A checked function evaluated to NaN."""


class ConfigError(DiGError, ValueError):
    """An invalid configuration value."""


class IndexRangeError(DiGError, IndexError):
    """An index (timestep, label, layer) outside its valid range."""


_state = threading.local()


def grad_enabled():
    """Return True when operations on this thread record the tape."""
    return getattr(_state, "grad", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    previous = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = previous


class MacCounter:
    """Accumulates multiply-accumulate counts of matrix products."""

    def __init__(self):
        self.macs = 0

    def add(self, n):
        self.macs += int(n)


@contextmanager
def count_macs():
    """Count the MACs of every matmul and contracting einsum run inside."""
    counter = MacCounter()
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _record_macs(n):
    for counter in getattr(_state, "counters", ()):
        counter.add(n)


def _float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float32:
        return arr
    return arr.astype(np.float64, copy=False)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense real array with an optional reverse-mode tape entry."""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _float_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = ""

    @staticmethod
    def zeros(shape, dtype=np.float64, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float64, requires_grad=False):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def randn(rng, shape, scale=1.0, dtype=np.float64, requires_grad=False):
        data = (rng.standard_normal(shape) * scale).astype(dtype)
        return Tensor(data, requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        """Return the underlying array."""
        return self.data

    def item(self):
        """Return the value of a one-element tensor as a float."""
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # Tape

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def zero_grad(self):
        """Drop the accumulated adjoint."""
        self.grad = None

    def detach(self):
        """Return a tape-free tensor sharing this tensor's data."""
        return Tensor(self.data)

    def backward(self, grad=None):
        """Propagate adjoints from this tensor through the recorded tape."""
        if not self.requires_grad:
            raise DiGError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.asarray(grad, dtype=self.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, index):
        return getitem(self, index)

    # Method forms

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


def _make(data, parents, backward, op):
    out = Tensor(data, dtype=data.dtype if data.dtype == np.float32 else None)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def as_tensor(x, dtype=None):
    """Wrap arrays and scalars; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# Elementwise binary ops

def add(a, b):
    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a):
    return _make(-a.data, (a,), lambda g: a._accumulate(-g), "neg")


def power(a, exponent):
    """Raise to a constant real power."""
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))
    return _make(out, (a,), backward, "pow")


def maximum(a, floor):
    """Elementwise max with a constant; gradient passes where a > floor."""
    keep = a.data > floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.dtype))
    return _make(out, (a,), lambda g: a._accumulate(g * keep), "maximum")


def where(condition, a, b):
    """Select from a where the constant boolean mask holds, else from b."""
    condition = np.asarray(condition, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(condition, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(condition, 0.0, g), b.shape))
    return _make(np.where(condition, a.data, b.data), (a, b), backward, "where")


def masked_fill(a, mask, value):
    """Replace entries where the constant mask holds with `value`."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def backward(g):
        a._accumulate(_unbroadcast(np.where(mask, 0.0, g), a.shape))
    return _make(out, (a,), backward, "masked_fill")


# Elementwise unary ops

def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * out), "exp")


def log(a):
    return _make(np.log(a.data), (a,), lambda g: a._accumulate(g / a.data), "log")


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)), "sigmoid")


def log_sigmoid(a):
    """log(sigmoid(a)) evaluated without overflow."""
    out = -np.logaddexp(0.0, -a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * _sigmoid(-a.data)), "log_sigmoid")


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)), "tanh")


def swish(a):
    """Swish / SiLU: a * sigmoid(a)."""
    s = _sigmoid(a.data)

    def backward(g):
        a._accumulate(g * (s + a.data * s * (1.0 - s)))
    return _make(a.data * s, (a,), backward, "swish")


silu = swish

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner))
    return _make(out, (a,), backward, "gelu")


def elu(a):
    x = a.data
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))

    def backward(g):
        a._accumulate(g * np.where(x > 0, 1.0, out + 1.0))
    return _make(out, (a,), backward, "elu")


# Reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape))
    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def cumsum(a, axis):
    axis %= a.ndim

    def backward(g):
        a._accumulate(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))
    return _make(np.cumsum(a.data, axis=axis), (a,), backward, "cumsum")


# Shape ops

def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,),
                 lambda g: a._accumulate(g.transpose(inverse)), "transpose")


def flip(a, axis):
    return _make(np.flip(a.data, axis).copy(), (a,),
                 lambda g: a._accumulate(np.flip(g, axis)), "flip")


def getitem(a, index):
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)
    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def take(table, indices):
    """Gather rows of a 2-D table by integer indices."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexRangeError(f"row index out of range [0, {table.shape[0]})")
    return getitem(table, indices)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis %= tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def backward(g):
        for t, piece in zip(tensors, np.split(g, np.cumsum(sizes)[:-1], axis=axis)):
            t._accumulate(piece)
    return _make(out, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))
    return _make(out, tensors, backward, "stack")


def pad_axis(a, axis, after):
    """Zero-pad `after` entries at the end of one axis."""
    if after == 0:
        return a
    shape = list(a.shape)
    shape[axis] = after
    return concat([a, Tensor(np.zeros(shape, dtype=a.dtype))], axis=axis)


# Matrix products

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc
    _record_macs(out.size * a.shape[-1])

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    return _make(out, (a, b), backward, "matmul")


def einsum(subscripts, *operands):
    """Explicit-output einsum without ellipses or repeated indices per operand."""
    operands = [as_tensor(t) for t in operands]
    if "->" not in subscripts or "." in subscripts:
        raise ShapeError(f"einsum needs explicit output and no ellipsis: {subscripts!r}")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError(f"einsum expects {len(in_subs)} operands, got {len(operands)}")
    extents = {}
    for sub, t in zip(in_subs, operands):
        if len(sub) != t.ndim or len(set(sub)) != len(sub):
            raise ShapeError(f"einsum term {sub!r} does not fit shape {t.shape}")
        for letter, n in zip(sub, t.shape):
            if extents.setdefault(letter, n) != n:
                raise ShapeError(f"einsum index {letter!r} has extents {extents[letter]} and {n}")
    for i, sub in enumerate(in_subs):
        rest = out_sub + "".join(s for j, s in enumerate(in_subs) if j != i)
        if any(letter not in rest for letter in sub):
            raise ShapeError(f"einsum term {sub!r} sums an index no other term carries")
    out = np.einsum(subscripts, *[t.data for t in operands], optimize=len(operands) > 2)
    if set(lhs.replace(",", "")) - set(out_sub):
        _record_macs(np.prod([extents[k] for k in extents], dtype=np.int64))

    def backward(g):
        for i, (sub, t) in enumerate(zip(in_subs, operands)):
            if not t.requires_grad:
                continue
            others = [o.data for j, o in enumerate(operands) if j != i]
            other_subs = [s for j, s in enumerate(in_subs) if j != i]
            spec = ",".join([out_sub] + other_subs) + "->" + sub
            t._accumulate(np.einsum(spec, g, *others, optimize=len(others) > 1))
    return _make(np.asarray(out), operands, backward, "einsum")


# Composites

def softmax(a, axis=-1):
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(a - shift)
    return e / tsum(e, axis, keepdims=True)


def layer_norm(x, eps=1e-6, weight=None, bias=None):
    """Normalize over the last axis; optional affine scale and shift."""
    mu = mean(x, -1, keepdims=True)
    xc = x - mu
    var = mean(xc * xc, -1, keepdims=True)
    y = xc * power(var + eps, -0.5)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def global_norm(arrays):
    """Euclidean norm over a collection of arrays."""
    return float(np.sqrt(sum(float(np.sum(np.square(a))) for a in arrays)))


# Gradient checking

@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient comparison."""

    max_rel_err: float
    max_abs_err: float
    tol: float
    checked: int
    zero_adjoint: bool = False
    worst_index: tuple = field(default_factory=tuple)

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def _relative_error(analytic, numeric):
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(diff / scale), float(diff)


def _select_indices(shape, max_entries, rng):
    indices = list(np.ndindex(*shape))
    if max_entries is not None and len(indices) > max_entries:
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(indices), size=max_entries, replace=False)
        indices = [indices[i] for i in sorted(picks)]
    return indices


def _scalar(value, where):
    v = value.item() if isinstance(value, Tensor) else float(value)
    if np.isnan(v):
        raise EvaluationError(f"function evaluated to NaN {where}")
    return v


def grad_check(f, x, h=1e-5, tol=1e-4, max_entries=None, rng=None):
    """Compare reverse-mode and central-difference gradients of scalar f at x."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64, copy=True)
    leaf = Tensor(x0.copy(), requires_grad=True)
    y = f(leaf)
    _scalar(y, "at the base point")
    if y.requires_grad:
        y.backward()
    zero_adjoint = leaf.grad is None or not np.any(leaf.grad)
    analytic_full = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    indices = _select_indices(x0.shape, max_entries, rng)
    analytic = np.empty(len(indices))
    numeric = np.empty(len(indices))
    with no_grad():
        for n, idx in enumerate(indices):
            xp = x0.copy()
            xp[idx] += h
            fp = _scalar(f(Tensor(xp)), f"at +h, index {idx}")
            xp[idx] -= 2 * h
            fm = _scalar(f(Tensor(xp)), f"at -h, index {idx}")
            numeric[n] = (fp - fm) / (2 * h)
            analytic[n] = analytic_full[idx]
    rel, absolute = _relative_error(analytic, numeric)
    worst = indices[int(np.argmax(np.abs(analytic - numeric)))] if indices else ()
    report = GradCheckReport(rel, absolute, tol, len(indices), zero_adjoint, worst)
    if zero_adjoint:
        logger.info("grad_check: adjoint is identically zero")
    return report


def grad_check_params(loss_fn, params, h=1e-5, tol=1e-4, max_entries=None, rng=None):
    """Gradient-check a closure against every named parameter tensor.

    `params` maps names to leaf tensors that `loss_fn()` reads; their data is
    perturbed in place and restored.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    _scalar(loss, "at the base point")
    loss.backward()
    reports = {}
    with no_grad():
        for name, p in params.items():
            base = p.data
            analytic_full = p.grad if p.grad is not None else np.zeros_like(base)
            indices = _select_indices(base.shape, max_entries, rng)
            analytic = np.empty(len(indices))
            numeric = np.empty(len(indices))
            for n, idx in enumerate(indices):
                bumped = base.copy()
                bumped[idx] += h
                p.data = bumped
                fp = _scalar(loss_fn(), f"for {name}{idx} at +h")
                bumped = base.copy()
                bumped[idx] -= h
                p.data = bumped
                fm = _scalar(loss_fn(), f"for {name}{idx} at -h")
                p.data = base
                numeric[n] = (fp - fm) / (2 * h)
                analytic[n] = analytic_full[idx]
            rel, absolute = _relative_error(analytic, numeric)
            reports[name] = GradCheckReport(rel, absolute, tol, len(indices),
                                            p.grad is None or not np.any(p.grad))
    return reports


# Serialization

_HEADER = struct.Struct("<I")


def save_tensors(path, named):
    """Write named arrays as a JSON-headed blob of little-endian f64."""
    header = {}
    chunks = []
    offset = 0
    for name, value in named.items():
        arr = np.ascontiguousarray(as_tensor(value).data, dtype="<f8")
        header[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(len(encoded)))
        f.write(encoded)
        for chunk in chunks:
            f.write(chunk)


def load_tensors(path):
    """Read a blob written by save_tensors into a dict of float64 arrays."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise DiGError(f"{path}: truncated tensor blob")
    (length,) = _HEADER.unpack_from(blob, 0)
    start = _HEADER.size + length
    header = json.loads(blob[_HEADER.size:start].decode("utf-8"))
    out = {}
    for name, entry in header.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start + entry["offset"])
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
