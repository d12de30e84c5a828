"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation whose inputs include a tracked
tensor.  Tensors created without a tape are constants: operating on them
costs one numpy call and nothing is recorded, which is how inference runs.

    >>> tape = Tape()
    >>> x = tape.watch([1.0, 2.0])
    >>> loss = sum(x * x)
    >>> grads = tape.backward(loss)
    >>> x.grad
    array([2., 4.])

The tape is rebuilt for every training step, so variable-length recurrences
need no special handling: backpropagation through time is the ordinary
reverse sweep over whatever the forward pass happened to record.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, ConfigError

DTYPE = np.float64


class Tensor:
    """An n-dimensional float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "grad", "tape", "node_id", "name")
    __array_priority__ = 100

    def __init__(self, data, tape=None, node_id=None, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self):
        return self.tape is not None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; the functional forms below are canonical
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Record:
    inputs: tuple
    outputs: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, which is already a topological
    order, so the backward sweep is a plain reversed iteration.
    """

    records: list = field(default_factory=list)
    _next_id: int = 0

    def _new_id(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, value, name=None) -> Tensor:
        """Return a tracked leaf tensor holding a copy-free view of ``value``."""
        data = value.data if isinstance(value, Tensor) else value
        return Tensor(data, tape=self, node_id=self._new_id(), name=name)

    def record(self, inputs, outputs, backward):
        for out in outputs:
            out.tape = self
            out.node_id = self._new_id()
        self.records.append(_Record(tuple(inputs), tuple(outputs), backward))

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> dict:
        """Propagate d(loss)/d(node) for every node on this tape.

        Returns a map node-id -> gradient array and stores the gradient of
        each watched leaf in its ``grad`` attribute.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        grads = {loss.node_id: np.ones_like(loss.data)}
        leaves = {}
        for rec in reversed(self.records):
            gouts = [grads.get(o.node_id) for o in rec.outputs]
            if all(g is None for g in gouts):
                continue
            gouts = [np.zeros_like(o.data) if g is None else g
                     for g, o in zip(gouts, rec.outputs)]
            gins = rec.backward(*gouts)
            for inp, g in zip(rec.inputs, gins):
                if g is None or inp.tape is not self:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = g if prev is None else prev + g
                leaves[inp.node_id] = inp
        for nid, t in leaves.items():
            t.grad = grads[nid]
        return grads


def backward(loss: Tensor, tape: Tape | None = None) -> dict:
    """Functional form of :meth:`Tape.backward`."""
    tape = tape if tape is not None else getattr(loss, "tape", None)
    if tape is None:
        raise ContractError("loss is a constant; nothing to differentiate")
    return tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(tensors):
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _emit(inputs, data, backward):
    out = Tensor(data)
    tape = _tape_of(inputs)
    if tape is not None:
        tape.record(inputs, (out,), backward)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------- binary

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit((a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit((a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _emit((a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def binary(op: str, a, b) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ContractError(f"unknown binary op {op!r}") from None
    return fn(a, b)


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit((a, b), a.data @ b.data, back)


# ---------------------------------------------------------------------- unary

def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit((x,), y, lambda g: (g * (1.0 - y * y),))


def _sigmoid(v):
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _emit((x,), y, lambda g: (g * y * (1.0 - y),))


_kink_probes: list = []


@contextlib.contextmanager
def kink_margin():
    """Collect the smallest ``|input|`` seen by any ``relu`` inside the block.

    Yields a one-element list holding the running minimum (``inf`` if no
    relu ran).  Used to place finite-difference checks away from kinks.
    """
    probe = [math.inf]
    _kink_probes.append(probe)
    try:
        yield probe
    finally:
        _kink_probes.remove(probe)


def relu(x) -> Tensor:
    x = as_tensor(x)
    if _kink_probes and x.data.size:
        low = float(np.min(np.abs(x.data)))
        for probe in _kink_probes:
            probe[0] = min(probe[0], low)
    m = x.data > 0
    return _emit((x,), np.where(m, x.data, 0.0), lambda g: (g * m,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _emit((x,), y, lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    return _emit((x,), np.log(x.data), lambda g: (g / x.data,))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = as_tensor(x)
    v = x.data
    y = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _emit((x,), y, lambda g: (g * _sigmoid(v),))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    if p < 0 and np.any(x.data == 0):
        raise DomainError("negative power of zero")
    y = x.data ** p
    return _emit((x,), y, lambda g: (g * p * x.data ** (p - 1.0),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _emit((x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp,
          "log": log, "softplus": softplus}


def unary(op: str, x) -> Tensor:
    try:
        fn = _UNARY[op]
    except KeyError:
        raise ContractError(f"unknown unary op {op!r}") from None
    return fn(x)


def softmax(x) -> Tensor:
    """Softmax over the last axis, shifted by the row maximum."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit((x,), y, back)


# ----------------------------------------------------------------- reductions

def _check_axis(x, axis):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise DimensionError(f"axis {a} out of range for shape {x.shape}")
        out.append(a % x.ndim)
    return tuple(out)


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _check_axis(x, axis)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit((x,), y, back)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _check_axis(x, axis)
    n = x.data.size if axes is None else math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def reduce(op: str, x, axis=None) -> Tensor:
    if op == "sum":
        return sum(x, axis)
    if op == "mean":
        return mean(x, axis)
    raise ContractError(f"unknown reduction {op!r}")


# -------------------------------------------------------------- shape changes

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit((x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _emit((x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)

    def back(g):
        out = np.zeros_like(x.data)
        out[index] = g
        return (out,)

    return _emit((x,), x.data[index], back)


def take(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; used for embeddings."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _emit((table,), table.data[ids], back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(tuple(ts), data, back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit(tuple(ts), data, back)


def where(cond, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)
    return _emit((a, b), data,
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# --------------------------------------------------------------- convolution

def _windows(x, width):
    pad = width // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    return np.lib.stride_tricks.sliding_window_view(xp, width, axis=-1)


def conv1d(x, kernels, bias=None) -> Tensor:
    """Length-preserving cross-correlation with zero padding.

    ``x`` is ``(channels_in, len)`` or ``(batch, channels_in, len)``;
    ``kernels`` is ``(channels_out, channels_in, width)`` with odd width.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3:
        raise DimensionError(f"kernels must be 3-D, got {kernels.shape}")
    c_out, c_in, width = kernels.shape
    if width % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {width}")
    if x.ndim not in (2, 3) or x.shape[-2] != c_in:
        raise DimensionError(f"conv1d input {x.shape} incompatible with kernels {kernels.shape}")
    length = x.shape[-1]
    win = _windows(x.data, width)  # (..., c_in, len, width)
    w2 = kernels.data.reshape(c_out, c_in * width)
    cols = np.moveaxis(win, -2, -3).reshape(*x.shape[:-2], length, c_in * width)
    y = np.swapaxes(cols @ w2.T, -1, -2)  # (..., c_out, len)
    inputs = (x, kernels)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data[:, None]
        inputs = (x, kernels, bias)

    def back(g):
        gt = np.swapaxes(g, -1, -2)  # (..., len, c_out)
        gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * width)).reshape(kernels.shape)
        gcols = (gt @ w2).reshape(*x.shape[:-2], length, c_in, width)
        pad = width // 2
        gxp = np.zeros(x.shape[:-1] + (length + 2 * pad,))
        for k in range(width):
            gxp[..., k:k + length] += np.swapaxes(gcols[..., k], -1, -2)
        gx = gxp[..., pad:pad + length]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=tuple(i for i in range(g.ndim) if i != g.ndim - 2))

    return _emit(inputs, y, back)


# ----------------------------------------------------------------- recurrence

def lstm_cell(gates, c):
    """Pointwise LSTM update from pre-activation gates.

    ``gates`` is ``(..., 4H)`` laid out as input, forget, cell, output.
    Returns ``(h_new, c_new)``.
    """
    gates, c = as_tensor(gates), as_tensor(c)
    hdim = c.shape[-1]
    if gates.shape[-1] != 4 * hdim:
        raise DimensionError(f"gates {gates.shape} do not match cell {c.shape}")
    z = gates.data
    i = _sigmoid(z[..., :hdim])
    f = _sigmoid(z[..., hdim:2 * hdim])
    u = np.tanh(z[..., 2 * hdim:3 * hdim])
    o = _sigmoid(z[..., 3 * hdim:])
    c_new = f * c.data + i * u
    tc = np.tanh(c_new)
    h_new = o * tc
    h_out, c_out = Tensor(h_new), Tensor(c_new)

    def back(gh, gc):
        gc = gc + gh * o * (1.0 - tc * tc)
        gz = np.concatenate([gc * u * i * (1.0 - i),
                             gc * c.data * f * (1.0 - f),
                             gc * i * (1.0 - u * u),
                             gh * tc * o * (1.0 - o)], axis=-1)
        return gz, gc * f

    tape = _tape_of((gates, c))
    if tape is not None:
        tape.record((gates, c), (h_out, c_out), back)
    return h_out, c_out


# -------------------------------------------------------------- verification

@dataclass
class GradCheckResult:
    """Outcome of :func:`grad_check`; ``max_error`` is the headline number."""

    max_error: float
    by_param: dict

    @property
    def worst(self):
        return max(self.by_param.items(), key=lambda kv: kv[1])

    def __float__(self):
        return self.max_error


def grad_check(f: Callable[[dict], Tensor], params: dict, eps: float = 1e-6,
               coords: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` maps a dict of tensors (same keys as ``params``) to a scalar
    tensor and must be deterministic.  ``coords`` limits the number of
    randomly chosen coordinates probed per parameter; ``None`` probes all.
    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not eps > 0:
        raise ContractError(f"eps must be positive, got {eps}")
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}

    def value(p):
        return float(as_tensor(f({k: Tensor(v) for k, v in p.items()})).data)

    f0 = value(base)
    if value(base) != f0:
        raise ContractError("function under check is not deterministic")

    tape = Tape()
    watched = {k: tape.watch(v, name=k) for k, v in base.items()}
    loss = f(watched)
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    by_param = {}
    for name, arr in base.items():
        analytic = watched[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        flat_idx = np.arange(arr.size)
        if coords is not None and arr.size > coords:
            flat_idx = rng.choice(arr.size, size=coords, replace=False)
        worst = 0.0
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = value(base)
            arr[idx] = orig - eps
            fm = value(base)
            arr[idx] = orig
            num = (fp - fm) / (2.0 * eps)
            a = analytic[idx]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
        by_param[name] = worst
    return GradCheckResult(max(by_param.values(), default=0.0), by_param)
