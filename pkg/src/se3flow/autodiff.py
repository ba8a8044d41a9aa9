"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tape records forward operations define-by-run; backward() walks the
record in reverse topological order. Tensors without a node id are
constants and receive no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .exceptions import InvalidArgumentError, NumericalError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.node_id is not None})"


class Parameter:
    """A learnable array. Watched onto a tape per forward pass."""

    __slots__ = ("name", "value")

    def __init__(self, value, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.name = name


@dataclass
class _Node:
    parents: tuple
    backward_fn: object  # grad -> tuple of parent grads (aligned with parents)
    shape: tuple = ()


class Tape:
    """Single-owner record of one forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._watched: dict[int, tuple[Parameter, int]] = {}
        self.grads: dict[int, np.ndarray] | None = None

    def _record(self, parents, backward_fn, shape) -> int:
        self._nodes.append(_Node(parents, backward_fn, shape))
        return len(self._nodes) - 1

    def leaf(self, data) -> Tensor:
        nid = self._record((), None, np.shape(data))
        return Tensor(data, self, nid)

    def watch(self, param: Parameter) -> Tensor:
        """Register a parameter as a leaf; repeated watches share one node."""
        key = id(param)
        if key in self._watched:
            return Tensor(param.value, self, self._watched[key][1])
        t = self.leaf(param.value)
        self._watched[key] = (param, t.node_id)
        return t

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse accumulation from a scalar loss; returns node-id -> grad."""
        if loss.tape is not self or loss.node_id is None:
            raise InvalidArgumentError("loss is not tracked on this tape")
        if loss.data.shape != ():
            raise InvalidArgumentError("loss must be a scalar tensor")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        self.grads = grads
        return grads

    def param_grads(self) -> dict[Parameter, np.ndarray]:
        """Gradients of all watched parameters after backward()."""
        if self.grads is None:
            raise InvalidArgumentError("call backward() first")
        out = {}
        for param, nid in self._watched.values():
            out[param] = self.grads.get(nid, np.zeros_like(param.value))
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts):
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise InvalidArgumentError("tensors belong to different tapes")
            tape = t.tape
    return tape


def _nid(t: Tensor):
    return t.node_id


def _make(tape, data, parents, backward_fn) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values in forward result")
    if tape is None or all(p is None for p in parents):
        return Tensor(data)
    nid = tape._record(tuple(parents), backward_fn, data.shape)
    return Tensor(data, tape, nid)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, fwd, bwd_a, bwd_b):
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        ga = _unbroadcast(bwd_a(g, a.data, b.data), ash) if a.node_id is not None else None
        gb = _unbroadcast(bwd_b(g, a.data, b.data), bsh) if b.node_id is not None else None
        return (ga, gb)

    return _make(tape, out, (_nid(a), _nid(b)), backward)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def _unary(a, fwd, bwd):
    a = _as_tensor(a)
    out = fwd(a.data)

    def backward(g):
        return (bwd(g, a.data, out),)

    return _make(a.tape, out, (_nid(a),), backward)


def neg(a) -> Tensor:
    return _unary(a, lambda x: -x, lambda g, x, y: -g)


def square(a) -> Tensor:
    return _unary(a, lambda x: x * x, lambda g, x, y: 2.0 * g * x)


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda g, x, y: g * (1.0 - y * y))


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda g, x, y: 0.5 * g / y)


def gelu(a) -> Tensor:
    """Exact gelu: 0.5 x (1 + erf(x / sqrt(2)))."""

    def fwd(x):
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g, x, y):
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)

    return _unary(a, fwd, bwd)


def scale(a, c: float) -> Tensor:
    c = float(c)
    return _unary(a, lambda x: c * x, lambda g, x, y: c * g)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "square": square,
    "tanh": tanh,
    "gelu": gelu,
    "exp": exp,
    "scale-by-constant": scale,
}


def elementwise(tag: str, a, b=None) -> Tensor:
    """Dispatch by op tag; binary tags take a second operand."""
    if tag not in _ELEMENTWISE:
        raise InvalidArgumentError(f"unknown elementwise op {tag!r}")
    fn = _ELEMENTWISE[tag]
    if tag in ("add", "sub", "mul", "scale-by-constant"):
        if b is None:
            raise InvalidArgumentError(f"op {tag!r} needs a second operand")
        return fn(a, b)
    return fn(a)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    # promote numpy's 1-D vector cases to explicit matrices
    if a.data.ndim == 1:
        out = matmul(reshape(a, (1, -1)), b)
        return reshape(out, out.data.shape[:-2] + (out.data.shape[-1],))
    if b.data.ndim == 1:
        out = matmul(a, reshape(b, (-1, 1)))
        return reshape(out, out.data.shape[:-1])
    tape = _tape_of(a, b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        ga = gb = None
        if a.node_id is not None:
            ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), ash)
        if b.node_id is not None:
            gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), bsh)
        return (ga, gb)

    return _make(tape, out, (_nid(a), _nid(b)), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(a.tape, y, (_nid(a),), backward)


def layernorm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    n = a.data.shape[-1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError("gain/bias must match the last dimension")
    tape = _tape_of(a, gain, bias)
    mean = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        ga = gg = gb = None
        if a.node_id is not None:
            dxhat = g * gain.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            ga = (inv / n) * (n * dxhat - s1 - xhat * s2)
        if gain.node_id is not None:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.node_id is not None:
            gb = g.reshape(-1, n).sum(axis=0)
        return (ga, gg, gb)

    return _make(tape, out, (_nid(a), _nid(gain), _nid(bias)), backward)


def reduce(a, op: str, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if op not in ("sum", "mean"):
        raise InvalidArgumentError(f"unknown reduce op {op!r}")
    x = a.data
    out = x.sum(axis=axis, keepdims=keepdims) if op == "sum" else x.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis=axis)
        g = np.broadcast_to(g, x.shape)
        if op == "mean":
            g = g / count
        return (g.copy(),)

    return _make(a.tape, out, (_nid(a),), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    tape = _tape_of(*tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.node_id is None:
                pieces.append(None)
            else:
                pieces.append(np.moveaxis(g[lo:hi], 0, axis).copy())
        return tuple(pieces)

    return _make(tape, out, tuple(_nid(t) for t in tensors), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from e

    def backward(g):
        return (g.reshape(old),)

    return _make(a.tape, out, (_nid(a),), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError("narrow slice out of bounds")
    idx = tuple(
        slice(start, start + length) if i == axis else slice(None) for i in range(a.data.ndim)
    )
    out = a.data[idx]

    def backward(g):
        full = np.zeros(a.data.shape)
        full[idx] = g
        return (full,)

    return _make(a.tape, out, (_nid(a),), backward)


class InferenceContext:
    """Tape stand-in for forward-only evaluation; nothing is recorded."""

    @staticmethod
    def watch(param: Parameter) -> Tensor:
        return Tensor(param.value)

    @staticmethod
    def leaf(data) -> Tensor:
        return Tensor(data)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _make(a.tape, out, (_nid(a),), backward)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_probes: int
    passed: bool
    worst: str = ""
    failures: list = field(default_factory=list)


def grad_check(
    f,
    params: list[Parameter],
    step: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    probes_per_param: int | None = None,
) -> GradCheckReport:
    """Compare backward() against central finite differences.

    `f(tape)` must rebuild the forward pass and return a scalar Tensor,
    reading parameter values via tape.watch(). A subset of entries per
    parameter is probed when probes_per_param is given.
    """
    rng = rng or np.random.default_rng(0)
    tape = Tape()
    loss = f(tape)
    tape.backward(loss)
    analytic = tape.param_grads()

    def eval_loss() -> float:
        t = Tape()
        return float(f(t).data)

    max_rel = 0.0
    worst = ""
    n_probes = 0
    failures = []
    for param in params:
        grad = analytic.get(param, np.zeros_like(param.value))
        flat = param.value.reshape(-1)
        gflat = grad.reshape(-1)
        size = flat.size
        if probes_per_param is None or probes_per_param >= size:
            idxs = range(size)
        else:
            idxs = rng.choice(size, size=probes_per_param, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss()
            flat[i] = orig - step
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = gflat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            n_probes += 1
            if rel > max_rel:
                max_rel = rel
                worst = f"{param.name}[{i}]: analytic={a:.6g} numeric={numeric:.6g}"
            if rel > tol:
                failures.append((param.name, int(i), float(rel)))
    return GradCheckReport(max_rel, n_probes, max_rel < tol, worst, failures)
