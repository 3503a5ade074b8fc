"""A small reverse-mode autodiff engine on top of numpy.

Tensors wrap immutable numpy arrays. While a :class:`Tape` is active, every
primitive applied to a tensor that requires gradients is appended to the tape
together with a closure computing the vector-Jacobian product. Calling
:meth:`Tape.gradient` replays the tape in reverse.

Only the primitives needed by the keyphrase model are provided. Each of them
is covered by a central finite-difference check in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

PROB_EPS = 1e-7

_DEBUG = False
_TAPES: list["Tape"] = []


def set_debug(flag: bool) -> None:
    """Turn NaN/Inf checking of every op output on or off."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiub":
            raise TypeError(f"unsupported dtype {arr.dtype}")
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __array_priority__ = 100

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return index_select(self, index)

    def sum(self, axis=None): return tsum(self, axis)
    def tanh(self): return tanh(self)
    def sigmoid(self): return sigmoid(self)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


Node = tuple  # (outputs, inputs, backward)


class Tape:
    """Ordered record of primitive ops; use as a context manager.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = w * w
    >>> tape.gradient(y, [w])[0]
    array([4.])
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to each of ``sources``.

        ``target`` is normally a scalar; for other shapes pass ``seed`` (the
        upstream gradient). Sources the target does not depend on get zeros.
        """
        if seed is None:
            if target.data.size != 1:
                raise DimensionError("gradient of a non-scalar target needs an explicit seed")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        for outputs, inputs, backward in reversed(self.nodes):
            gs = [grads.get(id(o)) for o in outputs]
            if all(g is None for g in gs):
                continue
            gs = [np.zeros_like(o.data) if g is None else g for o, g in zip(outputs, gs)]
            in_grads = backward(*gs)
            for inp, g in zip(inputs, in_grads):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return [grads[id(s)] if id(s) in grads else np.zeros_like(s.data) for s in sources]


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(datas, inputs: Sequence, backward: Callable):
    """Wrap op results in tensors and put the op on the active tape."""
    single = not isinstance(datas, tuple)
    if single:
        datas = (datas,)
    tape = _TAPES[-1] if _TAPES else None
    track = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    outs = tuple(Tensor(d, requires_grad=track) for d in datas)
    if track:
        tape.nodes.append((outs, tuple(inputs), backward))
    return outs[0] if single else outs


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shapes(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shapes(a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shapes(a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shapes(a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _broadcast_shapes(a, b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    return np.where(pos, 1 / (1 + z), z / (1 + z))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1 - out),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to ``[lo, hi]``; gradient is zero outside the interval."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# reductions and shape ops --------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes."""
    if a.ndim < 2:
        raise DimensionError("swap_last needs at least 2 dimensions")
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    like = next((p for p in parts if isinstance(p, Tensor)), None)
    parts = [_as_tensor(p, like) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        out = np.stack([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    n = len(parts)
    return _record(out, parts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def unstack(a: Tensor, axis: int = 0) -> tuple[Tensor, ...]:
    """Split along ``axis`` into a tuple of tensors (one tape node)."""
    n = a.shape[axis]
    outs = tuple(np.take(a.data, i, axis=axis) for i in range(n))
    return _record(outs, (a,), lambda *gs: (np.stack(gs, axis=axis),))


def index_select(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), backward)


def gather_last(a: Tensor, ids) -> Tensor:
    """``out[..., j] = a[..., ids[..., j]]`` along the last axis."""
    ids = np.asarray(ids)
    out = np.take_along_axis(a.data, ids, axis=-1)

    def backward(g):
        full = np.zeros_like(a.data)
        flat = full.reshape(-1, a.shape[-1])
        rows = np.repeat(np.arange(flat.shape[0]), ids.shape[-1])
        np.add.at(flat, (rows, ids.reshape(-1)), g.reshape(-1))
        return (full,)

    return _record(out, (a,), backward)


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(a.data @ b.data, (a, b), backward)


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax; entries where ``mask == 0`` get probability 0."""
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    x = a.data
    if mask is not None:
        x = np.where(np.asarray(mask) > 0, x, -np.inf)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), backward)


# LSTM ----------------------------------------------------------------------

@dataclass
class LSTMWeights:
    """Input weights (n_in x 4d), recurrent weights (d x 4d), bias (4d).

    Gate blocks are ordered input, forget, candidate, output.
    """
    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, weights: LSTMWeights,
              mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step as a single primitive with a hand-written backward.

    ``mask`` (shape ``(..., 1)``) freezes the state where it is 0, which is
    how padded positions are skipped.
    """
    d = weights.hidden
    if (weights.w_x.shape != (x.shape[-1], 4 * d) or weights.w_h.shape != (d, 4 * d)
            or weights.b.shape != (4 * d,) or h_prev.shape[-1] != d or c_prev.shape != h_prev.shape):
        raise DimensionError(
            f"lstm_cell shapes x={x.shape} h={h_prev.shape} c={c_prev.shape} "
            f"w_x={weights.w_x.shape} w_h={weights.w_h.shape} b={weights.b.shape}")
    X, H, C = x.data, h_prev.data, c_prev.data
    z = X @ weights.w_x.data + H @ weights.w_h.data + weights.b.data
    i = _sigmoid(z[..., :d])
    f = _sigmoid(z[..., d:2 * d])
    gg = np.tanh(z[..., 2 * d:3 * d])
    o = _sigmoid(z[..., 3 * d:])
    c_new = f * C + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=X.dtype)
        h_out = m * h_new + (1 - m) * H
        c_out = m * c_new + (1 - m) * C
    else:
        m = None
        h_out, c_out = h_new, c_new

    def backward(gh, gc):
        if m is not None:
            gh_pass, gc_pass = (1 - m) * gh, (1 - m) * gc
            gh, gc = m * gh, m * gc
        dc = gc + gh * o * (1 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1 - i),
            dc * C * f * (1 - f),
            dc * i * (1 - gg * gg),
            gh * tc * o * (1 - o),
        ], axis=-1)
        dx = dz @ weights.w_x.data.T
        dh = dz @ weights.w_h.data.T
        dc_prev = dc * f
        if m is not None:
            dh = dh + gh_pass
            dc_prev = dc_prev + gc_pass
        dz2 = dz.reshape(-1, 4 * d)
        dwx = X.reshape(-1, X.shape[-1]).T @ dz2
        dwh = H.reshape(-1, d).T @ dz2
        db = dz2.sum(axis=0)
        return (_unbroadcast(dx, x.shape), _unbroadcast(dh, h_prev.shape),
                _unbroadcast(dc_prev, c_prev.shape), dwx, dwh, db)

    return _record((h_out, c_out), (x, h_prev, c_prev, weights.w_x, weights.w_h, weights.b), backward)


# optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if set(params) != set(grads):
        raise DimensionError("params and grads have different names")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"optimizer state shape mismatch for {name}")
        m = (b1 * m + (1 - b1) * g).astype(p.dtype)
        v = (b2 * v + (1 - b2) * g * g).astype(p.dtype)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p - step).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, t=t, m=new_m, v=new_v)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}, norm
