"""Dense N-D tensors with reverse-mode automatic differentiation.

Every op accepts an optional leading batch axis where that makes sense
(``conv2d`` on ``(N, C, H, W)``, ``linear``/``softmax``/``layer_norm`` along the
last axis).  Apart from that, shapes must match exactly; the only broadcast
allowed is a size-1 tensor against any other tensor in ``mul``.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class DegenerateVectorError(ValueError):
    """Raised when normalizing a (near) zero vector."""


class EvaluationError(RuntimeError):
    """Raised when a function under gradient check returns a non-finite value."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# Test hook: op name -> function applied to that op's input gradients.
_BACKWARD_CORRUPTION: dict[str, Callable[[np.ndarray], np.ndarray]] = {}


@contextmanager
def corrupt_backward(op: str, fn: Callable[[np.ndarray], np.ndarray] | None = None):
    """Deliberately distort the backward pass of ``op`` (negative controls only)."""
    _BACKWARD_CORRUPTION[op] = fn or (lambda g: g * 1.5 + 1e-3)
    try:
        yield
    finally:
        _BACKWARD_CORRUPTION.pop(op, None)


class Tensor:
    """An N-D array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.op = op
        out.name = None
        out.grad = None
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- conveniences -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        Tape.record(self).backward(grad)


def _raise_item(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.dtype)
    if arr.ndim == 0:
        arr = np.full(like.shape, arr, dtype=like.dtype)
    return Tensor(arr)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


@dataclass
class Tape:
    """Topologically ordered record of the ops that produced an output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.nodes:
            return
        output = self.nodes[-1]
        if not output.requires_grad:
            raise RuntimeError("output does not require grad")
        if grad is None:
            if output.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=output.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            corrupt = _BACKWARD_CORRUPTION.get(node.op)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if corrupt is not None:
                    pg = corrupt(pg)
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either side may be a size-1 tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if a.data.size == 1 and a.shape != out.shape:
            ga = ga.sum().reshape(a.shape)
        if b.data.size == 1 and b.shape != out.shape:
            gb = gb.sum().reshape(b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), "mul", backward)


@contextmanager
def kink_margin():
    """Collect the smallest distance of any relu/abs/clip01 input to its kink.

    Yields a one-element list that holds the running minimum once the block exits.
    """
    box = [np.inf]
    prev = getattr(_state, "kinks", None)
    _state.kinks = box
    try:
        yield box
    finally:
        _state.kinks = prev


def _note_kink(d: np.ndarray) -> None:
    box = getattr(_state, "kinks", None)
    if box is not None and d.size:
        box[0] = min(box[0], float(d.min()))


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor._result(x.data * c, (x,), "scale", lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_kink(np.abs(x.data))
    return Tensor._result(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def abs_(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    _note_kink(np.abs(x.data))
    return Tensor._result(np.abs(x.data), (x,), "abs", lambda g: (g * s,))


def clip01(x: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient 1 strictly inside, 0 elsewhere (including the boundary)."""
    inside = (x.data > 0.0) & (x.data < 1.0)
    _note_kink(np.minimum(np.abs(x.data), np.abs(x.data - 1.0)))
    return Tensor._result(np.clip(x.data, 0.0, 1.0), (x,), "clip01", lambda g: (g * inside,))


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "where")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return Tensor._result(
        np.where(mask, a.data, b.data), (a, b), "where", lambda g: (g * mask, g * ~mask)
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[u.shape for u in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", backward)


def take(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the first axis."""
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(src_shape, dtype=dtype)
        gx[start:stop] = g
        return (gx,)

    return Tensor._result(x.data[start:stop].copy(), (x,), "take", backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose", lambda g: (g.transpose(inv),)
    )


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    src = x.shape
    if axis is None:
        return Tensor._result(np.asarray(x.data.sum()), (x,), "sum", lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % x.ndim
    return Tensor._result(
        x.data.sum(axis=ax), (x,), "sum", lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),)
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def norm(x: Tensor) -> Tensor:
    """Euclidean norm along the last axis; the gradient at the origin is taken as 0."""
    n = np.sqrt((x.data * x.data).sum(axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return ((g / safe * (n > 0))[..., None] * x.data,)

    return Tensor._result(n, (x,), "norm", backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(n < eps):
        raise DegenerateVectorError(f"cannot normalize vector with norm {float(n.min()):.3g}")
    y = x.data / n

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return Tensor._result(y, (x,), "l2_normalize", backward)


def batched_dot(keys: Tensor, query: Tensor) -> Tensor:
    """``keys (..., M, D)`` against ``query (..., D)`` -> ``(..., M)``."""
    if keys.shape[:-2] != query.shape[:-1] or keys.shape[-1] != query.shape[-1]:
        raise DimensionError(f"batched_dot: keys {keys.shape} vs query {query.shape}")
    out = np.einsum("...md,...d->...m", keys.data, query.data)

    def backward(g):
        return g[..., None] * query.data[..., None, :], np.einsum("...m,...md->...d", g, keys.data)

    return Tensor._result(out, (keys, query), "batched_dot", backward)


def channel_weight(x: Tensor, w: Tensor) -> Tensor:
    """Multiply every channel of ``x (..., C, H, W)`` by the map ``w (..., H, W)``."""
    w = as_tensor(w)
    if x.shape[:-3] != w.shape[:-2] or x.shape[-2:] != w.shape[-2:]:
        raise DimensionError(f"channel_weight: map {w.shape} vs features {x.shape}")
    wd = w.data[..., None, :, :]

    def backward(g):
        return g * wd, (g * x.data).sum(axis=-3)

    return Tensor._result(x.data * wd, (x, w), "channel_weight", backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor._result(a.data @ b.data, (a, b), "matmul", lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x (..., in) @ weight.T + bias`` with ``weight (out, in)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return (g @ weight.data, gw) + ((gb,) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor._result(out, parents, "linear", backward)


# ---------------------------------------------------------------------------
# normalization / pooling
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis (max-subtracted)."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax of an empty vector")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), "softmax", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then apply gain and bias."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if n < 2:
        raise DimensionError("layer_norm needs at least 2 elements along the normalized axis")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs axis length {n}")
    shape = [1] * x.ndim
    shape[ax] = n
    gd = gain.data.reshape(shape)
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + bias.data.reshape(shape)
    others = tuple(i for i in range(x.ndim) if i != ax)

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=ax, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return Tensor._result(out, (x, gain, bias), "layer_norm", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes."""
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool expects (..., C, H, W), got {x.shape}")
    h, w = x.shape[-2:]
    src = x.shape

    def backward(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), src).copy(),)

    return Tensor._result(x.data.mean(axis=(-2, -1)), (x,), "global_avg_pool", backward)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``(C_in, H, W)`` or ``(N, C_in, H, W)``; ``w`` is ``(C_out, C_in, k, k)``.
    """
    if stride < 1 or pad < 0:
        raise DimensionError("conv2d needs stride >= 1 and pad >= 0")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4 or w.shape[1] != xd.shape[1] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {w.shape}")
    n, c, h, wd = xd.shape
    o, _, k, _ = w.shape
    if k < 1:
        raise DimensionError("conv2d kernel must be >= 1")
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output extent {ho}x{wo} < 1")
    if b is not None and b.shape != (o,):
        raise DimensionError(f"conv2d bias {b.shape} vs {o} output channels")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    if k == 1 and stride == 1 and pad == 0:
        cols = xd.transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if single else out)

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(w.shape)
        gx = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        if k == 1 and stride == 1 and pad == 0:
            gx = gx.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
        else:
            gcols = np.ascontiguousarray(gx.transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        gx = gx[0] if single else gx
        res = (gx, gw)
        if b is not None:
            res = res + (gmat.sum(axis=0),)
        return res

    parents = (x, w) + ((b,) if b is not None else ())
    return Tensor._result(out, parents, "conv2d", backward)


def max_pool2d(x: Tensor, k: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    """Max pooling with ``-inf`` padding; ties route the gradient to the first maximum."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, wd = xd.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2d output extent {ho}x{wo} < 1")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out[0] if single else out)

    def backward(g):
        g4 = g[None] if single else g
        gxp = np.zeros_like(xp)
        di, dj = np.divmod(arg, k)
        for i in range(k):
            for j in range(k):
                sel = (di == i) & (dj == j)
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g4 * sel
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx[0] if single else gx,)

    return Tensor._result(out, (x,), "max_pool2d", backward)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def _scalar(f: Callable[[], Tensor]) -> float:
    with no_grad():
        v = f()
    val = float(np.asarray(v.data if isinstance(v, Tensor) else v).reshape(-1)[0])
    if not np.isfinite(val):
        raise EvaluationError(f"function under check returned {val}")
    return val


def finite_diff_errors(
    f: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate relative error between backprop and central differences.

    ``f`` takes no arguments and reads ``param`` (which is perturbed in place).
    Returns ``(coords, errors)`` with error ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if not param.requires_grad:
        raise ValueError("param must require grad")
    param.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("function under check is not finite")
    if out.requires_grad:
        out.backward()
    analytic = param.grad.reshape(-1).copy()
    idx = np.arange(param.data.size) if coords is None else np.fromiter(coords, dtype=np.int64)
    flat = param.data.reshape(-1)
    errs = np.empty(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f)
        flat[i] = orig - h
        fm = _scalar(f)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        a = analytic[i]
        errs[n] = abs(a - num) / max(1.0, abs(a), abs(num))
    return idx, errs


def finite_diff_check(
    f: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between the analytic and the central-difference gradient."""
    _, errs = finite_diff_errors(f, param, h, coords)
    return float(errs.max()) if errs.size else 0.0
