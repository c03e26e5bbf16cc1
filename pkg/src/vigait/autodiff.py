"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every differentiable operation records itself on the active :class:`Tape`
(entered with ``with Tape() as tape:``).  :func:`backward` replays the tape in
reverse and accumulates gradients into the leaf tensors that asked for them.
Outside a tape nothing is recorded, which is how inference runs.

Shapes are validated before arithmetic.  The only implicit broadcast is
:func:`bias_add` (a vector along one axis).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "TapeError",
    "EmptySequenceError",
    "Tensor",
    "Tape",
    "backward",
    "no_tape",
    "add",
    "sub",
    "mul",
    "scale",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "take",
    "concat",
    "stack",
    "matmul",
    "bias_add",
    "conv2d",
    "conv_output_size",
    "leaky_relu",
    "relu",
    "max_pool2d",
    "amax",
    "set_max_pool",
    "global_avg_pool",
    "log_softmax",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """A tape was misused (consumed twice, wrong loss, ...)."""


class EmptySequenceError(ValueError):
    """A set operation received zero elements."""


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 value that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        out._leaf = not requires_grad
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return _add_const(self, -float(other))

    def __rsub__(self, other):
        return _add_const(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Tape:
    """Ordered record of operations for one backward pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape has already been consumed by a backward pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        out._tape = self
        self.records.append((out, inputs, fn))


class no_tape:
    """Suspend recording inside a ``with`` block (inference)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    The tape must have recorded ``loss`` as its final output; it is consumed.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on any tape")
    if tape.consumed:
        raise TapeError("tape has already been consumed by a backward pass")
    if not tape.records or tape.records[-1][0] is not loss:
        raise TapeError("loss is not the final output of the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._leaf:
                t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    tape.records.clear()
    tape.consumed = True


def _result(opname: str, data: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all() and all(np.isfinite(t.data).all() for t in inputs):
        raise FloatingPointError(f"{opname} produced non-finite values from finite inputs")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs)
    if needs:
        tape._record(out, inputs, fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(opname: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def _add_const(a: Tensor, c: float) -> Tensor:
    return _result("add_const", a.data + c, (a,), lambda g: (g,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """max(x, slope*x); the derivative at exactly 0 is ``slope``."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    neg = x.data <= 0
    out = x.data.copy()
    out[neg] *= slope

    def fn(g):
        gx = g.copy()
        gx[neg] *= slope
        return (gx,)

    return _result("leaky_relu", out, (x,), fn)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape),)

    return _result("sum", x.data.sum(axis=axes), (x,), fn)


def tmean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, shape),)

    return _result("mean", x.data.mean(axis=axes), (x,), fn)


def amax(x: Tensor, axis) -> Tensor:
    """Maximum over ``axis``; gradient goes to the first maximizer in scan order."""
    axes = _norm_axes(axis, x.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise EmptySequenceError("max over an empty axis")
    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    moved = np.transpose(x.data, perm)
    kept_shape = moved.shape[: len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    inv = np.argsort(perm)

    def fn(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (np.transpose(gflat.reshape(moved.shape), inv),)

    return _result("amax", out, (x,), fn)


def set_max_pool(frames: Tensor, axis: int = 0) -> Tensor:
    """Elementwise maximum over the frame axis (order-invariant set pooling)."""
    if frames.ndim == 0 or frames.shape[axis] == 0:
        raise EmptySequenceError("set pooling needs at least one frame")
    return amax(frames, axis)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: (..., C, H, W) -> (..., C)."""
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool expects (..., C, H, W), got {x.shape}")
    return tmean(x, (x.ndim - 2, x.ndim - 1))


# --------------------------------------------------------------- shape / index


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    data = x.data.reshape(shape)
    return _result("reshape", data, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _result("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result("getitem", np.array(x.data[index]), (x,), fn)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate their gradients."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _result("take", np.take(x.data, indices, axis=axis), (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise EmptySequenceError("concat of nothing")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} disagree off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise EmptySequenceError("stack of nothing")
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    axis = axis % (tensors[0].ndim + 1)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result("stack", np.stack([t.data for t in tensors], axis=axis), tensors, fn)


# ---------------------------------------------------------------- linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of (..., p, q) and (..., q, r), or matrix-vector (p, q)·(q,).

    Leading (stack) dimensions must match exactly.
    """
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        return _result("matmul", ad @ bd, (a, b), lambda g: (np.outer(g, bd), ad.T @ g))
    if ad.ndim < 2 or ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result("matmul", ad @ bd, (a, b), fn)


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add the vector ``b`` along ``axis`` of ``x`` (the one allowed broadcast)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(d for d in range(x.ndim) if d != axis)
    return _result("bias_add", x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)))


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """(C*kh*kw, N*Ho*Wo) matrix of receptive fields, channel-major."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (C_in, H, W) or batched (N, C_in, H, W); ``w`` is (C_out, C_in, k, k).
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected (N,C,H,W) input and 4-D kernels, got {x.shape}, {w.shape}")
    n, c, h, wid = xd.shape
    c_out, c_in, kh, kw = w.shape
    if c_in != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernels expect {c_in}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wid, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: non-positive output size {ho}x{wo} for input {x.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    wmat = w.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out[0] if single else out)

    def fn(g):
        g4 = g[None] if single else g
        gt = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gw = (gt @ cols.T).reshape(w.shape) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        if stride == 1:
            # input gradient = full correlation of g with the flipped kernels
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (wflip @ _im2col(gp, kh, kw, h, wid, 1)).reshape(c, n, h, wid).transpose(1, 0, 2, 3)
        else:
            gcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                    gxp[sl] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + wid]
        gx = np.ascontiguousarray(gx)
        return (gx[0] if single else gx), gw

    return _result("conv2d", out, (x, w), fn)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping spatial max pool over the two trailing axes (floor mode).

    The gradient goes to the first maximizer of each window in row-major order.
    """
    if size == 1:
        return x
    h, wid = x.shape[-2:]
    ho, wo = h // size, wid // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"max_pool2d: window {size} larger than map {h}x{wid}")
    offsets = [(i, j) for i in range(size) for j in range(size)]
    parts = [x.data[..., i : ho * size : size, j : wo * size : size] for i, j in offsets]
    out = parts[0].copy()
    for p in parts[1:]:
        np.maximum(out, p, out=out)
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), p in zip(offsets, parts):
            hit = (p == out) & ~taken
            taken |= hit
            full[..., i : ho * size : size, j : wo * size : size] = np.where(hit, g, 0.0)
        return (full,)

    return _result("max_pool2d", out, (x,), fn)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", out, (x,), fn)


# ----------------------------------------------------------------- verification


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Iterable[int] | int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between the taped gradient and central differences.

    ``f(x)`` must return a scalar tensor and may depend on ``x`` only through
    ``x.data``, which is perturbed in place and restored.  ``coords`` is either
    an iterable of flat indices or a count of coordinates to sample (all
    coordinates when omitted).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    was = x.requires_grad
    saved_grad = x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            loss = f(x)
        backward(loss, tape)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.reshape(x.shape)
    finally:
        x.requires_grad = was

    if coords is None:
        flat_idx = np.arange(x.size)
    elif isinstance(coords, (int, np.integer)):
        rng = rng or np.random.default_rng(0)
        flat_idx = rng.choice(x.size, size=min(int(coords), x.size), replace=False)
    else:
        flat_idx = np.asarray(list(coords), dtype=np.intp)

    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_tape():
        for i in flat_idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f(x).item()
            flat[i] = orig - eps
            down = f(x).item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    x.grad = saved_grad
    return worst
