"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default; float64 is supported and
used by the finite-difference test oracles). Operations executed while a
GradientTape is active are recorded; ``tape.backward(loss)`` then walks
the record in reverse and accumulates gradients into the ``grad`` field
of every tensor created with ``requires_grad=True``. Outside a tape the
same functions are plain numpy computation with no graph retention, which
is what inference uses.

Reductions (sum/mean and normalization statistics) accumulate in float64
before casting back to the tensor dtype. There is no operator fusion and
no graph rewriting; given identical inputs, forward results are bitwise
deterministic.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_uid_counter = itertools.count()
_TAPE_STACK: list["GradientTape"] = []


class Tensor:
    """N-dimensional float array, optionally participating in gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_uid_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are promoted to constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)


def _as_tensor(value, dtype=np.float32) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class GradientTape:
    """Ordered record of executed operations for one backward pass.

    Use as a context manager around the forward computation. The tape
    tracks every tensor that depends on a ``requires_grad`` tensor; each
    tape supports a single backward pass.
    """

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._tracked: set[int] = set()
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or t.node_id in self._tracked

    def _record(self, inputs: tuple[Tensor, ...], output: Tensor, backward_fn: Callable):
        self._tracked.add(output.node_id)
        self._records.append((inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of a scalar loss into every requires_grad
        tensor reachable from it. Tensors used several times receive the
        sum of their per-use gradients."""
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self._consumed = True
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise ValueError("loss is non-finite")

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for inputs, output, backward_fn in reversed(self._records):
            g_out = grads.pop(output.node_id, None)
            if g_out is None:
                continue
            for t, g_in in zip(inputs, backward_fn(g_out)):
                if g_in is None or not self._tracks(t):
                    continue
                if t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + g_in
                else:
                    grads[t.node_id] = g_in
                if t.requires_grad:
                    leaves[t.node_id] = t
        for node_id, t in leaves.items():
            t.grad = np.asarray(grads[node_id], dtype=t.data.dtype)


def backward(tape: GradientTape, loss: Tensor) -> None:
    """Functional alias for ``tape.backward(loss)``."""
    tape.backward(loss)


def _active_tape(*tensors: Tensor) -> GradientTape | None:
    if not _TAPE_STACK:
        return None
    tape = _TAPE_STACK[-1]
    return tape if any(tape._tracks(t) for t in tensors) else None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data + b.data)
    tape = _active_tape(a, b)
    if tape:
        tape._record(
            (a, b),
            out,
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data - b.data)
    tape = _active_tape(a, b)
    if tape:
        tape._record(
            (a, b),
            out,
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = Tensor(a.data * b.data)
    tape = _active_tape(a, b)
    if tape:
        tape._record(
            (a, b),
            out,
            lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            ),
        )
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    tape = _active_tape(a)
    if tape:
        mask = a.data > 0  # gradient is 0 at exactly 0
        tape._record((a,), out, lambda g: (g * mask,))
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**exponent. Fractional exponents require a >= 0."""
    out = Tensor(np.power(a.data, exponent))
    if not np.all(np.isfinite(out.data)):
        raise ValueError(f"power {exponent} left the real domain for the given input")
    tape = _active_tape(a)
    if tape:
        local = exponent * np.power(a.data, exponent - 1.0)
        tape._record((a,), out, lambda g: (g * local,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    tape = _active_tape(a, b)
    if tape:
        def back(g):
            da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return da, db

        tape._record((a, b), out, back)
    return out


def _conv_geometry(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation.

    ``x`` is [C_in, H, W] or [B, C_in, H, W]; ``kernel`` is
    [C_out, C_in, kh, kw] with odd kh, kw. ``padding`` is "same"
    (zero-pad by (k-1)/2) or "valid".
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 3/4-D input and 4-D kernel, got {x.shape} and {kernel.shape}")
    _, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    ph = (kh - 1) // 2 if padding == "same" else 0
    pw = (kw - 1) // 2 if padding == "same" else 0
    h_out = _conv_geometry(h, kh, stride, ph)
    w_out = _conv_geometry(w, kw, stride, pw)
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B, C_in, H', W', kh, kw]
    result = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    result = np.ascontiguousarray(result.transpose(0, 3, 1, 2))  # [B, C_out, H', W']
    out = Tensor(result[0] if squeeze else result)

    tape = _active_tape(x, kernel)
    if tape:
        def back(g):
            gb = g[None] if squeeze else g  # [B, C_out, H', W']
            dk = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))
            dxp = np.zeros_like(xp)
            g_flat = gb.transpose(0, 2, 3, 1)  # [B, H', W', C_out]
            for i in range(kh):
                for j in range(kw):
                    # accumulate each kernel offset's contribution per input cell
                    patch = np.tensordot(g_flat, kernel.data[:, :, i, j], axes=([3], [0]))
                    dxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                        patch.transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, ph : ph + h, pw : pw + w]
            return (dx[0] if squeeze else dx, dk.astype(kernel.data.dtype, copy=False))

        tape._record((x, kernel), out, back)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted exponentiation normalized along ``axis``."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)
    tape = _active_tape(x)
    if tape:
        def back(g):
            dot = np.sum(g * y, axis=axis, keepdims=True)
            return ((g - dot) * y,)

        tape._record((x,), out, back)
    return out


def _norm_backward(g_hat, x_hat, inv_std, axes):
    mean_g = np.mean(g_hat, axis=axes, keepdims=True)
    mean_gx = np.mean(g_hat * x_hat, axis=axes, keepdims=True)
    return (g_hat - mean_g - x_hat * mean_gx) * inv_std


def layer_norm(x: Tensor, scale: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    if scale.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"scale/bias must be ({x.shape[-1]},), got {scale.shape} and {bias.shape}"
        )
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((xd - mu) * inv_std).astype(x.data.dtype)
    out = Tensor(x_hat * scale.data + bias.data)
    tape = _active_tape(x, scale, bias)
    if tape:
        inv = inv_std.astype(x.data.dtype)

        def back(g):
            lead = tuple(range(g.ndim - 1))
            dscale = np.sum(g * x_hat, axis=lead)
            dbias = np.sum(g, axis=lead)
            dx = _norm_backward(g * scale.data, x_hat, inv, axes=(-1,))
            return dx, dscale, dbias

        tape._record((x, scale, bias), out, back)
    return out


def group_norm(x: Tensor, groups: int, scale: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize [B, C, H, W] per sample over channel groups, then affine per channel."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"{groups} groups do not divide {c} channels")
    if scale.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"scale/bias must be ({c},), got {scale.shape} and {bias.shape}")
    xd = x.data.astype(np.float64).reshape(b, groups, c // groups * h * w)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((xd - mu) * inv_std).astype(x.data.dtype).reshape(b, c, h, w)
    sc = scale.data.reshape(1, c, 1, 1)
    bi = bias.data.reshape(1, c, 1, 1)
    out = Tensor(x_hat * sc + bi)
    tape = _active_tape(x, scale, bias)
    if tape:
        inv = inv_std.astype(x.data.dtype)

        def back(g):
            dscale = np.sum(g * x_hat, axis=(0, 2, 3))
            dbias = np.sum(g, axis=(0, 2, 3))
            g_hat = (g * sc).reshape(b, groups, c // groups * h * w)
            dx = _norm_backward(g_hat, x_hat.reshape(b, groups, -1), inv, axes=(-1,))
            return dx.reshape(b, c, h, w), dscale, dbias

        tape._record((x, scale, bias), out, back)
    return out


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype))
    tape = _active_tape(x)
    if tape:
        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

        tape._record((x,), out, back)
    return out


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod(np.asarray(x.shape)[np.atleast_1d(axis)])
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype))
    tape = _active_tape(x)
    if tape:
        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, x.shape).astype(x.data.dtype),)

        tape._record((x,), out, back)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    tape = _active_tape(x)
    if tape:
        tape._record((x,), out, lambda g: (g.reshape(x.shape),))
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    tape = _active_tape(x)
    if tape:
        inverse = tuple(np.argsort(axes))
        tape._record((x,), out, lambda g: (g.transpose(inverse),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _active_tape(*tensors)
    if tape:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def back(g):
            return tuple(np.split(g, splits, axis=axis))

        tape._record(tuple(tensors), out, back)
    return out


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select sub-tensors along an axis; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(x.data, idx, axis=axis))
    tape = _active_tape(x)
    if tape:
        def back(g):
            dx = np.zeros_like(x.data)
            np.add.at(dx, (slice(None),) * axis + (idx,), g)
            return (dx,)

        tape._record((x,), out, back)
    return out
