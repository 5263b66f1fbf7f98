"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

The operator set is intentionally small: exactly what a Conformer encoder with a
CTC head needs (matmul, elementwise arithmetic, slicing/concat, softmax family,
layer norm, swish/sigmoid/GLU, depthwise 1-D convolution, dropout, reductions).
No GPU, no general broadcasting beyond row-bias addition, no operator fusion.

Recording only happens inside a ``with Tape() as tape:`` block and only along
paths that reach a tensor with ``requires_grad=True``.  Outside a tape every op
is plain forward numpy, which doubles as the inference mode.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "NumericsError",
    "set_debug_finite_checks",
    "stop_recording",
    "custom_op",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "sigmoid",
    "swish",
    "glu",
    "transpose",
    "reshape",
    "slice_axis",
    "concat",
    "pad_rows",
    "tensor_sum",
    "tensor_mean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "depthwise_conv1d",
    "relative_position_bias",
    "dropout",
    "check_gradients",
    "numerical_gradient",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_debug_finite = False


def set_debug_finite_checks(enabled: bool) -> None:
    """Globally enable raising NumericsError when an op produces NaN/Inf."""
    global _debug_finite
    _debug_finite = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, or a non-scalar loss."""


class NumericsError(ArithmeticError):
    """A forward op produced NaN or Inf while debug checks are enabled."""


class Tensor:
    """A dense float array, optionally a differentiable leaf.

    ``grad`` is populated (accumulated) by ``Tape.backward`` only on tensors
    with ``requires_grad=True``.  Data is never mutated by ops; treat it as
    immutable once the tensor participates in a recording.
    """

    __slots__ = ("data", "requires_grad", "grad", "_on_grad_path")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._on_grad_path = self.requires_grad

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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        tail = ", ".join(flags)
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{', ' + tail if tail else ''})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class Tape:
    """Ordered record of ops for one forward pass; drives one backward pass.

    Ops are appended in execution order, so the reversed list is a valid
    reverse-topological order.  A tape may be consumed by ``backward`` exactly
    once; reuse raises ``TapeError``.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self._nodes.append((out, parents, backward))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if loss.data.ndim != 0:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        if loss.requires_grad:
            loss.grad = np.ones((), dtype=loss.data.dtype) if loss.grad is None else loss.grad + 1.0
        for out, parents, backward in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = backward(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None:
                    continue
                if parent.requires_grad:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                elif parent._on_grad_path:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg


_tape_stack: list[Tape] = []


def _current_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class stop_recording:
    """Context manager that suspends recording on the active tape (if any)."""

    def __enter__(self):
        _tape_stack.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack.pop()


def custom_op(
    out_data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str = "op",
) -> Tensor:
    """Wrap raw forward output as a Tensor, recording ``backward`` if needed.

    ``backward`` receives the output gradient and must return one gradient (or
    None) per parent, each shaped like that parent's data.  This is the single
    entry point for every op, including ops defined outside this module.
    """
    if _debug_finite and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"non-finite values produced by {name}")
    out = Tensor(out_data)
    tape = _current_tape()
    if tape is not None and any(p._on_grad_path for p in parents):
        out._on_grad_path = True
        tape._record(out, tuple(parents), backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of the limited broadcasting we allow)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with dA = g @ B^T and dB = A^T @ g."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return custom_op(a.data @ b.data, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return custom_op(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return custom_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return custom_op(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return custom_op(a.data * c, (a,), backward, "scale")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return custom_op(-a.data, (a,), backward, "neg")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return custom_op(out_data, (a,), backward, "exp")


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return custom_op(s, (a,), backward, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    out_data = a.data * s

    def backward(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return custom_op(out_data, (a,), backward, "swish")


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: split in half along ``axis``, first half * sigmoid(second)."""
    n = a.shape[axis]
    if n % 2 != 0:
        raise ShapeError(f"glu axis size must be even, got {n}")
    half = n // 2
    value = slice_axis(a, axis, 0, half)
    gate = slice_axis(a, axis, half, n)
    return mul(value, sigmoid(gate))


# ---------------------------------------------------------------------------
# shape manipulation


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose requires a 2-D tensor, got {a.shape}")

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return custom_op(np.ascontiguousarray(a.data.T), (a,), backward, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return custom_op(a.data.reshape(shape), (a,), backward, "reshape")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    index = tuple(slice(None) if ax != axis else slice(start, stop) for ax in range(a.ndim))

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return custom_op(np.ascontiguousarray(a.data[index]), (a,), backward, "slice")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis % p.ndim] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(parts))
        )

    return custom_op(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


def pad_rows(a: Tensor, count: int) -> Tensor:
    """Append ``count`` zero rows to a 2-D tensor."""
    if count == 0:
        return a
    if a.ndim != 2:
        raise ShapeError(f"pad_rows requires a 2-D tensor, got {a.shape}")

    def backward(g):
        return (g[: a.shape[0]],)

    out = np.concatenate([a.data, np.zeros((count, a.shape[1]), dtype=a.dtype)], axis=0)
    return custom_op(out, (a,), backward, "pad_rows")


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def backward(g):
            return (np.full_like(a.data, float(g)),)

        return custom_op(np.asarray(a.data.sum()), (a,), backward, "sum")

    ax = axis % a.ndim

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return custom_op(a.data.sum(axis=ax), (a,), backward, "sum")


def tensor_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size

        def backward(g):
            return (np.full_like(a.data, float(g) / n),)

        return custom_op(np.asarray(a.data.mean()), (a,), backward, "mean")

    ax = axis % a.ndim
    n = a.shape[ax]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, ax), a.shape).copy(),)

    return custom_op(a.data.mean(axis=ax), (a,), backward, "mean")


# ---------------------------------------------------------------------------
# normalization and softmax (last axis)


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return custom_op(s, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable log-softmax along the last axis."""
    if a.shape[-1] < 1:
        raise ShapeError("log_softmax requires at least one class")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(g):
        return (g - np.exp(out_data) * g.sum(axis=-1, keepdims=True),)

    return custom_op(out_data, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    if eps <= 0:
        raise ShapeError("layer_norm eps must be > 0")
    d = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xh = (x.data - mean) * inv_std
    out_data = xh * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xh).sum(axis=lead) if lead else g * xh
        dbias = g.sum(axis=lead) if lead else g
        dxh = g * gain.data
        dx = inv_std * (
            dxh
            - dxh.mean(axis=-1, keepdims=True)
            - xh * (dxh * xh).mean(axis=-1, keepdims=True)
        )
        return dx, dgain.reshape(gain.shape), dbias.reshape(bias.shape)

    return custom_op(out_data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# convolution


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel 1-D convolution with zero 'same' padding.

    ``x`` is (T, C), ``kernel`` is (C, K) with K odd; output is (T, C) where
    out[t, c] = sum_j x[t + j - K//2, c] * kernel[c, j].
    """
    if x.ndim != 2 or kernel.ndim != 2:
        raise ShapeError(f"depthwise_conv1d needs 2-D input and kernel, got {x.shape}, {kernel.shape}")
    t_len, channels = x.shape
    k_channels, k = kernel.shape
    if k_channels != channels:
        raise ShapeError(f"kernel channels {k_channels} do not match input channels {channels}")
    if k % 2 == 0:
        raise ShapeError(f"depthwise kernel width must be odd, got {k}")
    pad = k // 2
    xp = np.zeros((t_len + 2 * pad, channels), dtype=x.dtype)
    xp[pad : pad + t_len] = x.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[j : j + t_len] * kernel.data[:, j]

    def backward(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kernel.data)
        for j in range(k):
            dxp[j : j + t_len] += g * kernel.data[:, j]
            dk[:, j] = (g * xp[j : j + t_len]).sum(axis=0)
        return dxp[pad : pad + t_len], dk

    return custom_op(out, (x, kernel), backward, "depthwise_conv1d")


def relative_position_bias(vec: Tensor, length: int) -> Tensor:
    """Expand a per-offset bias vector of size 2R+1 into a (length, length) score matrix.

    Entry (t, s) is vec[clip(s - t, -R, R) + R]; offsets beyond R share the edge bins.
    """
    if vec.ndim != 1 or vec.shape[0] % 2 != 1:
        raise ShapeError(f"relative bias vector must be 1-D with odd size, got {vec.shape}")
    radius = (vec.shape[0] - 1) // 2
    pos = np.arange(length)
    index = np.clip(pos[None, :] - pos[:, None], -radius, radius) + radius

    def backward(g):
        dv = np.zeros_like(vec.data)
        np.add.at(dv, index, g)
        return (dv,)

    return custom_op(vec.data[index], (vec,), backward, "relative_position_bias")


# ---------------------------------------------------------------------------
# regularization


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout with an explicit RNG stream; identity when not training."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ShapeError(f"dropout rate must be < 1, got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# gradient checking


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of fn() w.r.t. every element of ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn().item()
        flat[i] = orig - h
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-8,
    h: float = 1e-5,
) -> None:
    """Assert analytic gradients of fn() match finite differences on ``tensors``.

    ``fn`` must rebuild its graph on every call; tensors should be float64 for
    the default tolerances to be meaningful.
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    for idx, t in enumerate(tensors):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_gradient(fn, t, h=h)
        err = np.abs(analytic - numeric)
        tol = abs_tol + rel_tol * np.maximum(np.abs(analytic), np.abs(numeric))
        if not np.all(err <= tol):
            worst = float((err - tol).max())
            raise AssertionError(
                f"gradient mismatch on tensor {idx} (shape {t.shape}): "
                f"max excess {worst:.3e} over tolerance"
            )
