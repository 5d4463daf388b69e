"""Dense float32 tensors with a replayable reverse-mode gradient tape.

Every array in this package flows through :class:`Tensor`: a thin wrapper
around a C-contiguous float32 ndarray that validates finiteness after each
operation. When a :class:`GradientTape` is active, operations additionally
record themselves so :func:`backward` can replay adjoints in exact reverse
order. Without an active tape the same functions are plain numpy compute.

Determinism notes
-----------------
* All operations are pure numpy; identical inputs give bitwise-identical
  outputs (and gradients, on tape replay).
* Batched matmul keeps leading dimensions as numpy stack dimensions so the
  per-slice GEMM is independent of batch size. Code elsewhere relies on this
  for bitwise batch equivariance; do not flatten batch dims into the GEMM.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def _require_finite(arr: np.ndarray, where: str) -> None:
    # min+max is NaN-propagating and reduces without a bool temporary; the
    # float64 sum cannot overflow from float32-range values
    if arr.size == 0:
        return
    with np.errstate(invalid="ignore"):
        probe = float(arr.min()) + float(arr.max())
    if not math.isfinite(probe):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """Immutable dense float32 array, optionally a named leaf parameter."""

    __slots__ = ("array", "name")

    def __init__(self, array, name: str | None = None, _trusted: bool = False):
        arr = np.ascontiguousarray(array, dtype=DTYPE)
        if not _trusted:
            _require_finite(arr, "Tensor()")
        self.array = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(())[()])

    def copy(self) -> "Tensor":
        return Tensor(self.array.copy(), name=self.name, _trusted=True)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)


def parameter(array, name: str) -> Tensor:
    """A named leaf tensor; gradients are reported under this name."""
    return Tensor(array, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DTYPE), _trusted=False)


# ---------------------------------------------------------------------------
# gradient tape

_ACTIVE_TAPE: "GradientTape | None" = None


class GradientTape:
    """Ordered record of primitive ops, replayed in reverse by backward().

    Single-owner and single-threaded; build a fresh tape per forward pass.
    """

    def __init__(self):
        # entries: (output tensor, input tensors, backward fn)
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._out_ids: set[int] = set()

    def __enter__(self) -> "GradientTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a GradientTape is already recording")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._nodes)


def _quiet():
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


def _emit(out_array: np.ndarray, inputs: tuple[Tensor, ...], bw: Callable, opname: str) -> Tensor:
    _require_finite(out_array, opname)
    out = Tensor(out_array, _trusted=True)
    tape = _ACTIVE_TAPE
    if tape is not None:
        tape._nodes.append((out, inputs, bw))
        tape._out_ids.add(id(out))
    return out


def backward(tape: GradientTape, loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar loss w.r.t. every named leaf on the tape.

    Visits nodes in exact reverse construction order (reverse topological,
    since every op's inputs precede it). Replaying the same tape yields
    bitwise-identical gradients.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._out_ids:
        raise ValueError("loss was not produced while recording on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[str, tuple[Tensor, None]] = {}
    for out, inputs, bw in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, bw(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.name is not None and id(inp) not in tape._out_ids:
                leaves.setdefault(inp.name, (inp, None))

    result: dict[str, Tensor] = {}
    for name, (leaf, _) in leaves.items():
        g = grads.get(id(leaf))
        if g is None:
            continue
        _require_finite(g, f"gradient of {name}")
        result[name] = Tensor(np.ascontiguousarray(g, dtype=DTYPE), _trusted=True)
    return result


# ---------------------------------------------------------------------------
# primitive operations


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(DTYPE, copy=False)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with _quiet():
        out = a.array + b.array

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with _quiet():
        out = a.array - b.array

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with _quiet():
        out = a.array * b.array

    def bw(g):
        return _unbroadcast(g * b.array, a.shape), _unbroadcast(g * a.array, b.shape)

    return _emit(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with _quiet():
        out = a.array / b.array

    def bw(g):
        ga = g / b.array
        gb = -g * a.array / (b.array * b.array)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return (-g,)

    return _emit(-a.array, (a,), bw, "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when inputs carry equal leading dims.

    Supported: 2-D @ 2-D, N-D @ 2-D (shared weight), and N-D @ N-D with
    identical leading dimensions. Anything else is a shape error.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.array.ndim < 2 or b.array.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.array.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.array, b.array)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.array, -1, -2))
        if b.array.ndim == 2 and a.array.ndim > 2:
            k = a.shape[-1]
            n = g.shape[-1]
            gb = np.matmul(a.array.reshape(-1, k).T, g.reshape(-1, n))
        else:
            gb = np.matmul(np.swapaxes(a.array, -1, -2), g)
        return ga.astype(DTYPE, copy=False), gb.astype(DTYPE, copy=False)

    return _emit(out, (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    out = a.array.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _emit(np.ascontiguousarray(out), (a,), bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _emit(np.ascontiguousarray(a.array.transpose(axes)), (a,), bw, "transpose")


def concat(tensors: Iterable[Tensor], axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t.array for t in ts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _emit(out, tuple(ts), bw, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow [{start}:{start + length}) outside axis {axis} of {a.shape}")
    idx = [slice(None)] * a.array.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _emit(np.ascontiguousarray(a.array[idx]), (a,), bw, "narrow")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.array.sum(axis=axis, keepdims=keepdims, dtype=DTYPE)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(DTYPE, copy=True),)

    return _emit(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    out = a.array.mean(axis=axis, keepdims=keepdims, dtype=DTYPE)
    inv = DTYPE(1.0 / count)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, a.shape).astype(DTYPE, copy=True),)

    return _emit(np.asarray(out, dtype=DTYPE), (a,), bw, "mean")


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with _quiet():
        out = np.exp(a.array)

    def bw(g):
        return (g * out,)

    return _emit(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with _quiet():
        out = np.log(a.array)

    def bw(g):
        return (g / a.array,)

    return _emit(out, (a,), bw, "log")


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.array)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _emit(out, (a,), bw, "tanh")


_GELU_C = DTYPE(math.sqrt(2.0 / math.pi))
_GELU_K = DTYPE(0.044715)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.array
    with _quiet():
        u = x * x
        np.multiply(u, x, out=u)
        np.multiply(u, _GELU_K, out=u)
        np.add(u, x, out=u)
        np.multiply(u, _GELU_C, out=u)
        th = np.tanh(u, out=u)
        half = DTYPE(0.5) * x
        out = half * (1.0 + th)

    def bw(g):
        with _quiet():
            du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
            d = DTYPE(0.5) * (1.0 + th) + half * (1.0 - th * th) * du
        return (g * d,)

    return _emit(out, (a,), bw, "gelu")


def take_rows(table: Tensor, indices) -> Tensor:
    """Row gather (embedding lookup); gradient scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("take_rows indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"take_rows index out of range for table of {table.shape[0]} rows")
    out = table.array[idx]

    def bw(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(np.ascontiguousarray(out), (table,), bw, "take_rows")


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, optional affine."""
    a = _as_tensor(a)
    x = a.array
    with _quiet():
        mu = x.mean(axis=-1, keepdims=True, dtype=DTYPE)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=DTYPE)
        inv = 1.0 / np.sqrt(var + DTYPE(eps))
        xhat = xc * inv
    n = x.shape[-1]

    if gain is None:
        out = xhat

        def bw(g):
            gm = g.mean(axis=-1, keepdims=True, dtype=DTYPE)
            gxm = (g * xhat).mean(axis=-1, keepdims=True, dtype=DTYPE)
            return ((g - gm - xhat * gxm) * inv,)

        return _emit(out, (a,), bw, "layer_norm")

    gain = _as_tensor(gain)
    bias_t = _as_tensor(bias) if bias is not None else None
    out = xhat * gain.array
    if bias_t is not None:
        out = out + bias_t.array

    def bw(g):
        ggain = (g * xhat).reshape(-1, n).sum(axis=0, dtype=DTYPE)
        gb = g.reshape(-1, n).sum(axis=0, dtype=DTYPE) if bias_t is not None else None
        gx = g * gain.array
        gm = gx.mean(axis=-1, keepdims=True, dtype=DTYPE)
        gxm = (gx * xhat).mean(axis=-1, keepdims=True, dtype=DTYPE)
        ga = (gx - gm - xhat * gxm) * inv
        if bias_t is None:
            return ga, ggain
        return ga, ggain, gb

    inputs = (a, gain) if bias_t is None else (a, gain, bias_t)
    return _emit(out, inputs, bw, "layer_norm")


def softmax_rows(a: Tensor, temperature: float = 1.0) -> Tensor:
    """Row softmax over the last axis of exp(temperature * x), max-subtracted.

    Rows sum to 1 within float32 tolerance; entries lie in [0, 1].
    """
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    a = _as_tensor(a)
    with _quiet():
        z = DTYPE(temperature) * a.array
        np.subtract(z, z.max(axis=-1, keepdims=True), out=z)
        np.exp(z, out=z)
        np.divide(z, z.sum(axis=-1, keepdims=True, dtype=DTYPE), out=z)
        out = z

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True, dtype=DTYPE)
        return (DTYPE(temperature) * out * (g - dot),)

    return _emit(out, (a,), bw, "softmax_rows")


def logsumexp(a: Tensor, beta: float = 1.0) -> Tensor:
    """Sharpness-controlled log-sum-exp of a vector:  beta^-1 log sum_i exp(beta*x_i).

    Max-subtracted for stability; returns a scalar tensor.
    """
    if beta <= 0:
        raise ValueError(f"logsumexp beta must be positive, got {beta}")
    a = _as_tensor(a)
    if a.size == 0:
        raise ValueError("logsumexp of an empty tensor")
    x = a.array.reshape(-1)
    m = x.max()
    e = np.exp(DTYPE(beta) * (x - m))
    s = e.sum(dtype=DTYPE)
    out = np.asarray(m + np.log(s) / DTYPE(beta), dtype=DTYPE)

    def bw(g):
        return ((g.reshape(()) * (e / s)).reshape(a.shape),)

    return _emit(out.reshape(()), (a,), bw, "logsumexp")
