"""Reverse-mode autodiff over numpy arrays, driven by an explicit tape.

A :class:`Tensor` wraps a float32/float64 numpy array of rank 0..4.  Ops are
plain functions (with operator sugar on the class): when any operand is
tracked by a live :class:`GradTape`, the op appends a backward closure to the
tape; otherwise it is pure numpy with no recording overhead, which is the
fast path used for frozen-teacher forwards and benchmarking.

``tape.backward(loss)`` walks the records newest-first and accumulates into
``Tensor.grad``.  Grads are never cleared implicitly -- the caller zeroes
them (by assigning ``None``) between steps, and a second backward over the
same records accumulates again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, DataError, DimensionError, NumericError

FLOAT_DTYPES = (np.float32, np.float64)
MAX_RANK = 4

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _coerce(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    if arr.ndim > MAX_RANK:
        raise DimensionError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
    return arr


class Tensor:
    """Value carrier: numpy data plus an optional grad and tape membership."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, dtype=None, allow_nonfinite: bool = False):
        arr = _coerce(data, dtype)
        if arr.dtype not in FLOAT_DTYPES:
            raise ContractError(f"dtype must be float32 or float64, got {arr.dtype}")
        if not allow_nonfinite and not np.isfinite(arr).all():
            raise NumericError("tensor constructed with non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tape: GradTape | None = None

    # Trusted constructor for op outputs: skips the finiteness scan.
    @classmethod
    def _make(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.tape = None
        return t

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "Tensor":
        return cls._make(np.zeros(shape, dtype=dtype))

    @classmethod
    def ones(cls, shape, dtype=np.float32) -> "Tensor":
        return cls._make(np.ones(shape, dtype=dtype))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor._make(self.data.copy())

    def astype(self, dtype) -> "Tensor":
        if dtype not in FLOAT_DTYPES:
            raise ContractError(f"dtype must be float32 or float64, got {dtype}")
        return Tensor._make(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # Operator sugar; the module-level functions are the real ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axis1: int = -2, axis2: int = -1) -> "Tensor":
        return transpose(self, axis1, axis2)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)


class GradTape:
    """Ordered record of differentiable ops, replayed in reverse by backward().

    Use as a context manager: ``watch()`` marks leaves, ops on tracked tensors
    record themselves, and leaving the block detaches tensors from the tape
    (records survive, so backward() still works after exit).
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []
        self._tracked: list[Tensor] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "GradTape":
        return self

    def __exit__(self, *exc) -> None:
        for t in self._tracked:
            t.tape = None

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise ContractError(f"watch() takes Tensors, got {type(t).__name__}")
            if t.tape is self:
                continue
            if t.tape is not None:
                raise ContractError("tensor is already tracked by a different tape")
            self._adopt(t)

    def _adopt(self, t: Tensor) -> None:
        t.tape = self
        self._tracked.append(t)
        self._ids.add(id(t))

    def _record(self, out: Tensor, backward_fn) -> None:
        self._adopt(out)
        self._records.append((out, backward_fn))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError("backward() needs a scalar Tensor loss")
        if id(loss) not in self._ids:
            raise ContractError("loss was not produced under this tape")
        _accum(loss, np.ones_like(loss.data))
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _tape_of(*operands) -> GradTape | None:
    tape = None
    for t in operands:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands are tracked by different tapes")
    return tape


def _needs(t, tape) -> bool:
    return tape is not None and isinstance(t, Tensor) and t.tape is tape


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _emit(tape: GradTape | None, arr: np.ndarray, backward_fn=None) -> Tensor:
    out = Tensor._make(arr)
    if tape is not None and backward_fn is not None:
        tape._record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    out_arr = ad + bd
    na, nb = _needs(a, tape), _needs(b, tape)
    if not (na or nb):
        return _emit(tape, out_arr)

    def bw(g):
        if na:
            _accum(a, _unbroadcast(g, ad.shape))
        if nb:
            _accum(b, _unbroadcast(g, bd.shape))

    return _emit(tape, out_arr, bw)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    out_arr = ad - bd
    na, nb = _needs(a, tape), _needs(b, tape)
    if not (na or nb):
        return _emit(tape, out_arr)

    def bw(g):
        if na:
            _accum(a, _unbroadcast(g, ad.shape))
        if nb:
            _accum(b, _unbroadcast(-g, bd.shape))

    return _emit(tape, out_arr, bw)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    out_arr = ad * bd
    na, nb = _needs(a, tape), _needs(b, tape)
    if not (na or nb):
        return _emit(tape, out_arr)

    def bw(g):
        if na:
            _accum(a, _unbroadcast(g * bd, ad.shape))
        if nb:
            _accum(b, _unbroadcast(g * ad, bd.shape))

    return _emit(tape, out_arr, bw)


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    out_arr = ad / bd
    na, nb = _needs(a, tape), _needs(b, tape)
    if not (na or nb):
        return _emit(tape, out_arr)

    def bw(g):
        if na:
            _accum(a, _unbroadcast(g / bd, ad.shape))
        if nb:
            _accum(b, _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _emit(tape, out_arr, bw)


def neg(a) -> Tensor:
    tape = _tape_of(a)
    out_arr = -_data(a)
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    return _emit(tape, out_arr, lambda g: _accum(a, -g))


def exp(a) -> Tensor:
    tape = _tape_of(a)
    out_arr = np.exp(_data(a))
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    return _emit(tape, out_arr, lambda g: _accum(a, g * out_arr))


def log(a) -> Tensor:
    tape = _tape_of(a)
    ad = _data(a)
    if np.any(ad <= 0):
        raise NumericError("log requires strictly positive input")
    out_arr = np.log(ad)
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    return _emit(tape, out_arr, lambda g: _accum(a, g / ad))


def sqrt(a) -> Tensor:
    tape = _tape_of(a)
    ad = _data(a)
    if np.any(ad < 0):
        raise NumericError("sqrt requires non-negative input")
    out_arr = np.sqrt(ad)
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    return _emit(tape, out_arr, lambda g: _accum(a, g * (0.5 / out_arr)))


def power(a, p) -> Tensor:
    if isinstance(p, Tensor):
        raise ContractError("exponent must be a Python scalar")
    p = float(p)
    tape = _tape_of(a)
    ad = _data(a)
    if p != int(p) and np.any(ad < 0):
        raise NumericError("fractional power of negative input")
    out_arr = ad**p
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    return _emit(tape, out_arr, lambda g: _accum(a, g * p * ad ** (p - 1.0)))


def relu(a) -> Tensor:
    tape = _tape_of(a)
    ad = _data(a)
    out_arr = np.maximum(ad, 0)
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    return _emit(tape, out_arr, lambda g: _accum(a, g * (ad > 0)))


def silu(a) -> Tensor:
    tape = _tape_of(a)
    ad = _data(a)
    sig = expit(ad)
    out_arr = ad * sig
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    return _emit(tape, out_arr, lambda g: _accum(a, g * (sig * (1.0 + ad * (1.0 - sig)))))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    tape = _tape_of(a)
    ad = _data(a)
    cdf = 0.5 * (1.0 + erf(ad * _INV_SQRT2))
    out_arr = ad * cdf
    if not _needs(a, tape):
        return _emit(tape, out_arr)

    def bw(g):
        pdf = np.exp(-0.5 * ad * ad) * _INV_SQRT2PI
        _accum(a, g * (cdf + ad * pdf))

    return _emit(tape, out_arr, bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    tape = _tape_of(a)
    ad = _data(a)
    try:
        out_arr = ad.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {ad.shape} to {shape}: {e}") from None
    if out_arr.ndim > MAX_RANK:
        raise DimensionError(f"reshape target rank {out_arr.ndim} exceeds {MAX_RANK}")
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    return _emit(tape, out_arr, lambda g: _accum(a, g.reshape(ad.shape)))


def transpose(a: Tensor, axis1: int = -2, axis2: int = -1) -> Tensor:
    tape = _tape_of(a)
    ad = _data(a)
    if ad.ndim < 2:
        raise DimensionError("transpose needs rank >= 2")
    out_arr = np.swapaxes(ad, axis1, axis2)
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    return _emit(tape, out_arr, lambda g: _accum(a, np.swapaxes(g, axis1, axis2)))


def permute(a: Tensor, idx, axis: int = -2) -> Tensor:
    """Gather along `axis` with a bijective index vector (a permutation)."""
    tape = _tape_of(a)
    ad = _data(a)
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("permutation must be a 1-D integer array")
    n = ad.shape[axis]
    if idx.shape[0] != n or not np.array_equal(np.sort(idx), np.arange(n)):
        raise ContractError(f"index vector is not a permutation of range({n})")
    out_arr = np.take(ad, idx, axis=axis)
    if not _needs(a, tape):
        return _emit(tape, out_arr)
    inverse = np.argsort(idx)
    return _emit(tape, out_arr, lambda g: _accum(a, np.take(g, inverse, axis=axis)))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    tape = _tape_of(a)
    ad = _data(a)
    axis = axis if axis >= 0 else ad.ndim + axis
    if not 0 <= axis < ad.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ad.ndim}")
    if length <= 0 or start < 0 or start + length > ad.shape[axis]:
        raise DimensionError(
            f"slice [{start}, {start + length}) out of bounds for extent {ad.shape[axis]}"
        )
    sl = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(ad.ndim))
    out_arr = ad[sl].copy()
    if not _needs(a, tape):
        return _emit(tape, out_arr)

    def bw(g):
        full = np.zeros_like(ad)
        full[sl] = g
        _accum(a, full)

    return _emit(tape, out_arr, bw)


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat needs at least one tensor")
    tape = _tape_of(*parts)
    datas = [_data(p) for p in parts]
    out_arr = np.concatenate(datas, axis=axis)
    needs = [_needs(p, tape) for p in parts]
    if not any(needs):
        return _emit(tape, out_arr)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, need, lo, hi in zip(parts, needs, offsets[:-1], offsets[1:]):
            if need:
                sl = tuple(
                    slice(None) if i != (axis % g.ndim) else slice(lo, hi) for i in range(g.ndim)
                )
                _accum(p, g[sl])

    return _emit(tape, out_arr, bw)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(a)
    ad = _data(a)
    axes = _norm_axis(axis, ad.ndim)
    out_arr = ad.sum(axis=axes, keepdims=keepdims)
    if not _needs(a, tape):
        return _emit(tape, out_arr)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accum(a, np.broadcast_to(g, ad.shape))

    return _emit(tape, out_arr, bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    tape = _tape_of(a)
    ad = _data(a)
    axes = _norm_axis(axis, ad.ndim)
    count = int(np.prod([ad.shape[i] for i in axes])) if axes else 1
    out_arr = ad.mean(axis=axes, keepdims=keepdims)
    if not _needs(a, tape):
        return _emit(tape, out_arr)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        _accum(a, np.broadcast_to(g, ad.shape) / count)

    return _emit(tape, out_arr, bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul operands need rank >= 2 (reshape 1-D operands first)")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {ad.shape} @ {bd.shape}")
    if ad.ndim == bd.ndim and ad.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"batch dimensions differ: {ad.shape} vs {bd.shape}")
    if bd.ndim > ad.ndim:
        raise DimensionError("stacked rhs with 2-D lhs is not supported; transpose the product")
    out_arr = ad @ bd
    na, nb = _needs(a, tape), _needs(b, tape)
    if not (na or nb):
        return _emit(tape, out_arr)

    def bw(g):
        if na:
            _accum(a, g @ np.swapaxes(bd, -1, -2))
        if nb:
            if bd.ndim == ad.ndim:
                _accum(b, np.swapaxes(ad, -1, -2) @ g)
            else:
                # lhs is stacked, rhs is a shared 2-D matrix: fold batches.
                k, n = ad.shape[-1], g.shape[-1]
                _accum(b, ad.reshape(-1, k).T @ g.reshape(-1, n))

    return _emit(tape, out_arr, bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    tape = _tape_of(a)
    ad = _data(a)
    if np.isnan(ad).any():
        raise NumericError("softmax input contains NaN")
    z = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_arr = e / e.sum(axis=axis, keepdims=True)
    if not _needs(a, tape):
        return _emit(tape, out_arr)

    def bw(g):
        inner = (g * out_arr).sum(axis=axis, keepdims=True)
        _accum(a, out_arr * (g - inner))

    return _emit(tape, out_arr, bw)


def softmax_rows(a: Tensor) -> Tensor:
    if _data(a).ndim != 2:
        raise DimensionError("softmax_rows expects a rank-2 tensor")
    return softmax(a, axis=-1)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift (biased variance)."""
    tape = _tape_of(a, gamma, beta)
    ad, gd, bd = _data(a), _data(gamma), _data(beta)
    d = ad.shape[-1]
    if gd.shape != (d,) or bd.shape != (d,):
        raise DimensionError(f"gamma/beta must have shape ({d},), got {gd.shape} and {bd.shape}")
    mu = ad.mean(axis=-1, keepdims=True)
    xc = ad - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_arr = xhat * gd + bd
    na, ng, nb = _needs(a, tape), _needs(gamma, tape), _needs(beta, tape)
    if not (na or ng or nb):
        return _emit(tape, out_arr)

    def bw(g):
        if nb:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if ng:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if na:
            dxhat = g * gd
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(
                axis=-1, keepdims=True
            )
            _accum(a, inv * term)

    return _emit(tape, out_arr, bw)


def depthwise_conv2d(x: Tensor, kernels: Tensor, grid: tuple[int, int]) -> Tensor:
    """Per-sample, per-channel k x k convolution on a token grid.

    x: (B, N, C) tokens laid out row-major on grid (Hp, Wp); kernels:
    (B, C, k, k) with odd k.  Zero padding keeps the output shape (B, N, C);
    kernel entry [u, v] weights the neighbour at offset (u - k//2, v - k//2).
    """
    tape = _tape_of(x, kernels)
    xd, kd = _data(x), _data(kernels)
    if xd.ndim != 3 or kd.ndim != 4:
        raise DimensionError(f"expected x rank 3 and kernels rank 4, got {xd.ndim} and {kd.ndim}")
    B, N, C = xd.shape
    Hp, Wp = grid
    if Hp * Wp != N:
        raise DimensionError(f"grid {grid} does not tile {N} tokens")
    if kd.shape[:2] != (B, C) or kd.shape[2] != kd.shape[3]:
        raise DimensionError(f"kernels must be (B, C, k, k) = ({B}, {C}, k, k), got {kd.shape}")
    k = kd.shape[2]
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    r = k // 2
    xg = xd.reshape(B, Hp, Wp, C)
    xpad = np.pad(xg, ((0, 0), (r, r), (r, r), (0, 0)))
    out = np.zeros_like(xg)
    for u in range(k):
        for v in range(k):
            out += xpad[:, u : u + Hp, v : v + Wp, :] * kd[:, :, u, v][:, None, None, :]
    out_arr = out.reshape(B, N, C)
    nx, nk = _needs(x, tape), _needs(kernels, tape)
    if not (nx or nk):
        return _emit(tape, out_arr)

    def bw(g):
        gg = g.reshape(B, Hp, Wp, C)
        if nx:
            dxpad = np.zeros_like(xpad)
            for u in range(k):
                for v in range(k):
                    dxpad[:, u : u + Hp, v : v + Wp, :] += gg * kd[:, :, u, v][:, None, None, :]
            _accum(x, dxpad[:, r : r + Hp, r : r + Wp, :].reshape(B, N, C))
        if nk:
            dk = np.zeros_like(kd)
            for u in range(k):
                for v in range(k):
                    dk[:, :, u, v] = (gg * xpad[:, u : u + Hp, v : v + Wp, :]).sum(axis=(1, 2))
            _accum(kernels, dk)

    return _emit(tape, out_arr, bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax."""
    tape = _tape_of(logits)
    ld = _data(logits)
    y = np.asarray(labels)
    if ld.ndim != 2:
        raise DimensionError(f"logits must be rank 2, got shape {ld.shape}")
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise ContractError("labels must be a 1-D integer array")
    M, C = ld.shape
    if y.shape[0] != M:
        raise DimensionError(f"{y.shape[0]} labels for {M} rows")
    if y.min() < 0 or y.max() >= C:
        raise DataError(f"labels outside [0, {C})")
    z = ld - ld.max(axis=1, keepdims=True)
    logZ = np.log(np.exp(z).sum(axis=1, keepdims=True))
    ll = z[np.arange(M), y] - logZ[:, 0]
    out_arr = np.asarray(-ll.mean(), dtype=ld.dtype)
    if not _needs(logits, tape):
        return _emit(tape, out_arr)

    def bw(g):
        p = np.exp(z - logZ)
        p[np.arange(M), y] -= 1.0
        _accum(logits, (float(g) / M) * p)

    return _emit(tape, out_arr, bw)


def activations(a, kind: str) -> Tensor:
    """Elementwise nonlinearity dispatch: kind in {relu, silu, gelu}."""
    try:
        return {"relu": relu, "silu": silu, "gelu": gelu}[kind](a)
    except KeyError:
        raise ContractError(f"unknown activation kind {kind!r}") from None


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    if _data(a).shape != _data(b).shape:
        raise DimensionError(f"mse operands differ: {_data(a).shape} vs {_data(b).shape}")
    d = sub(a, b)
    return reduce_mean(mul(d, d))


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(fn, params, h: float = 1e-5) -> float:
    """Compare tape gradients of scalar fn(*params) against central differences.

    float64 params only; returns max over coordinates of
    |fd - g| / (|g| + 1e-8).
    """
    if h <= 0:
        raise ContractError(f"h must be positive, got {h}")
    params = list(params)
    for p in params:
        if not isinstance(p, Tensor) or p.dtype != np.float64:
            raise ContractError("grad_check requires float64 Tensor params")
    with GradTape() as tape:
        tape.watch(*params)
        loss = fn(*params)
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError("fn must return a scalar Tensor")
        tape.backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn(*params).item()
            flat[i] = orig - h
            f_minus = fn(*params).item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(fd - gflat[i]) / (abs(gflat[i]) + 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step count."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params,
    grads,
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update, applied to params in place.

    In-place mutation of ``param.data`` is load-bearing: modules that share
    parameter objects (weight-shared trunks) all observe the update.
    """
    if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
        raise ContractError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
    if lr < 0 or eps <= 0:
        raise ContractError(f"need lr >= 0 and eps > 0, got lr={lr}, eps={eps}")
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError(
            f"mismatched lengths: {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} state slots"
        )
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = _data(g)
        if g.shape != p.data.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state
