"""Attention kernels and the dynamic depthwise convolution.

Three interchangeable token mixers over a (Hp, Wp) token grid:

* ``full_attention``    -- softmax(QK^T/sqrt(d))V per head, O(N^2) pairs.
* ``window_attention``  -- the same, restricted to non-overlapping w x w
  windows (no shifting, no padding; the grid must divide evenly).
* ``relu_linear_attention`` -- kernelized attention with phi = ReLU computed
  in reordered O(N*d^2) form: the N x N map is never materialized, and rows
  are normalized by phi(Q_i) . sum_j phi(K_j) + eps.

Plus ``squeeze_dynamic_conv``: a depthwise k x k convolution whose per-channel
kernels are generated from the token-mean of V by a two-layer SiLU MLP, and
``jetvit_linear_block`` which sums the linear-attention and conv branches.

Public entry points take an :class:`AttentionInputs` holding a single instance
(N, d_model); the underscore-prefixed cores also accept batches
(B, N, d_model) and are what the model layer calls, so oracle tests exercise
the exact code path used end to end.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .rng import Rng
from .tensor import Tensor

# Query rows per chunk in full attention; bounds the materialized score block
# to chunk*N floats so large-N benchmarks fit in memory.  N <= _ROW_CHUNK
# takes the single-chunk path.
_ROW_CHUNK = 1024


@dataclass
class AttentionInputs:
    """Q, K, V for one token sequence plus head count and grid geometry."""

    q: Tensor
    k: Tensor
    v: Tensor
    heads: int
    grid: tuple[int, int]

    def __post_init__(self):
        shapes = {self.q.shape, self.k.shape, self.v.shape}
        if len(shapes) != 1:
            raise DimensionError(f"Q/K/V shapes differ: {sorted(shapes)}")
        if self.q.ndim != 2:
            raise DimensionError(f"AttentionInputs carries one (N, d_model) instance, got rank {self.q.ndim}")
        n, dm = self.q.shape
        if self.heads < 1 or dm % self.heads != 0:
            raise ConfigError(f"d_model={dm} not divisible by heads={self.heads}")
        hp, wp = self.grid
        if hp * wp != n:
            raise DimensionError(f"grid {self.grid} does not tile {n} tokens")
        for name, t in (("Q", self.q), ("K", self.k), ("V", self.v)):
            if not np.isfinite(t.data).all():
                raise NumericError(f"{name} contains non-finite values")


@dataclass
class SqueezeConvParams:
    """Kernel-generator MLP: k x k depthwise kernels from the V token mean."""

    w1: Tensor  # (hidden, d_model)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (d_model * k*k, hidden)
    b2: Tensor  # (d_model * k*k,)
    k: int
    hidden: int

    def __post_init__(self):
        if self.k % 2 == 0 or self.k < 1:
            raise ConfigError(f"kernel size must be odd and positive, got {self.k}")
        d_model = self.w1.shape[1]
        want = {
            "w1": (self.hidden, d_model),
            "b1": (self.hidden,),
            "w2": (d_model * self.k * self.k, self.hidden),
            "b2": (d_model * self.k * self.k,),
        }
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name} must have shape {shape}, got {got}")

    @property
    def d_model(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]


@dataclass
class FocusingParams:
    """Sharpening exponent for the rectified linear-attention features."""

    p: float = 3.0

    def __post_init__(self):
        if not np.isfinite(self.p) or self.p <= 0:
            raise ConfigError(f"focusing exponent must be finite and > 0, got {self.p}")


def default_conv_hidden(d_model: int) -> int:
    return max(8, d_model // 4)


def init_squeeze_params(
    rng: Rng, d_model: int, k: int = 3, hidden: int | None = None, dtype=np.float32
) -> SqueezeConvParams:
    """Documented init: small-random first layer, zero second layer, delta
    bias -- the conv branch starts as (approximately) the identity map."""
    hidden = default_conv_hidden(d_model) if hidden is None else hidden
    w1 = Tensor(rng.normal((hidden, d_model), std=0.02), dtype=dtype)
    b1 = Tensor(rng.normal((hidden,), std=0.02), dtype=dtype)
    w2 = Tensor.zeros((d_model * k * k, hidden), dtype=dtype)
    b2 = np.zeros(d_model * k * k, dtype=dtype)
    center = (k // 2) * k + (k // 2)
    b2[np.arange(d_model) * k * k + center] = 1.0
    return SqueezeConvParams(w1, b1, w2, Tensor(b2), k=k, hidden=hidden)


# ---------------------------------------------------------------------------
# head plumbing (rank 2 instances are lifted to batch size 1)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        n, dm = x.shape
        return T.reshape(x, (1, n, dm)), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"expected rank 2 or 3, got {x.ndim}")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, dm = x.shape
    if dm % heads != 0:
        raise ConfigError(f"d_model={dm} not divisible by heads={heads}")
    return T.transpose(T.reshape(x, (b, n, heads, dm // heads)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return T.reshape(T.transpose(x, -3, -2), (b, n, h * d))


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    if squeeze:
        _, n, dm = x.shape
        return T.reshape(x, (n, dm))
    return x


# ---------------------------------------------------------------------------
# full attention


def _full_attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """softmax(QK^T/sqrt(d))V on (B, N, d_model) operands."""
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    d = qh.shape[-1]
    scale = 1.0 / float(np.sqrt(d))
    kt = T.transpose(kh)
    n = qh.shape[-2]

    def block(qc: Tensor) -> Tensor:
        scores = T.matmul(T.mul(qc, scale), kt)
        return T.matmul(T.softmax(scores, axis=-1), vh)

    if n <= _ROW_CHUNK:
        out = block(qh)
    else:
        parts = []
        for start in range(0, n, _ROW_CHUNK):
            length = min(_ROW_CHUNK, n - start)
            parts.append(block(T.narrow(qh, -2, start, length)))
        out = T.concat(parts, axis=-2)
    return _merge_heads(out)


def full_attention(inp: AttentionInputs) -> Tensor:
    q, squeeze = _batched(inp.q)
    k, _ = _batched(inp.k)
    v, _ = _batched(inp.v)
    return _unbatch(_full_attention_core(q, k, v, inp.heads), squeeze)


# ---------------------------------------------------------------------------
# window attention


@functools.lru_cache(maxsize=64)
def _window_permutations(hp: int, wp: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """(gather, scatter) index vectors between raster order and window order."""
    order = np.empty(hp * wp, dtype=np.int64)
    pos = 0
    for wy in range(hp // w):
        for wx in range(wp // w):
            for py in range(w):
                for px in range(w):
                    order[pos] = (wy * w + py) * wp + (wx * w + px)
                    pos += 1
    return order, np.argsort(order)


def window_order_permutation(grid: tuple[int, int], w: int) -> np.ndarray:
    """Token permutation that makes each w x w window a contiguous run."""
    hp, wp = grid
    if w < 1 or hp % w != 0 or wp % w != 0:
        raise ConfigError(f"window {w} does not divide grid {grid}")
    return _window_permutations(hp, wp, w)[0]


def _window_attention_core(
    q: Tensor, k: Tensor, v: Tensor, heads: int, grid: tuple[int, int], w: int
) -> Tensor:
    hp, wp = grid
    if w < 1 or hp % w != 0 or wp % w != 0:
        raise ConfigError(f"window {w} does not divide grid {grid}")
    b, n, dm = q.shape
    gather, scatter = _window_permutations(hp, wp, w)
    nwin = (hp // w) * (wp // w)

    def partition(x: Tensor) -> Tensor:
        return T.reshape(T.permute(x, gather, axis=-2), (b * nwin, w * w, dm))

    out = _full_attention_core(partition(q), partition(k), partition(v), heads)
    return T.permute(T.reshape(out, (b, n, dm)), scatter, axis=-2)


def window_attention(inp: AttentionInputs, w: int) -> Tensor:
    q, squeeze = _batched(inp.q)
    k, _ = _batched(inp.k)
    v, _ = _batched(inp.v)
    return _unbatch(_window_attention_core(q, k, v, inp.heads, inp.grid, w), squeeze)


# ---------------------------------------------------------------------------
# reordered ReLU linear attention


def _la_denominator(phi_q: Tensor, key_sum: Tensor, eps: float) -> Tensor:
    """Row normalizer phi(Q_i) . sum_j phi(K_j) + eps; (B, h, N, 1)."""
    return T.add(T.matmul(phi_q, T.transpose(key_sum)), eps)


def _relu_linear_attention_core(
    q: Tensor, k: Tensor, v: Tensor, heads: int, eps: float
) -> Tensor:
    if not eps > 0:
        raise ConfigError(f"eps must be > 0, got {eps}")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    phi_q = T.relu(qh)
    phi_k = T.relu(kh)
    kv = T.matmul(T.transpose(phi_k), vh)  # (B, h, d, d): the reordering
    key_sum = T.reduce_sum(phi_k, axis=-2, keepdims=True)  # (B, h, 1, d)
    numer = T.matmul(phi_q, kv)
    denom = _la_denominator(phi_q, key_sum, eps)
    return _merge_heads(T.div(numer, denom))


def relu_linear_attention(inp: AttentionInputs, eps: float = 1e-6) -> Tensor:
    q, squeeze = _batched(inp.q)
    k, _ = _batched(inp.k)
    v, _ = _batched(inp.v)
    return _unbatch(_relu_linear_attention_core(q, k, v, inp.heads, eps), squeeze)


def focusing_kernel(x: Tensor, fp: FocusingParams | float = 3.0) -> Tensor:
    """Sharpen rectified rows: y = (|x| / |x^p|) * x^p, norm-preserving.

    Rows whose elementwise power is all zero pass through unchanged (they are
    all-zero rows under the rectified-input precondition).  p = 1 is the
    identity bit for bit.
    """
    if not isinstance(fp, FocusingParams):
        fp = FocusingParams(float(fp))
    xp = T.power(x, fp.p)
    nx = T.sqrt(T.reduce_sum(T.mul(x, x), axis=-1, keepdims=True))
    nxp = T.sqrt(T.reduce_sum(T.mul(xp, xp), axis=-1, keepdims=True))
    # Constant +1 on exactly-zero rows keeps the division defined; those rows
    # are zero anyway, so the output there is 0 = x.
    safe = T.add(nxp, (nxp.data == 0).astype(nxp.dtype))
    return T.mul(T.div(nx, safe), xp)


# ---------------------------------------------------------------------------
# squeeze dynamic convolution


def _squeeze_dynamic_conv_core(
    v: Tensor, grid: tuple[int, int], params: SqueezeConvParams
) -> Tensor:
    b, n, dm = v.shape
    if dm != params.d_model:
        raise DimensionError(f"params are for d_model={params.d_model}, got {dm}")
    hp, wp = grid
    if hp * wp != n:
        raise DimensionError(f"grid {grid} does not tile {n} tokens")
    pool = T.reduce_mean(v, axis=-2)  # (B, d_model)
    hidden = T.silu(T.add(T.matmul(pool, T.transpose(params.w1)), params.b1))
    flat = T.add(T.matmul(hidden, T.transpose(params.w2)), params.b2)  # (B, dm*k*k)
    kernels = T.reshape(flat, (b, dm, params.k, params.k))
    return T.depthwise_conv2d(v, kernels, grid)


def squeeze_dynamic_conv(v: Tensor, grid: tuple[int, int], params: SqueezeConvParams) -> Tensor:
    v3, squeeze = _batched(v)
    return _unbatch(_squeeze_dynamic_conv_core(v3, grid, params), squeeze)


def _jetvit_linear_block_core(
    q: Tensor, k: Tensor, v: Tensor, heads: int, grid: tuple[int, int],
    params: SqueezeConvParams, eps: float,
) -> Tensor:
    attn = _relu_linear_attention_core(q, k, v, heads, eps)
    conv = _squeeze_dynamic_conv_core(v, grid, params)
    return T.add(attn, conv)


def jetvit_linear_block(
    inp: AttentionInputs, params: SqueezeConvParams, eps: float = 1e-6
) -> Tensor:
    """Linear attention plus the dynamic-conv branch on the full-width V."""
    q, squeeze = _batched(inp.q)
    k, _ = _batched(inp.k)
    v, _ = _batched(inp.v)
    out = _jetvit_linear_block_core(q, k, v, inp.heads, inp.grid, params, eps)
    return _unbatch(out, squeeze)


# ---------------------------------------------------------------------------
# FLOP model (1 multiply-add = 2 FLOPs, exact integers)

KINDS = ("linear", "window", "full")


def attention_flops(
    kind: str,
    n: int,
    d_model: int,
    heads: int = 1,
    w: int | None = None,
    k: int = 3,
    h_gen: int | None = None,
    include_squeeze: bool = False,
) -> int:
    """Exact FLOPs for one attention block: QKVO projections plus the mixer.

    Per-kind mixer terms: full 4*N^2*d, window 4*N*w^2*d, linear 4*N*d^2.
    The dynamic-conv add-on is *not* folded into the linear total unless
    ``include_squeeze`` is set; see :func:`squeeze_conv_flops`.
    """
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    if min(n, d_model, heads) < 1:
        raise ConfigError(f"n, d_model, heads must be positive, got {(n, d_model, heads)}")
    proj = 8 * n * d_model * d_model
    if kind == "full":
        mixer = 4 * n * n * d_model
    elif kind == "window":
        if w is None or w < 1:
            raise ConfigError("window kind needs a positive window side w")
        mixer = 4 * n * w * w * d_model
    else:
        mixer = 4 * n * d_model * d_model
    total = proj + mixer
    if include_squeeze:
        if kind != "linear":
            raise ConfigError("the squeeze-conv add-on applies to linear blocks only")
        total += squeeze_conv_flops(n, d_model, k, h_gen)
    return total


def squeeze_conv_flops(n: int, d_model: int, k: int = 3, h_gen: int | None = None) -> int:
    """Dynamic-conv branch: depthwise conv 2*N*d*k^2 plus the generator MLP
    2*h_gen*d*(1+k^2) (the latter is independent of N)."""
    if min(n, d_model, k) < 1:
        raise ConfigError(f"n, d_model, k must be positive, got {(n, d_model, k)}")
    h_gen = default_conv_hidden(d_model) if h_gen is None else h_gen
    if h_gen < 1:
        raise ConfigError(f"h_gen must be positive, got {h_gen}")
    return 2 * n * d_model * k * k + 2 * h_gen * d_model * (1 + k * k)
