"""Wall-clock scaling benchmarks for the three token mixers.

Times the mixer cores alone (no projections, no MLP) on seeded random
inputs so different kinds see byte-identical tensors at a given size.
BLAS threads are pinned to one for the timed region; without that,
thread-count autotuning makes small-N medians noisy and the fitted
exponents drift between runs.
"""

from __future__ import annotations

import statistics
import time
import warnings
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DataError, DimensionError
from .kernels import (
    _full_attention_core,
    _relu_linear_attention_core,
    _window_attention_core,
    attention_flops,
)
from .rng import Rng
from .tensor import Tensor
from .vit import LA_EPS

BENCH_KINDS = ("linear", "window", "full")

# Medians below 10x the clock tick are mostly quantization noise.
_TIMER_SAFETY = 10.0


@dataclass(frozen=True)
class BenchResult:
    kind: str
    n: int
    d_model: int
    median_ms: float
    min_ms: float
    flops: int
    reps: int
    timer_warning: bool


def near_square_grid(n: int) -> tuple[int, int]:
    """Factor n into (gh, gw), gh <= gw, as close to square as divisors allow."""
    if n < 1:
        raise DimensionError(f"token count must be positive, got {n}")
    gh = int(np.sqrt(n))
    while gh > 1 and n % gh != 0:
        gh -= 1
    return gh, n // gh


def _seeded_inputs(n: int, d_model: int, seed: int, dtype=np.float32):
    rng = Rng(seed, stream=0xBE7C)
    q = Tensor(rng.normal((1, n, d_model)).astype(dtype))
    k = Tensor(rng.normal((1, n, d_model)).astype(dtype))
    v = Tensor(rng.normal((1, n, d_model)).astype(dtype))
    return q, k, v


def time_forward(
    kind: str,
    n: int,
    d_model: int,
    heads: int = 1,
    window: int = 8,
    reps: int = 5,
    warmup: int = 1,
    seed: int = 0,
    dtype=np.float32,
) -> BenchResult:
    """Median/min wall time of one mixer forward at the given size.

    Warmup repetitions run first and are excluded.  The result carries a
    timer_warning flag (also emitted as a Python warning) when the median
    is within 10x of the perf_counter resolution and should not be trusted
    for exponent fits.
    """
    if kind not in BENCH_KINDS:
        raise ConfigError(f"unknown mixer kind {kind!r}; expected one of {BENCH_KINDS}")
    if reps < 1 or warmup < 0:
        raise ConfigError(f"need reps >= 1 and warmup >= 0, got {reps}, {warmup}")
    if d_model % heads != 0:
        raise DimensionError(f"d_model {d_model} not divisible by heads {heads}")

    q, k, v = _seeded_inputs(n, d_model, seed, dtype)
    grid = near_square_grid(n)
    if kind == "window" and (grid[0] % window or grid[1] % window):
        raise DimensionError(f"window {window} does not tile grid {grid} for n={n}")

    def run():
        if kind == "full":
            return _full_attention_core(q, k, v, heads)
        if kind == "window":
            return _window_attention_core(q, k, v, heads, grid, window)
        return _relu_linear_attention_core(q, k, v, heads, LA_EPS)

    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            run()
        for _ in range(reps):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)

    median_s = statistics.median(times)
    resolution = time.get_clock_info("perf_counter").resolution
    noisy = median_s < _TIMER_SAFETY * resolution
    if noisy:
        warnings.warn(
            f"bench median {median_s * 1e3:.4f} ms for {kind} n={n} is within "
            f"{_TIMER_SAFETY}x of timer resolution {resolution * 1e3:.4f} ms",
            stacklevel=2,
        )
    flops = attention_flops(kind, n, d_model, heads=heads, w=window if kind == "window" else None)
    return BenchResult(
        kind=kind,
        n=n,
        d_model=d_model,
        median_ms=median_s * 1e3,
        min_ms=min(times) * 1e3,
        flops=flops,
        reps=reps,
        timer_warning=noisy,
    )


def fit_scaling_exponent(ns, times_ms) -> float:
    """Slope of log(time) vs log(n): ~1 for linear mixers, ~2 for full."""
    ns = list(ns)
    times_ms = list(times_ms)
    if len(ns) != len(times_ms):
        raise DataError(f"length mismatch: {len(ns)} sizes vs {len(times_ms)} times")
    if len(ns) < 3:
        raise DataError(f"need at least 3 points to fit an exponent, got {len(ns)}")
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise DataError(f"token counts must be strictly increasing, got {ns}")
    if any(t <= 0 for t in times_ms):
        raise DataError("all timings must be positive")
    slope, _ = np.polyfit(np.log(np.asarray(ns, dtype=np.float64)),
                          np.log(np.asarray(times_ms, dtype=np.float64)), 1)
    return float(slope)


def run_scaling_suite(
    ns,
    d_model: int = 64,
    heads: int = 1,
    window: int = 8,
    kinds=BENCH_KINDS,
    reps: int = 5,
    seed: int = 0,
    dtype=np.float32,
) -> list[BenchResult]:
    results = []
    for kind in kinds:
        for n in ns:
            results.append(time_forward(kind, n, d_model, heads=heads, window=window,
                                        reps=reps, seed=seed, dtype=dtype))
    return results


def write_bench_csv(path, results: list[BenchResult]) -> None:
    with open(path, "w") as f:
        f.write("kind,N,median_ms,min_ms,flops\n")
        for r in results:
            f.write(f"{r.kind},{r.n},{r.median_ms!r},{r.min_ms!r},{r.flops}\n")


def read_bench_csv(path) -> list[dict]:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "kind,N,median_ms,min_ms,flops":
            raise DataError(f"unexpected bench csv header: {header!r}")
        for line in f:
            kind, n, med, mn, fl = line.strip().split(",")
            rows.append({"kind": kind, "n": int(n), "median_ms": float(med),
                         "min_ms": float(mn), "flops": int(fl)})
    return rows
