"""Timing harness mechanics; exponent fits on synthetic timings, not wall clocks."""

import numpy as np
import pytest

from jetvit.bench import (
    BenchResult,
    fit_scaling_exponent,
    near_square_grid,
    read_bench_csv,
    run_scaling_suite,
    time_forward,
    write_bench_csv,
)
from jetvit.errors import ConfigError, DataError, DimensionError
from jetvit.rng import Rng


def test_near_square_grid():
    assert near_square_grid(64) == (8, 8)
    assert near_square_grid(48) == (6, 8)
    assert near_square_grid(7) == (1, 7)
    with pytest.raises(DimensionError):
        near_square_grid(0)


def test_time_forward_result_fields():
    r = time_forward("linear", 64, 16, reps=3, warmup=1)
    assert isinstance(r, BenchResult)
    assert r.kind == "linear" and r.n == 64 and r.reps == 3
    assert r.median_ms > 0 and r.min_ms > 0 and r.min_ms <= r.median_ms
    assert r.flops == 8 * 64 * 16 * 16 + 4 * 64 * 16 * 16


def test_time_forward_guards():
    with pytest.raises(ConfigError):
        time_forward("sparse", 64, 16)
    with pytest.raises(ConfigError):
        time_forward("linear", 64, 16, reps=0)
    with pytest.raises(DimensionError):
        time_forward("full", 64, 15, heads=2)
    with pytest.raises(DimensionError):
        time_forward("window", 50, 16, window=8)  # grid (5,10) not tiled by 8


def test_suite_covers_kinds_and_sizes():
    results = run_scaling_suite([64, 256], d_model=16, window=8, reps=1)
    assert len(results) == 6
    assert {(r.kind, r.n) for r in results} == {
        (k, n) for k in ("linear", "window", "full") for n in (64, 256)
    }
    # FLOPs are a pure function of the shape, identical across reruns.
    again = run_scaling_suite([64, 256], d_model=16, window=8, reps=1)
    assert [r.flops for r in results] == [r.flops for r in again]


def test_fit_exponent_exact_power_laws():
    ns = [256, 512, 1024, 2048]
    quad = [1e-6 * n * n for n in ns]
    lin = [1e-6 * n for n in ns]
    assert abs(fit_scaling_exponent(ns, quad) - 2.0) < 1e-9
    assert abs(fit_scaling_exponent(ns, lin) - 1.0) < 1e-9


def test_fit_exponent_noisy_power_law():
    rng = Rng(0)
    ns = [2**i for i in range(8, 15)]
    times = [1e-5 * n**1.5 * float(np.exp(rng.normal(std=0.02))) for n in ns]
    assert abs(fit_scaling_exponent(ns, times) - 1.5) < 0.1


def test_fit_exponent_guards():
    with pytest.raises(DataError):
        fit_scaling_exponent([1, 2], [1.0, 2.0])
    with pytest.raises(DataError):
        fit_scaling_exponent([1, 2, 2], [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        fit_scaling_exponent([1, 2, 3], [1.0, -2.0, 3.0])
    with pytest.raises(DataError):
        fit_scaling_exponent([1, 2, 3], [1.0, 2.0])


def test_bench_csv_roundtrip(tmp_path):
    results = run_scaling_suite([64], d_model=16, reps=1)
    p = tmp_path / "bench.csv"
    write_bench_csv(p, results)
    rows = read_bench_csv(p)
    assert len(rows) == len(results)
    for row, r in zip(rows, results):
        assert row["kind"] == r.kind and row["n"] == r.n
        assert row["median_ms"] == r.median_ms  # repr roundtrips exactly
        assert row["flops"] == r.flops


def test_bench_csv_rejects_foreign_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(DataError):
        read_bench_csv(p)
