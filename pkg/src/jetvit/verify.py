"""Named self-checks comparing each core mechanism against an independent
oracle: reordered linear attention vs quadratic materialization, window
attention vs masked full attention, tape gradients vs central differences,
weight inheritance vs the teacher forward, FLOP counts vs closed forms, and
beam search vs exhaustive enumeration.

Each check returns a one-line detail string on success and raises
CheckFailure otherwise; run_checks prints one PASS/FAIL line per check.
The oracles here are deliberately written against numpy, not the package's
own kernels, so a broken kernel cannot validate itself.
"""

from __future__ import annotations

import hashlib
import time
from types import SimpleNamespace

import numpy as np

from . import tensor as T
from .errors import JetvitError
from .kernels import (
    AttentionInputs,
    SqueezeConvParams,
    attention_flops,
    full_attention,
    init_squeeze_params,
    jetvit_linear_block,
    relu_linear_attention,
    squeeze_conv_flops,
    squeeze_dynamic_conv,
    window_attention,
)
from .rng import Rng
from .search import (
    Evaluator,
    SearchConfig,
    beam_search_stage1,
    beam_search_stage2,
    exhaustive_search,
)
from .supernet import build_supernet, stage1_choices
from .tensor import Tensor, grad_check
from .vit import (
    ArchDescriptor,
    Kind,
    ViTConfig,
    embed_and_forward,
    init_minivit,
)


class CheckFailure(JetvitError):
    """A named check found a mismatch against its oracle."""


# ---------------------------------------------------------------------------
# numpy oracles


def la_quadratic_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                        heads: int, eps: float) -> np.ndarray:
    """ReLU linear attention via the O(N^2) score matrix, no reordering."""
    n, dm = q.shape
    hd = dm // heads

    def split(x):
        return x.reshape(n, heads, hd).transpose(1, 0, 2)

    phi_q, phi_k = np.maximum(split(q), 0), np.maximum(split(k), 0)
    scores = phi_q @ phi_k.transpose(0, 2, 1)  # (h, N, N), materialized
    out = (scores @ split(v)) / (scores.sum(-1, keepdims=True) + eps)
    return out.transpose(1, 0, 2).reshape(n, dm)


def masked_full_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                       heads: int, grid: tuple[int, int], w: int) -> np.ndarray:
    """Softmax attention restricted to w x w windows via an additive mask."""
    n, dm = q.shape
    hd = dm // heads
    hp, wp = grid
    rows, cols = np.divmod(np.arange(n), wp)
    win = (rows // w) * (wp // w) + (cols // w)
    mask = np.where(win[:, None] == win[None, :], 0.0, -np.inf)

    def split(x):
        return x.reshape(n, heads, hd).transpose(1, 0, 2)

    logits = split(q) @ split(k).transpose(0, 2, 1) / np.sqrt(hd) + mask
    logits -= logits.max(-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(-1, keepdims=True)
    out = weights @ split(v)
    return out.transpose(1, 0, 2).reshape(n, dm)


def _qkv(rng: Rng, n: int, dm: int, dtype) -> tuple[Tensor, Tensor, Tensor]:
    return tuple(Tensor(rng.normal((n, dm)).astype(dtype)) for _ in range(3))


def _kink_safe(t: Tensor, margin: float = 0.05) -> Tensor:
    """Push every coordinate at least `margin` away from zero so central
    differences never straddle the relu kink."""
    x = t.data
    return Tensor(x + np.sign(x) * margin)


# ---------------------------------------------------------------------------
# checks


def check_la_reordering() -> str:
    """Reordered kernel vs quadratic oracle, 10 seeds, N=64, d_model=32."""
    n, dm, heads, eps = 64, 32, 4, 1e-6
    worst = {np.float64: 0.0, np.float32: 0.0}
    tol = {np.float64: 1e-10, np.float32: 1e-5}
    for seed in range(10):
        for dtype in (np.float64, np.float32):
            q, k, v = _qkv(Rng(seed, 0x1A), n, dm, dtype)
            got = relu_linear_attention(
                AttentionInputs(q, k, v, heads=heads, grid=(8, 8)), eps=eps
            ).data
            want = la_quadratic_oracle(q.data, k.data, v.data, heads, eps)
            worst[dtype] = max(worst[dtype], float(np.max(np.abs(got - want))))
    for dtype, bound in tol.items():
        if not worst[dtype] < bound:
            raise CheckFailure(
                f"linear-attention reordering drift {worst[dtype]:.3e} >= {bound:.0e} "
                f"({np.dtype(dtype).name})"
            )
    return f"max drift f64 {worst[np.float64]:.2e}, f32 {worst[np.float32]:.2e}"


def check_window_masked_full() -> str:
    """Window kernel vs masked-full oracle on {4x4, 8x8} x w {1,2,4}; the
    degenerate w = grid case must match the full kernel."""
    heads, worst = 2, 0.0
    for side in (4, 8):
        for w in (1, 2, 4):
            n = side * side
            q, k, v = _qkv(Rng(side * 10 + w, 0x3A), n, 16, np.float64)
            inp = AttentionInputs(q, k, v, heads=heads, grid=(side, side))
            got = window_attention(inp, w).data
            want = masked_full_oracle(q.data, k.data, v.data, heads, (side, side), w)
            worst = max(worst, float(np.max(np.abs(got - want))))
        q, k, v = _qkv(Rng(side, 0x3B), side * side, 16, np.float64)
        inp = AttentionInputs(q, k, v, heads=heads, grid=(side, side))
        degen = float(np.max(np.abs(
            window_attention(inp, side).data - full_attention(inp).data
        )))
        worst = max(worst, degen)
    if not worst < 1e-6:
        raise CheckFailure(f"window vs masked-full drift {worst:.3e} >= 1e-6")
    return f"max drift {worst:.2e}"


def check_grad_suite() -> str:
    """Central-difference gradients for the five kernels at dims <= 8."""
    rng = Rng(5, 0x96)
    results = {}

    def weighted(out_shape):
        c = Tensor(rng.normal(out_shape))
        return lambda out: T.reduce_sum(T.mul(out, c))

    n, dm, heads, grid = 4, 4, 2, (2, 2)
    q, k, v = _qkv(rng, n, dm, np.float64)
    w_sum = weighted((n, dm))
    results["full"] = grad_check(
        lambda a, b, c: w_sum(full_attention(AttentionInputs(a, b, c, heads, grid))),
        [q, k, v],
    )

    n2, grid2 = 8, (4, 2)
    q2, k2, v2 = _qkv(rng, n2, dm, np.float64)
    w_sum2 = weighted((n2, dm))
    results["window"] = grad_check(
        lambda a, b, c: w_sum2(window_attention(AttentionInputs(a, b, c, heads, grid2), 2)),
        [q2, k2, v2],
    )

    n3, dm3, grid3 = 6, 6, (2, 3)
    q3, k3, v3 = (_kink_safe(t) for t in _qkv(rng, n3, dm3, np.float64))
    w_sum3 = weighted((n3, dm3))
    results["linear"] = grad_check(
        lambda a, b, c: w_sum3(relu_linear_attention(AttentionInputs(a, b, c, 3, grid3))),
        [q3, k3, v3],
    )

    sq = init_squeeze_params(rng, dm, k=3, hidden=4, dtype=np.float64)
    v4 = Tensor(rng.normal((n, dm)))
    w_sum4 = weighted((n, dm))

    def conv_loss(vv, w1, b1, w2, b2):
        return w_sum4(squeeze_dynamic_conv(vv, grid, SqueezeConvParams(w1, b1, w2, b2, 3, 4)))

    results["squeeze_conv"] = grad_check(conv_loss, [v4, sq.w1, sq.b1, sq.w2, sq.b2])

    q5, k5, v5 = (_kink_safe(t) for t in _qkv(rng, n, dm, np.float64))
    sq5 = init_squeeze_params(rng, dm, k=3, hidden=4, dtype=np.float64)
    w_sum5 = weighted((n, dm))

    def block_loss(a, b, c, w1, b1, w2, b2):
        params = SqueezeConvParams(w1, b1, w2, b2, 3, 4)
        return w_sum5(jetvit_linear_block(AttentionInputs(a, b, c, heads, grid), params))

    results["linear_block"] = grad_check(
        block_loss, [q5, k5, v5, sq5.w1, sq5.b1, sq5.w2, sq5.b2]
    )

    worst_name = max(results, key=results.get)
    if not results[worst_name] < 1e-4:
        raise CheckFailure(
            f"grad_check rel err {results[worst_name]:.3e} >= 1e-4 on {worst_name}"
        )
    return "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in results.items())


def check_inheritance_identity() -> str:
    """Full-inheritance student forwards bit-identically to its teacher."""
    cfg = ViTConfig(image_hw=(16, 16), patch=4, depth=3, d_model=16, heads=2,
                    mlp_ratio=2, window=2, conv_k=3)
    teacher = init_minivit(cfg, Rng(3, 0x7E))
    supernet = build_supernet(teacher, stage1_choices(cfg.depth), Rng(4, 0x7F), stage=1)
    arch = ArchDescriptor.uniform(Kind.FULL, cfg.depth)
    images = Tensor(Rng(5, 0x80).normal((2, 16, 16, 3)).astype(np.float32))
    _, taps_t = embed_and_forward(teacher, arch, images)
    _, taps_s = embed_and_forward(supernet.model, arch, images)
    drift = max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(taps_t, taps_s))
    if drift != 0.0:
        raise CheckFailure(f"inherited all-Full forward drifts from teacher by {drift:.3e}")
    return "max drift 0.0 (bit-exact)"


def check_flops_formulas() -> str:
    """attention_flops vs closed forms; exact N-scaling; kind ordering."""
    cases = [(64, 32, 4, 4), (1024, 64, 1, 8), (256, 128, 8, 2)]
    for n, dm, heads, w in cases:
        proj = 8 * n * dm * dm
        want = {
            "full": proj + 4 * n * n * dm,
            "window": proj + 4 * n * w * w * dm,
            "linear": proj + 4 * n * dm * dm,
        }
        for kind, expect in want.items():
            got = attention_flops(kind, n, dm, heads=heads, w=w)
            if got != expect:
                raise CheckFailure(f"{kind} flops at N={n}: {got} != {expect}")
        sq = squeeze_conv_flops(n, dm, 3, 16)
        if sq != 2 * n * dm * 9 + 2 * 16 * dm * 10:
            raise CheckFailure(f"squeeze-conv flops at N={n}: {sq}")
    n, dm, w = 1024, 64, 16  # ordering band needs d_model < w^2 < N
    lin = attention_flops("linear", n, dm)
    if attention_flops("linear", 2 * n, dm) != 2 * lin:
        raise CheckFailure("doubling N does not double the linear total")
    full_term = attention_flops("full", n, dm) - 8 * n * dm * dm
    full_term2 = attention_flops("full", 2 * n, dm) - 8 * 2 * n * dm * dm
    if full_term2 != 4 * full_term:
        raise CheckFailure("doubling N does not quadruple the full N^2 term")
    if not (lin < attention_flops("window", n, dm, w=w) < attention_flops("full", n, dm)):
        raise CheckFailure(f"kind ordering violated at N={n}, d_model={dm}, w={w}")
    return f"{len(cases)} closed-form cases, scaling and ordering exact"


def table_evaluator(depth: int, seed: int, noise: float = 0.3) -> Evaluator:
    """mIoU-shaped score table: per-layer kind gains plus a small hashed
    interaction term, deterministic in (seed, arch)."""
    gains = Rng(seed, 0x7AB1E).normal((depth, 2), std=2.0)

    def score(arch: ArchDescriptor) -> float:
        total = 70.0
        for i, kind in enumerate(arch.kinds):
            total += float(gains[i, 0 if kind is Kind.LINEAR else 1])
        digest = hashlib.sha256(f"{seed}:{arch.serialize()}".encode()).digest()
        jitter = int.from_bytes(digest[:8], "little") / 2.0**64 - 0.5
        return total + noise * float(jitter)

    return Evaluator(fn=score, metric_name="table")


def separable_evaluator(depth: int, seed: int) -> Evaluator:
    """Pure per-layer additive table: greedy flips must find the optimum."""
    gains = Rng(seed, 0x5E9).normal((depth,))

    def score(arch: ArchDescriptor) -> float:
        return float(sum(g for g, kind in zip(gains, arch.kinds) if kind is Kind.WINDOW))

    return Evaluator(fn=score, metric_name="separable")


def check_beam_vs_exhaustive() -> str:
    """Stage-1 beam (B=4, tau=0) vs exhaustive argmax on seeded tables, plus
    the constructed stage-2 instance that rewards Full exactly at {2, 4}."""
    depth = 6
    stub = SimpleNamespace(depth=depth, choices=stage1_choices(depth))
    ratios = []
    for seed in range(8):
        ev = table_evaluator(depth, seed)
        cfg = SearchConfig(stage=1, beam_width=4, tau=0.0, evaluator_id="table", seed=seed)
        winner, _ = beam_search_stage1(stub, ev, cfg)
        _, table = exhaustive_search(ev, depth, (Kind.LINEAR, Kind.WINDOW))
        ratios.append(ev.score(winner) / max(table.values()))
    if min(ratios) < 0.98:
        raise CheckFailure(f"beam/exhaustive ratio {min(ratios):.4f} < 0.98")
    for seed in range(4):
        ev = separable_evaluator(depth, seed)
        cfg = SearchConfig(stage=1, beam_width=4, tau=0.0, evaluator_id="separable", seed=seed)
        winner, _ = beam_search_stage1(stub, ev, cfg)
        best, _ = exhaustive_search(ev, depth, (Kind.LINEAR, Kind.WINDOW))
        if ev.score(winner) != ev.score(best):
            raise CheckFailure(f"separable instance {seed}: beam missed the optimum")

    base = ArchDescriptor.uniform(Kind.LINEAR, depth)
    stub2 = SimpleNamespace(depth=depth, choices=tuple([(Kind.LINEAR, Kind.FULL)] * depth))

    def rewards_full_at(arch: ArchDescriptor) -> float:
        return float(sum(1.0 for i in (2, 4) if arch.kinds[i] is Kind.FULL)
                     - 0.1 * sum(1.0 for i, k in enumerate(arch.kinds)
                                 if k is Kind.FULL and i not in (2, 4)))

    ev2 = Evaluator(fn=rewards_full_at, metric_name="rewards")
    cfg2 = SearchConfig(stage=2, beam_width=4, tau=0.0, delta=0.0, k_max=2,
                        evaluator_id="rewards", seed=0)
    winner2, _ = beam_search_stage2(stub2, ev2, cfg2, stage1_arch=base, teacher_score=10.0)
    placed = tuple(i for i, k in enumerate(winner2.kinds) if k is Kind.FULL)
    if placed != (2, 4):
        raise CheckFailure(f"stage-2 placed Full at {placed}, expected (2, 4)")
    return f"min beam/exhaustive ratio {min(ratios):.4f}; Full placed at (2, 4)"


def check_task_metrics() -> str:
    """seg_metrics vs the hand-built confusion case; majority labels vs a
    counting oracle on a generated sample."""
    from .task import TaskSpec, sample_at, seg_metrics

    gt = np.array([0, 0, 1, 1, 1])
    pred = np.array([0, 1, 0, 1, 1])
    miou, pacc = seg_metrics(pred, gt, 2)
    if abs(miou - 5.0 / 12.0) > 1e-15 or abs(pacc - 0.6) > 1e-15:
        raise CheckFailure(f"hand confusion case gave miou={miou}, pacc={pacc}")
    skip_miou, _ = seg_metrics(pred, gt, 5)
    if skip_miou != miou:
        raise CheckFailure("absent classes leaked into the mIoU mean")
    if seg_metrics(gt, gt, 2) != (1.0, 1.0):
        raise CheckFailure("perfect prediction does not score (1.0, 1.0)")

    spec = TaskSpec(image_hw=(32, 32), patch=8, noise_std=0.1,
                    shapes_range=(1, 3), min_side=4)
    sample = sample_at(11, 0, spec)
    blocks = sample.pixel_classes.reshape(4, 8, 4, 8)
    for r in range(4):
        for c in range(4):
            counts = np.bincount(blocks[r, :, c, :].ravel(), minlength=spec.n_classes)
            if sample.patch_labels[r, c] != counts.argmax():
                raise CheckFailure(f"majority label at patch {(r, c)} disagrees "
                                   f"with the counting oracle")
    return "confusion case exact; majority rule matches counting oracle"


def check_serialize_roundtrip() -> str:
    """Tensor files, JSON, and model checkpoints survive a write/read cycle
    bit for bit."""
    import tempfile
    from pathlib import Path

    from .serialize import load_tensor, read_json, save_tensor, write_json
    from .vit import load_checkpoint, save_checkpoint

    rng = Rng(9, 0x5E81)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for dtype in (np.float32, np.float64):
            want = rng.normal((3, 5, 2)).astype(dtype)
            save_tensor(tmp / "t.jvt", Tensor(want))
            got = load_tensor(tmp / "t.jvt")
            if got.dtype != dtype or not np.array_equal(got.data, want):
                raise CheckFailure(f"tensor roundtrip drifted ({np.dtype(dtype).name})")
        obj = {"a": 1, "b": [0.1, 2.5e-300, 1e300], "c": "x"}
        write_json(tmp / "o.json", obj)
        if read_json(tmp / "o.json") != obj:
            raise CheckFailure("json roundtrip drifted")
        cfg = ViTConfig(image_hw=(16, 16), patch=4, depth=2, d_model=8, heads=2,
                        mlp_ratio=2, window=2, conv_k=3)
        arch = ArchDescriptor((Kind.LINEAR, Kind.FULL))
        model = init_minivit(cfg, Rng(2, 0x5E82), arch)
        save_checkpoint(tmp / "ckpt", model, arch)
        loaded, loaded_arch = load_checkpoint(tmp / "ckpt")
        if loaded_arch.serialize() != arch.serialize():
            raise CheckFailure("checkpoint arch drifted")
        from .vit import named_parameters

        for (name, a), (_, b) in zip(named_parameters(model), named_parameters(loaded)):
            if not np.array_equal(a.data, b.data):
                raise CheckFailure(f"checkpoint parameter {name} drifted")
    return "tensor, json, and checkpoint roundtrips bit-exact"


CHECKS = {
    "la-reordering": check_la_reordering,
    "window-masked-full": check_window_masked_full,
    "grad-suite": check_grad_suite,
    "inheritance-identity": check_inheritance_identity,
    "flops-formulas": check_flops_formulas,
    "beam-vs-exhaustive": check_beam_vs_exhaustive,
    "task-metrics": check_task_metrics,
    "serialize-roundtrip": check_serialize_roundtrip,
}


def run_checks(names=None, write=print) -> bool:
    """Run the named checks (all by default); one PASS/FAIL line each."""
    if names:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise JetvitError(
                f"unknown checks {unknown}; available: {', '.join(CHECKS)}"
            )
        selected = {n: CHECKS[n] for n in names}
    else:
        selected = CHECKS
    ok = True
    for name, fn in selected.items():
        t0 = time.perf_counter()
        try:
            detail = fn()
            write(f"PASS {name} ({detail}) [{time.perf_counter() - t0:.2f}s]")
        except JetvitError as exc:
            ok = False
            write(f"FAIL {name}: {exc}")
    return ok
