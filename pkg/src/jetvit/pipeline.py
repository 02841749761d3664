"""End-to-end pipeline: teacher training, two distillation/search stages,
placement heatmap, and the aggregate report.

Everything is keyed off one seed.  Data indices are partitioned so the
training stream, the probe training set, and the eval set never overlap.
All scoring runs under a single BLAS thread so ledgers, heatmap, and report
reproduce byte for byte across runs on the same machine.

The report is a pure function of the files in the output directory; it
carries no wall-clock fields (training logs keep those).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .errors import ConfigError, DataError, StateError
from .kernels import attention_flops
from .rng import Rng
from .search import (
    Evaluator,
    SearchConfig,
    beam_search_stage1,
    beam_search_stage2,
    fa_placement_heatmap,
    read_heatmap_csv,
    write_heatmap_csv,
)
from .serialize import read_json, save_tensor, write_json
from .supernet import (
    DistillConfig,
    build_supernet,
    read_training_log,
    save_supernet,
    stage1_choices,
    stage2_choices,
    train_supernet,
    write_training_log,
)
from .task import (
    ProbeConfig,
    TaskSpec,
    linear_probe_train,
    probe_predict,
    sample_at,
    seg_metrics,
    stack_images,
    stack_labels,
)
from .tensor import AdamState, GradTape, Tensor, adam_step
from .vit import (
    ArchDescriptor,
    Kind,
    MiniViT,
    ViTConfig,
    arch_parse,
    embed_and_forward,
    init_minivit,
    load_checkpoint,
    named_parameters,
    save_checkpoint,
)

REPORT_SCHEMA_VERSION = 1
CONFIG_SCHEMA_VERSION = 1

# rng streams (teacher init, head init, stage-1 extras, stage-2 extras)
_TEACHER_STREAM = 0x7EAC
_HEAD_STREAM = 0x7EAD
_STAGE1_STREAM = 0x50B1
_STAGE2_STREAM = 0x50B2

# sample-index bases; train streams start at 0 and must stay below these
_PROBE_BASE = 10_000_000
_EVAL_BASE = 20_000_000
_HELDOUT_BASE = 30_000_000


@dataclass(frozen=True)
class PipelineConfig:
    model: ViTConfig
    seed: int = 23
    noise_std: float = 0.15
    shapes_range: tuple[int, int] = (1, 4)
    min_side: int = 6
    teacher_steps: int = 800
    teacher_lr: float = 1e-3
    teacher_batch: int = 8
    distill_steps: int = 300
    distill_lr: float = 1e-4
    distill_batch: int = 8
    distill_pool: int = 256
    probe_steps: int = 300
    probe_lr: float = 0.05
    probe_images: int = 256
    eval_images: int = 256
    beam_width: int = 4
    tau_stage1: float = 0.1
    tau_stage2: float = 0.0
    delta: float = 0.0
    k_max: int = 2

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        for name in ("teacher_steps", "distill_steps", "probe_steps", "teacher_batch",
                     "distill_batch", "distill_pool", "probe_images", "eval_images"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if max(self.teacher_steps * self.teacher_batch, self.distill_pool) >= _PROBE_BASE:
            raise ConfigError("training stream would overlap the probe/eval index ranges")
        if self.probe_images >= _EVAL_BASE - _PROBE_BASE:
            raise ConfigError("probe set too large for its index range")
        if self.eval_images >= _HELDOUT_BASE - _EVAL_BASE:
            raise ConfigError("eval set too large for its index range")

    def task_spec(self) -> TaskSpec:
        return TaskSpec(
            image_hw=self.model.image_hw,
            patch=self.model.patch,
            noise_std=self.noise_std,
            shapes_range=self.shapes_range,
            min_side=self.min_side,
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "task": {
                "noise_std": self.noise_std,
                "shapes": list(self.shapes_range),
                "min_side": self.min_side,
            },
            "teacher": {
                "steps": self.teacher_steps,
                "lr": self.teacher_lr,
                "batch_size": self.teacher_batch,
            },
            "distill": {
                "steps": self.distill_steps,
                "lr": self.distill_lr,
                "batch_size": self.distill_batch,
                "pool": self.distill_pool,
            },
            "probe": {
                "steps": self.probe_steps,
                "lr": self.probe_lr,
                "train_images": self.probe_images,
                "eval_images": self.eval_images,
            },
            "search": {
                "beam_width": self.beam_width,
                "tau_stage1": self.tau_stage1,
                "tau_stage2": self.tau_stage2,
                "delta": self.delta,
                "k_max": self.k_max,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        version = d.get("schema_version")
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version!r}, expected {CONFIG_SCHEMA_VERSION}")
        base = default_config()
        model = ViTConfig.from_dict({**base.model.to_dict(), **d.get("model", {})})
        task = d.get("task", {})
        teacher = d.get("teacher", {})
        distill = d.get("distill", {})
        probe = d.get("probe", {})
        search = d.get("search", {})
        return cls(
            model=model,
            seed=d.get("seed", base.seed),
            noise_std=task.get("noise_std", base.noise_std),
            shapes_range=tuple(task.get("shapes", base.shapes_range)),
            min_side=task.get("min_side", base.min_side),
            teacher_steps=teacher.get("steps", base.teacher_steps),
            teacher_lr=teacher.get("lr", base.teacher_lr),
            teacher_batch=teacher.get("batch_size", base.teacher_batch),
            distill_steps=distill.get("steps", base.distill_steps),
            distill_lr=distill.get("lr", base.distill_lr),
            distill_batch=distill.get("batch_size", base.distill_batch),
            distill_pool=distill.get("pool", base.distill_pool),
            probe_steps=probe.get("steps", base.probe_steps),
            probe_lr=probe.get("lr", base.probe_lr),
            probe_images=probe.get("train_images", base.probe_images),
            eval_images=probe.get("eval_images", base.eval_images),
            beam_width=search.get("beam_width", base.beam_width),
            tau_stage1=search.get("tau_stage1", base.tau_stage1),
            tau_stage2=search.get("tau_stage2", base.tau_stage2),
            delta=search.get("delta", base.delta),
            k_max=search.get("k_max", base.k_max),
        )


def default_config() -> PipelineConfig:
    return PipelineConfig(
        model=ViTConfig(
            image_hw=(64, 64),
            patch=8,
            depth=6,
            d_model=64,
            heads=4,
            mlp_ratio=2,
            window=4,
            conv_k=3,
        )
    )


# ---------------------------------------------------------------------------
# data


def build_datasets(cfg: PipelineConfig) -> dict:
    """Fixed probe-training and eval sets, disjoint from the train stream."""
    spec = cfg.task_spec()
    probe = [sample_at(cfg.seed, _PROBE_BASE + i, spec) for i in range(cfg.probe_images)]
    evals = [sample_at(cfg.seed, _EVAL_BASE + i, spec) for i in range(cfg.eval_images)]
    return {
        "spec": spec,
        "probe_images": stack_images(probe),
        "probe_labels": stack_labels(probe).reshape(-1),
        "eval_images": stack_images(evals),
        "eval_labels": stack_labels(evals).reshape(-1),
    }


def tap_features(model: MiniViT, arch: ArchDescriptor, images: Tensor) -> Tensor:
    """Last-tap token features flattened to (B*N, d_model); no tape."""
    _, taps = embed_and_forward(model, arch, images)
    feats = taps[-1]
    b, n, dm = feats.shape
    return T.reshape(feats, (b * n, dm))


def probe_score(model: MiniViT, arch: ArchDescriptor, datasets: dict, probe_cfg: ProbeConfig) -> float:
    """Linear-probe mIoU x100 of the model's tapped features on the eval set."""
    head, _ = linear_probe_train(
        tap_features(model, arch, datasets["probe_images"]), datasets["probe_labels"], probe_cfg
    )
    pred = probe_predict(tap_features(model, arch, datasets["eval_images"]), head)
    miou, _ = seg_metrics(pred, datasets["eval_labels"], probe_cfg.n_classes)
    return 100.0 * miou


def make_probe_evaluator(model: MiniViT, datasets: dict, probe_cfg: ProbeConfig) -> Evaluator:
    return Evaluator(
        fn=lambda arch: probe_score(model, arch, datasets, probe_cfg),
        metric_name="miou_x100",
    )


def probe_config(cfg: PipelineConfig, spec: TaskSpec) -> ProbeConfig:
    return ProbeConfig(n_classes=spec.n_classes, steps=cfg.probe_steps, lr=cfg.probe_lr)


# ---------------------------------------------------------------------------
# teacher


def train_teacher(cfg: PipelineConfig) -> tuple[MiniViT, Tensor, list[dict]]:
    """Supervised teacher: all-Full trunk plus a bias-free patch-label head,
    trained jointly with cross-entropy.  Returns (model, head, log)."""
    spec = cfg.task_spec()
    model = init_minivit(cfg.model, Rng(cfg.seed, _TEACHER_STREAM))
    arch = ArchDescriptor.uniform(Kind.FULL, cfg.model.depth)
    head = Tensor(
        Rng(cfg.seed, _HEAD_STREAM).normal((cfg.model.d_model, spec.n_classes), std=0.02).astype(np.float32)
    )
    params = named_parameters(model) + [("head", head)]
    slots: dict[str, AdamState] = {}
    log: list[dict] = []
    for step in range(cfg.teacher_steps):
        t0 = time.perf_counter()
        batch = [sample_at(cfg.seed, step * cfg.teacher_batch + j, spec)
                 for j in range(cfg.teacher_batch)]
        images = stack_images(batch)
        labels = stack_labels(batch).reshape(-1)
        with GradTape() as tape:
            tape.watch(*(p for _, p in params))
            feats = tap_features(model, arch, images)
            loss = T.cross_entropy(T.matmul(feats, head), labels)
            tape.backward(loss)
        for name, p in params:
            if p.grad is None:
                continue
            slot = slots.setdefault(name, AdamState.for_params([p]))
            adam_step([p], [p.grad], slot, lr=cfg.teacher_lr)
            p.grad = None
        log.append({"step": step, "loss": loss.item(),
                    "wall_ms": (time.perf_counter() - t0) * 1e3})
    return model, head, log


# ---------------------------------------------------------------------------
# flops


_KIND_NAME = {Kind.LINEAR: "linear", Kind.WINDOW: "window", Kind.FULL: "full"}


def model_flops(vit_cfg: ViTConfig, arch: ArchDescriptor) -> int:
    """Attention FLOPs summed over layers (squeeze-conv add-on included on
    Linear layers); MLP and embedding terms are identical across kinds and
    excluded."""
    total = 0
    for kind in arch.kinds:
        linear = kind is Kind.LINEAR
        total += attention_flops(
            _KIND_NAME[kind],
            vit_cfg.n_tokens,
            vit_cfg.d_model,
            heads=vit_cfg.heads,
            w=vit_cfg.window if kind is Kind.WINDOW else None,
            k=vit_cfg.conv_k,
            h_gen=vit_cfg.conv_hidden_width if linear else None,
            include_squeeze=linear,
        )
    return total


# ---------------------------------------------------------------------------
# demo orchestration


def run_demo(cfg: PipelineConfig, out_dir) -> dict:
    """Full pipeline under one seed; writes every artifact under out_dir and
    returns the report dict (also written to out_dir/report.json)."""
    out = Path(out_dir)
    for sub in ("teacher", "supernet_stage1", "supernet_stage2", "hybrid", "ledgers", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())

    with threadpool_limits(limits=1):
        spec = cfg.task_spec()
        depth = cfg.model.depth
        datasets = build_datasets(cfg)
        pcfg = probe_config(cfg, spec)
        full_arch = ArchDescriptor.uniform(Kind.FULL, depth)

        teacher, head, tlog = train_teacher(cfg)
        save_checkpoint(out / "teacher", teacher, full_arch, extra={"role": "teacher"})
        save_tensor(out / "teacher" / "head.jvt", head.data)
        write_training_log(out / "logs" / "teacher.jsonl", tlog)
        teacher_score = probe_score(teacher, full_arch, datasets, pcfg)

        dcfg = DistillConfig(steps=cfg.distill_steps, batch_size=cfg.distill_batch,
                             lr=cfg.distill_lr, seed=cfg.seed)
        stream = distill_stream(cfg, spec)

        sn1 = build_supernet(teacher, stage1_choices(depth), Rng(cfg.seed, _STAGE1_STREAM), stage=1)
        sn1, _ = train_supernet(teacher, sn1, stream, dcfg,
                                checkpoint_dir=out / "supernet_stage1",
                                log_path=out / "logs" / "distill_stage1.jsonl")
        save_supernet(out / "supernet_stage1", sn1)
        ev1 = make_probe_evaluator(sn1.model, datasets, pcfg)
        scfg1 = SearchConfig(stage=1, beam_width=cfg.beam_width, tau=cfg.tau_stage1,
                             evaluator_id="probe-miou-stage1", seed=cfg.seed)
        winner1, ledger1 = beam_search_stage1(sn1, ev1, scfg1,
                                              ledger_path=out / "ledgers" / "stage1.json")

        sn2 = build_supernet(teacher, stage2_choices(winner1), Rng(cfg.seed, _STAGE2_STREAM), stage=2)
        sn2, _ = train_supernet(teacher, sn2, stream, dcfg,
                                checkpoint_dir=out / "supernet_stage2",
                                log_path=out / "logs" / "distill_stage2.jsonl")
        save_supernet(out / "supernet_stage2", sn2)
        ev2 = make_probe_evaluator(sn2.model, datasets, pcfg)
        scfg2 = SearchConfig(stage=2, beam_width=cfg.beam_width, tau=cfg.tau_stage2,
                             delta=cfg.delta, k_max=cfg.k_max,
                             evaluator_id="probe-miou-stage2", seed=cfg.seed)
        winner2, ledger2 = beam_search_stage2(sn2, ev2, scfg2, stage1_arch=winner1,
                                              teacher_score=teacher_score,
                                              ledger_path=out / "ledgers" / "stage2.json")

        heat = fa_placement_heatmap(sn2, ev2, winner1)
        write_heatmap_csv(out / "heatmap.csv", heat)
        save_checkpoint(out / "hybrid", sn2.model, winner2, extra={"role": "hybrid"})

    report = build_report(out)
    write_report(out, report)
    return report


def distill_stream(cfg: PipelineConfig, spec: TaskSpec):
    """Distillation stream cycling over a fixed pool (the first distill_pool
    samples of the seed's virtual dataset, a subset of what the teacher's
    supervised stream draws).  The cap is what keeps distilled students from
    out-generalizing their teacher at this scale."""
    pool = [sample_at(cfg.seed, i, spec) for i in range(cfg.distill_pool)]

    def stream(step: int):
        base = step * cfg.distill_batch
        return [pool[(base + j) % cfg.distill_pool] for j in range(cfg.distill_batch)]

    return stream


# ---------------------------------------------------------------------------
# report


def _round_with_full_count(ledger: dict, count: int) -> dict | None:
    for rec in ledger["rounds"]:
        if rec["best_arch"].count("F") == count:
            return rec
    return None


def _heldout_scores(out: Path, cfg: PipelineConfig, stage1_arch: str,
                    stage2_arch: str, arch_2full: str | None) -> dict:
    """Probe mIoU of the saved models on held-out images.

    The beam search maximizes probe mIoU on the eval set, so eval-set scores
    of searched archs carry a selection bonus over any fixed model.  Ranking
    on images the search never evaluated removes that bonus; only genuine
    architecture quality is left."""
    spec = cfg.task_spec()
    pcfg = probe_config(cfg, spec)
    probe = [sample_at(cfg.seed, _PROBE_BASE + i, spec) for i in range(cfg.probe_images)]
    held = [sample_at(cfg.seed, _HELDOUT_BASE + i, spec) for i in range(cfg.eval_images)]
    datasets = {
        "probe_images": stack_images(probe),
        "probe_labels": stack_labels(probe).reshape(-1),
        "eval_images": stack_images(held),
        "eval_labels": stack_labels(held).reshape(-1),
    }
    teacher, teacher_arch = load_checkpoint(out / "teacher")
    sn1_model, _ = load_checkpoint(out / "supernet_stage1")
    sn2_model, _ = load_checkpoint(out / "supernet_stage2")
    depth = cfg.model.depth
    cache: dict[tuple[int, str], float] = {}

    def score(model: MiniViT, arch_text: str) -> float:
        key = (id(model), arch_text)
        if key not in cache:
            cache[key] = probe_score(model, arch_parse(arch_text, depth), datasets, pcfg)
        return cache[key]

    return {
        "teacher": score(teacher, teacher_arch.serialize()),
        "pure_linear": score(sn1_model, "L" * depth),
        "stage1_winner": score(sn1_model, stage1_arch),
        "stage2_final": score(sn2_model, stage2_arch),
        "hybrid_2full": None if arch_2full is None else score(sn2_model, arch_2full),
    }


def build_report(out_dir) -> dict:
    """Aggregate ledgers, logs, heatmap, and (if present) bench CSV into one
    deterministic dict.  Ordering scores are recomputed from the saved
    checkpoints on a held-out image set under a single BLAS thread; everything
    else is read straight from files."""
    out = Path(out_dir)
    for required in ("config.json", "ledgers/stage1.json", "ledgers/stage2.json",
                     "heatmap.csv", "teacher/manifest.json",
                     "supernet_stage1/manifest.json", "supernet_stage2/manifest.json"):
        if not (out / required).exists():
            raise StateError(f"report needs {required} under {out_dir}")
    cfg_dict = read_json(out / "config.json")
    cfg = PipelineConfig.from_dict(cfg_dict)
    ledger1 = read_json(out / "ledgers" / "stage1.json")
    ledger2 = read_json(out / "ledgers" / "stage2.json")
    heat = read_heatmap_csv(out / "heatmap.csv")

    pure_linear = ledger1["rounds"][0]["best_score"]
    stage1_winner = ledger2["rounds"][0]["best_score"]
    teacher_score = ledger2.get("teacher_score")
    if teacher_score is None:
        raise DataError("stage-2 ledger carries no teacher score")
    two_full = _round_with_full_count(ledger2, 2)
    hybrid_2f = None if two_full is None else {
        "arch": two_full["best_arch"],
        "score": two_full["best_score"],
    }

    with threadpool_limits(limits=1):
        held = _heldout_scores(out, cfg, ledger1["final_arch"], ledger2["final_arch"],
                               None if hybrid_2f is None else hybrid_2f["arch"])
    # The 2-Full link only joins the chain when stage 2 produced such a round.
    chain = [held["teacher"]]
    if held["hybrid_2full"] is not None:
        chain.append(held["hybrid_2full"])
    chain.extend([held["stage1_winner"], held["pure_linear"]])
    ordering = {
        "eval_set": "held_out",
        "teacher": held["teacher"],
        "hybrid_2full": held["hybrid_2full"],
        "stage1_winner": held["stage1_winner"],
        "pure_linear": held["pure_linear"],
        "stage2_final": held["stage2_final"],
        "chain_ok": all(a >= b for a, b in zip(chain, chain[1:])),
        "teacher_minus_hybrid_2full": None if held["hybrid_2full"] is None
        else held["teacher"] - held["hybrid_2full"],
    }

    vit_cfg = cfg.model
    depth = vit_cfg.depth
    flops = {
        "teacher": model_flops(vit_cfg, ArchDescriptor.uniform(Kind.FULL, depth)),
        "pure_linear": model_flops(vit_cfg, ArchDescriptor.uniform(Kind.LINEAR, depth)),
        "stage1_winner": model_flops(vit_cfg, arch_parse(ledger1["final_arch"])),
        "stage2_final": model_flops(vit_cfg, arch_parse(ledger2["final_arch"])),
    }

    def final_loss(name):
        path = out / "logs" / name
        if not path.exists():
            return None
        log = read_training_log(path)
        return log[-1]["loss"] if log else None

    bench_path = out / "bench.csv"
    bench = None
    if bench_path.exists():
        from .bench import read_bench_csv

        bench = read_bench_csv(bench_path)

    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "seed": cfg.seed,
        "config": cfg_dict,
        "teacher": {
            "arch": "F" * depth,
            "probe_score": teacher_score,
            "final_train_loss": final_loss("teacher.jsonl"),
        },
        "stage1": {
            "final_arch": ledger1["final_arch"],
            "final_score": ledger1["final_score"],
            "stop_reason": ledger1["stop_reason"],
            "rounds": len(ledger1["rounds"]),
            "pure_linear_score": pure_linear,
            "final_distill_loss": final_loss("distill_stage1.jsonl"),
        },
        "stage2": {
            "final_arch": ledger2["final_arch"],
            "final_score": ledger2["final_score"],
            "stop_reason": ledger2["stop_reason"],
            "rounds": len(ledger2["rounds"]),
            "round0_score": stage1_winner,
            "hybrid_2full": hybrid_2f,
            "teacher_score": teacher_score,
            "final_distill_loss": final_loss("distill_stage2.jsonl"),
        },
        "ordering": ordering,
        "heatmap": heat,
        "flops": flops,
        "bench": bench,
    }


def write_report(out_dir, report: dict) -> None:
    out = Path(out_dir)
    write_json(out / "report.json", report)
    o = report["ordering"]
    rows = [("teacher", report["teacher"]["arch"], o["teacher"]),
            ("pure_linear", "L" * len(report["teacher"]["arch"]), o["pure_linear"]),
            ("stage1_winner", report["stage1"]["final_arch"], o["stage1_winner"]),
            ("stage2_final", report["stage2"]["final_arch"], o["stage2_final"])]
    if o["hybrid_2full"] is not None:
        rows.append(("hybrid_2full", report["stage2"]["hybrid_2full"]["arch"],
                     o["hybrid_2full"]))
    lines = ["model,arch,score"]
    lines.extend(f"{m},{a},{s!r}" for m, a, s in rows)
    (out / "scores.csv").write_text("\n".join(lines) + "\n")

    flop_arches = {
        "teacher": report["teacher"]["arch"],
        "pure_linear": "L" * len(report["teacher"]["arch"]),
        "stage1_winner": report["stage1"]["final_arch"],
        "stage2_final": report["stage2"]["final_arch"],
    }
    flines = ["model,arch,flops"]
    flines.extend(f"{m},{flop_arches[m]},{report['flops'][m]}" for m in flop_arches)
    (out / "flops.csv").write_text("\n".join(flines) + "\n")
