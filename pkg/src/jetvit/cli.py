"""Command-line entry point: self-checks, pipeline steps, benchmarks, and
the aggregate report.

The output directory resolves --out first, then the JETVIT_OUT environment
variable, then ./out; every artifact is written under it.  Pipeline commands
read their config from --config, falling back to <out>/config.json when one
exists, then to built-in defaults.  Config files are validated against the
packaged JSON schema; unknown keys are rejected rather than ignored.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from .bench import fit_scaling_exponent, run_scaling_suite, write_bench_csv
from .errors import ConfigError, JetvitError, StateError
from .pipeline import (
    _STAGE1_STREAM,
    _STAGE2_STREAM,
    PipelineConfig,
    build_datasets,
    build_report,
    default_config,
    distill_stream,
    make_probe_evaluator,
    probe_config,
    probe_score,
    run_demo,
    train_teacher,
    write_report,
)
from .rng import Rng
from .search import (
    SearchConfig,
    beam_search_stage1,
    beam_search_stage2,
    fa_placement_heatmap,
    write_heatmap_csv,
)
from .serialize import read_json, save_tensor, write_json
from .supernet import (
    DistillConfig,
    build_supernet,
    load_supernet,
    save_supernet,
    stage1_choices,
    stage2_choices,
    train_supernet,
    write_training_log,
)
from .verify import run_checks
from .vit import ArchDescriptor, Kind, arch_parse, load_checkpoint, save_checkpoint

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_BENCH_NS = (1024, 2048, 4096, 8192, 16384)


@dataclass(frozen=True)
class RunConfig:
    """One resolved invocation: what to run, where, and with which config."""

    command: str
    config_path: str | None
    out_dir: Path
    seed: int | None
    precision: str


def _resolve_run(args: argparse.Namespace) -> RunConfig:
    out = getattr(args, "out", None) or os.environ.get("JETVIT_OUT") or "out"
    return RunConfig(
        command=args.command,
        config_path=getattr(args, "config", None),
        out_dir=Path(out),
        seed=getattr(args, "seed", None),
        precision=getattr(args, "precision", "f32"),
    )


def validate_config(cfg_dict: dict) -> None:
    """Strict-schema validation; unknown keys anywhere are an error."""
    schema = json.loads(
        resources.files("jetvit").joinpath("config_schema.json").read_text()
    )
    try:
        jsonschema.validate(cfg_dict, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config rejected at {where}: {exc.message}") from None


def load_config(run: RunConfig) -> PipelineConfig:
    path = run.config_path
    if path is None and (run.out_dir / "config.json").exists():
        path = run.out_dir / "config.json"
    if path is None:
        cfg = default_config()
    else:
        cfg_dict = read_json(path)
        validate_config(cfg_dict)
        cfg = PipelineConfig.from_dict(cfg_dict)
    if run.seed is not None:
        cfg = replace(cfg, seed=run.seed)
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify(run: RunConfig, args: argparse.Namespace) -> int:
    ok = run_checks(args.checks or None)
    return 0 if ok else 1


def cmd_train_teacher(run: RunConfig, args: argparse.Namespace) -> int:
    cfg = load_config(run)
    out = run.out_dir
    (out / "logs").mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    with threadpool_limits(limits=1):
        teacher, head, log = train_teacher(cfg)
    full = ArchDescriptor.uniform(Kind.FULL, cfg.model.depth)
    save_checkpoint(out / "teacher", teacher, full, extra={"role": "teacher"})
    save_tensor(out / "teacher" / "head.jvt", head.data)
    write_training_log(out / "logs" / "teacher.jsonl", log)
    print(f"teacher: {cfg.teacher_steps} steps, final loss {log[-1]['loss']:.4f}, "
          f"saved under {out / 'teacher'}")
    return 0


def _load_teacher(out: Path):
    if not (out / "teacher" / "manifest.json").exists():
        raise StateError(
            f"no teacher checkpoint under {out / 'teacher'}; run train-teacher first"
        )
    return load_checkpoint(out / "teacher")


def _stage1_winner(out: Path, depth: int) -> ArchDescriptor:
    path = out / "ledgers" / "stage1.json"
    if not path.exists():
        raise StateError(f"no stage-1 ledger at {path}; run search --stage 1 first")
    return arch_parse(read_json(path)["final_arch"], depth)


def cmd_distill(run: RunConfig, args: argparse.Namespace) -> int:
    cfg = load_config(run)
    out = run.out_dir
    (out / "logs").mkdir(parents=True, exist_ok=True)
    teacher, _ = _load_teacher(out)
    depth = cfg.model.depth
    if args.stage == 1:
        choices = stage1_choices(depth)
        stream_id = _STAGE1_STREAM
    else:
        choices = stage2_choices(_stage1_winner(out, depth))
        stream_id = _STAGE2_STREAM
    dcfg = DistillConfig(steps=cfg.distill_steps, batch_size=cfg.distill_batch,
                         lr=cfg.distill_lr, seed=cfg.seed)
    ckpt_dir = out / f"supernet_stage{args.stage}"
    log_path = out / "logs" / f"distill_stage{args.stage}.jsonl"
    with threadpool_limits(limits=1):
        supernet = build_supernet(teacher, choices, Rng(cfg.seed, stream_id), stage=args.stage)
        supernet, log = train_supernet(teacher, supernet, distill_stream(cfg, cfg.task_spec()),
                                       dcfg, checkpoint_dir=ckpt_dir, log_path=log_path)
    save_supernet(ckpt_dir, supernet)
    print(f"stage-{args.stage} supernet: {cfg.distill_steps} steps, "
          f"final loss {log[-1]['loss']:.6f}, saved under {ckpt_dir}")
    return 0


def _load_stage_supernet(out: Path, stage: int):
    path = out / f"supernet_stage{stage}"
    if not (path / "manifest.json").exists():
        raise StateError(
            f"no stage-{stage} supernet checkpoint under {path}; "
            f"run distill --stage {stage} first"
        )
    return load_supernet(path)


def cmd_search(run: RunConfig, args: argparse.Namespace) -> int:
    cfg = load_config(run)
    out = run.out_dir
    (out / "ledgers").mkdir(parents=True, exist_ok=True)
    supernet = _load_stage_supernet(out, args.stage)
    with threadpool_limits(limits=1):
        datasets = build_datasets(cfg)
        pcfg = probe_config(cfg, datasets["spec"])
        evaluator = make_probe_evaluator(supernet.model, datasets, pcfg)
        if args.stage == 1:
            scfg = SearchConfig(stage=1, beam_width=cfg.beam_width, tau=cfg.tau_stage1,
                                evaluator_id="probe-miou-stage1", seed=cfg.seed)
            winner, ledger = beam_search_stage1(
                supernet, evaluator, scfg, ledger_path=out / "ledgers" / "stage1.json"
            )
        else:
            teacher, teacher_arch = _load_teacher(out)
            teacher_score = probe_score(teacher, teacher_arch, datasets, pcfg)
            winner1 = _stage1_winner(out, cfg.model.depth)
            scfg = SearchConfig(stage=2, beam_width=cfg.beam_width, tau=cfg.tau_stage2,
                                delta=cfg.delta, k_max=cfg.k_max,
                                evaluator_id="probe-miou-stage2", seed=cfg.seed)
            winner, ledger = beam_search_stage2(
                supernet, evaluator, scfg, stage1_arch=winner1,
                teacher_score=teacher_score,
                ledger_path=out / "ledgers" / f"stage{args.stage}.json",
            )
            save_checkpoint(out / "hybrid", supernet.model, winner,
                            extra={"role": "hybrid"})
    print(f"stage-{args.stage} winner {winner.serialize()} "
          f"(score {ledger.final_score:.4f}, stop: {ledger.stop_reason})")
    return 0


def cmd_heatmap(run: RunConfig, args: argparse.Namespace) -> int:
    cfg = load_config(run)
    out = run.out_dir
    supernet = _load_stage_supernet(out, 2)
    winner1 = _stage1_winner(out, cfg.model.depth)
    with threadpool_limits(limits=1):
        datasets = build_datasets(cfg)
        pcfg = probe_config(cfg, datasets["spec"])
        evaluator = make_probe_evaluator(supernet.model, datasets, pcfg)
        rows = fa_placement_heatmap(supernet, evaluator, winner1)
    write_heatmap_csv(out / "heatmap.csv", rows)
    best = max(rows, key=lambda r: r["delta"])
    print(f"heatmap over {len(rows)} layers -> {out / 'heatmap.csv'} "
          f"(best flip: layer {best['layer']}, delta {best['delta']:+.4f})")
    return 0


def cmd_bench(run: RunConfig, args: argparse.Namespace) -> int:
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ns = args.n or list(_BENCH_NS)
    results = run_scaling_suite(ns, d_model=args.d_model, heads=args.heads,
                                window=args.window, reps=args.reps,
                                seed=run.seed or 0, dtype=_PRECISIONS[run.precision])
    write_bench_csv(out / "bench.csv", results)
    for kind in dict.fromkeys(r.kind for r in results):
        rows = [r for r in results if r.kind == kind]
        expo = fit_scaling_exponent([r.n for r in rows], [r.median_ms for r in rows])
        flagged = " (timer resolution warning)" if any(r.timer_warning for r in rows) else ""
        print(f"{kind}: exponent {expo:.3f} over N={ns}{flagged}")
    print(f"wrote {out / 'bench.csv'}")
    return 0


def cmd_report(run: RunConfig, args: argparse.Namespace) -> int:
    report = build_report(run.out_dir)
    write_report(run.out_dir, report)
    o = report["ordering"]
    print(f"report -> {run.out_dir / 'report.json'}")
    print(f"held-out ordering: teacher {o['teacher']:.3f} >= "
          f"2-Full {o['hybrid_2full']} >= stage-1 {o['stage1_winner']:.3f} >= "
          f"pure-Linear {o['pure_linear']:.3f}: "
          f"{'holds' if o['chain_ok'] else 'violated'}")
    return 0


def cmd_demo(run: RunConfig, args: argparse.Namespace) -> int:
    cfg = load_config(run)
    report = run_demo(cfg, run.out_dir)
    o = report["ordering"]
    print(f"demo complete under {run.out_dir} (seed {cfg.seed})")
    print(f"teacher {o['teacher']:.3f} | 2-Full {o['hybrid_2full']} | "
          f"stage-1 {o['stage1_winner']:.3f} | pure-Linear {o['pure_linear']:.3f} | "
          f"ordering {'holds' if o['chain_ok'] else 'violated'}")
    print(f"stage-2 final {report['stage2']['final_arch']} "
          f"(stop: {report['stage2']['stop_reason']})")
    return 0


# ---------------------------------------------------------------------------
# dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jetvit",
        description="Hybrid-attention search pipeline: verify, train, distill, "
                    "search, benchmark, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="pipeline config JSON (strict schema)")
        p.add_argument("--out", help="output directory (default: $JETVIT_OUT or ./out)")
        p.add_argument("--seed", type=int, default=seed_default,
                       help="override the config seed")

    p = sub.add_parser("verify", help="run the named oracle self-checks")
    p.add_argument("checks", nargs="*", help="subset of checks (default: all)")

    common(sub.add_parser("train-teacher", help="train the all-Full teacher"))
    p = sub.add_parser("distill", help="train a weight-sharing supernet stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p = sub.add_parser("search", help="beam-search a trained supernet stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    common(sub.add_parser("heatmap", help="score single Full-attention flips per layer"))

    p = sub.add_parser("bench", help="time the three mixers across token counts")
    p.add_argument("--out", help="output directory (default: $JETVIT_OUT or ./out)")
    p.add_argument("--seed", type=int, help="input seed (default 0)")
    p.add_argument("--n", type=int, action="append",
                   help=f"token count, repeatable (default {list(_BENCH_NS)})")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--precision", choices=sorted(_PRECISIONS), default="f32")

    p = sub.add_parser("report", help="aggregate artifacts into report.json + CSVs")
    p.add_argument("--out", help="output directory (default: $JETVIT_OUT or ./out)")

    common(sub.add_parser("demo", help="run the full pipeline end to end"))
    return parser


_HANDLERS = {
    "verify": cmd_verify,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "search": cmd_search,
    "heatmap": cmd_heatmap,
    "bench": cmd_bench,
    "report": cmd_report,
    "demo": cmd_demo,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    run = _resolve_run(args)
    try:
        return _HANDLERS[args.command](run, args)
    except JetvitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
