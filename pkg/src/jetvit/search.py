"""Two-stage greedy beam search over per-layer attention kinds.

Stage 1 walks from all-Linear, flipping one Linear layer to Window per
expansion, keeping the top-B candidates per round, and stops once a round's
best stops improving by at least tau.  Stage 2 restarts from the stage-1
winner, flips efficient layers to Full, and additionally stops when the
score is within delta of the teacher or when K_max Full layers are reached.

Scoring is deterministic (a trained supernet plus a fixed eval set), so the
ledger -- every candidate of every round, the surviving beams, and the stop
reason -- reproduces byte for byte under a fixed seed.  An exhaustive
enumerator provides the oracle the beam is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, GuardError, NumericError
from .serialize import write_json
from .vit import ArchDescriptor, Kind

LEDGER_SCHEMA_VERSION = 1


@dataclass
class SearchConfig:
    stage: int
    beam_width: int = 4
    tau: float = 0.1
    delta: float = 0.5
    k_max: int = 4
    evaluator_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.beam_width < 1:
            raise ConfigError(f"beam width must be >= 1, got {self.beam_width}")
        if not self.tau >= 0 or not self.delta >= 0:
            raise ConfigError(f"tau and delta must be >= 0, got {self.tau}, {self.delta}")
        if self.k_max < 0:
            raise ConfigError(f"k_max must be >= 0, got {self.k_max}")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "beam_width": self.beam_width,
            "tau": self.tau,
            "delta": self.delta,
            "k_max": self.k_max,
            "evaluator_id": self.evaluator_id,
            "seed": self.seed,
        }


@dataclass
class Evaluator:
    """Deterministic arch -> score contract (higher is better), memoized."""

    fn: object  # Callable[[ArchDescriptor], float]
    metric_name: str = "score"
    teacher_score: float | None = None
    calls: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def score(self, arch: ArchDescriptor) -> float:
        code = arch.serialize()
        if code in self._cache:
            return self._cache[code]
        value = float(self.fn(arch))
        if not np.isfinite(value):
            raise NumericError(f"evaluator returned non-finite score for {code}")
        self.calls += 1
        self._cache[code] = value
        return value


@dataclass
class SearchLedger:
    stage: int
    config: dict
    metric_name: str
    rounds: list[dict]
    final_arch: str
    final_score: float
    stop_reason: str
    teacher_score: float | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        out = {
            "schema_version": LEDGER_SCHEMA_VERSION,
            "stage": self.stage,
            "config": self.config,
            "metric_name": self.metric_name,
            "rounds": self.rounds,
            "final_arch": self.final_arch,
            "final_score": self.final_score,
            "stop_reason": self.stop_reason,
        }
        if self.teacher_score is not None:
            out["teacher_score"] = self.teacher_score
        if self.error is not None:
            out["error"] = self.error
        return out

    def save(self, path) -> None:
        write_json(path, self.to_dict())


def _candidate_record(arch, score, parent, flip_layer):
    return {
        "arch": arch.serialize(),
        "score": score,
        "parent": None if parent is None else parent.serialize(),
        "flip_layer": flip_layer,
    }


def _run_beam(
    init_arch: ArchDescriptor,
    expand_fn,
    cost_fn,
    cfg: SearchConfig,
    evaluator: Evaluator,
    extra_stop=None,
    ledger_path=None,
):
    """Shared engine.  expand_fn(arch) lists (layer, flipped arch) in ascending
    layer order; cost_fn orders ties (smaller = cheaper).  extra_stop sees the
    accepted best and may end the search with a named reason."""
    rounds: list[dict] = []
    best_arch, best_score = init_arch, None
    try:
        best_score = evaluator.score(init_arch)
        rounds.append(
            {
                "round": 0,
                "candidates": [_candidate_record(init_arch, best_score, None, None)],
                "beam": [init_arch.serialize()],
                "best_arch": init_arch.serialize(),
                "best_score": best_score,
            }
        )
        stop_reason = extra_stop(init_arch, best_score) if extra_stop else None
        beam = [init_arch]
        r = 1
        while stop_reason is None:
            expansions = []  # (arch, parent, flip_layer)
            seen = set()
            for parent in beam:
                for layer, child in expand_fn(parent):
                    code = child.serialize()
                    if code not in seen:
                        seen.add(code)
                        expansions.append((child, parent, layer))
            if not expansions:
                stop_reason = "budget"
                break
            scored = [evaluator.score(c) for c, _, _ in expansions]
            order = sorted(
                range(len(expansions)),
                key=lambda j: (-scored[j], cost_fn(expansions[j][0]), expansions[j][2]),
            )
            beam_next = [expansions[j][0] for j in order[: cfg.beam_width]]
            top = order[0]
            rounds.append(
                {
                    "round": r,
                    "candidates": [
                        _candidate_record(c, s, p, l)
                        for (c, p, l), s in zip(expansions, scored)
                    ],
                    "beam": [a.serialize() for a in beam_next],
                    "best_arch": expansions[top][0].serialize(),
                    "best_score": scored[top],
                }
            )
            if scored[top] - best_score < cfg.tau:
                stop_reason = "plateau"
                break
            best_arch, best_score = expansions[top][0], scored[top]
            beam = beam_next
            if extra_stop:
                stop_reason = extra_stop(best_arch, best_score)
            r += 1
    except Exception as e:
        if ledger_path is not None:
            SearchLedger(
                stage=cfg.stage,
                config=cfg.to_dict(),
                metric_name=evaluator.metric_name,
                rounds=rounds,
                final_arch=best_arch.serialize(),
                final_score=float("nan") if best_score is None else best_score,
                stop_reason="aborted",
                teacher_score=evaluator.teacher_score,
                error=f"{type(e).__name__}: {e}",
            ).save(ledger_path)
        raise

    ledger = SearchLedger(
        stage=cfg.stage,
        config=cfg.to_dict(),
        metric_name=evaluator.metric_name,
        rounds=rounds,
        final_arch=best_arch.serialize(),
        final_score=best_score,
        stop_reason=stop_reason,
        teacher_score=evaluator.teacher_score,
    )
    if ledger_path is not None:
        ledger.save(ledger_path)
    return best_arch, ledger


def beam_search_stage1(
    supernet, evaluator: Evaluator, cfg: SearchConfig, ledger_path=None
):
    """From all-Linear, flip Linear layers to Window one at a time."""
    if cfg.stage != 1:
        raise ConfigError(f"stage-1 search got a stage-{cfg.stage} config")
    depth = supernet.depth
    for i, cs in enumerate(supernet.choices):
        if Kind.LINEAR not in cs or Kind.WINDOW not in cs:
            raise ConfigError(f"stage-1 supernet must offer Linear and Window at layer {i}")
    init = ArchDescriptor.uniform(Kind.LINEAR, depth)

    def expand(arch: ArchDescriptor):
        return [
            (i, arch.with_kind(i, Kind.WINDOW))
            for i in range(depth)
            if arch.kinds[i] is Kind.LINEAR
        ]

    def cost(arch: ArchDescriptor) -> int:
        return arch.count(Kind.WINDOW)

    return _run_beam(init, expand, cost, cfg, evaluator, ledger_path=ledger_path)


def beam_search_stage2(
    supernet,
    evaluator: Evaluator,
    cfg: SearchConfig,
    stage1_arch: ArchDescriptor,
    teacher_score: float,
    ledger_path=None,
):
    """From the stage-1 winner, flip efficient layers to Full; stop on the
    teacher gap (score >= teacher - delta), the K_max budget, or a plateau."""
    if cfg.stage != 2:
        raise ConfigError(f"stage-2 search got a stage-{cfg.stage} config")
    depth = supernet.depth
    if stage1_arch.depth != depth:
        raise ConfigError(f"stage-1 arch depth {stage1_arch.depth} != supernet depth {depth}")
    for i, cs in enumerate(supernet.choices):
        if Kind.FULL not in cs:
            raise ConfigError(f"stage-2 supernet must offer Full at layer {i}")
        if stage1_arch.kinds[i] is not Kind.FULL and stage1_arch.kinds[i] not in cs:
            raise ConfigError(f"layer {i}: stage-1 kind {stage1_arch.kinds[i]} not in choices")
    teacher_score = float(teacher_score)
    evaluator.teacher_score = teacher_score

    def expand(arch: ArchDescriptor):
        return [
            (i, arch.with_kind(i, Kind.FULL))
            for i in range(depth)
            if arch.kinds[i] is not Kind.FULL
        ]

    def cost(arch: ArchDescriptor) -> int:
        return arch.count(Kind.FULL)

    def stop(arch: ArchDescriptor, score: float):
        if score >= teacher_score - cfg.delta:
            return "teacher_gap_met"
        if arch.count(Kind.FULL) >= cfg.k_max:
            return "budget"
        return None

    return _run_beam(init_arch=stage1_arch, expand_fn=expand, cost_fn=cost,
                     cfg=cfg, evaluator=evaluator, extra_stop=stop, ledger_path=ledger_path)


# ---------------------------------------------------------------------------
# oracle and heatmap


EXHAUSTIVE_GUARD = 100_000


def exhaustive_search(evaluator: Evaluator, depth: int, kinds):
    """Score every arch; argmax with lexicographically-smallest tie-break.

    kinds: one tuple of Kinds applied to every layer, or a per-layer list of
    tuples.  Guarded to at most 1e5 archs.
    """
    if depth < 1:
        raise ConfigError(f"depth must be positive, got {depth}")
    if kinds and isinstance(kinds[0], Kind):
        per_layer = [tuple(kinds)] * depth
    else:
        per_layer = [tuple(cs) for cs in kinds]
        if len(per_layer) != depth:
            raise ConfigError(f"{len(per_layer)} choice sets for depth {depth}")
    size = 1
    for cs in per_layer:
        if not cs:
            raise ConfigError("empty choice set")
        size *= len(cs)
        if size > EXHAUSTIVE_GUARD:
            raise GuardError(f"search space exceeds {EXHAUSTIVE_GUARD} archs")

    import itertools

    table: dict[str, float] = {}
    for combo in itertools.product(*per_layer):
        arch = ArchDescriptor(combo)
        table[arch.serialize()] = evaluator.score(arch)
    best_score = max(table.values())
    best_code = min(code for code, s in table.items() if s == best_score)
    return ArchDescriptor(tuple(Kind(ch) for ch in best_code)), table


def fa_placement_heatmap(supernet, evaluator: Evaluator, base_arch: ArchDescriptor) -> list[dict]:
    """Per layer: score of base_arch with only that layer flipped to Full.

    Layers already Full score the base arch itself (delta 0).  Rows are, by
    construction, the stage-2 round-1 expansion scores.
    """
    depth = supernet.depth
    if base_arch.depth != depth:
        raise ConfigError(f"base arch depth {base_arch.depth} != supernet depth {depth}")
    for i, cs in enumerate(supernet.choices):
        if Kind.FULL not in cs:
            raise ConfigError(f"stage-2 supernet must offer Full at layer {i}")
    base_score = evaluator.score(base_arch)
    rows = []
    for i in range(depth):
        arch = base_arch if base_arch.kinds[i] is Kind.FULL else base_arch.with_kind(i, Kind.FULL)
        s = evaluator.score(arch)
        rows.append({"layer": i, "score": s, "delta": s - base_score})
    return rows


def write_heatmap_csv(path, rows: list[dict]) -> None:
    lines = ["layer,score,delta"]
    lines.extend(f"{r['layer']},{r['score']!r},{r['delta']!r}" for r in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def read_heatmap_csv(path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != "layer,score,delta":
        raise ConfigError(f"{path}: not a heatmap CSV")
    out = []
    for line in lines[1:]:
        layer, score, delta = line.split(",")
        out.append({"layer": int(layer), "score": float(score), "delta": float(delta)})
    return out
