"""Two-stage greedy beam search against exhaustive enumeration, plus ledgers."""

from types import SimpleNamespace

import numpy as np
import pytest

from jetvit.errors import ConfigError, GuardError, NumericError
from jetvit.search import (
    Evaluator,
    SearchConfig,
    beam_search_stage1,
    beam_search_stage2,
    exhaustive_search,
    fa_placement_heatmap,
    read_heatmap_csv,
    write_heatmap_csv,
)
from jetvit.serialize import read_json
from jetvit.supernet import stage1_choices, stage2_choices
from jetvit.verify import separable_evaluator, table_evaluator
from jetvit.vit import ArchDescriptor, Kind, arch_parse

DEPTH = 6


def _stub(choices):
    return SimpleNamespace(depth=len(choices), choices=choices)


def _stage1_stub(depth=DEPTH):
    return _stub(stage1_choices(depth))


def _stage2_stub(code="L" * DEPTH):
    return _stub(stage2_choices(arch_parse(code)))


def test_search_config_validation():
    with pytest.raises(ConfigError):
        SearchConfig(stage=3)
    with pytest.raises(ConfigError):
        SearchConfig(stage=1, beam_width=0)
    with pytest.raises(ConfigError):
        SearchConfig(stage=1, tau=-0.1)
    with pytest.raises(ConfigError):
        SearchConfig(stage=2, k_max=-1)


def test_evaluator_memoizes_and_counts():
    ev = separable_evaluator(4, seed=0)
    a = arch_parse("LWLW")
    s1 = ev.score(a)
    s2 = ev.score(arch_parse("LWLW"))
    assert s1 == s2 and ev.calls == 1
    ev.score(arch_parse("WWWW"))
    assert ev.calls == 2


def test_evaluator_rejects_nonfinite():
    ev = Evaluator(fn=lambda arch: float("nan"))
    with pytest.raises(NumericError):
        ev.score(arch_parse("LW"))


def test_stage1_beam_matches_exhaustive_on_tables():
    for seed in range(6):
        _, table = exhaustive_search(
            table_evaluator(DEPTH, seed=seed), DEPTH, (Kind.LINEAR, Kind.WINDOW)
        )
        best = max(table.values())
        arch, ledger = beam_search_stage1(
            _stage1_stub(), table_evaluator(DEPTH, seed=seed),
            SearchConfig(stage=1, beam_width=4, tau=0.0),
        )
        assert ledger.final_score >= 0.98 * best
        assert ledger.stop_reason in ("plateau", "budget")


def test_stage1_beam_exact_on_separable_tables():
    for seed in range(4):
        best_arch, table = exhaustive_search(
            separable_evaluator(DEPTH, seed=seed), DEPTH, (Kind.LINEAR, Kind.WINDOW)
        )
        arch, ledger = beam_search_stage1(
            _stage1_stub(), separable_evaluator(DEPTH, seed=seed),
            SearchConfig(stage=1, beam_width=4, tau=0.0),
        )
        assert ledger.final_score == table[best_arch.serialize()]


def test_stage1_monotone_gain_walks_to_all_window():
    fn = lambda arch: float(arch.count(Kind.WINDOW))
    arch, ledger = beam_search_stage1(
        _stage1_stub(), Evaluator(fn=fn), SearchConfig(stage=1, beam_width=2, tau=0.5)
    )
    assert arch.serialize() == "W" * DEPTH
    assert ledger.stop_reason == "budget"  # no Linear layers left to flip
    assert len(ledger.rounds) == DEPTH + 1


def test_stage1_plateau_records_the_failing_round():
    fn = lambda arch: 1.0  # flat landscape: round 1 shows no improvement
    arch, ledger = beam_search_stage1(
        _stage1_stub(), Evaluator(fn=fn), SearchConfig(stage=1, beam_width=4, tau=0.1)
    )
    assert ledger.stop_reason == "plateau"
    assert arch.serialize() == "L" * DEPTH
    assert len(ledger.rounds) == 2  # init round plus the rejected expansion
    assert len(ledger.rounds[1]["candidates"]) == DEPTH


def test_stage1_rejects_wrong_stage_or_choices():
    with pytest.raises(ConfigError):
        beam_search_stage1(_stage1_stub(), Evaluator(fn=lambda a: 0.0), SearchConfig(stage=2))
    with pytest.raises(ConfigError):
        beam_search_stage1(
            _stub(((Kind.WINDOW,),) * 3), Evaluator(fn=lambda a: 0.0), SearchConfig(stage=1)
        )


def _rewards_full_at(targets, penalty=0.1):
    def fn(arch):
        s = 0.0
        for i, k in enumerate(arch.kinds):
            if k is Kind.FULL:
                s += 1.0 if i in targets else -penalty
        return s

    return fn


def test_stage2_places_full_at_rewarded_layers():
    arch, ledger = beam_search_stage2(
        _stage2_stub(),
        Evaluator(fn=_rewards_full_at({2, 4})),
        SearchConfig(stage=2, beam_width=4, tau=0.0, delta=0.0, k_max=2),
        stage1_arch=arch_parse("L" * DEPTH),
        teacher_score=10.0,
    )
    placed = tuple(i for i, k in enumerate(arch.kinds) if k is Kind.FULL)
    assert placed == (2, 4)
    assert ledger.stop_reason == "budget"
    assert ledger.teacher_score == 10.0


def test_stage2_teacher_gap_stops_without_flips():
    arch, ledger = beam_search_stage2(
        _stage2_stub(),
        Evaluator(fn=lambda a: 5.0),
        SearchConfig(stage=2, beam_width=4, tau=0.0, delta=1.0, k_max=3),
        stage1_arch=arch_parse("L" * DEPTH),
        teacher_score=5.5,  # 5.0 >= 5.5 - 1.0
    )
    assert ledger.stop_reason == "teacher_gap_met"
    assert arch.serialize() == "L" * DEPTH
    assert len(ledger.rounds) == 1


def test_stage2_kmax_zero_stops_immediately():
    arch, ledger = beam_search_stage2(
        _stage2_stub(),
        Evaluator(fn=_rewards_full_at({0})),
        SearchConfig(stage=2, beam_width=4, tau=0.0, delta=0.0, k_max=0),
        stage1_arch=arch_parse("L" * DEPTH),
        teacher_score=99.0,
    )
    assert ledger.stop_reason == "budget"
    assert arch.count(Kind.FULL) == 0


def test_stage2_respects_collapsed_choices():
    # Layer 1 is already Full in the stage-1 arch: never re-expanded.
    stub = _stage2_stub("LFLLLL")
    arch, ledger = beam_search_stage2(
        stub,
        Evaluator(fn=_rewards_full_at({1, 3})),
        SearchConfig(stage=2, beam_width=4, tau=0.0, delta=0.0, k_max=2),
        stage1_arch=arch_parse("LFLLLL"),
        teacher_score=99.0,
    )
    assert arch.kinds[1] is Kind.FULL and arch.kinds[3] is Kind.FULL


def test_ledger_json_shape(tmp_path):
    path = tmp_path / "ledger.json"
    _, ledger = beam_search_stage1(
        _stage1_stub(),
        table_evaluator(DEPTH, seed=1),
        SearchConfig(stage=1, beam_width=4, tau=0.0),
        ledger_path=path,
    )
    d = read_json(path)
    assert d["schema_version"] == 1
    assert d["stage"] == 1 and d["stop_reason"] == ledger.stop_reason
    assert d["rounds"][0]["candidates"][0]["arch"] == "L" * DEPTH
    assert d["final_arch"] == ledger.final_arch
    for r in d["rounds"][1:]:
        for c in r["candidates"]:
            assert set(c) == {"arch", "score", "parent", "flip_layer"}
        assert len(r["beam"]) <= 4


def test_aborted_search_still_writes_ledger(tmp_path):
    path = tmp_path / "ledger.json"
    calls = {"n": 0}

    def flaky(arch):
        calls["n"] += 1
        if calls["n"] > 3:
            raise NumericError("synthetic failure")
        return float(calls["n"])

    with pytest.raises(NumericError):
        beam_search_stage1(
            _stage1_stub(), Evaluator(fn=flaky),
            SearchConfig(stage=1, beam_width=4, tau=0.0), ledger_path=path,
        )
    d = read_json(path)
    assert d["stop_reason"] == "aborted"
    assert "synthetic failure" in d["error"]


def test_exhaustive_tie_break_is_lexicographic():
    flat = Evaluator(fn=lambda a: 1.0)
    arch, _ = exhaustive_search(flat, 3, (Kind.LINEAR, Kind.WINDOW))
    assert arch.serialize() == "LLL"
    arch2, _ = exhaustive_search(Evaluator(fn=lambda a: 1.0), 2, (Kind.FULL, Kind.LINEAR))
    assert arch2.serialize() == "FF"


def test_exhaustive_guard():
    with pytest.raises(GuardError):
        exhaustive_search(Evaluator(fn=lambda a: 0.0), 11, tuple(Kind))


def test_heatmap_rows_match_round1_expansions(tmp_path):
    base = arch_parse("L" * DEPTH)
    rows = fa_placement_heatmap(_stage2_stub(), table_evaluator(DEPTH, seed=3), base)
    _, ledger = beam_search_stage2(
        _stage2_stub(), table_evaluator(DEPTH, seed=3),
        SearchConfig(stage=2, beam_width=4, tau=0.0, delta=0.0, k_max=1),
        stage1_arch=base, teacher_score=1e9,
    )
    by_layer = {c["flip_layer"]: c["score"] for c in ledger.rounds[1]["candidates"]}
    for row in rows:
        assert row["score"] == by_layer[row["layer"]]


def test_heatmap_full_layer_scores_base(tmp_path):
    stub = _stage2_stub("LFLL")
    ev = Evaluator(fn=_rewards_full_at({1}))
    rows = fa_placement_heatmap(stub, ev, arch_parse("LFLL"))
    assert rows[1]["delta"] == 0.0
    assert ev.calls == 4  # base plus three flips; the Full row reuses the cache

    p = tmp_path / "heatmap.csv"
    write_heatmap_csv(p, rows)
    assert read_heatmap_csv(p) == rows
    assert p.read_text().splitlines()[0] == "layer,score,delta"


def test_heatmap_csv_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        read_heatmap_csv(p)
