from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_utt
from pipescore.corpus import CorpusSnapshot, MetricKind
from pipescore.sweep import (
    PipelineConfig,
    SweepError,
    apply_filter,
    build_grid,
    exclude_ids,
    filter_sensitivity,
    improvement_pct,
    incomplete_ids,
    ranked_results,
    run_config,
    run_sweep,
    stage_table,
    write_scatters,
    write_sensitivity,
    write_sweep_report,
)

NISQA = MetricKind.MOS_NISQA
FULL = dict(PESQ=3.0, SNR=20.0, SI_SDR=15.0, T30=0.5, C50=10.0, F0_STD=20.0)


def _raw(mos: list[float], **extra: float) -> CorpusSnapshot:
    return CorpusSnapshot("raw", [make_utt(f"u{i}", 2.0 + i, MOS_NISQA=m, **{**FULL, **extra})
                                  for i, m in enumerate(mos)])


def test_grid_order_and_size():
    grid = build_grid(["none", "a", "b"], [("MOS_NISQA", [3.0, 3.5, 3.8, 4.2]), ("MOS_DNSMOS", [2.7, 3.0, 3.2, 3.4])])
    assert len(grid) == 24
    assert [g.name for g in grid[:5]] == ["none+MOS_NISQA:3", "none+MOS_NISQA:3.5", "none+MOS_NISQA:3.8",
                                          "none+MOS_NISQA:4.2", "none+MOS_DNSMOS:2.7"]
    assert not grid[0].denoised and grid[8].denoised


def test_grid_errors():
    with pytest.raises(SweepError, match="duplicate"):
        build_grid(["none"], [("MOS_NISQA", [3.0, 3.0])])
    with pytest.raises(SweepError, match="duplicate"):
        build_grid(["none", "none"], [("MOS_NISQA", [3.0])])
    with pytest.raises(SweepError):
        build_grid([], [("MOS_NISQA", [3.0])])
    with pytest.raises(SweepError, match="range"):
        PipelineConfig("none", NISQA, 5.5)


def test_apply_filter_keeps_boundary():
    out = apply_filter(_raw([2.0, 3.0, 3.5, 4.5]), NISQA, 3.0)
    assert out.retained.ids() == ["u1", "u2", "u3"] and out.eliminated.ids() == ["u0"]
    assert apply_filter(_raw([2.0, 3.0]), NISQA, 4.0).retained.ids() == []


def test_apply_filter_requires_coverage():
    snap = CorpusSnapshot("raw", [make_utt("a", MOS_NISQA=3.0), make_utt("b")])
    with pytest.raises(SweepError, match="1 utterance"):
        apply_filter(snap, NISQA, 3.0)


@given(st.lists(st.floats(1.0, 5.0), max_size=40), st.floats(1.0, 5.0))
def test_filter_partitions(values, t):
    snap = _raw(values)
    out = apply_filter(snap, NISQA, t)
    assert sorted(out.retained.ids() + out.eliminated.ids()) == sorted(snap.ids())
    assert not set(out.retained.ids()) & set(out.eliminated.ids())
    assert out.retained.total_hours + out.eliminated.total_hours == pytest.approx(snap.total_hours)


@given(st.lists(st.floats(1.0, 5.0), min_size=1, max_size=40), st.floats(1.0, 5.0), st.floats(1.0, 5.0))
def test_retained_hours_monotone_in_threshold(values, t1, t2):
    snap = _raw(values)
    lo, hi = sorted((t1, t2))
    assert apply_filter(snap, NISQA, hi).retained.total_hours <= apply_filter(snap, NISQA, lo).retained.total_hours


def test_sensitivity_worked_cases():
    rep = filter_sensitivity(_raw([1.0, 2.0, 3.0, 4.0]), NISQA, [2.0, 4.5], delta=0.5)
    assert rep.rows[0].retained_fraction == 0.75
    assert rep.rows[0].sensitivity == pytest.approx(1 / 3)
    assert rep.rows[1].retained_fraction == 0.0 and rep.rows[1].sensitivity is None
    assert rep.median == 2.5 and rep.variance == pytest.approx(1.25)
    with pytest.raises(SweepError):
        filter_sensitivity(_raw([1.0]), NISQA, [3.0])


def test_sensitivity_uniform_population():
    rng = np.random.default_rng(11)
    snap = CorpusSnapshot("u", [make_utt(f"u{i}", MOS_NISQA=v) for i, v in enumerate(rng.uniform(1, 5, 10_000))])
    row = filter_sensitivity(snap, NISQA, [3.0, 3.5]).rows[0]
    assert row.retained_fraction == pytest.approx(0.5, abs=0.02)
    assert row.sensitivity == pytest.approx(0.05, abs=0.01)


def test_run_config_identity_when_nothing_is_filtered():
    raw = _raw([4.0, 4.5, 5.0])
    cfg = PipelineConfig("none", NISQA, 3.0)
    _, s = run_config(raw, cfg, {})
    assert s.components() == pytest.approx((0.0, 3.0, 2.0, 0.0), abs=1e-12)


def test_run_config_better_processed_quality_lowers_sq():
    raw = _raw([4.0, 4.5])
    better = CorpusSnapshot("den", [u.with_metric(MetricKind.PESQ, 3.5).with_metric(MetricKind.MCD, 1.0)
                                    for u in raw.utterances])
    _, s = run_config(raw, PipelineConfig("den", NISQA, 3.0), {"den": better})
    assert s.sq < 3.0 and s.sd == pytest.approx(0.2)


def test_run_config_errors_carry_config_name():
    raw = _raw([4.0])
    with pytest.raises(SweepError, match=r"\[x\+MOS_NISQA:3\] no snapshot"):
        run_config(raw, PipelineConfig("x", NISQA, 3.0), {})
    shifted = CorpusSnapshot("p", [make_utt("u0", 5.0, MOS_NISQA=4.0, **FULL)])
    with pytest.raises(SweepError, match="duration"):
        run_config(raw, PipelineConfig("p", NISQA, 3.0), {"p": shifted})


def test_empty_retained_set_is_quarantined_with_dr_one():
    raw = _raw([2.0, 2.5])
    grid = build_grid(["none"], [("MOS_NISQA", [2.0, 4.0])])
    ok, empty = run_sweep(raw, grid, {})
    assert ok.ok and not empty.ok
    assert empty.dr == 1.0 and "empty" in empty.error
    assert [c.name for c, _ in ranked_results([ok, empty])] == ["none+MOS_NISQA:2"]


def test_sweep_deterministic_and_parallel_order():
    rng = np.random.default_rng(0)
    raw = CorpusSnapshot("raw", [make_utt(f"u{i}", float(rng.uniform(1, 9)), MOS_NISQA=float(rng.uniform(1, 5)),
                                          MOS_DNSMOS=float(rng.uniform(1, 5)), **FULL) for i in range(50)])
    den = CorpusSnapshot("den", [u.with_metric(MetricKind.MCD, 2.0) for u in raw.utterances])
    grid = build_grid(["none", "den"], [("MOS_NISQA", [2.0, 3.0]), ("MOS_DNSMOS", [2.5, 3.5])])
    a = run_sweep(raw, grid, {"den": den}, jobs=1)
    b = run_sweep(raw, grid, {"den": den}, jobs=4)
    assert [r.config for r in a] == grid
    assert [r.scores for r in a] == [r.scores for r in b]


def test_incomplete_and_exclude():
    raw = _raw([3.0, 4.0])
    den = CorpusSnapshot("den", [raw.utterances[0].with_metric(MetricKind.MCD, 1.0), raw.utterances[1]])
    assert incomplete_ids(raw, {"den": den}, [NISQA]) == ["u1"]
    kept = exclude_ids(raw, ["u1"])
    assert kept.ids() == ["u0"] and kept.provenance["excluded_incomplete"] == 1


def test_improvement_pct():
    assert improvement_pct(2.0, 3.0) == 50.0
    assert improvement_pct(1.0, 0.5, lower_is_better=True) == 50.0


def test_reports(tmp_path):
    raw = _raw([2.0, 3.5, 4.5])
    results = run_sweep(raw, build_grid(["none"], [("MOS_NISQA", [3.0, 4.9])]), {})
    write_sweep_report(tmp_path / "r.csv", results)
    rows = list(csv.DictReader((tmp_path / "r.csv").open()))
    assert [r["config"] for r in rows] == ["none+MOS_NISQA:3", "none+MOS_NISQA:4.9"]
    assert rows[0]["n_retained"] == "2" and rows[0]["error"] == ""
    assert rows[1]["error"] and rows[1]["dr"] == "1.000000"

    stages = stage_table(raw, results[0])
    assert [s["stage"] for s in stages] == ["Original", "Pipeline (no denoise)", "Eliminated"]
    assert stages[1]["n"] + stages[2]["n"] == 3

    write_scatters(tmp_path, results)
    lines = (tmp_path / "scatter_reduction_vs_pesq.csv").read_text().splitlines()
    assert lines[0].endswith("dataset_reduction,pesq_improvement_pct") and len(lines) == 2

    rep = filter_sensitivity(raw, NISQA, [3.0, 4.9])
    write_sensitivity(tmp_path / "s.csv", [("raw", rep)])
    assert "undefined" in (tmp_path / "s.csv").read_text()
