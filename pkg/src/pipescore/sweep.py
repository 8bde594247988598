"""Configuration grid, MOS-threshold filtering and per-configuration scoring."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .corpus import CorpusSnapshot, MetricKind
from .scoring import (
    MCD_REFERENCE_DB,
    SCORE_KINDS,
    UNIT_WEIGHTS,
    AggregateMetrics,
    ScoringError,
    SubsetScores,
    aggregate,
    composite,
    rank,
    score_ap,
    score_dr,
    score_sd,
    score_sq,
)
from .sidecar import VALUE_RANGES

logger = logging.getLogger(__name__)

NO_ENHANCEMENT = "none"
DURATION_TOLERANCE = 0.01


class SweepError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    enhancement: str
    filter_metric: MetricKind
    threshold: float
    vad_profile: str = "default"

    def __post_init__(self) -> None:
        lo, hi = VALUE_RANGES.get(self.filter_metric, (None, None))
        if (lo is not None and self.threshold < lo) or (hi is not None and self.threshold > hi):
            raise SweepError(f"threshold {self.threshold} outside the {self.filter_metric.value} range [{lo}, {hi}]")

    @property
    def denoised(self) -> bool:
        return self.enhancement != NO_ENHANCEMENT

    @property
    def name(self) -> str:
        return f"{self.enhancement}+{self.filter_metric.value}:{self.threshold:g}"


@dataclass
class FilterOutcome:
    retained: CorpusSnapshot
    eliminated: CorpusSnapshot
    threshold: float


def build_grid(enhancements: Sequence[str], filters: Sequence[tuple[MetricKind | str, Sequence[float]]],
               vad_profile: str = "default") -> list[PipelineConfig]:
    """Cartesian product in the order enhancement, filter metric, threshold."""
    if not enhancements or not filters:
        raise SweepError("grid needs at least one enhancement and one filter")
    if len(set(enhancements)) != len(enhancements):
        raise SweepError("duplicate enhancement labels")
    parsed = []
    for metric, thresholds in filters:
        if not thresholds:
            raise SweepError(f"no thresholds for {metric}")
        if len(set(thresholds)) != len(thresholds):
            raise SweepError(f"duplicate thresholds for {metric}: {list(thresholds)}")
        parsed.append((MetricKind.parse(metric), [float(t) for t in thresholds]))
    return [PipelineConfig(e, m, t, vad_profile) for e in enhancements for m, ts in parsed for t in ts]


def _require_coverage(snapshot: CorpusSnapshot, metric: MetricKind) -> None:
    missing = [u.id for u in snapshot.utterances if metric not in u.metrics]
    if missing:
        raise SweepError(f"{metric.value} missing for {len(missing)} utterance(s) in {snapshot.name!r}, "
                         f"e.g. {missing[:5]}")


def apply_filter(snapshot: CorpusSnapshot, metric: MetricKind, threshold: float) -> FilterOutcome:
    """Keep utterances whose value is >= threshold (boundary values are retained)."""
    _require_coverage(snapshot, metric)
    keep = [u for u in snapshot.utterances if u.metrics[metric] >= threshold]
    drop = [u for u in snapshot.utterances if u.metrics[metric] < threshold]
    tag = f"{metric.value}>={threshold:g}"
    return FilterOutcome(
        retained=snapshot.derive(f"{snapshot.name}[{tag}]", keep, filter=tag),
        eliminated=snapshot.derive(f"{snapshot.name}[not {tag}]", drop, filter=f"not {tag}"),
        threshold=threshold,
    )


@dataclass(frozen=True)
class SensitivityRow:
    threshold: float
    retained_fraction: float
    sensitivity: float | None  # None: nothing retained at this threshold


@dataclass(frozen=True)
class SensitivityReport:
    metric: MetricKind
    delta: float
    rows: list[SensitivityRow]
    median: float
    variance: float


def filter_sensitivity(snapshot: CorpusSnapshot, metric: MetricKind, thresholds: Sequence[float],
                       delta: float = 0.1) -> SensitivityReport:
    """Retained fraction per threshold and its relative change over one ``delta`` step."""
    if len(thresholds) < 2:
        raise SweepError("sensitivity needs at least two thresholds")
    _require_coverage(snapshot, metric)
    values = np.sort(np.array([u.metrics[metric] for u in snapshot.utterances], dtype=np.float64))
    n = values.size
    if n == 0:
        raise SweepError("empty snapshot")

    def retained(t: float) -> int:
        return n - int(np.searchsorted(values, t, side="left"))

    rows = []
    for t in thresholds:
        r0, r1 = retained(t), retained(t + delta)
        rows.append(SensitivityRow(float(t), r0 / n, None if r0 == 0 else abs(r0 - r1) / r0))
    return SensitivityReport(metric, delta, rows, float(np.median(values)), float(np.var(values)))


# ---------------------------------------------------------------------------- runs


@dataclass
class ConfigResult:
    config: PipelineConfig
    outcome: FilterOutcome | None
    scores: SubsetScores | None
    raw: AggregateMetrics | None = None
    retained: AggregateMetrics | None = None
    dr: float | None = None
    error: str | None = None
    audit: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None


def check_alignment(raw: CorpusSnapshot, processed: CorpusSnapshot) -> None:
    """Processed snapshots must carry the raw ids with durations within 1%."""
    raw_ids, proc = raw.by_id(), processed.by_id()
    if set(raw_ids) != set(proc):
        only_raw = sorted(set(raw_ids) - set(proc))[:5]
        only_proc = sorted(set(proc) - set(raw_ids))[:5]
        raise SweepError(f"{processed.name!r} is not id-aligned with {raw.name!r} "
                         f"(only raw: {only_raw}, only processed: {only_proc})")
    for uid, u in raw_ids.items():
        d = proc[uid].duration_s
        if abs(d - u.duration_s) > DURATION_TOLERANCE * u.duration_s:
            raise SweepError(f"{uid}: duration {d:.3f}s vs raw {u.duration_s:.3f}s")


def kinds_for(cfg: PipelineConfig) -> tuple[MetricKind, ...]:
    return SCORE_KINDS + ((MetricKind.MCD,) if cfg.denoised else ())


def run_config(raw: CorpusSnapshot, cfg: PipelineConfig, processed_snapshots: Mapping[str, CorpusSnapshot],
               weights: Sequence[float] = UNIT_WEIGHTS, mcd_reference_db: float = MCD_REFERENCE_DB,
               raw_aggregate: AggregateMetrics | None = None) -> tuple[FilterOutcome, SubsetScores]:
    """Filter the enhancement's snapshot and score the retained set against raw.

    Errors are re-raised as :class:`SweepError` prefixed with the config name.
    """
    try:
        if cfg.enhancement in processed_snapshots:
            processed = processed_snapshots[cfg.enhancement]
            check_alignment(raw, processed)
        elif cfg.enhancement == NO_ENHANCEMENT:
            processed = raw
        else:
            raise SweepError(f"no snapshot for enhancement {cfg.enhancement!r}")
        outcome = apply_filter(processed, cfg.filter_metric, cfg.threshold)
        raw_agg = raw_aggregate or aggregate(raw, SCORE_KINDS)
        kept = aggregate(outcome.retained, kinds_for(cfg))
        scores = composite(score_dr(raw_agg, kept), score_sq(raw_agg, kept), score_ap(raw_agg, kept),
                           score_sd(raw_agg, kept, cfg.denoised, mcd_reference_db), weights)
    except (SweepError, ScoringError) as exc:
        raise SweepError(f"[{cfg.name}] {exc}") from exc
    return outcome, scores


def _run_one(raw: CorpusSnapshot, raw_agg: AggregateMetrics, cfg: PipelineConfig,
             processed: Mapping[str, CorpusSnapshot], weights: Sequence[float], mcd_ref: float) -> ConfigResult:
    try:
        outcome, scores = run_config(raw, cfg, processed, weights, mcd_ref, raw_agg)
    except SweepError as exc:
        res = ConfigResult(cfg, None, None, raw=raw_agg, error=str(exc))
        snap = processed.get(cfg.enhancement, raw if cfg.enhancement == NO_ENHANCEMENT else None)
        if snap is not None:
            try:
                res.outcome = apply_filter(snap, cfg.filter_metric, cfg.threshold)
                res.dr = 1.0 - res.outcome.retained.total_hours / raw_agg.hours
            except SweepError:
                pass
        return res
    kept = aggregate(outcome.retained, kinds_for(cfg))
    return ConfigResult(
        cfg, outcome, scores, raw=raw_agg, retained=kept, dr=scores.dr,
        audit={
            "n_raw": len(raw),
            "n_retained": len(outcome.retained),
            "n_eliminated": len(outcome.eliminated),
            "hours_raw": raw.total_hours,
            "hours_retained": outcome.retained.total_hours,
            "hours_eliminated": outcome.eliminated.total_hours,
            "threshold": cfg.threshold,
        },
    )


def incomplete_ids(raw: CorpusSnapshot, processed: Mapping[str, CorpusSnapshot],
                   filter_kinds: Sequence[MetricKind]) -> list[str]:
    """Ids lacking a metric the sweep needs, in raw or in any processed variant."""
    need_raw = set(SCORE_KINDS) | set(filter_kinds)
    bad = {u.id for u in raw.utterances if not need_raw <= u.metrics.keys()}
    for label, snap in processed.items():
        need = need_raw | ({MetricKind.MCD} if label != NO_ENHANCEMENT else set())
        bad |= {u.id for u in snap.utterances if not need <= u.metrics.keys()}
    return [uid for uid in raw.ids() if uid in bad]


def exclude_ids(snapshot: CorpusSnapshot, ids: Sequence[str]) -> CorpusSnapshot:
    drop = set(ids)
    return snapshot.derive(snapshot.name, [u for u in snapshot.utterances if u.id not in drop],
                           excluded_incomplete=len(drop & set(snapshot.ids())))


def run_sweep(raw: CorpusSnapshot, grid: Sequence[PipelineConfig], processed: Mapping[str, CorpusSnapshot],
              weights: Sequence[float] = UNIT_WEIGHTS, mcd_reference_db: float = MCD_REFERENCE_DB,
              jobs: int = 1) -> list[ConfigResult]:
    """Run every configuration; failures are quarantined in their result. Output follows grid order."""
    raw_agg = aggregate(raw, SCORE_KINDS)
    work = lambda cfg: _run_one(raw, raw_agg, cfg, processed, weights, mcd_reference_db)  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(work, grid))
    return [work(cfg) for cfg in grid]


def ranked_results(results: Sequence[ConfigResult]) -> list[tuple[PipelineConfig, SubsetScores]]:
    return rank([(r.config, r.scores) for r in results if r.scores is not None])


# ------------------------------------------------------------------------ reports


REPORT_KINDS = SCORE_KINDS + (MetricKind.MCD,)


def improvement_pct(raw_mean: float, proc_mean: float, lower_is_better: bool = False) -> float:
    """100·(P − R)/R, sign-flipped when a reduction is the improvement."""
    pct = 100.0 * (proc_mean - raw_mean) / raw_mean
    return -pct if lower_is_better else pct


def _fmt(v: float | None) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def write_sweep_report(path: str | Path, results: Sequence[ConfigResult]) -> None:
    """One row per configuration in grid order; failed configs carry an ``error``."""
    cols = ["config", "enhancement", "filter_metric", "threshold", "n_retained", "hours_raw", "hours_retained"]
    for k in REPORT_KINDS:
        cols += [f"{k.value}_mean", f"{k.value}_std"]
    cols += ["dr", "sq", "ap", "sd", "total", "error"]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in results:
            row = [r.config.name, r.config.enhancement, r.config.filter_metric.value, f"{r.config.threshold:g}"]
            kept = r.outcome.retained if r.outcome else None
            row += [len(kept) if kept else 0, _fmt(r.raw.hours if r.raw else None), _fmt(kept.total_hours if kept else 0.0)]
            for k in REPORT_KINDS:
                row += [_fmt(r.retained.means.get(k)) if r.retained else "", _fmt(r.retained.stds.get(k)) if r.retained else ""]
            if r.scores:
                row += [_fmt(v) for v in (r.scores.dr, r.scores.sq, r.scores.ap, r.scores.sd, r.scores.total)]
            else:
                row += [_fmt(r.dr), "", "", "", ""]
            row.append(r.error or "")
            w.writerow(row)


def stage_table(raw: CorpusSnapshot, result: ConfigResult,
                processed_unfiltered: CorpusSnapshot | None = None) -> list[dict[str, Any]]:
    """Stage breakdown rows: Original, Pipeline (retained), Eliminated."""
    stages: list[tuple[str, CorpusSnapshot]] = [("Original", raw)]
    if result.outcome is not None:
        label = "Pipeline (denoised)" if result.config.denoised else "Pipeline (no denoise)"
        stages += [(label, result.outcome.retained), ("Eliminated", result.outcome.eliminated)]
    rows = []
    for label, snap in stages:
        rec: dict[str, Any] = {"stage": label, "hours": snap.total_hours, "n": len(snap)}
        for k in REPORT_KINDS:
            vals = [u.metrics[k] for u in snap.utterances if k in u.metrics]
            full = snap.utterances and len(vals) == len(snap.utterances)
            rec[f"{k.value}_mean"] = float(np.mean(vals)) if full else None
            rec[f"{k.value}_std"] = float(np.std(vals)) if full else None
        rows.append(rec)
    return rows


def write_stage_table(path: str | Path, rows: Sequence[dict[str, Any]]) -> None:
    cols = ["stage", "hours", "n"] + [f"{k.value}_{s}" for k in REPORT_KINDS for s in ("mean", "std")]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in rows:
            w.writerow([rec["stage"], _fmt(rec["hours"]), rec["n"]] + [_fmt(rec[c]) for c in cols[3:]])


SCATTERS = {
    "scatter_reduction_vs_pesq.csv": ("dataset_reduction", "pesq_improvement_pct"),
    "scatter_reduction_vs_t30.csv": ("dataset_reduction", "t30_improvement_pct"),
    "scatter_f0std_vs_pesq.csv": ("f0std_diff", "pesq_improvement_pct"),
}


def scatter_points(result: ConfigResult) -> dict[str, float] | None:
    if result.scores is None or result.raw is None or result.retained is None:
        return None
    r, p = result.raw, result.retained
    return {
        "dataset_reduction": result.scores.dr,
        "pesq_improvement_pct": improvement_pct(r.mean(MetricKind.PESQ), p.mean(MetricKind.PESQ)),
        "t30_improvement_pct": improvement_pct(r.mean(MetricKind.T30), p.mean(MetricKind.T30), lower_is_better=True),
        "f0std_diff": abs(1.0 - p.mean(MetricKind.F0_STD) / r.mean(MetricKind.F0_STD)),
    }


def write_scatters(out_dir: str | Path, results: Sequence[ConfigResult]) -> None:
    out_dir = Path(out_dir)
    points = [(r, scatter_points(r)) for r in results]
    for fname, (xk, yk) in SCATTERS.items():
        with (out_dir / fname).open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config", "enhancement", "filter_metric", "threshold", xk, yk])
            for r, pt in points:
                if pt is None:
                    continue
                c = r.config
                w.writerow([c.name, c.enhancement, c.filter_metric.value, f"{c.threshold:g}", _fmt(pt[xk]), _fmt(pt[yk])])


def write_sensitivity(path: str | Path, reports: Sequence[tuple[str, SensitivityReport]]) -> None:
    """Rows per (snapshot, metric, threshold) plus the metric's median and variance."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["snapshot", "metric", "threshold", "delta", "retained_fraction", "sensitivity", "median", "variance"])
        for snap_name, rep in reports:
            for row in rep.rows:
                sens = "undefined" if row.sensitivity is None else _fmt(row.sensitivity)
                w.writerow([snap_name, rep.metric.value, f"{row.threshold:g}", f"{rep.delta:g}",
                            _fmt(row.retained_fraction), sens, _fmt(rep.median), _fmt(rep.variance)])
