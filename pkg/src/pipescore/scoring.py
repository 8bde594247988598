"""Subset scores (dataset reduction, signal quality, acoustic parameters,
speech differences), the weighted composite and configuration ranking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .corpus import CorpusSnapshot, MetricKind

EPSILON = 1e-6
MCD_REFERENCE_DB = 5.0
UNIT_WEIGHTS = (1.0, 1.0, 1.0, 1.0)

SQ_KINDS = (MetricKind.PESQ, MetricKind.SI_SDR, MetricKind.SNR)
AP_KINDS = (MetricKind.T30, MetricKind.C50)
SCORE_KINDS = SQ_KINDS + AP_KINDS + (MetricKind.F0_STD,)


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class AggregateMetrics:
    hours: float
    means: dict[MetricKind, float] = field(default_factory=dict)
    stds: dict[MetricKind, float] = field(default_factory=dict)
    count: int = 0

    def mean(self, kind: MetricKind) -> float:
        try:
            return self.means[kind]
        except KeyError:
            raise ScoringError(f"no aggregate for {kind.value}") from None

    @classmethod
    def from_means(cls, hours: float, **means: float) -> "AggregateMetrics":
        """Build from already-aggregated values, e.g. published table rows."""
        return cls(hours=hours, means={MetricKind.parse(k): float(v) for k, v in means.items()})


@dataclass(frozen=True)
class SubsetScores:
    dr: float
    sq: float
    ap: float
    sd: float
    weights: tuple[float, float, float, float] = UNIT_WEIGHTS
    total: float = math.nan

    def components(self) -> tuple[float, float, float, float]:
        return (self.dr, self.sq, self.ap, self.sd)


def aggregate(snapshot: CorpusSnapshot, kinds: Iterable[MetricKind]) -> AggregateMetrics:
    """Unweighted per-utterance mean and population std for each kind."""
    if not snapshot.utterances:
        raise ScoringError(f"snapshot {snapshot.name!r} is empty; aggregates undefined")
    means, stds = {}, {}
    for kind in kinds:
        vals = [u.metrics.get(kind) for u in snapshot.utterances]
        missing = sum(v is None for v in vals)
        if missing:
            raise ScoringError(f"{kind.value}: {missing} of {len(vals)} utterances in {snapshot.name!r} lack a value")
        arr = np.array(vals, dtype=np.float64)
        mean = math.fsum(arr) / arr.size
        means[kind] = mean
        stds[kind] = math.sqrt(math.fsum((arr - mean) ** 2) / arr.size)
    return AggregateMetrics(hours=snapshot.total_hours, means=means, stds=stds, count=len(snapshot))


def duration_weighted_means(snapshot: CorpusSnapshot, kinds: Iterable[MetricKind]) -> dict[MetricKind, float]:
    """Diagnostics only; the scores use unweighted means."""
    w = np.array([u.duration_s for u in snapshot.utterances])
    out = {}
    for kind in kinds:
        if all(kind in u.metrics for u in snapshot.utterances) and w.sum() > 0:
            v = np.array([u.metrics[kind] for u in snapshot.utterances])
            out[kind] = float(np.dot(w, v) / w.sum())
    return out


def _positive(value: float, kind: MetricKind, which: str) -> float:
    if not value > EPSILON:
        raise ScoringError(f"{which} mean of {kind.value} is {value!r}; ratio needs a positive denominator")
    return value


def score_dr(raw: AggregateMetrics, processed: AggregateMetrics) -> float:
    if not raw.hours > 0:
        raise ScoringError("raw corpus has zero hours")
    return 1.0 - processed.hours / raw.hours


def score_sq(raw: AggregateMetrics, processed: AggregateMetrics) -> float:
    total = 0.0
    for kind in SQ_KINDS:
        total += raw.mean(kind) / _positive(processed.mean(kind), kind, "processed")
    return total


def score_ap(raw: AggregateMetrics, processed: AggregateMetrics) -> float:
    t30 = processed.mean(MetricKind.T30) / _positive(raw.mean(MetricKind.T30), MetricKind.T30, "raw")
    c50 = raw.mean(MetricKind.C50) / _positive(processed.mean(MetricKind.C50), MetricKind.C50, "processed")
    return t30 + c50


def score_sd(raw: AggregateMetrics, processed: AggregateMetrics, denoised: bool,
             mcd_reference_db: float = MCD_REFERENCE_DB) -> float:
    """F0-dispersion change plus, for denoised audio only, MCD relative to the reference."""
    f0_raw = _positive(raw.mean(MetricKind.F0_STD), MetricKind.F0_STD, "raw")
    sd = abs(1.0 - processed.mean(MetricKind.F0_STD) / f0_raw)
    if denoised:
        if MetricKind.MCD not in processed.means:
            raise ScoringError("denoised configuration without MCD values")
        sd += processed.means[MetricKind.MCD] / mcd_reference_db
    return sd


def composite(dr: float, sq: float, ap: float, sd: float,
              weights: Sequence[float] = UNIT_WEIGHTS) -> SubsetScores:
    w = tuple(float(x) for x in weights)
    if len(w) != 4 or any(x < 0 for x in w) or not any(w):
        raise ScoringError("weights must be four non-negative numbers, not all zero")
    total = w[0] * dr + w[1] * sq + w[2] * ap + w[3] * sd
    return SubsetScores(dr, sq, ap, sd, w, total)  # type: ignore[arg-type]


def score_config(raw: AggregateMetrics, processed: AggregateMetrics, denoised: bool,
                 weights: Sequence[float] = UNIT_WEIGHTS, mcd_reference_db: float = MCD_REFERENCE_DB) -> SubsetScores:
    return composite(
        score_dr(raw, processed),
        score_sq(raw, processed),
        score_ap(raw, processed),
        score_sd(raw, processed, denoised, mcd_reference_db),
        weights,
    )


def config_name(cfg: Any) -> str:
    return cfg if isinstance(cfg, str) else getattr(cfg, "name", str(cfg))


def rank(configs: Sequence[tuple[Any, SubsetScores]]) -> list[tuple[Any, SubsetScores]]:
    """Ascending total; ties by DR, then configuration name."""
    return sorted(configs, key=lambda item: (item[1].total, item[1].dr, config_name(item[0])))


RANKING_COLUMNS = ("config", "dr", "sq", "ap", "sd", "total")


def write_ranking_csv(path: str | Path, ranked: Sequence[tuple[Any, SubsetScores]]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANKING_COLUMNS)
        for cfg, s in ranked:
            w.writerow([config_name(cfg), *(f"{v:.6f}" for v in (s.dr, s.sq, s.ap, s.sd, s.total))])


def read_scores_csv(path: str | Path, weights: Sequence[float] = UNIT_WEIGHTS) -> list[tuple[str, SubsetScores]]:
    """Read ``config,dr,sq,ap,sd[,total]`` rows; totals are recomputed from ``weights``."""
    out = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append((rec["config"], composite(float(rec["dr"]), float(rec["sq"]), float(rec["ap"]),
                                                 float(rec["sd"]), weights)))
    return out
