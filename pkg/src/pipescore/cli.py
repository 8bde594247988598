"""``pipescore`` command line: ingest, segment, metrics, attach, sweep, rank, synth.

All commands share ``--config``, ``--out``, ``--seed`` and ``--jobs``. The run
configuration is a JSON file; relative paths in it resolve against the file's
directory. Exit status: 0 success (possibly with warnings), 1 validation
error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import dsp, synth
from .corpus import (
    DEFAULT_SAMPLE_RATE,
    CorpusError,
    CorpusSnapshot,
    MetricKind,
    Utterance,
    ingest_manifest,
    load_snapshot,
    load_utterance_audio,
    save_snapshot,
    write_manifest,
)
from .scoring import UNIT_WEIGHTS, ScoringError, SubsetScores, config_name, rank, read_scores_csv, write_ranking_csv
from .sidecar import TIMESTAMPS, SidecarError, load_sidecar, merge, write_sidecar
from .sweep import (
    NO_ENHANCEMENT,
    SweepError,
    build_grid,
    exclude_ids,
    filter_sensitivity,
    incomplete_ids,
    ranked_results,
    run_sweep,
    stage_table,
    write_scatters,
    write_sensitivity,
    write_stage_table,
    write_sweep_report,
)
from .tpe import VAD_SPACE, ParamSpec, TPESettings, TrialRecord, tune_vad, write_history_csv
from .vad import (
    DEFAULT_MIN_UTT_S,
    DEFAULT_RATE_BOUNDS,
    LengthTarget,
    SpeechRateClass,
    VadParams,
    classify_rate,
    concat_to_target,
    detect,
    words_per_second,
    write_params,
    write_segments_csv,
)

logger = logging.getLogger("pipescore")

JOBS_ENV = "PIPESCORE_JOBS"
DEFAULT_SEED = 0
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
STAGES = ("attached", "segmented", "ingested")


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------------- config


@dataclass
class RunConfig:
    base_dir: Path
    out_dir: Path
    sample_rate: int = DEFAULT_SAMPLE_RATE
    manifests: dict[str, Path] = field(default_factory=dict)
    reference: str | None = None
    sidecars: dict[str, dict[str, Path]] = field(default_factory=dict)
    sidecar_key: str = "id"
    coverage_policy: str = "strict"
    max_error_rate: float = 0.0
    timestamps: Path | None = None
    enhancements: list[str] = field(default_factory=list)
    filters: list[tuple[MetricKind, list[float]]] = field(default_factory=list)
    weights: tuple[float, ...] = UNIT_WEIGHTS
    mcd_reference_db: float = 5.0
    sensitivity_delta: float = 0.1
    vad_budget: int = 30
    vad_space: tuple[ParamSpec, ...] = VAD_SPACE
    rate_bounds: tuple[float, float] = DEFAULT_RATE_BOUNDS
    length_target: LengthTarget = field(default_factory=LengthTarget)
    min_utt_s: float = DEFAULT_MIN_UTT_S
    tpe: TPESettings = field(default_factory=TPESettings)
    scores: Path | None = None
    missing_metrics: str = "error"
    seed: int = DEFAULT_SEED
    jobs: int = 1

    @property
    def labels(self) -> list[str]:
        """Every variant, reference included, in manifest order."""
        return list(self.manifests)

    def snapshot_path(self, stage: str, label: str) -> Path:
        return self.out_dir / "snapshots" / f"{stage}_{label}.jsonl"


def _set_dotted(raw: dict[str, Any], key: str, value: Any) -> None:
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(f"--set {key}: {p!r} is not a section")
    node[parts[-1]] = value


def _parse_set(items: Sequence[str]) -> list[tuple[str, Any]]:
    out = []
    for item in items:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        out.append((key.strip(), value))
    return out


def load_config(path: str | Path | None, overrides: Sequence[tuple[str, Any]] = (),
                out: str | None = None, seed: int | None = None, jobs: int | None = None,
                require_paths: bool = True) -> RunConfig:
    """Read and validate a run configuration; flags win over file fields."""
    raw: dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be an object")
        base = path.resolve().parent
    for key, value in overrides:
        _set_dotted(raw, key, value)

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    try:
        cfg = _build_config(raw, base, resolve)
    except (TypeError, ValueError, KeyError) as exc:
        raise ValidationError(f"invalid config: {exc}") from exc
    if out is not None:
        cfg.out_dir = Path(out).resolve()
    if seed is not None:
        cfg.seed = seed
    cfg.tpe = replace(cfg.tpe, seed=cfg.seed)
    if jobs is not None:
        cfg.jobs = jobs
    if cfg.jobs < 1:
        raise ValidationError("jobs must be >= 1")
    if require_paths:
        _check_paths(cfg)
    return cfg


def _build_config(raw: dict[str, Any], base: Path, resolve: Callable[[str], Path]) -> RunConfig:
    known = {"sample_rate", "manifests", "reference", "sidecars", "sidecar_key", "coverage_policy",
             "max_error_rate", "timestamps", "enhancements", "filters", "weights", "mcd_reference_db",
             "sensitivity_delta", "vad", "tpe", "scores", "missing_metrics", "seed", "jobs", "out_dir"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown config field(s): {', '.join(unknown)}")
    cfg = RunConfig(base_dir=base, out_dir=resolve(raw.get("out_dir", "run")))
    cfg.sample_rate = int(raw.get("sample_rate", DEFAULT_SAMPLE_RATE))
    if cfg.sample_rate <= 0:
        raise ValidationError("sample_rate must be positive")
    cfg.manifests = {str(k): resolve(v) for k, v in raw.get("manifests", {}).items()}
    cfg.reference = raw.get("reference")
    if cfg.reference is not None and cfg.reference not in cfg.manifests:
        raise ValidationError(f"reference {cfg.reference!r} has no manifest")
    cfg.sidecars = {str(lbl): {MetricKind.parse(k).value: resolve(p) for k, p in m.items()}
                    for lbl, m in raw.get("sidecars", {}).items()}
    for lbl in cfg.sidecars:
        if lbl not in cfg.manifests:
            raise ValidationError(f"sidecars given for unknown variant {lbl!r}")
    cfg.sidecar_key = raw.get("sidecar_key", "id")
    if cfg.sidecar_key not in ("id", "source_id"):
        raise ValidationError("sidecar_key must be 'id' or 'source_id'")
    cfg.coverage_policy = raw.get("coverage_policy", "strict")
    if cfg.coverage_policy not in ("strict", "partial"):
        raise ValidationError("coverage_policy must be 'strict' or 'partial'")
    cfg.max_error_rate = float(raw.get("max_error_rate", 0.0))
    if raw.get("timestamps"):
        cfg.timestamps = resolve(raw["timestamps"])
    default_enh = [lbl for lbl in cfg.manifests if lbl != cfg.reference]
    cfg.enhancements = [str(e) for e in raw.get("enhancements", default_enh)]
    for e in cfg.enhancements:
        if e not in cfg.manifests:
            raise ValidationError(f"enhancement {e!r} has no manifest")
    if cfg.manifests and NO_ENHANCEMENT not in cfg.manifests:
        raise ValidationError(f"the unprocessed variant must be listed under manifests as {NO_ENHANCEMENT!r}")
    filters = raw.get("filters", {})
    cfg.filters = [(MetricKind.parse(k), [float(t) for t in v]) for k, v in filters.items()]
    weights = tuple(float(w) for w in raw.get("weights", UNIT_WEIGHTS))
    if len(weights) != 4 or any(w < 0 or not math.isfinite(w) for w in weights) or not any(weights):
        raise ValidationError("weights must be four non-negative numbers, not all zero")
    cfg.weights = weights
    cfg.mcd_reference_db = float(raw.get("mcd_reference_db", 5.0))
    if not cfg.mcd_reference_db > 0:
        raise ValidationError("mcd_reference_db must be positive")
    cfg.sensitivity_delta = float(raw.get("sensitivity_delta", 0.1))
    vad = raw.get("vad", {})
    cfg.vad_budget = int(vad.get("budget", 30))
    if cfg.vad_budget < 1:
        raise ValidationError("vad.budget must be >= 1")
    if "space" in vad:
        cfg.vad_space = tuple(ParamSpec(name, kind, float(lo), float(hi)) for name, (kind, lo, hi) in vad["space"].items())
        bad = [s.name for s in cfg.vad_space if s.name not in VadParams.RANGES]
        if bad:
            raise ValidationError(f"vad.space: unknown parameter(s) {bad}")
    lo, hi = vad.get("rate_bounds", DEFAULT_RATE_BOUNDS)
    if not 0 <= lo <= hi:
        raise ValidationError("vad.rate_bounds must satisfy 0 <= slow_max <= fast_min")
    cfg.rate_bounds = (float(lo), float(hi))
    cfg.length_target = LengthTarget(**vad.get("length_target", {}))
    cfg.min_utt_s = float(vad.get("min_utt_s", DEFAULT_MIN_UTT_S))
    tpe = raw.get("tpe", {})
    cfg.tpe = TPESettings(**{k: tpe[k] for k in ("gamma", "n_startup", "n_candidates") if k in tpe})
    if raw.get("scores"):
        cfg.scores = resolve(raw["scores"])
    cfg.missing_metrics = raw.get("missing_metrics", "error")
    if cfg.missing_metrics not in ("error", "exclude"):
        raise ValidationError("missing_metrics must be 'error' or 'exclude'")
    cfg.seed = int(raw.get("seed", DEFAULT_SEED))
    cfg.jobs = int(raw.get("jobs", default_jobs()))
    return cfg


def _check_paths(cfg: RunConfig) -> None:
    missing = [str(p) for p in cfg.manifests.values() if not p.exists()]
    missing += [f"{p} ({lbl}/{k})" for lbl, m in cfg.sidecars.items() for k, p in m.items() if not p.exists()]
    if cfg.timestamps is not None and not cfg.timestamps.exists():
        missing.append(str(cfg.timestamps))
    if cfg.scores is not None and not cfg.scores.exists():
        missing.append(str(cfg.scores))
    if missing:
        raise ValidationError("missing input file(s): " + ", ".join(missing))


def default_jobs() -> int:
    value = os.environ.get(JOBS_ENV)
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        raise ValidationError(f"{JOBS_ENV} must be an integer, got {value!r}") from None


# ------------------------------------------------------------------ snapshots


def _require_manifests(cfg: RunConfig) -> None:
    if not cfg.manifests:
        raise ValidationError("config lists no manifests")


def _ingest_label(cfg: RunConfig, label: str) -> CorpusSnapshot:
    snap = ingest_manifest(cfg.manifests[label], cfg.sample_rate, cfg.max_error_rate, cfg.jobs, name=label)
    snap.provenance["manifest"] = os.path.relpath(cfg.manifests[label], cfg.base_dir)
    for kind, path in cfg.sidecars.get(label, {}).items():
        snap = merge(snap, load_sidecar(path, kind), cfg.coverage_policy, cfg.sidecar_key)
    if label == NO_ENHANCEMENT and cfg.timestamps is not None:
        snap = merge(snap, load_sidecar(cfg.timestamps, TIMESTAMPS), "partial", "id")
    return snap


def current_snapshot(cfg: RunConfig, label: str, stages: Sequence[str] = STAGES) -> CorpusSnapshot:
    """Latest persisted stage of ``label``; ingests on the fly when nothing is on disk."""
    for stage in stages:
        p = cfg.snapshot_path(stage, label)
        if p.exists():
            return load_snapshot(p)
    logger.info("%s: no persisted snapshot, ingesting %s", label, cfg.manifests[label])
    return _ingest_label(cfg, label)


def _pool_map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -------------------------------------------------------------------- commands


def cmd_ingest(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_manifests(cfg)
    for label in cfg.labels:
        snap = _ingest_label(cfg, label)
        save_snapshot(snap, cfg.snapshot_path("ingested", label))
        print(f"{label}: {len(snap)} utterances, {snap.total_hours:.4f} h")
    return EXIT_OK


def _words_within(words: Sequence[tuple[str, float, float]] | None, start: float, end: float):
    """Words whose midpoint falls in [start, end), clipped and re-based to ``start``."""
    if words is None:
        return None
    out = []
    for w, s, e in words:
        if start <= 0.5 * (s + e) < end:
            out.append((w, round(max(s, start) - start, 6), round(min(e, end) - start, 6)))
    return tuple(out)


def cmd_segment(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_manifests(cfg)
    budget = args.budget if args.budget is not None else cfg.vad_budget
    snaps = {lbl: current_snapshot(cfg, lbl, ("ingested",)) for lbl in cfg.labels}
    raw = snaps[NO_ENHANCEMENT]
    for lbl, snap in snaps.items():
        if lbl != NO_ENHANCEMENT and set(snap.ids()) != set(raw.ids()):
            raise SweepError(f"variant {lbl!r} is not id-aligned with {NO_ENHANCEMENT!r}")
    vad_dir = cfg.out_dir / "vad"
    vad_dir.mkdir(parents=True, exist_ok=True)
    if not raw.utterances:
        logger.warning("empty corpus; writing empty segmented snapshots")

    classes: dict[str, SpeechRateClass] = {}
    no_words = [u.id for u in raw.utterances if not u.words]
    if no_words:
        logger.warning("%d utterance(s) without word timestamps use %s-class parameters, e.g. %s",
                       len(no_words), SpeechRateClass.NORMAL.value, no_words[:5])
    for u in raw.utterances:
        classes[u.id] = classify_rate(words_per_second(u.words), cfg.rate_bounds) if u.words else SpeechRateClass.NORMAL

    timed = raw.derive(raw.name, [u for u in raw.utterances if u.words])
    loader = lambda u: load_utterance_audio(u, cfg.sample_rate)  # noqa: E731

    def tune(rc: SpeechRateClass) -> tuple[VadParams, list[TrialRecord]] | None:
        if not any(classes[u.id] == rc for u in timed.utterances):
            return None
        history: list[TrialRecord] = []
        params = tune_vad(timed, rc, cfg.vad_space, budget, cfg.tpe, loader, cfg.sample_rate,
                          cfg.rate_bounds, history_out=history)
        return params, history

    tuned = dict(zip(SpeechRateClass, _pool_map(tune, list(SpeechRateClass), cfg.jobs)))
    params: dict[SpeechRateClass, VadParams] = {}
    for rc, res in tuned.items():
        if res is None:
            params[rc] = VadParams()
            write_params(vad_dir / f"params_{rc.value}.txt", params[rc], f"{rc.value}: no timestamped utterances, defaults")
            continue
        params[rc], history = res
        best = min(t.objective for t in history)
        write_params(vad_dir / f"params_{rc.value}.txt", params[rc],
                     f"{rc.value}: best 1-F1 = {best:.6f} over {len(history)} trials, seed {cfg.seed}")
        write_history_csv(vad_dir / f"history_{rc.value}.csv", cfg.vad_space, history)

    def segment_one(u: Utterance) -> list[tuple[float, float]]:
        found = detect(load_utterance_audio(u, cfg.sample_rate), params[classes[u.id]], cfg.sample_rate)
        return concat_to_target(found, cfg.length_target, cfg.min_utt_s)

    extents = dict(zip(raw.ids(), _pool_map(segment_one, raw.utterances, cfg.jobs)))
    rows = []
    for u in raw.utterances:
        rows += [(u.id, u.start_s + s, u.start_s + e) for s, e in extents[u.id]]
    write_segments_csv(vad_dir / "segments.csv", rows)

    for lbl, snap in snaps.items():
        out: list[Utterance] = []
        for u in snap.utterances:
            for k, (s, e) in enumerate(extents[u.id]):
                words = _words_within(raw.by_id()[u.id].words, s, e) if lbl == NO_ENHANCEMENT else None
                out.append(replace(u, id=f"{u.id}-{k:03d}", start_s=u.start_s + s, end_s=u.start_s + e,
                                   metrics={}, words=words))
        seg = snap.derive(lbl, out, segmented={"classes": {rc.value: sum(c == rc for c in classes.values())
                                                           for rc in SpeechRateClass},
                                               "vad_budget": budget, "seed": cfg.seed})
        save_snapshot(seg, cfg.snapshot_path("segmented", lbl))
        write_manifest(cfg.out_dir / "manifests" / f"segmented_{lbl}.jsonl", seg.utterances)
        lengths = [x.duration_s for x in seg.utterances]
        if lengths:
            print(f"{lbl}: {len(seg)} utterances, mean {np.mean(lengths):.2f} s, std {np.std(lengths):.2f} s")
        else:
            print(f"{lbl}: 0 utterances")
    return EXIT_OK


NATIVE_KINDS = (MetricKind.SNR, MetricKind.F0_STD, MetricKind.SI_SDR, MetricKind.MCD)


def _native_metrics(u: Utterance, cfg: RunConfig, raw_u: Utterance | None, ref_u: Utterance | None) -> dict[MetricKind, float]:
    x = load_utterance_audio(u, cfg.sample_rate)
    out: dict[MetricKind, float] = {}
    try:
        out[MetricKind.SNR] = dsp.wada_snr(x, cfg.sample_rate)
    except dsp.MetricError as exc:
        logger.info("%s: SNR missing (%s)", u.id, exc)
    try:
        out[MetricKind.F0_STD] = dsp.f0_std(dsp.yin_f0(x, cfg.sample_rate))
    except dsp.MetricError as exc:
        logger.info("%s: F0_STD missing (%s)", u.id, exc)
    if ref_u is not None:
        ref = load_utterance_audio(ref_u, cfg.sample_rate)
        n = min(len(ref), len(x))
        try:
            out[MetricKind.SI_SDR] = synth.true_si_sdr(ref[:n], x[:n])
        except synth.OracleError as exc:
            logger.info("%s: SI_SDR missing (%s)", u.id, exc)
    if raw_u is not None:
        r = load_utterance_audio(raw_u, cfg.sample_rate)
        try:
            out[MetricKind.MCD] = dsp.mcd(dsp.mfcc(r, cfg.sample_rate), dsp.mfcc(x, cfg.sample_rate))
        except dsp.MetricError as exc:
            logger.info("%s: MCD missing (%s)", u.id, exc)
    return out


def cmd_metrics(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_manifests(cfg)
    stages = ("segmented", "ingested")
    raw = current_snapshot(cfg, NO_ENHANCEMENT, stages).by_id()
    ref = current_snapshot(cfg, cfg.reference, stages).by_id() if cfg.reference else {}
    coverage: dict[str, dict[str, float]] = {}
    for lbl in cfg.labels:
        if lbl == cfg.reference:
            continue
        snap = current_snapshot(cfg, lbl, stages)
        paired = lbl != NO_ENHANCEMENT
        values = _pool_map(lambda u: _native_metrics(u, cfg, raw.get(u.id) if paired else None, ref.get(u.id)),
                           snap.utterances, cfg.jobs)
        coverage[lbl] = {}
        for kind in NATIVE_KINDS:
            if kind == MetricKind.MCD and not paired or kind == MetricKind.SI_SDR and not ref:
                continue
            rows = {u.id: v[kind] for u, v in zip(snap.utterances, values) if kind in v}
            write_sidecar(cfg.out_dir / "metrics" / lbl / f"{kind.value}.csv", kind, rows)
            frac = len(rows) / len(snap) if len(snap) else 1.0
            coverage[lbl][kind.value] = frac
            if frac < 1.0:
                logger.warning("%s: %s computed for %d of %d utterances", lbl, kind.value, len(rows), len(snap))
        print(f"{lbl}: " + ", ".join(f"{k} {v:.0%}" for k, v in coverage[lbl].items()))
    path = cfg.out_dir / "metrics" / "coverage.json"
    path.write_text(json.dumps(coverage, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _parse_sidecar_flags(items: Sequence[str]) -> list[tuple[str, Path]]:
    out = []
    for item in items:
        kind, sep, path = item.partition("=")
        if not sep:
            raise ValidationError(f"--sidecar expects METRIC=PATH, got {item!r}")
        if not Path(path).exists():
            raise ValidationError(f"sidecar file not found: {path}")
        out.append((kind, Path(path)))
    return out


def cmd_attach(cfg: RunConfig, args: argparse.Namespace) -> int:
    """Merge native metrics and configured sidecars into each variant's latest snapshot."""
    _require_manifests(cfg)
    extra = _parse_sidecar_flags(args.sidecar or [])
    if extra and args.label is None:
        raise ValidationError("--sidecar needs --label")
    if args.label is not None and args.label not in cfg.manifests:
        raise ValidationError(f"unknown variant {args.label!r}")
    for lbl in cfg.labels:
        if lbl == cfg.reference:
            continue
        snap = current_snapshot(cfg, lbl)
        metrics_dir = cfg.out_dir / "metrics" / lbl
        for kind in NATIVE_KINDS:
            p = metrics_dir / f"{kind.value}.csv"
            if p.exists():
                snap = merge(snap, load_sidecar(p, kind), "partial", "id")
        for kind, p in cfg.sidecars.get(lbl, {}).items():
            snap = merge(snap, load_sidecar(p, kind), cfg.coverage_policy, cfg.sidecar_key)
        if lbl == args.label:
            for kind, p in extra:
                snap = merge(snap, load_sidecar(p, kind), args.policy or cfg.coverage_policy, args.key or cfg.sidecar_key)
        save_snapshot(snap, cfg.snapshot_path("attached", lbl))
        cov = snap.provenance.get("coverage", {})
        print(f"{lbl}: {len(snap)} utterances; " + ", ".join(f"{k} {v:.0%}" for k, v in sorted(cov.items())))
    return EXIT_OK


def safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def render_ranking(ranked: Sequence[tuple[Any, SubsetScores]]) -> str:
    names = [config_name(c) for c, _ in ranked]
    width = max([len("config"), *map(len, names)])
    lines = [f"{'#':>3}  {'config':<{width}}  {'DR':>7} {'SQ':>7} {'AP':>7} {'SD':>7} {'Total':>7}"]
    for i, (name, (_, s)) in enumerate(zip(names, ranked), start=1):
        lines.append(f"{i:>3}  {name:<{width}}  {s.dr:7.3f} {s.sq:7.3f} {s.ap:7.3f} {s.sd:7.3f} {s.total:7.3f}")
    return "\n".join(lines) + "\n"


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    _require_manifests(cfg)
    if not cfg.filters:
        raise ValidationError("config has no filters")
    grid = build_grid(cfg.enhancements, cfg.filters)
    snaps = {lbl: current_snapshot(cfg, lbl) for lbl in cfg.enhancements}
    if NO_ENHANCEMENT not in snaps:
        snaps[NO_ENHANCEMENT] = current_snapshot(cfg, NO_ENHANCEMENT)
    raw = snaps[NO_ENHANCEMENT]
    processed = {lbl: s for lbl, s in snaps.items() if lbl != NO_ENHANCEMENT}
    if cfg.missing_metrics == "exclude":
        drop = incomplete_ids(raw, processed, [m for m, _ in cfg.filters])
        if drop:
            logger.warning("excluding %d of %d utterance(s) with missing metrics, e.g. %s",
                           len(drop), len(raw), drop[:5])
            raw = exclude_ids(raw, drop)
            processed = {lbl: exclude_ids(s, drop) for lbl, s in processed.items()}
            snaps = {**processed, NO_ENHANCEMENT: raw}
    results = run_sweep(raw, grid, processed, cfg.weights, cfg.mcd_reference_db, cfg.jobs)

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    failed = [r for r in results if not r.ok]
    for r in failed:
        logger.warning("quarantined %s", r.error)
    write_sweep_report(out / "sweep_report.csv", results)
    for r in results:
        write_stage_table(out / f"stages_{safe_name(r.config.name)}.csv", stage_table(raw, r))
    write_scatters(out, results)
    reports = []
    for lbl in cfg.enhancements:
        for metric, thresholds in cfg.filters:
            if len(thresholds) >= 2:
                try:
                    reports.append((lbl, filter_sensitivity(snaps[lbl], metric, thresholds, cfg.sensitivity_delta)))
                except SweepError as exc:
                    logger.warning("sensitivity for %s/%s skipped: %s", lbl, metric.value, exc)
    write_sensitivity(out / "sensitivity.csv", reports)
    ranked = ranked_results(results)
    write_ranking_csv(out / "ranking.csv", ranked)
    text = render_ranking(ranked)
    (out / "ranking.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"{len(results) - len(failed)} of {len(results)} configurations scored; reports in {out}")
    if not ranked:
        logger.error("no configuration could be scored")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_rank(cfg: RunConfig, args: argparse.Namespace) -> int:
    path = Path(args.scores) if args.scores else cfg.scores
    if path is None:
        raise ValidationError("rank needs --scores or a 'scores' config field")
    if not path.exists():
        raise ValidationError(f"scores file not found: {path}")
    weights = cfg.weights
    if args.weights:
        try:
            weights = tuple(float(w) for w in args.weights.split(","))
        except ValueError:
            raise ValidationError(f"--weights must be four comma-separated numbers, got {args.weights!r}") from None
        if len(weights) != 4 or any(w < 0 for w in weights) or not any(weights):
            raise ValidationError("weights must be four non-negative numbers, not all zero")
    try:
        ranked = rank(read_scores_csv(path, weights))
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: bad scores file ({exc})") from exc
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_ranking_csv(cfg.out_dir / "ranking.csv", ranked)
    text = render_ranking(ranked)
    (cfg.out_dir / "ranking.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.sources < 1 or args.duration <= 0:
        raise ValidationError("--sources must be >= 1 and --duration > 0")
    out = Path(args.out or "synth_corpus")
    t60 = (0.0, 0.0) if args.dry else (0.2, 1.0)
    config = synth.write_oracle_corpus(out, args.sources, args.duration, cfg.seed, cfg.sample_rate, cfg.jobs, t60)
    hours = args.sources * args.duration / 3600.0
    print(f"wrote {args.sources} recordings x {len(config['enhancements'])} variants ({hours:.3f} h each) to {out}")
    print(f"run config: {out / 'config.json'}")
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[[RunConfig, argparse.Namespace], int], str]] = {
    "ingest": (cmd_ingest, "read manifests and sidecars into snapshot files"),
    "segment": (cmd_segment, "tune VAD per speech-rate class and cut length-targeted utterances"),
    "metrics": (cmd_metrics, "compute native metrics (WADA-SNR, F0 std, SI-SDR, MCD) as sidecars"),
    "attach": (cmd_attach, "merge native metrics and external sidecars into snapshots"),
    "sweep": (cmd_sweep, "filter, score and rank every configuration in the grid"),
    "rank": (cmd_rank, "rank precomputed subset scores"),
    "synth": (cmd_synth, "generate a synthetic corpus with ground-truth sidecars"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems are validation errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--out", help="output directory (overrides the config's out_dir)")
    common.add_argument("--seed", type=int, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--jobs", type=int, help=f"worker threads (default ${JOBS_ENV} or 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. vad.budget=5 (value parsed as JSON when possible)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="pipescore", description="Score and rank speech-corpus curation pipelines.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "segment":
            p.add_argument("--budget", type=int, help="TPE trials per speech-rate class")
        elif name == "attach":
            p.add_argument("--sidecar", action="append", metavar="METRIC=PATH", help="extra sidecar to merge")
            p.add_argument("--label", help="variant receiving --sidecar files")
            p.add_argument("--key", choices=("id", "source_id"), help="utterance field sidecar ids refer to")
            p.add_argument("--policy", choices=("strict", "partial"))
        elif name == "rank":
            p.add_argument("--scores", help="CSV with config,dr,sq,ap,sd columns")
            p.add_argument("--weights", help="four comma-separated weights for DR,SQ,AP,SD")
        elif name == "synth":
            p.add_argument("--sources", type=int, default=20, help="number of recordings (default 20)")
            p.add_argument("--duration", type=float, default=30.0, help="seconds per recording (default 30)")
            p.add_argument("--dry", action="store_true", help="no reverberation (no T30/C50 sidecars)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    fn, _ = COMMANDS[args.command]
    try:
        overrides = _parse_set(args.set)
        if args.command == "synth":
            cfg = load_config(args.config, overrides, out=None, seed=args.seed, jobs=args.jobs, require_paths=False)
        else:
            if getattr(args, "budget", None) is not None and args.budget < 1:
                raise ValidationError("--budget must be >= 1")
            cfg = load_config(args.config, overrides, args.out, args.seed, args.jobs)
        return fn(cfg, args)
    except ValidationError as exc:
        print(f"pipescore {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CorpusError, SidecarError, SweepError, ScoringError, dsp.MetricError, synth.OracleError,
            ValueError, OSError) as exc:
        print(f"pipescore {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
