"""Externally computed per-utterance scores: loading, validation and merging.

Two file formats, both UTF-8:

* metric sidecar -- CSV with header ``id,value``;
* timestamps sidecar -- JSON lines ``{"id": ..., "words": [{"w": ..., "start": ..., "end": ...}]}``
  with word times in seconds relative to the utterance start.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .corpus import CorpusSnapshot, MetricKind, Utterance, Word

logger = logging.getLogger(__name__)

TIMESTAMPS = "TIMESTAMPS"
MAX_LISTED_IDS = 20

# closed ranges; None means unbounded on that side
VALUE_RANGES: dict[MetricKind, tuple[float | None, float | None]] = {
    MetricKind.MOS_NISQA: (1.0, 5.0),
    MetricKind.MOS_DNSMOS: (1.0, 5.0),
    MetricKind.PESQ: (-0.5, 4.64),
    MetricKind.F0_STD: (0.0, None),
    MetricKind.MCD: (0.0, None),
}

SidecarKind = Union[MetricKind, str]


class SidecarError(ValueError):
    pass


@dataclass
class SidecarTable:
    metric: SidecarKind
    rows: dict[str, object] = field(default_factory=dict)
    rejected: list[tuple[int, str, str]] = field(default_factory=list)  # (line, id, reason)
    source: str | None = None

    @property
    def is_timestamps(self) -> bool:
        return self.metric == TIMESTAMPS

    def __len__(self) -> int:
        return len(self.rows)


def parse_kind(name: str | MetricKind) -> SidecarKind:
    if isinstance(name, str) and name.strip().upper() == TIMESTAMPS:
        return TIMESTAMPS
    return MetricKind.parse(name)


def check_value(metric: MetricKind, value: float) -> str | None:
    """Reason string if ``value`` is invalid for ``metric``, else None."""
    if not math.isfinite(value):
        return "non-finite value"
    if metric == MetricKind.T30 and value <= 0:
        return "T30 must be > 0 s"
    lo, hi = VALUE_RANGES.get(metric, (None, None))
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        return f"{metric.value} value {value} outside [{lo}, {hi}]"
    return None


def check_words(words: list[Word]) -> str | None:
    prev_end = -math.inf
    for w, s, e in words:
        if not (math.isfinite(s) and math.isfinite(e)) or e < s or s < 0:
            return f"bad word extent for {w!r}"
        if s < prev_end:
            return "word timestamps overlap or are out of order"
        prev_end = e
    return None


def _add_row(table: SidecarTable, line: int, uid: str, value: object, seen: dict[str, int]) -> None:
    if uid in seen:
        raise SidecarError(f"duplicate id {uid!r} at lines {seen[uid]} and {line}")
    seen[uid] = line
    if table.is_timestamps:
        reason = check_words(value)  # type: ignore[arg-type]
    else:
        reason = check_value(table.metric, value)  # type: ignore[arg-type]
    if reason:
        table.rejected.append((line, uid, reason))
    else:
        table.rows[uid] = value


def load_sidecar(path: str | Path, metric: str | MetricKind) -> SidecarTable:
    """Read and validate one sidecar file.

    Malformed lines raise :class:`SidecarError` listing every bad line number;
    out-of-range values are dropped into ``table.rejected`` with a reason.
    Duplicate ids are a hard error.
    """
    path = Path(path)
    kind = parse_kind(metric)
    table = SidecarTable(metric=kind, source=str(path))
    seen: dict[str, int] = {}
    bad: list[str] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        if kind == TIMESTAMPS:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    words = [(str(w["w"]), float(w["start"]), float(w["end"])) for w in rec["words"]]
                    uid = str(rec["id"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    bad.append(f"{line_no} ({exc.__class__.__name__})")
                    continue
                _add_row(table, line_no, uid, tuple(words), seen)
        else:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header[:2]] != ["id", "value"]:
                raise SidecarError(f"{path}: expected header 'id,value'")
            for line_no, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                try:
                    if len(rec) != 2 or not rec[0]:
                        raise ValueError("expected 2 fields")
                    value = float(rec[1])
                except ValueError:
                    bad.append(str(line_no))
                    continue
                _add_row(table, line_no, rec[0], value, seen)
    if bad:
        raise SidecarError(f"{path}: malformed rows at line(s) {', '.join(bad)}")
    for line_no, uid, reason in table.rejected:
        logger.warning("%s:%d: rejected %s (%s)", path, line_no, uid, reason)
    return table


def write_sidecar(path: str | Path, metric: SidecarKind, rows: dict[str, object]) -> None:
    """Write rows in the sidecar format; row order is the dict's order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        if metric == TIMESTAMPS:
            for uid, words in rows.items():
                rec = {"id": uid, "words": [{"w": w, "start": s, "end": e} for w, s, e in words]}  # type: ignore[union-attr]
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        else:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "value"])
            for uid, value in rows.items():
                writer.writerow([uid, repr(float(value))])  # type: ignore[arg-type]


def _format_missing(missing: list[str]) -> str:
    shown = ", ".join(missing[:MAX_LISTED_IDS])
    extra = len(missing) - MAX_LISTED_IDS
    return shown + (f" ... and {extra} more" if extra > 0 else "")


def merge(snapshot: CorpusSnapshot, table: SidecarTable, policy: str = "strict",
          key: str = "id") -> CorpusSnapshot:
    """Attach ``table`` values to matching utterances.

    ``key="source_id"`` looks rows up by the utterance's source recording, so
    per-recording values propagate to every segment cut from it. Under
    ``policy="strict"`` every utterance must be covered; ``"partial"`` records
    the coverage fraction in ``provenance["coverage"]``.
    """
    if policy not in ("strict", "partial"):
        raise ValueError(f"unknown coverage policy {policy!r}")
    if key not in ("id", "source_id"):
        raise ValueError(f"unknown merge key {key!r}")
    name = table.metric if table.metric == TIMESTAMPS else table.metric.value  # type: ignore[union-attr]
    missing = [u.id for u in snapshot.utterances if getattr(u, key) not in table.rows]
    if missing and policy == "strict":
        raise SidecarError(f"{name}: {len(missing)} utterance(s) without a value: {_format_missing(missing)}")

    out: list[Utterance] = []
    for u in snapshot.utterances:
        value = table.rows.get(getattr(u, key))
        if value is None:
            out.append(u)
            continue
        if table.is_timestamps:
            out.append(dataclasses.replace(u, words=value))  # type: ignore[arg-type]
            continue
        old = u.metrics.get(table.metric)  # type: ignore[arg-type]
        if old is not None and old != value:
            logger.info("%s: replacing %s for %s (%r -> %r)", snapshot.name, name, u.id, old, value)
        out.append(u.with_metric(table.metric, value))  # type: ignore[arg-type]

    n = len(snapshot.utterances)
    coverage = 1.0 if n == 0 else (n - len(missing)) / n
    prov = json.loads(json.dumps(snapshot.provenance))
    prov.setdefault("coverage", {})[name] = coverage
    prov.setdefault("metric_sources", {})[name] = table.source or "<memory>"
    return CorpusSnapshot(name=snapshot.name, utterances=out, provenance=prov)


def metric_coverage(snapshot: CorpusSnapshot, metric: MetricKind) -> float:
    if not snapshot.utterances:
        return 1.0
    return sum(metric in u.metrics for u in snapshot.utterances) / len(snapshot.utterances)
