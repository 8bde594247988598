"""Utterance data model, manifest ingestion, audio decoding and snapshot persistence."""

from __future__ import annotations

import csv
import dataclasses
import enum
import functools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000
SNAPSHOT_SCHEMA_VERSION = 1


class CorpusError(Exception):
    """Raised for manifest, audio or snapshot problems."""


class MetricKind(str, enum.Enum):
    PESQ = "PESQ"
    SNR = "SNR"
    SI_SDR = "SI_SDR"
    T30 = "T30"
    C50 = "C50"
    F0_STD = "F0_STD"
    MCD = "MCD"
    MOS_NISQA = "MOS_NISQA"
    MOS_DNSMOS = "MOS_DNSMOS"

    @property
    def unit(self) -> str:
        return _UNITS[self]

    @property
    def direction(self) -> str:
        """``"up"`` if larger is better, ``"down"`` otherwise.

        F0_STD is a dispersion descriptor without a preferred direction; it is
        reported as ``"none"``.
        """
        return _DIRECTIONS[self]

    @classmethod
    def parse(cls, name: str | "MetricKind") -> "MetricKind":
        if isinstance(name, MetricKind):
            return name
        key = str(name).strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown metric kind: {name!r}") from None


_UNITS = {
    MetricKind.PESQ: "MOS-LQO",
    MetricKind.SNR: "dB",
    MetricKind.SI_SDR: "dB",
    MetricKind.T30: "s",
    MetricKind.C50: "dB",
    MetricKind.F0_STD: "Hz",
    MetricKind.MCD: "dB",
    MetricKind.MOS_NISQA: "MOS",
    MetricKind.MOS_DNSMOS: "MOS",
}

_DIRECTIONS = {
    MetricKind.PESQ: "up",
    MetricKind.SNR: "up",
    MetricKind.SI_SDR: "up",
    MetricKind.T30: "down",
    MetricKind.C50: "up",
    MetricKind.F0_STD: "none",
    MetricKind.MCD: "down",
    MetricKind.MOS_NISQA: "up",
    MetricKind.MOS_DNSMOS: "up",
}

Word = tuple[str, float, float]


@dataclass(frozen=True)
class Utterance:
    """One audio segment.

    ``start_s``/``end_s`` locate the segment inside the source file at ``path``.
    Word timestamps, when present, are relative to ``start_s``.
    """

    id: str
    source_id: str
    path: str
    start_s: float
    end_s: float
    sample_rate: int
    channel_count: int = 1
    speaker_id: str | None = None
    metrics: dict[MetricKind, float] = field(default_factory=dict)
    words: tuple[Word, ...] | None = None

    def __post_init__(self) -> None:
        if not self.end_s - self.start_s > 0:
            raise CorpusError(f"utterance {self.id!r}: non-positive duration")
        if self.sample_rate <= 0:
            raise CorpusError(f"utterance {self.id!r}: sample rate must be positive")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def with_metric(self, kind: MetricKind, value: float) -> "Utterance":
        metrics = dict(self.metrics)
        metrics[kind] = float(value)
        return dataclasses.replace(self, metrics=metrics)

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "id": self.id,
            "source_id": self.source_id,
            "path": self.path,
            "speaker_id": self.speaker_id,
            "start_s": self.start_s,
            "end_s": self.end_s,
            "sample_rate": self.sample_rate,
            "channel_count": self.channel_count,
            "metrics": {k.value: v for k, v in sorted(self.metrics.items(), key=lambda kv: kv[0].value)},
        }
        if self.words is not None:
            rec["words"] = [{"w": w, "start": s, "end": e} for w, s, e in self.words]
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "Utterance":
        words = rec.get("words")
        return cls(
            id=rec["id"],
            source_id=rec["source_id"],
            path=rec["path"],
            speaker_id=rec.get("speaker_id"),
            start_s=float(rec["start_s"]),
            end_s=float(rec["end_s"]),
            sample_rate=int(rec["sample_rate"]),
            channel_count=int(rec.get("channel_count", 1)),
            metrics={MetricKind.parse(k): float(v) for k, v in rec.get("metrics", {}).items()},
            words=None if words is None else tuple((w["w"], float(w["start"]), float(w["end"])) for w in words),
        )


@dataclass
class CorpusSnapshot:
    name: str
    utterances: list[Utterance] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for utt in self.utterances:
            if utt.id in seen:
                raise CorpusError(f"duplicate utterance id {utt.id!r} in snapshot {self.name!r}")
            seen.add(utt.id)

    @property
    def total_hours(self) -> float:
        return math.fsum(u.duration_s for u in self.utterances) / 3600.0

    def __len__(self) -> int:
        return len(self.utterances)

    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}

    def derive(self, name: str, utterances: Iterable[Utterance], **provenance: Any) -> "CorpusSnapshot":
        prov = json.loads(json.dumps(self.provenance))
        prov.update(provenance)
        return CorpusSnapshot(name=name, utterances=list(utterances), provenance=prov)

    def concat(self, other: "CorpusSnapshot", name: str | None = None) -> "CorpusSnapshot":
        return CorpusSnapshot(name or self.name, self.utterances + other.utterances, dict(self.provenance))


# --------------------------------------------------------------------------- audio


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise CorpusError(f"unsupported WAV sample encoding: {data.dtype}")


def resample(samples: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling; identity when the rates match."""
    if orig_rate == target_rate:
        return samples
    frac = Fraction(target_rate, orig_rate)
    return signal.resample_poly(samples, frac.numerator, frac.denominator)


def read_audio(path: str | Path, target_rate: int = DEFAULT_SAMPLE_RATE) -> np.ndarray:
    """Decode a RIFF/WAVE file to a mono float64 buffer at ``target_rate``."""
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise CorpusError(f"{path}: unsupported or malformed WAV ({exc})") from exc
    if data.shape[0] == 0:
        raise CorpusError(f"{path}: zero-length audio")
    x = _to_float(data)
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = resample(x, rate, target_rate)
    return np.clip(x, -1.0, 1.0)


def audio_info(path: str | Path) -> tuple[int, int, int]:
    """Return ``(sample_rate, channels, n_frames)`` without decoding twice."""
    rate, data = wavfile.read(str(path), mmap=True)
    channels = 1 if data.ndim == 1 else data.shape[1]
    return rate, channels, data.shape[0]


def write_wav(path: str | Path, samples: np.ndarray, rate: int, encoding: str = "pcm16") -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    if encoding == "pcm16":
        out = np.round(x * 32767.0).astype(np.int16)
    elif encoding == "float32":
        out = x.astype(np.float32)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), rate, out)


@functools.lru_cache(maxsize=16)
def _read_audio_cached(path: str, rate: int) -> np.ndarray:
    x = read_audio(path, rate)
    x.setflags(write=False)
    return x


def load_utterance_audio(utt: Utterance, target_rate: int | None = None) -> np.ndarray:
    """Samples of ``utt``'s extent inside its source file."""
    rate = target_rate or utt.sample_rate
    x = _read_audio_cached(utt.path, rate)
    a = int(round(utt.start_s * rate))
    b = int(round(utt.end_s * rate))
    return x[a:b]


# ----------------------------------------------------------------------- manifest


def read_manifest_rows(path: str | Path) -> list[dict[str, Any]]:
    """Parse a JSON-lines or CSV manifest into raw row dicts.

    CSV is detected by a ``.csv`` suffix; anything else is treated as JSONL.
    Each row carries its 1-based line number under ``"_line"``.
    """
    path = Path(path)
    rows: list[dict[str, Any]] = []
    with path.open("r", encoding="utf-8") as fh:
        if path.suffix.lower() == ".csv":
            for i, rec in enumerate(csv.DictReader(fh), start=2):
                rec = {k: (v if v != "" else None) for k, v in rec.items()}
                rec["_line"] = i
                rows.append(rec)
        else:
            for i, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"{path}:{i}: invalid JSON ({exc.msg})") from exc
                rec["_line"] = i
                rows.append(rec)
    return rows


def _ingest_row(row: dict[str, Any], base: Path, target_rate: int) -> Utterance:
    if not row.get("id") or not row.get("path"):
        raise CorpusError("row needs 'id' and 'path'")
    audio_path = Path(row["path"])
    if not audio_path.is_absolute():
        audio_path = base / audio_path
    if not audio_path.exists():
        raise CorpusError(f"audio file not found: {audio_path}")
    try:
        rate, channels, n = audio_info(audio_path)
    except ValueError as exc:
        raise CorpusError(f"{audio_path}: unsupported or malformed WAV ({exc})") from exc
    if n == 0:
        raise CorpusError(f"{audio_path}: zero-length audio")
    file_dur = n / rate
    start = float(row["start_s"]) if row.get("start_s") is not None else 0.0
    end = float(row["end_s"]) if row.get("end_s") is not None else file_dur
    end = min(end, file_dur)
    return Utterance(
        id=str(row["id"]),
        source_id=str(row.get("source_id") or row["path"]),
        path=str(audio_path),
        speaker_id=row.get("speaker_id"),
        start_s=start,
        end_s=end,
        sample_rate=target_rate,
        channel_count=1,
    )


def ingest_manifest(
    manifest_path: str | Path,
    target_rate: int = DEFAULT_SAMPLE_RATE,
    max_error_rate: float = 0.0,
    jobs: int = 1,
    name: str | None = None,
) -> CorpusSnapshot:
    """Build a snapshot with one utterance per manifest row.

    Rows whose audio is missing or undecodable are collected; the ingest fails
    if their fraction exceeds ``max_error_rate`` (0 means strict). Utterance
    order follows the manifest regardless of ``jobs``.
    """
    manifest_path = Path(manifest_path)
    rows = read_manifest_rows(manifest_path)
    ids = [str(r.get("id")) for r in rows]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise CorpusError(f"{manifest_path}: duplicate utterance ids: {', '.join(dupes[:20])}")

    base = manifest_path.parent

    def work(row: dict[str, Any]) -> Utterance | str:
        try:
            return _ingest_row(row, base, target_rate)
        except CorpusError as exc:
            return f"line {row['_line']} (id={row.get('id')!r}): {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, rows))
    else:
        results = [work(r) for r in rows]

    errors = [r for r in results if isinstance(r, str)]
    utts = [r for r in results if isinstance(r, Utterance)]
    if rows and len(errors) / len(rows) > max_error_rate:
        raise CorpusError(f"{manifest_path}: {len(errors)} row error(s): " + "; ".join(errors[:20]))
    for e in errors:
        logger.warning("skipped %s", e)
    return CorpusSnapshot(
        name=name or manifest_path.stem,
        utterances=utts,
        provenance={"manifest": str(manifest_path), "sample_rate": target_rate, "skipped_rows": len(errors)},
    )


def write_manifest(path: str | Path, utterances: Sequence[Utterance]) -> None:
    """Write a JSONL manifest (``id, path, source_id, speaker_id, start_s, end_s``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for u in utterances:
            rec = {"id": u.id, "path": u.path, "source_id": u.source_id, "speaker_id": u.speaker_id,
                   "start_s": u.start_s, "end_s": u.end_s}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ----------------------------------------------------------------------- snapshots


def save_snapshot(snapshot: CorpusSnapshot, path: str | Path) -> None:
    """Persist as JSONL: a header record, then one record per utterance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema_version": SNAPSHOT_SCHEMA_VERSION, "name": snapshot.name, "provenance": snapshot.provenance}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for u in snapshot.utterances:
            fh.write(json.dumps(u.to_record(), sort_keys=True) + "\n")


def load_snapshot(path: str | Path) -> CorpusSnapshot:
    with Path(path).open("r", encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise CorpusError(f"{path}: empty snapshot file")
    header = json.loads(lines[0])
    version = header.get("schema_version")
    if version != SNAPSHOT_SCHEMA_VERSION:
        raise CorpusError(f"{path}: unsupported snapshot schema version {version!r}")
    utts = [Utterance.from_record(json.loads(ln)) for ln in lines[1:]]
    return CorpusSnapshot(name=header["name"], utterances=utts, provenance=header.get("provenance", {}))
