"""Energy VAD, speech-rate classes and length-targeted concatenation of segments."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import frames

FRAME_MS = 30.0
HOP_MS = 10.0
FLOOR_PERCENTILE = 10.0
ENERGY_EPS = 1e-12
DEFAULT_RATE_BOUNDS = (2.5, 4.0)
DEFAULT_MIN_UTT_S = 1.0

Segment = tuple[float, float]


@dataclass(frozen=True)
class VadParams:
    threshold_db: float = 10.0
    min_speech_ms: float = 100.0
    min_silence_ms: float = 200.0
    pad_ms: float = 30.0

    RANGES = {
        "threshold_db": (0.0, 30.0),
        "min_speech_ms": (30.0, 500.0),
        "min_silence_ms": (30.0, 1000.0),
        "pad_ms": (0.0, 300.0),
    }

    def __post_init__(self) -> None:
        for name, (lo, hi) in self.RANGES.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "VadParams":
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = float(v)
        return cls(**kv)


def write_params(path: str | Path, params: VadParams, header: str = "") -> None:
    """Plain ``key = value`` text, one parameter per line; ``#`` starts a comment."""
    text = "".join(f"# {h}\n" for h in header.splitlines() if h) + params.to_text()
    Path(path).write_text(text, encoding="utf-8")


def read_params(path: str | Path) -> VadParams:
    return VadParams.from_text(Path(path).read_text(encoding="utf-8"))


class SpeechRateClass(str, enum.Enum):
    SLOW = "slow"
    NORMAL = "normal"
    FAST = "fast"


@dataclass(frozen=True)
class LengthTarget:
    mean_s: float = 8.0
    std_s: float = 2.0
    max_gap_s: float = 0.5
    hard_max_s: float = 15.0

    def __post_init__(self) -> None:
        if not 0 < self.mean_s <= self.hard_max_s:
            raise ValueError("need 0 < mean_s <= hard_max_s")
        if self.std_s < 0:
            raise ValueError("std_s must be non-negative")


# ------------------------------------------------------------------ detection


def frame_energies_db(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if len(x) < frame_len:
        x = np.pad(x, (0, frame_len - len(x)))
    fr = frames(x, frame_len, hop)
    return 10.0 * np.log10(np.einsum("ij,ij->i", fr, fr) / frame_len + ENERGY_EPS)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive index runs of True."""
    if not mask.any():
        return []
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts = np.nonzero(d == 1)[0]
    ends = np.nonzero(d == -1)[0] - 1
    return list(zip(starts.tolist(), ends.tolist()))


def detect(samples: np.ndarray, params: VadParams, sample_rate: int = 16000) -> list[Segment]:
    """Speech segments ``[(start_s, end_s), ...]`` from frame log-energies.

    Frames of 30 ms every 10 ms are speech when their energy exceeds the 10th
    percentile of frame energies by ``threshold_db``. A run's edges are located
    at 10 ms resolution by re-testing the hop-sized blocks inside its first and
    last frame. Short runs are dropped, short gaps bridged, then each segment
    is padded and clipped to the buffer.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        return []
    L = int(round(FRAME_MS * sample_rate / 1000.0))
    hop = int(round(HOP_MS * sample_rate / 1000.0))
    energy = frame_energies_db(x, L, hop)
    level = np.percentile(energy, FLOOR_PERCENTILE) + params.threshold_db
    speech = energy > level
    if not speech.any():
        return []

    n_blocks = math.ceil(len(x) / hop)
    blocks = np.pad(x, (0, n_blocks * hop - len(x))).reshape(n_blocks, hop)
    block_hot = 10.0 * np.log10(np.einsum("ij,ij->i", blocks, blocks) / hop + ENERGY_EPS) > level
    per_frame = L // hop
    duration = len(x) / sample_rate

    segs: list[list[float]] = []
    for a, b in _runs(speech):
        first = np.nonzero(block_hot[a : a + per_frame])[0]
        last = np.nonzero(block_hot[b : min(b + per_frame, n_blocks)])[0]
        start = (a + first[0]) * hop if first.size else a * hop + (L - hop) / 2.0
        end = (b + last[-1] + 1) * hop if last.size else b * hop + (L + hop) / 2.0
        segs.append([start / sample_rate, min(end / sample_rate, duration)])

    segs = [s for s in segs if (s[1] - s[0]) * 1000.0 >= params.min_speech_ms]
    bridged: list[list[float]] = []
    for s in segs:
        if bridged and (s[0] - bridged[-1][1]) * 1000.0 < params.min_silence_ms:
            bridged[-1][1] = s[1]
        else:
            bridged.append(list(s))

    pad = params.pad_ms / 1000.0
    out: list[list[float]] = []
    for s, e in bridged:
        s, e = max(0.0, s - pad), min(duration, e + pad)
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(float(s), float(e)) for s, e in out]


# --------------------------------------------------------------- speech rate


def words_per_second(words: Sequence[tuple[str, float, float]]) -> float:
    """Words divided by the span from first word start to last word end."""
    if not words:
        return 0.0
    span = words[-1][2] - words[0][1]
    return len(words) / span if span > 0 else 0.0


def classify_rate(wps: float, bounds: tuple[float, float] = DEFAULT_RATE_BOUNDS) -> SpeechRateClass:
    if wps < 0:
        raise ValueError("words per second must be non-negative")
    slow_max, fast_min = bounds
    if wps < slow_max:
        return SpeechRateClass.SLOW
    if wps > fast_min:
        return SpeechRateClass.FAST
    return SpeechRateClass.NORMAL


# ----------------------------------------------------------- frame-level F1


def segments_to_mask(segments: Sequence[Segment], n_frames: int, hop_s: float = HOP_MS / 1000.0) -> np.ndarray:
    """Frame mask where frame ``i`` (centre ``(i + 0.5) * hop_s``) lies inside a segment."""
    centres = (np.arange(n_frames) + 0.5) * hop_s
    mask = np.zeros(n_frames, dtype=bool)
    for s, e in segments:
        mask |= (centres >= s) & (centres < e)
    return mask


def f1_counts(ref: np.ndarray, hyp: np.ndarray) -> tuple[int, int, int]:
    tp = int(np.count_nonzero(ref & hyp))
    return tp, int(np.count_nonzero(~ref & hyp)), int(np.count_nonzero(ref & ~hyp))


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


# ---------------------------------------------------------- concatenation


def _group_stats(groups: list[list[Segment]]) -> tuple[float, float]:
    lengths = np.array([g[-1][1] - g[0][0] for g in groups])
    return float(lengths.mean()), float(lengths.std())


def _error(groups: list[list[Segment]], target: LengthTarget) -> float:
    if not groups:
        return math.inf
    m, s = _group_stats(groups)
    return (m - target.mean_s) ** 2 + (s - target.std_s) ** 2


def _span(group: Sequence[Segment]) -> float:
    return group[-1][1] - group[0][0]


def concat_to_target(segments: Sequence[Segment], target: LengthTarget,
                     min_utt_s: float = DEFAULT_MIN_UTT_S) -> list[Segment]:
    """Group consecutive segments into utterance extents near the target length.

    Greedy left-to-right pass: the current group absorbs the next segment while
    the gap is at most ``max_gap_s``, the grown span stays within
    ``hard_max_s``, the group is still shorter than ``mean_s - std_s`` and
    growing brings it closer to ``mean_s``. One adjustment pass then moves a
    boundary segment between adjacent groups whenever that strictly lowers
    ``(mean - mean_s)^2 + (std - std_s)^2``; equal error keeps the current
    (leftmost) arrangement. Groups shorter than ``min_utt_s`` are discarded.
    Segments are never split; a single segment longer than ``hard_max_s``
    cannot be used and is dropped.
    """
    segs = [(float(s), float(e)) for s, e in segments if e - s <= target.hard_max_s]
    if not segs:
        return []
    groups: list[list[Segment]] = [[segs[0]]]
    for seg in segs[1:]:
        g = groups[-1]
        cur = _span(g)
        grown = seg[1] - g[0][0]
        if (seg[0] - g[-1][1] <= target.max_gap_s
                and grown <= target.hard_max_s
                and cur < target.mean_s - target.std_s
                and abs(grown - target.mean_s) < abs(cur - target.mean_s)):
            g.append(seg)
        else:
            groups.append([seg])

    best = _error(groups, target)
    for i in range(len(groups) - 1):
        left, right = groups[i], groups[i + 1]
        candidates = []
        if len(left) > 1:  # last of left -> right
            moved = left[-1]
            if right[0][0] - moved[1] <= target.max_gap_s and right[-1][1] - moved[0] <= target.hard_max_s:
                candidates.append((left[:-1], [moved] + right))
        if len(right) > 1:  # first of right -> left
            moved = right[0]
            if moved[0] - left[-1][1] <= target.max_gap_s and moved[1] - left[0][0] <= target.hard_max_s:
                candidates.append((left + [moved], right[1:]))
        for new_left, new_right in candidates:
            trial = groups[:i] + [new_left, new_right] + groups[i + 2 :]
            err = _error(trial, target)
            if err < best:
                best = err
                groups = trial

    return [(g[0][0], g[-1][1]) for g in groups if _span(g) >= min_utt_s]


def write_segments_csv(path: str | Path, rows: Sequence[tuple[str, float, float]]) -> None:
    """CSV ``source_id,start_s,end_s``."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "start_s", "end_s"])
        for sid, s, e in rows:
            w.writerow([sid, repr(float(s)), repr(float(e))])


def params_dict(p: VadParams) -> dict[str, float]:
    return asdict(p)
