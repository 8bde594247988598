"""Tree-structured Parzen Estimator over independent 1-D parameters.

Each parameter gets two kernel-density estimators per suggestion, one over
the good trials (lowest objectives) and one over the rest; the candidate
drawn from the good density with the largest summed log density ratio wins.
Objectives are minimised.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .corpus import CorpusSnapshot, Utterance, load_utterance_audio
from .vad import (
    DEFAULT_RATE_BOUNDS,
    HOP_MS,
    SpeechRateClass,
    VadParams,
    classify_rate,
    detect,
    f1_counts,
    f1_from_counts,
    params_dict,
    segments_to_mask,
    words_per_second,
)

KINDS = ("uniform", "log-uniform", "integer-uniform")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    low: float
    high: float

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if not self.low < self.high:
            raise ValueError(f"{self.name}: need low < high")
        if self.kind == "log-uniform" and self.low <= 0:
            raise ValueError(f"{self.name}: log-uniform needs low > 0")

    # internal coordinates: log for log-uniform, identity otherwise
    def to_internal(self, v):
        return np.log(v) if self.kind == "log-uniform" else np.asarray(v, dtype=np.float64)

    def from_internal(self, u: float) -> float:
        if self.kind == "log-uniform":
            return float(min(self.high, max(self.low, math.exp(u))))
        if self.kind == "integer-uniform":
            return float(int(round(u)))
        return float(u)

    @property
    def bounds(self) -> tuple[float, float]:
        if self.kind == "log-uniform":
            return math.log(self.low), math.log(self.high)
        if self.kind == "integer-uniform":
            return self.low - 0.5, self.high + 0.5
        return self.low, self.high


ParamSpace = Sequence[ParamSpec]


@dataclass(frozen=True)
class TrialRecord:
    index: int
    params: dict[str, float]
    objective: float


@dataclass(frozen=True)
class TPESettings:
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    seed: int = 0
    bw_min_frac: float = 0.01
    bw_max_frac: float = 1.0

    def __post_init__(self) -> None:
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_startup < 1 or self.n_candidates < 1:
            raise ValueError("n_startup and n_candidates must be >= 1")


def n_good(n: int, gamma: float) -> int:
    return max(1, math.ceil(gamma * n))


def split_history(history: Sequence[TrialRecord], gamma: float) -> tuple[list[TrialRecord], list[TrialRecord]]:
    """Good/bad split at the gamma-quantile; ties keep trial-index order.

    Trials with a non-finite objective never enter the good set.
    """
    ordered = sorted(history, key=lambda t: (t.objective, t.index))
    k = n_good(len(ordered), gamma)
    finite = [t for t in ordered if math.isfinite(t.objective)]
    good = finite[:k]
    good_ids = {t.index for t in good}
    bad = [t for t in ordered if t.index not in good_ids]
    return good, bad


@dataclass
class _Parzen:
    """Truncated-Gaussian mixture plus a uniform prior component, in internal coordinates."""

    spec: ParamSpec
    mus: np.ndarray
    sigma: float
    lo: float
    hi: float
    weights: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        m = len(self.mus)
        self.weights = np.full(m + 1, 1.0 / (m + 1))  # last entry: uniform prior

    @classmethod
    def fit(cls, spec: ParamSpec, values: np.ndarray, settings: TPESettings) -> "_Parzen":
        lo, hi = spec.bounds
        width = hi - lo
        mus = np.asarray(spec.to_internal(values), dtype=np.float64) if len(values) else np.empty(0)
        if len(mus) > 1:
            sigma = 1.059 * float(np.std(mus)) * len(mus) ** (-0.2)  # Scott's rule, 1-D
        else:
            sigma = 0.0
        # floor shrinks with the set size and bottoms out at bw_min_frac of the range
        floor = max(settings.bw_min_frac, 1.0 / (len(mus) + 2))
        sigma = min(max(sigma, floor * width), settings.bw_max_frac * width)
        return cls(spec, mus, sigma, lo, hi)

    def _mass(self) -> np.ndarray:
        a = (self.lo - self.mus) / self.sigma
        b = (self.hi - self.mus) / self.sigma
        return ndtr(b) - ndtr(a)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = rng.uniform(self.lo, self.hi, size=n)
        kern = comp < len(self.mus)
        if kern.any():
            mu = self.mus[comp[kern]]
            a = ndtr((self.lo - mu) / self.sigma)
            b = ndtr((self.hi - mu) / self.sigma)
            u = rng.uniform(size=kern.sum())
            p = np.clip(a + u * (b - a), 1e-300, 1 - 1e-16)
            out[kern] = np.clip(mu + self.sigma * ndtri(p), self.lo, self.hi)
        if self.spec.kind == "integer-uniform":
            out = np.clip(np.round(out), self.spec.low, self.spec.high)
        return out

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        prior_w = self.weights[-1]
        if self.spec.kind == "integer-uniform":
            n_vals = self.spec.high - self.spec.low + 1
            prior = np.full(x.shape, prior_w / n_vals)
            if len(self.mus) == 0:
                return np.log(prior)
            lo_e = (x[:, None] - 0.5 - self.mus[None, :]) / self.sigma
            hi_e = (x[:, None] + 0.5 - self.mus[None, :]) / self.sigma
            probs = (ndtr(hi_e) - ndtr(lo_e)) / self._mass()[None, :]
            return np.log(prior + probs @ self.weights[:-1])
        prior = np.full(x.shape, prior_w / (self.hi - self.lo))
        if len(self.mus) == 0:
            return np.log(prior)
        z = (x[:, None] - self.mus[None, :]) / self.sigma
        dens = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi)) / self._mass()[None, :]
        return np.log(prior + dens @ self.weights[:-1])


def _rng(settings: TPESettings, n_history: int) -> np.random.Generator:
    return np.random.default_rng([settings.seed, n_history])


def sample_uniform(space: ParamSpace, rng: np.random.Generator) -> dict[str, float]:
    out = {}
    for spec in space:
        if spec.kind == "integer-uniform":
            out[spec.name] = float(rng.integers(int(spec.low), int(spec.high) + 1))
        else:
            lo, hi = spec.bounds
            out[spec.name] = spec.from_internal(rng.uniform(lo, hi))
    return out


def suggest(space: ParamSpace, history: Sequence[TrialRecord], settings: TPESettings = TPESettings()) -> dict[str, float]:
    """Next parameter vector to evaluate; reproducible for a given seed and history."""
    if not space:
        raise ValueError("empty parameter space")
    rng = _rng(settings, len(history))
    if len(history) < settings.n_startup:
        return sample_uniform(space, rng)
    good, bad = split_history(history, settings.gamma)
    if not good:
        return sample_uniform(space, rng)

    score = np.zeros(settings.n_candidates)
    candidates: dict[str, np.ndarray] = {}
    for spec in space:
        l = _Parzen.fit(spec, np.array([t.params[spec.name] for t in good]), settings)
        g = _Parzen.fit(spec, np.array([t.params[spec.name] for t in bad]), settings)
        xs = l.sample(rng, settings.n_candidates)
        candidates[spec.name] = xs
        score += l.log_pdf(xs) - g.log_pdf(xs)
    best = int(np.argmax(score))
    return {spec.name: spec.from_internal(candidates[spec.name][best]) for spec in space}


def optimize(space: ParamSpace, objective: Callable[[dict[str, float]], float], budget: int,
             settings: TPESettings = TPESettings()) -> tuple[dict[str, float], list[TrialRecord]]:
    """Sequential suggest/evaluate loop. Non-finite objectives are recorded as +inf."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    history: list[TrialRecord] = []
    for i in range(budget):
        params = suggest(space, history, settings)
        try:
            value = float(objective(dict(params)))
        except (ArithmeticError, ValueError):
            value = math.inf
        if not math.isfinite(value):
            value = math.inf
        history.append(TrialRecord(i, params, value))
    best = min(history, key=lambda t: (t.objective, t.index))
    return dict(best.params), history


def random_search(space: ParamSpace, objective: Callable[[dict[str, float]], float], budget: int,
                  seed: int = 0) -> tuple[dict[str, float], list[TrialRecord]]:
    """Baseline with the same bookkeeping as :func:`optimize`."""
    return optimize(space, objective, budget, TPESettings(n_startup=budget + 1, seed=seed))


def best_so_far(history: Sequence[TrialRecord]) -> list[float]:
    return list(np.minimum.accumulate([t.objective for t in history]))


def write_history_csv(path: str | Path, space: ParamSpace, history: Sequence[TrialRecord]) -> None:
    """CSV ``index,<param...>,objective`` in trial order."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", *[s.name for s in space], "objective"])
        for t in history:
            w.writerow([t.index, *[repr(t.params[s.name]) for s in space], repr(t.objective)])


def space_from_mapping(ranges: Mapping[str, tuple[float, float]], kinds: Mapping[str, str] | None = None) -> list[ParamSpec]:
    kinds = kinds or {}
    return [ParamSpec(name, kinds.get(name, "uniform"), lo, hi) for name, (lo, hi) in ranges.items()]


# ------------------------------------------------------------- VAD tuning

VAD_SPACE: tuple[ParamSpec, ...] = (
    ParamSpec("threshold_db", "uniform", 2.0, 20.0),
    ParamSpec("min_speech_ms", "integer-uniform", 30, 300),
    ParamSpec("min_silence_ms", "integer-uniform", 50, 600),
    ParamSpec("pad_ms", "integer-uniform", 0, 100),
)


def vad_objective(snapshot: CorpusSnapshot, audio_loader: Callable[[Utterance], np.ndarray], sample_rate: int = 16000,
                  base: VadParams | None = None) -> Callable[[dict[str, float]], float]:
    """``1 - F1`` of detect() frame decisions against word-timestamp masks, pooled over the snapshot.

    Audio is loaded once per utterance. Parameters missing from a trial come from ``base``.
    """
    base = base or VadParams()
    hop_s = HOP_MS / 1000.0
    items = []
    for u in snapshot.utterances:
        if u.words is None:
            raise ValueError(f"{u.id}: no word timestamps")
        x = audio_loader(u)
        n = math.ceil(len(x) / sample_rate / hop_s)
        ref = segments_to_mask([(s, e) for _, s, e in u.words], n, hop_s)
        items.append((x, n, ref))

    def objective(params: dict[str, float]) -> float:
        p = VadParams(**{**params_dict(base), **params})
        tp = fp = fn = 0
        for x, n, ref in items:
            hyp = segments_to_mask(detect(x, p, sample_rate), n, hop_s)
            a, b, c = f1_counts(ref, hyp)
            tp, fp, fn = tp + a, fp + b, fn + c
        return 1.0 - f1_from_counts(tp, fp, fn)

    return objective


def tune_vad(snapshot: CorpusSnapshot, rate_class: SpeechRateClass, space: ParamSpace = VAD_SPACE,
             budget: int = 40, settings: TPESettings = TPESettings(), audio_loader: Callable[[Utterance], np.ndarray] | None = None,
             sample_rate: int = 16000, rate_bounds: tuple[float, float] | None = None,
             history_out: list[TrialRecord] | None = None) -> VadParams:
    """Best VadParams for the utterances of ``snapshot`` in ``rate_class``.

    Class membership comes from each utterance's word timestamps. The trial
    history is appended to ``history_out`` when given.
    """
    bounds = rate_bounds or DEFAULT_RATE_BOUNDS
    missing = [u.id for u in snapshot.utterances if u.words is None]
    if missing:
        raise ValueError(f"{len(missing)} utterance(s) lack word timestamps, e.g. {missing[:5]}")
    subset = [u for u in snapshot.utterances if classify_rate(words_per_second(u.words), bounds) == rate_class]
    if not subset:
        raise ValueError(f"no utterances in speech-rate class {rate_class.value!r}")
    loader = audio_loader or (lambda u: load_utterance_audio(u, sample_rate))
    objective = vad_objective(snapshot.derive(f"{snapshot.name}[{rate_class.value}]", subset), loader, sample_rate)
    best, history = optimize(space, objective, budget, settings)
    if history_out is not None:
        history_out.extend(history)
    return VadParams(**{**params_dict(VadParams()), **best})
