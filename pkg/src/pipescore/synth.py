"""Synthetic corpora with analytically known ground truth, and intrusive oracles.

Everything here is deterministic given a seed. The oracles (true SNR, true
SI-SDR, Schroeder T30, C50) are the reference side of the checks run against
the blind/native metrics in :mod:`pipescore.dsp`.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import signal

from .corpus import CorpusSnapshot, MetricKind, Utterance, write_wav
from .sidecar import TIMESTAMPS, write_sidecar

CAP_DB = 100.0
DECAY_60DB = 3.0 * math.log(10.0)  # amplitude e^(-DECAY_60DB * t / t60) is -60 dB at t60


PAUSE_FLOOR = 0.05
PHRASE_S = (2.5, 6.0)
PHRASE_PAUSE_S = (0.6, 1.2)


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationSpec:
    target_snr_db: float = 20.0
    t60_s: float = 0.0
    f0_hz: float = 120.0
    vibrato_hz: float = 0.0
    vibrato_depth_hz: float = 0.0
    seed: int = 0
    words_per_second: float = 3.0

    def __post_init__(self) -> None:
        if self.t60_s < 0:
            raise ValueError("t60_s must be non-negative")
        if not math.isfinite(self.target_snr_db):
            raise ValueError("target_snr_db must be finite")


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


# ------------------------------------------------------------------ signals


def tone(f0_hz: float, duration_s: float, sample_rate: int = 16000, vibrato_hz: float = 0.0,
         vibrato_depth_hz: float = 0.0, amplitude: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Sine with sinusoidal frequency modulation.

    Returns ``(samples, instantaneous_frequency_hz)``; phase is the running
    integral of the instantaneous frequency.
    """
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    inst = f0_hz + vibrato_depth_hz * np.sin(2.0 * np.pi * vibrato_hz * t)
    phase = 2.0 * np.pi * np.cumsum(inst) / sample_rate
    return amplitude * np.sin(phase), inst


_FORMANTS = ((700.0, 110.0), (1220.0, 120.0), (2600.0, 160.0))


def _formant_filter(x: np.ndarray, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    for fc, bw in _FORMANTS:
        fc = fc * rng.uniform(0.8, 1.2)
        r = math.exp(-math.pi * bw / sample_rate)
        theta = 2.0 * math.pi * fc / sample_rate
        a = [1.0, -2.0 * r * math.cos(theta), r * r]
        x = signal.lfilter([1.0 - r], a, x)
    return x


def speech_like(duration_s: float, sample_rate: int = 16000, seed: int = 0, f0_hz: float = 120.0,
                words_per_second: float = 3.0, vibrato_hz: float = 0.0, vibrato_depth_hz: float = 0.0,
                return_words: bool = False):
    """Harmonic-rich pulse train through formant resonators, gated into words.

    Words are voiced bursts separated by low-level pauses; their count follows
    ``words_per_second``. With ``return_words`` the word extents are returned
    as ``[(label, start_s, end_s), ...]``.
    """
    x, words, _ = _speech_like(duration_s, sample_rate, seed, f0_hz, words_per_second, vibrato_hz, vibrato_depth_hz)
    return (x, words) if return_words else x


def _speech_like(duration_s: float, sample_rate: int, seed: int, f0_hz: float, words_per_second: float,
                 vibrato_hz: float, vibrato_depth_hz: float):
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    drift = 1.0 + 0.08 * np.sin(2.0 * np.pi * 0.3 * t + rng.uniform(0, 2 * np.pi))
    inst = f0_hz * drift + vibrato_depth_hz * np.sin(2.0 * np.pi * vibrato_hz * t)
    phase = np.cumsum(inst) / sample_rate
    pulses = np.zeros(n)
    idx = np.nonzero(np.diff(np.floor(phase)) > 0)[0] + 1
    pulses[idx] = 1.0
    source = signal.lfilter([1.0], [1.0, -0.9], pulses)  # spectral tilt
    source += 0.1 * rng.standard_normal(n)  # aspiration
    voiced = _formant_filter(source, sample_rate, rng)

    # pauses keep a -26 dB murmur so the amplitude distribution stays near
    # the gamma shape WADA-SNR is calibrated for
    envelope = np.full(n, PAUSE_FLOOR)
    words: list[tuple[str, float, float]] = []
    pos = 0.15
    mean_word = 0.6 / max(words_per_second, 0.1)
    mean_gap = 0.4 / max(words_per_second, 0.1)
    phrase_rng = np.random.default_rng([seed, 1])  # breath-group pauses, separate stream
    phrase_end = pos + phrase_rng.uniform(*PHRASE_S)
    while True:
        wlen = float(np.clip(rng.gamma(4.0, mean_word / 4.0), 0.08, 1.2))
        if pos + wlen > duration_s - 0.1:
            break
        a, b = int(pos * sample_rate), int((pos + wlen) * sample_rate)
        ramp = np.hanning(b - a)
        envelope[a:b] = np.maximum(ramp**0.5 * rng.uniform(0.4, 1.0), PAUSE_FLOOR)
        words.append((f"w{len(words)}", round(pos, 6), round(pos + wlen, 6)))
        pos += wlen + float(np.clip(rng.gamma(2.0, mean_gap / 2.0), 0.03, 2.0))
        if pos >= phrase_end:
            pos += phrase_rng.uniform(*PHRASE_PAUSE_S)
            phrase_end = pos + phrase_rng.uniform(*PHRASE_S)
    x = voiced * envelope
    peak = np.max(np.abs(x)) if np.any(x) else 1.0
    x = 0.5 * x / peak
    return x, words, inst


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, target_snr_db: float) -> tuple[np.ndarray, float]:
    """Scale ``noise`` so that 10·log10(P_clean / P_noise) equals the target.

    ``noise`` is looped or truncated to the length of ``clean``. Returns the
    mixture and the scale applied to the noise.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.resize(np.asarray(noise, dtype=np.float64), clean.shape)
    pc, pn = power(clean), power(noise)
    if pc == 0 or pn == 0:
        raise OracleError("mix_at_snr needs non-silent clean and noise buffers")
    scale = math.sqrt(pc / (pn * 10.0 ** (target_snr_db / 10.0)))
    return clean + scale * noise, scale


def true_snr(clean: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * math.log10(power(clean) / power(noise))


def true_si_sdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped at 100 dB for a perfect estimate."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise OracleError("reference and estimate must have equal length")
    rr = float(np.dot(ref, ref))
    if rr == 0:
        raise OracleError("SI-SDR undefined for a zero reference")
    alpha = float(np.dot(ref, est)) / rr
    target = alpha * ref
    resid = float(np.sum((target - est) ** 2))
    num = float(np.sum(target**2))
    if resid <= num * 10.0 ** (-CAP_DB / 10.0):
        return CAP_DB
    return min(CAP_DB, 10.0 * math.log10(num / resid))


# ------------------------------------------------------------------- reverb


def exp_rir(t60_s: float, duration_s: float, sample_rate: int = 16000, seed: int = 0) -> np.ndarray:
    """White noise under an exponential envelope reaching -60 dB energy at ``t60_s``.

    The noise is random-sign (+-1), so each sample's energy equals the envelope
    exactly and the measured T30/C50 track their closed forms instead of
    scattering with the draw. Sample 0 is a unit direct path.
    """
    if t60_s <= 0:
        raise ValueError("t60_s must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    h = rng.choice((-1.0, 1.0), size=n) * np.exp(-DECAY_60DB * t / t60_s)
    h[0] = 1.0
    return h


def c50_closed_form(t60_s: float) -> float:
    """Early/late energy ratio (dB) of a continuous exponential energy decay."""
    return 10.0 * math.log10(math.exp(2.0 * DECAY_60DB * 0.05 / t60_s) - 1.0)


def schroeder_curve(rir: np.ndarray) -> np.ndarray:
    """Backward-integrated energy decay in dB re. total energy."""
    e = np.asarray(rir, dtype=np.float64) ** 2
    edc = np.cumsum(e[::-1])[::-1]
    if edc[0] <= 0:
        raise OracleError("RIR has no energy")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(edc / edc[0])


def schroeder_t30(rir: np.ndarray, sample_rate: int = 16000) -> float:
    """T30: line fit to the Schroeder curve between -5 and -35 dB, extrapolated to 60 dB."""
    edc = schroeder_curve(rir)
    if edc.min() > -35.0:
        raise OracleError("decay does not reach -35 dB; RIR too short or too clean")
    sel = (edc <= -5.0) & (edc >= -35.0)
    t = np.nonzero(sel)[0] / sample_rate
    slope, _ = np.polyfit(t, edc[sel], 1)
    if slope >= 0:
        raise OracleError("non-decaying energy curve")
    return float(-60.0 / slope)


def c50(rir: np.ndarray, sample_rate: int = 16000) -> float:
    h = np.asarray(rir, dtype=np.float64)
    if len(h) < int(0.06 * sample_rate):
        raise OracleError("C50 needs at least 60 ms of impulse response")
    k = int(round(0.05 * sample_rate))
    early = float(np.sum(h[: k + 1] ** 2))
    late = float(np.sum(h[k + 1 :] ** 2))
    if early == 0:
        raise OracleError("RIR has no early energy")
    if late == 0 or early / late > 10.0 ** (CAP_DB / 10.0):
        return CAP_DB
    return 10.0 * math.log10(early / late)


# --------------------------------------------------------------- proxies


def mos_proxy(snr_db: float) -> float:
    """Synthetic MOS, strictly increasing in SNR on (-5, 30) dB."""
    return float(min(5.0, max(1.0, 1.0 + 4.0 * (snr_db + 5.0) / 35.0)))


def dnsmos_proxy(snr_db: float) -> float:
    """A second MOS proxy with a lower median and narrower spread than :func:`mos_proxy`."""
    return float(min(5.0, max(1.0, 2.0 + 0.5 * (mos_proxy(snr_db) - 1.0))))


def pesq_proxy(snr_db: float) -> float:
    return float(min(4.5, max(1.0, 1.0 + 3.5 * (snr_db + 5.0) / 40.0)))


# ----------------------------------------------------------------- corpus


@dataclass
class SyntheticItem:
    id: str
    spec: DegradationSpec
    clean: np.ndarray
    noise: np.ndarray  # scaled noise actually present in ``degraded``
    degraded: np.ndarray
    words: list[tuple[str, float, float]]
    truth: dict[str, float] = field(default_factory=dict)
    rir: np.ndarray | None = None


def _f0_truth(inst: np.ndarray, words: list[tuple[str, float, float]], sample_rate: int) -> float | None:
    """Std of the source F0 sampled every 10 ms inside word extents."""
    t = np.arange(0.0, len(inst) / sample_rate, 0.01)
    inside = np.zeros(t.shape, dtype=bool)
    for _, a, b in words:
        inside |= (t >= a) & (t < b)
    if inside.sum() < 2:
        return None
    return float(np.std(inst[(t[inside] * sample_rate).astype(int)]))


def render_item(item_id: str, spec: DegradationSpec, duration_s: float, sample_rate: int = 16000,
                clean: np.ndarray | None = None) -> SyntheticItem:
    """Generate (or take) clean material, reverberate, add white noise at the target SNR.

    The SNR is set against the reverberant clean signal, which is also the
    reference for the ground-truth SI-SDR.
    """
    rng = np.random.default_rng(spec.seed)
    words: list[tuple[str, float, float]] = []
    truth: dict[str, float] = {}
    if clean is None:
        clean, words, inst = _speech_like(duration_s, sample_rate, spec.seed, spec.f0_hz, spec.words_per_second,
                                          spec.vibrato_hz, spec.vibrato_depth_hz)
        f0 = _f0_truth(inst, words, sample_rate)
        if f0 is not None:
            truth["F0_STD"] = f0
    rir = None
    if spec.t60_s > 0:
        rir = exp_rir(spec.t60_s, max(1.5 * spec.t60_s, 0.1), sample_rate, seed=spec.seed + 7919)
        wet = signal.fftconvolve(clean, rir)[: len(clean)]
        clean = 0.5 * wet / np.max(np.abs(wet))
        truth["T30"] = schroeder_t30(rir, sample_rate)
        truth["C50"] = c50(rir, sample_rate)
    noise = rng.standard_normal(len(clean))
    degraded, scale = mix_at_snr(clean, noise, spec.target_snr_db)
    peak = np.max(np.abs(degraded))
    gain = 0.9 / peak if peak > 0.9 else 1.0
    clean, noise, degraded = clean * gain, noise * scale * gain, degraded * gain
    truth.update(_noise_truth(clean, noise, spec.target_snr_db))
    return SyntheticItem(item_id, spec, clean, noise, degraded, words, truth, rir)


def _noise_truth(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> dict[str, float]:
    return {
        "SNR": snr_db,
        "SI_SDR": true_si_sdr(clean, clean + noise),
        "MOS_NISQA": mos_proxy(snr_db),
        "MOS_DNSMOS": dnsmos_proxy(snr_db),
        "PESQ": pesq_proxy(snr_db),
    }


def attenuate_noise(item: SyntheticItem, reduction_db: float) -> SyntheticItem:
    """Oracle enhancement: the same item with its noise lowered by ``reduction_db``.

    Reverberation is left untouched, so T30/C50 truth carries over.
    """
    noise = item.noise * 10.0 ** (-reduction_db / 20.0)
    truth = dict(item.truth)
    truth.update(_noise_truth(item.clean, noise, item.spec.target_snr_db + reduction_db))
    return SyntheticItem(item.id, item.spec, item.clean, noise, item.clean + noise, item.words, truth, item.rir)


@dataclass
class SyntheticCorpus:
    snapshot: CorpusSnapshot
    truth: dict[MetricKind, dict[str, float]]  # per-metric sidecar rows keyed by utterance id
    items: list[SyntheticItem]


TRUTH_KINDS = (MetricKind.SNR, MetricKind.SI_SDR, MetricKind.T30, MetricKind.C50, MetricKind.F0_STD,
               MetricKind.MOS_NISQA, MetricKind.MOS_DNSMOS, MetricKind.PESQ)


def _collect(items: Sequence[SyntheticItem], name: str, sample_rate: int,
             paths: Sequence[str]) -> SyntheticCorpus:
    utts = [
        Utterance(id=it.id, source_id=it.id, path=path, start_s=0.0, end_s=len(it.degraded) / sample_rate,
                  sample_rate=sample_rate, words=tuple(it.words) if it.words else None)
        for it, path in zip(items, paths)
    ]
    truth = {k: {it.id: it.truth[k.value] for it in items if k.value in it.truth} for k in TRUTH_KINDS}
    return SyntheticCorpus(CorpusSnapshot(name, utts, {"generator": "synth"}), truth, list(items))


def make_corpus(specs: Sequence[DegradationSpec], duration_s: float = 10.0, sample_rate: int = 16000,
                clean: Sequence[np.ndarray] | None = None, name: str = "synthetic", jobs: int = 1) -> SyntheticCorpus:
    """One utterance per spec plus ground-truth sidecar rows.

    ``clean`` optionally supplies the base material, one buffer per spec;
    otherwise speech-like material is generated from each spec. Utterance
    paths are ``<id>.wav`` placeholders; :func:`write_oracle_corpus` puts
    audio on disk.
    """
    if not specs:
        raise OracleError("make_corpus needs at least one spec")
    if clean is not None and len(clean) != len(specs):
        raise OracleError("one clean buffer per spec is required")
    width = max(3, len(str(len(specs) - 1)))

    def work(i: int) -> SyntheticItem:
        base = None if clean is None else np.asarray(clean[i], dtype=np.float64)
        return render_item(f"syn{i:0{width}d}", specs[i], duration_s, sample_rate, base)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            items = list(pool.map(work, range(len(specs))))
    else:
        items = [work(i) for i in range(len(specs))]
    return _collect(items, name, sample_rate, [f"{it.id}.wav" for it in items])


# ---------------------------------------------------------- on-disk corpus

SIDECAR_KINDS = (MetricKind.T30, MetricKind.C50, MetricKind.PESQ, MetricKind.MOS_NISQA, MetricKind.MOS_DNSMOS)
ORACLE_REDUCTIONS_DB = {"oracle6": 6.0, "oracle12": 12.0}
WPS_CHOICES = (1.8, 3.2, 4.8)
NISQA_GRID = (3.0, 3.5, 3.8, 4.2)
DNSMOS_GRID = (2.7, 3.0, 3.2, 3.4)


def oracle_specs(n_sources: int, seed: int = 0, t60_range: tuple[float, float] = (0.2, 1.0),
                 snr_range: tuple[float, float] = (5.0, 30.0)) -> list[DegradationSpec]:
    """Specs spread evenly over ``snr_range`` with random T60, F0 in 90..220 Hz and three speaking rates.

    ``t60_range=(0, 0)`` gives dry recordings.
    """
    rng = np.random.default_rng(seed)
    snrs = np.linspace(snr_range[0], snr_range[1], n_sources)
    rng.shuffle(snrs)
    return [
        DegradationSpec(
            target_snr_db=float(round(snrs[i], 3)),
            t60_s=float(round(rng.uniform(*t60_range), 3)),
            f0_hz=float(round(rng.uniform(90.0, 220.0), 1)),
            seed=seed * 1000 + i,
            words_per_second=WPS_CHOICES[i % len(WPS_CHOICES)],
        )
        for i in range(n_sources)
    ]


def write_oracle_corpus(out_dir: str | Path, n_sources: int = 20, duration_s: float = 30.0, seed: int = 0,
                        sample_rate: int = 16000, jobs: int = 1,
                        t60_range: tuple[float, float] = (0.2, 1.0)) -> dict[str, Any]:
    """Write a ready-to-run synthetic corpus and return its run configuration.

    Layout under ``out_dir``: ``audio/<variant>/<id>.wav`` for the clean
    reference, the unprocessed mixtures (``none``) and two oracle noise
    reductions; ``manifest_<variant>.jsonl``; recording-level sidecars in
    ``sidecars/<variant>/<METRIC>.csv``; ground truth in
    ``truth/<variant>/<METRIC>.csv``; ``timestamps.jsonl``; ``config.json``.
    Dry corpora (``t60_range=(0, 0)``) carry no T30/C50 files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(oracle_specs(n_sources, seed, t60_range), duration_s, sample_rate, name="none", jobs=jobs)
    variants = {"none": corpus.items}
    for label, db in ORACLE_REDUCTIONS_DB.items():
        variants[label] = [attenuate_noise(it, db) for it in corpus.items]

    def dump(label: str, items: Sequence[SyntheticItem], audio: str) -> None:
        rows = []
        for it in items:
            rel = f"audio/{label}/{it.id}.wav"
            write_wav(out / rel, getattr(it, audio), sample_rate, encoding="float32")
            rows.append(json.dumps({"id": it.id, "path": rel, "source_id": it.id, "speaker_id": it.id},
                                   sort_keys=True))
        (out / f"manifest_{label}.jsonl").write_text("\n".join(rows) + "\n", encoding="utf-8")

    dump("clean", corpus.items, "clean")
    sidecars: dict[str, dict[str, str]] = {}
    for label, items in variants.items():
        dump(label, items, "degraded")
        sidecars[label] = {}
        for kind in TRUTH_KINDS:
            rows = {it.id: it.truth[kind.value] for it in items if kind.value in it.truth}
            if not rows:
                continue
            write_sidecar(out / "truth" / label / f"{kind.value}.csv", kind, rows)
            if kind in SIDECAR_KINDS:
                rel = f"sidecars/{label}/{kind.value}.csv"
                write_sidecar(out / rel, kind, rows)
                sidecars[label][kind.value] = rel
    write_sidecar(out / "timestamps.jsonl", TIMESTAMPS, {it.id: it.words for it in corpus.items})

    config: dict[str, Any] = {
        "sample_rate": sample_rate,
        "reference": "clean",
        "manifests": {label: f"manifest_{label}.jsonl" for label in ["clean", *variants]},
        "sidecars": sidecars,
        "sidecar_key": "source_id",
        "timestamps": "timestamps.jsonl",
        "enhancements": list(variants),
        "filters": {MetricKind.MOS_NISQA.value: list(NISQA_GRID), MetricKind.MOS_DNSMOS.value: list(DNSMOS_GRID)},
        "seed": seed,
        # YIN finds no voiced frames in a few of the noisiest segments
        "missing_metrics": "exclude",
        # phrase pauses run 0.6-1.2 s, so allow bridging them when grouping
        "vad": {"length_target": {"mean_s": 8.0, "std_s": 2.0, "max_gap_s": 1.5, "hard_max_s": 15.0}},
    }
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return config
