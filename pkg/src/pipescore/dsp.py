"""Native CPU metrics: WADA-SNR, YIN F0, MFCC and mel-cepstral distortion."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy import signal

logger = logging.getLogger(__name__)

WADA_MIN_SECONDS = 0.5
WADA_CLAMP_DB = (-20.0, 100.0)
LOG_FLOOR = 1e-10
N_MELS = 26
N_CEPS = 13
MEL_FMIN = 50.0
MCD_CONST = 10.0 / math.log(10.0)
MCD_TRIM_TOLERANCE = 2


class MetricError(ValueError):
    """Input for which a metric is undefined."""


@dataclass(frozen=True)
class FramePlan:
    frame_len_ms: float = 25.0
    hop_ms: float = 10.0
    window: str = "hann"

    def __post_init__(self) -> None:
        if not 0 < self.hop_ms <= self.frame_len_ms:
            raise ValueError("need 0 < hop_ms <= frame_len_ms")

    def frame_len(self, rate: int) -> int:
        return int(round(self.frame_len_ms * rate / 1000.0))

    def hop(self, rate: int) -> int:
        return int(round(self.hop_ms * rate / 1000.0))

    def n_frames(self, n_samples: int, rate: int) -> int:
        L = self.frame_len(rate)
        return 0 if n_samples < L else 1 + (n_samples - L) // self.hop(rate)


F0_PLAN = FramePlan(frame_len_ms=40.0, hop_ms=10.0)


@dataclass(frozen=True)
class F0Track:
    f0_hz: np.ndarray
    voiced: np.ndarray
    fmin_hz: float
    fmax_hz: float
    times_s: np.ndarray | None = None

    def voiced_f0(self) -> np.ndarray:
        return self.f0_hz[self.voiced]


@dataclass(frozen=True)
class CepstraSequence:
    coeffs: np.ndarray  # (n_frames, 13)
    frame_plan: FramePlan

    def __len__(self) -> int:
        return self.coeffs.shape[0]


def frames(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Read-only (n_frames, frame_len) view; trailing partial frame dropped."""
    if len(x) < frame_len:
        return np.empty((0, frame_len), dtype=x.dtype)
    return sliding_window_view(x, frame_len)[::hop]


# ---------------------------------------------------------------------- WADA-SNR


@lru_cache(maxsize=1)
def wada_table() -> tuple[np.ndarray, np.ndarray]:
    """``(snr_db, g)`` arrays of the gamma-model lookup table shipped in ``data/``."""
    text = resources.files("pipescore").joinpath("data/wada_gamma_table.csv").read_text(encoding="utf-8")
    rows = [ln.split(",") for ln in text.splitlines() if ln and not ln.startswith("#") and not ln.startswith("snr")]
    arr = np.array(rows, dtype=np.float64)
    return arr[:, 0], arr[:, 1]


def wada_statistic(samples: np.ndarray) -> float:
    """``log(mean|x|) - mean(log|x|)`` after peak normalisation."""
    x = np.asarray(samples, dtype=np.float64)
    a = np.abs(x / np.max(np.abs(x)))
    a = np.maximum(a, LOG_FLOOR)
    return float(np.log(a.mean()) - np.log(a).mean())


def wada_snr(samples: np.ndarray, sample_rate: int = 16000) -> float:
    """Blind SNR estimate in dB, clamped to [-20, 100]."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < WADA_MIN_SECONDS * sample_rate:
        raise MetricError(f"WADA-SNR needs at least {WADA_MIN_SECONDS} s of audio")
    if not np.any(x):
        raise MetricError("WADA-SNR undefined for all-zero input")
    snr_db, g = wada_table()
    return float(np.interp(wada_statistic(x), g, snr_db))


# ---------------------------------------------------------------------------- YIN


def _difference(fr: np.ndarray, tau_max: int) -> np.ndarray:
    """YIN difference function d(tau), tau = 0..tau_max, integration window L - tau_max."""
    n, L = fr.shape
    W = L - tau_max
    nfft = sfft.next_fast_len(L + W)
    head = sfft.rfft(fr[:, :W], nfft, axis=1)
    full = sfft.rfft(fr, nfft, axis=1)
    r = sfft.irfft(np.conj(head) * full, nfft, axis=1)[:, : tau_max + 1]
    sq = np.concatenate([np.zeros((n, 1)), np.cumsum(fr * fr, axis=1)], axis=1)
    taus = np.arange(tau_max + 1)
    energy0 = sq[:, W][:, None]
    energy_tau = sq[:, taus + W] - sq[:, taus]
    return np.maximum(energy0 + energy_tau - 2.0 * r, 0.0)


def _cmnd(d: np.ndarray) -> np.ndarray:
    out = np.ones_like(d)
    csum = np.cumsum(d[:, 1:], axis=1)
    taus = np.arange(1, d.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        out[:, 1:] = np.where(csum > 0, d[:, 1:] * taus / csum, 1.0)
    return out


def yin_f0(
    samples: np.ndarray,
    sample_rate: int = 16000,
    plan: FramePlan = F0_PLAN,
    fmin_hz: float = 50.0,
    fmax_hz: float = 600.0,
    threshold: float = 0.10,
    block: int = 2048,
) -> F0Track:
    """Frame-wise F0 with the cumulative-mean-normalised difference method.

    For each frame the first lag whose normalised difference dips below
    ``threshold`` is taken, walked down to the local minimum and refined by
    parabolic interpolation. Frames without such a dip, or whose refined
    estimate leaves ``[fmin_hz, fmax_hz]``, are unvoiced.
    """
    if not fmin_hz < fmax_hz:
        raise ValueError("fmin_hz must be below fmax_hz")
    L = plan.frame_len(sample_rate)
    hop = plan.hop(sample_rate)
    tau_max = int(math.ceil(sample_rate / fmin_hz))
    tau_min = max(2, int(math.floor(sample_rate / fmax_hz)))
    if L < 2 * tau_max:
        raise ValueError(f"frame of {L} samples does not cover two periods of {fmin_hz} Hz")

    x = np.asarray(samples, dtype=np.float64)
    fr_all = frames(x, L, hop)
    n = fr_all.shape[0]
    f0 = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    for b0 in range(0, n, block):
        fr = fr_all[b0 : b0 + block]
        fr = fr - fr.mean(axis=1, keepdims=True)
        dprime = _cmnd(_difference(fr, tau_max))
        energy = np.einsum("ij,ij->i", fr, fr)
        search = dprime[:, tau_min : tau_max + 1]
        below = search < threshold
        has = below.any(axis=1) & (energy > 1e-10 * L)
        first = np.argmax(below, axis=1) + tau_min
        for k in np.nonzero(has)[0]:
            t = first[k]
            row = dprime[k]
            while t + 1 <= tau_max and row[t + 1] < row[t]:
                t += 1
            shift = 0.0
            if 1 <= t < tau_max:
                a, b, c = row[t - 1], row[t], row[t + 1]
                denom = a - 2.0 * b + c
                if denom > 0:
                    shift = 0.5 * (a - c) / denom
            freq = sample_rate / (t + shift)
            if fmin_hz <= freq <= fmax_hz:
                f0[b0 + k] = freq
                voiced[b0 + k] = True
    times = (np.arange(n) * hop + L / 2.0) / sample_rate
    return F0Track(f0_hz=f0, voiced=voiced, fmin_hz=fmin_hz, fmax_hz=fmax_hz, times_s=times)


def f0_std(track: F0Track) -> float:
    """Population standard deviation of F0 over voiced frames."""
    v = track.voiced_f0()
    if v.size < 2:
        raise MetricError(f"F0 std needs at least 2 voiced frames, got {v.size}")
    return float(np.std(np.sort(v)))


# --------------------------------------------------------------------- MFCC / MCD


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS, fmin: float = MEL_FMIN) -> np.ndarray:
    """Triangular filters (n_mels, n_fft // 2 + 1), HTK mel scale, fmin to Nyquist."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m : m + 3]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mfcc(samples: np.ndarray, sample_rate: int = 16000, plan: FramePlan = FramePlan()) -> CepstraSequence:
    """Mel cepstra c1..c13 per frame (c0 dropped)."""
    x = np.asarray(samples, dtype=np.float64)
    L = plan.frame_len(sample_rate)
    if len(x) < L:
        raise MetricError("buffer shorter than one frame")
    fr = frames(x, L, plan.hop(sample_rate)) * signal.get_window(plan.window, L, fftbins=True)
    n_fft = 1 << (L - 1).bit_length()
    mag = np.abs(np.fft.rfft(fr, n_fft, axis=1))
    energies = mag @ mel_filterbank(sample_rate, n_fft).T
    logmel = np.log(np.maximum(energies, LOG_FLOOR))
    ceps = sfft.dct(logmel, type=2, norm="ortho", axis=1)[:, 1 : N_CEPS + 1]
    return CepstraSequence(coeffs=ceps, frame_plan=plan)


def _dtw_path(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        prev = acc[i - 1]
        row = acc[i]
        diag_up = np.minimum(prev[:-1], prev[1:]) + cost[i - 1]
        for j in range(1, m + 1):
            row[j] = min(diag_up[j - 1], row[j - 1] + cost[i - 1, j - 1])
    i, j = n, m
    pi, pj = [], []
    while i > 0 and j > 0:
        pi.append(i - 1)
        pj.append(j - 1)
        steps = (acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
        k = int(np.argmin(steps))
        if k == 0:
            i, j = i - 1, j - 1
        elif k == 1:
            i -= 1
        else:
            j -= 1
    return np.array(pi[::-1]), np.array(pj[::-1])


def mcd(reference: CepstraSequence, processed: CepstraSequence, align: str = "none") -> float:
    """Mean mel-cepstral distortion in dB.

    With ``align="none"`` frame counts may differ by at most two frames (the
    longer sequence is trimmed); ``align="dtw"`` pairs frames along the
    minimum-cost warping path under Euclidean cepstral distance.
    """
    if reference.frame_plan != processed.frame_plan:
        raise ValueError("cepstra computed with different frame plans")
    a, b = reference.coeffs, processed.coeffs
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise MetricError("MCD undefined for empty cepstra")
    if align == "none":
        if abs(a.shape[0] - b.shape[0]) > MCD_TRIM_TOLERANCE:
            raise ValueError(f"frame counts differ by more than {MCD_TRIM_TOLERANCE}: {a.shape[0]} vs {b.shape[0]}")
        if a.shape[0] != b.shape[0]:
            logger.warning("MCD: trimming %d vs %d frames", a.shape[0], b.shape[0])
        n = min(a.shape[0], b.shape[0])
        diff = a[:n] - b[:n]
    elif align == "dtw":
        cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
        ia, ib = _dtw_path(cost)
        diff = a[ia] - b[ib]
    else:
        raise ValueError(f"unknown alignment {align!r}")
    per_frame = MCD_CONST * np.sqrt(2.0 * np.einsum("ij,ij->i", diff, diff))
    return float(math.fsum(per_frame) / per_frame.size)
