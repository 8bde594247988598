from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipescore import dsp
from pipescore.dsp import CepstraSequence, F0Track, FramePlan, MetricError
from pipescore.synth import mix_at_snr, speech_like, tone

# (10 / ln 10) * sqrt(2) * 0.5, evaluated by hand
MCD_HALF_OFFSET_DB = 3.070925731856877


def _noise(n: int, seed: int = 1) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


# ----------------------------------------------------------------- WADA-SNR


def test_wada_table_is_monotone_and_spans_clamp():
    snr, g = dsp.wada_table()
    assert snr[0] == -20 and snr[-1] == 100 and len(snr) == 121
    assert np.all(np.diff(g) > 0)


def test_wada_ten_db_mixture():
    x = speech_like(10.0, seed=3)
    mix, _ = mix_at_snr(x, _noise(len(x)), 10.0)
    assert 7.0 <= dsp.wada_snr(mix) <= 13.0


def test_wada_scale_invariant():
    x = speech_like(4.0, seed=5)
    mix, _ = mix_at_snr(x, _noise(len(x)), 5.0)
    assert abs(dsp.wada_snr(0.5 * mix) - dsp.wada_snr(mix)) < 1e-6


def test_wada_white_noise_near_floor():
    assert dsp.wada_snr(_noise(32000)) <= 0.0


def test_wada_errors():
    with pytest.raises(MetricError):
        dsp.wada_snr(np.zeros(16000))
    with pytest.raises(MetricError):
        dsp.wada_snr(_noise(7999))


@given(st.floats(1e-3, 1e3))
@settings(max_examples=25)
def test_wada_positive_scaling_property(scale):
    x = _noise(8000, 2) * np.abs(_noise(8000, 3)) ** 2
    assert abs(dsp.wada_snr(scale * x) - dsp.wada_snr(x)) < 1e-6


# ------------------------------------------------------------------------ YIN


def test_yin_sine_220():
    x, _ = tone(220.0, 2.0)
    tr = dsp.yin_f0(x)
    assert tr.voiced.mean() >= 0.95
    assert abs(np.median(tr.voiced_f0()) - 220.0) <= 1.0


def test_yin_silence_unvoiced():
    assert not dsp.yin_f0(np.zeros(16000)).voiced.any()


def test_yin_vibrato_std_matches_generator():
    x, inst = tone(220.0, 3.0, vibrato_hz=5.0, vibrato_depth_hz=10.0)
    tr = dsp.yin_f0(x)
    oracle = float(np.std(inst[(tr.times_s * 16000).astype(int)]))
    assert oracle == pytest.approx(10 / math.sqrt(2), rel=0.02)
    assert dsp.f0_std(tr) == pytest.approx(10 / math.sqrt(2), rel=0.15)


@given(st.floats(80.0, 400.0))
@settings(max_examples=15)
def test_yin_pure_tone_recovery(f):
    tr = dsp.yin_f0(tone(f, 1.0)[0])
    v = tr.voiced_f0()
    assert v.size > 0
    assert np.mean(np.abs(v - f) <= 0.01 * f) >= 0.9


def test_yin_voiced_within_bounds():
    x = speech_like(3.0, seed=2) + 0.05 * _noise(48000)
    tr = dsp.yin_f0(x, fmin_hz=70, fmax_hz=400)
    v = tr.voiced_f0()
    assert np.all((v >= 70) & (v <= 400))
    assert np.all(tr.f0_hz[~tr.voiced] == 0)


def test_yin_precondition():
    with pytest.raises(ValueError):
        dsp.yin_f0(np.zeros(16000), fmin_hz=20.0)
    with pytest.raises(ValueError):
        dsp.yin_f0(np.zeros(16000), fmin_hz=300.0, fmax_hz=200.0)


def _track(values: list[float]) -> F0Track:
    arr = np.array(values, dtype=float)
    return F0Track(arr, np.ones(arr.size, dtype=bool), 50.0, 600.0)


def test_f0_std_examples():
    assert dsp.f0_std(_track([100.0] * 5)) == 0.0
    assert dsp.f0_std(_track([90.0, 110.0])) == 10.0
    with pytest.raises(MetricError):
        dsp.f0_std(_track([100.0]))


@given(st.lists(st.floats(50, 600), min_size=2, max_size=50), st.randoms())
def test_f0_std_reorder_invariant(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert dsp.f0_std(_track(values)) == dsp.f0_std(_track(shuffled))


# ------------------------------------------------------------------ MFCC / MCD


def test_mfcc_frame_count_and_determinism():
    x = _noise(16000 + 123)
    plan = FramePlan()
    a, b = dsp.mfcc(x), dsp.mfcc(x)
    assert len(a) == 1 + (len(x) - 400) // 160 == plan.n_frames(len(x), 16000)
    assert a.coeffs.shape[1] == 13
    np.testing.assert_array_equal(a.coeffs, b.coeffs)
    assert np.all(np.isfinite(a.coeffs))


def test_mfcc_silence_is_finite():
    assert np.all(np.isfinite(dsp.mfcc(np.zeros(4000)).coeffs))
    with pytest.raises(MetricError):
        dsp.mfcc(np.zeros(100))


def test_mcd_identity_is_exactly_zero():
    c = dsp.mfcc(speech_like(1.0, seed=1))
    assert dsp.mcd(c, c) == 0.0
    assert dsp.mcd(c, c, align="dtw") == 0.0


def test_mcd_single_dimension_offset_closed_form():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((50, 13))
    b = a.copy()
    b[:, 4] += 0.5
    plan = FramePlan()
    got = dsp.mcd(CepstraSequence(a, plan), CepstraSequence(b, plan))
    assert got == pytest.approx(MCD_HALF_OFFSET_DB, abs=1e-9)


def test_mcd_monotone_in_noise_level():
    x = speech_like(3.0, seed=4)
    n = _noise(len(x), 9)
    ref = dsp.mcd(dsp.mfcc(x), dsp.mfcc(x))
    m20 = dsp.mcd(dsp.mfcc(x), dsp.mfcc(mix_at_snr(x, n, 20.0)[0]))
    m0 = dsp.mcd(dsp.mfcc(x), dsp.mfcc(mix_at_snr(x, n, 0.0)[0]))
    assert ref == 0.0 < m20 < m0


def test_mcd_trim_tolerance():
    plan = FramePlan()
    a = CepstraSequence(np.zeros((10, 13)), plan)
    assert dsp.mcd(a, CepstraSequence(np.zeros((12, 13)), plan)) == 0.0
    with pytest.raises(ValueError):
        dsp.mcd(a, CepstraSequence(np.zeros((13, 13)), plan))
    with pytest.raises(MetricError):
        dsp.mcd(a, CepstraSequence(np.zeros((0, 13)), plan), align="dtw")
    with pytest.raises(ValueError):
        dsp.mcd(a, CepstraSequence(np.zeros((10, 13)), FramePlan(20.0, 10.0)))


def test_mcd_dtw_absorbs_frame_repetition():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((30, 13))
    b = np.repeat(a, 2, axis=0)  # every frame doubled
    plan = FramePlan()
    assert dsp.mcd(CepstraSequence(a, plan), CepstraSequence(b, plan), align="dtw") == 0.0


_ceps = st.integers(1, 20).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-50, 50), min_size=13 * n, max_size=13 * n),
        st.lists(st.floats(-50, 50), min_size=13 * n, max_size=13 * n),
    )
)


@given(_ceps)
def test_mcd_symmetric_and_non_negative(pair):
    plan = FramePlan()
    a = CepstraSequence(np.array(pair[0]).reshape(-1, 13), plan)
    b = CepstraSequence(np.array(pair[1]).reshape(-1, 13), plan)
    ab, ba = dsp.mcd(a, b), dsp.mcd(b, a)
    assert ab >= 0 and ab == ba
    assert dsp.mcd(a, a) == 0.0
