import numpy as np
import pytest
from scipy.signal import lfilter
from hypothesis import given, settings
from hypothesis import strategies as st

from formanttcn import classical
from formanttcn.classical import BaselineConfig, FormantCandidate
from formanttcn.dsp import AudioClip
from formanttcn.synth import GLOTTAL_POLE, resonator, steady_spec, synthesize

from helpers import baseline_errors, interior, steady_vowel


def sorted_roots(z):
    z = np.asarray(z)
    return z[np.lexsort((np.round(z.imag, 6), np.round(z.real, 6)))]


def test_roots_simple():
    np.testing.assert_allclose(sorted_roots(classical.poly_roots([1, 0, 1])), [-1j, 1j], atol=1e-10)
    np.testing.assert_allclose(sorted_roots(classical.poly_roots([1, -2.5, 1])), [0.5, 2.0], atol=1e-10)


def test_roots_degree12_vs_companion():
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = np.r_[1.0, rng.standard_normal(12)]
        z = classical.poly_roots(c)
        assert np.all(np.abs(np.polyval(c, z)) < 1e-8 * np.abs(c).max())
        companion = np.diag(np.ones(11), -1).astype(complex)
        companion[0] = -c[1:]
        eig = np.linalg.eigvals(companion)
        # match each eigenvalue to its nearest returned root
        used = set()
        for e in eig:
            j = min((k for k in range(12) if k not in used), key=lambda k: abs(z[k] - e))
            used.add(j)
            assert abs(z[j] - e) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_roots_scale_invariant(seed, scale):
    c = np.r_[1.0, np.random.default_rng(seed).standard_normal(8)]
    a = sorted_roots(classical.poly_roots(c))
    b = sorted_roots(classical.poly_roots(scale * c))
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_roots_nonconvergence_carries_iterate():
    with pytest.raises(classical.RootFindingError) as info:
        classical.poly_roots(np.r_[1.0, np.random.default_rng(1).standard_normal(12)], max_iter=2)
    assert len(info.value.best) == 12 and info.value.residual > 0


def test_candidates_formula():
    r = 0.95 * np.exp(2j * np.pi * 500 / 16000)
    cands = classical.roots_to_candidates([r, np.conj(r), 0.7], 16000)
    assert len(cands) == 1
    assert cands[0].frequency == pytest.approx(500.0)
    assert cands[0].bandwidth == pytest.approx(-16000 / np.pi * np.log(0.95))


def test_candidates_sorted_and_picked():
    cands = [FormantCandidate(f, b) for f, b in [(2500, 100), (60, 50), (700, 500), (1200, 80), (7990, 50)]]
    cands = sorted(cands, key=lambda c: c.frequency)
    np.testing.assert_array_equal(classical.pick_formants(cands, 16000), [1200, 2500, 0])


def test_silence_all_undefined():
    track = classical.track_baseline(AudioClip(np.zeros(8000)))
    assert len(track) == 50
    np.testing.assert_array_equal(track.formants, 0.0)


def test_two_resonances_leave_f3_undefined():
    rng = np.random.default_rng(2)
    src = np.zeros(8000)
    src[::128] = 1.0
    src = lfilter([1.0], [1.0, -GLOTTAL_POLE], src + 0.01 * rng.uniform(-1, 1, 8000))
    y = resonator(resonator(src, 500.0, 60.0, 16000), 1500.0, 90.0, 16000)
    est = classical.analyze_frames(AudioClip(y), BaselineConfig(order=6))[3:-3]
    np.testing.assert_allclose(np.median(est[:, 0]), 500, atol=30)
    np.testing.assert_allclose(np.median(est[:, 1]), 1500, atol=50)
    assert np.all(est[:, 2] == 0)


def test_steady_vowel_tracked():
    u = steady_vowel(0)
    track = classical.track_baseline(u.clip)
    assert len(track) == len(u.track)
    sel = interior(u.track)
    err = np.abs(track.formants[sel] - u.track.formants[sel]).mean(axis=0)
    assert np.all(err < [30, 50, 50])


def test_reference_vowel_interior_mae():
    ref = synthesize(steady_spec((500, 1500, 2500), (60, 90, 120)))
    mae = baseline_errors([ref]).mean(axis=0)
    assert np.all(mae < [30, 50, 50])


def test_baseline_ordering_and_determinism():
    u = steady_vowel(3)
    a = classical.track_baseline(u.clip).formants
    b = classical.track_baseline(u.clip).formants
    assert a.tobytes() == b.tobytes()
    full = a[np.all(a > 0, axis=1)]
    assert np.all(np.diff(full, axis=1) > 0)


def test_median_option():
    u = steady_vowel(4)
    plain = classical.analyze_frames(u.clip)
    smooth = classical.analyze_frames(u.clip, BaselineConfig(median=True))
    assert smooth.shape == plain.shape
    np.testing.assert_array_equal(smooth[5], np.median(plain[4:7], axis=0))
