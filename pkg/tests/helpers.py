"""Shared constructions for the test suite."""
import numpy as np

from formanttcn import synth
from formanttcn.classical import track_baseline


def steady_vowel(seed, duration=0.5):
    """Steady vowel with formants, bandwidths and f0 drawn from the corpus ranges."""
    rng = np.random.default_rng([seed, 5])
    while True:
        f = [rng.uniform(*r) for r in synth.F_RANGES]
        if f[1] - f[0] >= synth.MIN_SPACING and f[2] - f[1] >= synth.MIN_SPACING:
            break
    bw = [rng.uniform(*r) for r in synth.B_RANGES]
    f0 = rng.uniform(*synth.F0_RANGE)
    spec = synth.steady_spec(f, bw, f0=(f0, f0), duration=duration, seed=seed)
    return synth.synthesize(spec)


def interior(track, margin=3):
    """Speech frames at least ``margin`` frames away from the silence pads."""
    idx = np.flatnonzero(track.is_speech)
    sel = np.zeros(len(track), dtype=bool)
    sel[idx[0] + margin:idx[-1] + 1 - margin] = True
    return sel


def baseline_errors(utts):
    """Pooled |baseline - truth| over interior frames, shape (N, 3)."""
    errs = []
    for u in utts:
        est = track_baseline(u.clip).formants
        sel = interior(u.track)
        errs.append(np.abs(est[sel] - u.track.formants[sel]))
    return np.concatenate(errs)
