"""Cascade-resonator speech-like audio with exactly known formant tracks."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import AudioClip
from .io import to_pcm16, write_manifest, write_wav
from .tracks import FormantTrack, n_label_frames, write_label_csv

PAD_S = 0.05
PEAK = 0.5
FREQ_MARGIN = 500.0
HOP_S = 0.01
GLOTTAL_POLE = 0.8

# sampling ranges for make_corpus
F_RANGES = ((250.0, 900.0), (800.0, 2500.0), (1800.0, 3200.0))
B_RANGES = ((50.0, 90.0), (60.0, 120.0), (80.0, 150.0))
F0_RANGE = (80.0, 250.0)
DUR_RANGE = (0.5, 3.0)
MIN_SPACING = 200.0


@dataclass(frozen=True)
class TrajectorySpec:
    """Formant endpoints (Hz) per formant, interpolated over the voiced span.

    ``fricatives`` lists (start_s, end_s) spans inside the voiced span that
    are excited by noise only and labelled "s".
    """

    starts: tuple = (500.0, 1500.0, 2500.0)
    ends: tuple = (500.0, 1500.0, 2500.0)
    interpolation: tuple = ("linear", "linear", "linear")
    bandwidths: tuple = (60.0, 90.0, 120.0)
    f0: tuple = (120.0, 120.0)
    duration: float = 1.0
    noise_mix: float = 0.05
    seed: int = 0
    fricatives: tuple = ()

    def formants_at(self, t):
        """Formant frequencies at times t (s, measured from the start of the voiced span)."""
        u = np.clip(np.asarray(t, dtype=np.float64) / self.duration, 0.0, 1.0)
        out = []
        for s, e, kind in zip(self.starts, self.ends, self.interpolation):
            if kind == "linear":
                w = u
            elif kind == "sinusoidal":
                w = 0.5 * (1.0 - np.cos(np.pi * u))
            else:
                raise ValueError(f"unknown interpolation {kind!r}")
            out.append(s + (e - s) * w)
        return np.stack(out, axis=-1)

    def validate(self, fs):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0.0 <= self.noise_mix < 1.0:
            raise ValueError("noise_mix must lie in [0, 1)")
        if min(self.bandwidths) <= 0 or min(self.f0) <= 0:
            raise ValueError("bandwidths and f0 must be positive")
        f = self.formants_at(np.linspace(0.0, self.duration, 1001))
        if not (np.all(f[:, 0] > 0) and np.all(np.diff(f, axis=1) > 0)
                and np.all(f[:, 2] < fs / 2 - FREQ_MARGIN)):
            raise ValueError("trajectory violates 0 < F1 < F2 < F3 < fs/2 - margin")
        for a, b in self.fricatives:
            if not 0.0 <= a < b <= self.duration:
                raise ValueError("fricative span outside the voiced span")


@dataclass
class SynthUtterance:
    clip: AudioClip
    track: FormantTrack
    spec: TrajectorySpec = field(default=None)


def _coefficients(F, B, fs):
    T = 1.0 / fs
    b1 = 2.0 * np.exp(-np.pi * B * T) * np.cos(2.0 * np.pi * F * T)
    b2 = -np.exp(-2.0 * np.pi * B * T)
    return 1.0 - b1 - b2, b1, b2


def resonator(x, F, B, fs):
    """Two-pole resonator with unity DC gain; F and B may vary per sample."""
    x = np.asarray(x, dtype=np.float64)
    F = np.broadcast_to(np.asarray(F, dtype=np.float64), x.shape)
    B = np.broadcast_to(np.asarray(B, dtype=np.float64), x.shape)
    if np.any(F <= 0) or np.any(F >= fs / 2) or np.any(B <= 0):
        raise ValueError("resonator needs 0 < F < fs/2 and B > 0")
    A, b1, b2 = _coefficients(F, B, fs)
    y = np.empty_like(x)
    y1 = y2 = 0.0
    for n, (a, c1, c2, xn) in enumerate(zip(A.tolist(), b1.tolist(), b2.tolist(), x.tolist())):
        yn = a * xn + c1 * y1 + c2 * y2
        y[n] = yn
        y2, y1 = y1, yn
    return y


def _source(spec: TrajectorySpec, n, fs, rng):
    t = np.arange(n) / fs
    f0 = spec.f0[0] + (spec.f0[1] - spec.f0[0]) * np.clip(t / spec.duration, 0, 1)
    phase = np.cumsum(f0 / fs)
    pulses = np.zeros(n)
    pulses[0] = 1.0
    pulses[1:][np.floor(phase[1:]) > np.floor(phase[:-1])] = 1.0
    noise = rng.uniform(-1.0, 1.0, n)
    src = (1.0 - spec.noise_mix) * pulses + spec.noise_mix * noise
    for a, b in spec.fricatives:
        span = (t >= a) & (t < b)
        src[span] = 0.3 * noise[span]
    # -6 dB/octave glottal tilt; a real pole, so formant poles stay exact
    return lfilter([1.0], [1.0, -GLOTTAL_POLE], src)


def synthesize(spec: TrajectorySpec, fs=16000) -> SynthUtterance:
    spec.validate(fs)
    rng = np.random.default_rng(spec.seed)
    n_voiced = int(round(spec.duration * fs))
    n_pad = int(round(PAD_S * fs))
    src = _source(spec, n_voiced, fs, rng)
    traj = spec.formants_at(np.arange(n_voiced) / fs)
    y = src
    for i in range(3):
        y = resonator(y, traj[:, i], spec.bandwidths[i], fs)
    y = y - y.mean()
    y *= PEAK / max(np.abs(y).max(), 1e-12)
    samples = np.concatenate([np.zeros(n_pad), y, np.zeros(n_pad)])
    samples = to_pcm16(samples).astype(np.float64) / 32768.0

    n_frames = n_label_frames(len(samples), fs, HOP_S * 1000)
    centers = (np.arange(n_frames) + 0.5) * HOP_S - PAD_S
    formants = spec.formants_at(centers)
    speech = (centers >= 0) & (centers < spec.duration)
    phones = []
    for tc, sp in zip(centers, speech):
        if not sp:
            phones.append("sil")
        elif any(a <= tc < b for a, b in spec.fricatives):
            phones.append("s")
        else:
            phones.append("V")
    track = FormantTrack(formants, phones, speech, hop_s=HOP_S)
    return SynthUtterance(AudioClip(samples, fs), track, spec)


def random_spec(rng, seed, fricative_prob=0.5):
    """Draw a TrajectorySpec from the corpus ranges."""
    def endpoints():
        while True:
            f = [rng.uniform(*r) for r in F_RANGES]
            if f[1] - f[0] >= MIN_SPACING and f[2] - f[1] >= MIN_SPACING:
                return tuple(f)

    kind = "linear" if rng.uniform() < 0.5 else "sinusoidal"
    duration = float(rng.uniform(*DUR_RANGE))
    fricatives = ()
    if rng.uniform() < fricative_prob:
        length = rng.uniform(0.08, 0.15)
        start = rng.uniform(0.3, 0.7) * duration
        fricatives = ((float(start), float(min(start + length, duration))),)
    return TrajectorySpec(
        starts=endpoints(),
        ends=endpoints(),
        interpolation=(kind,) * 3,
        bandwidths=tuple(float(rng.uniform(*r)) for r in B_RANGES),
        f0=(float(rng.uniform(*F0_RANGE)), float(rng.uniform(*F0_RANGE))),
        duration=duration,
        seed=seed,
        fricatives=fricatives,
    )


def steady_spec(formants=(500.0, 1500.0, 2500.0), bandwidths=(60.0, 90.0, 120.0), **kw):
    return TrajectorySpec(starts=tuple(formants), ends=tuple(formants),
                          bandwidths=tuple(bandwidths), **kw)


SPLITS = ("train", "val", "test")


def split_seed(seed, split, index):
    return [int(seed), zlib.crc32(split.encode()), int(index)]


def make_corpus(n_train, n_val, n_test, seed, out_dir, fs=16000):
    """Write WAV + label CSV per utterance and one manifest per split.

    Returns {split: manifest_path}.
    """
    counts = dict(zip(SPLITS, (n_train, n_val, n_test)))
    if min(counts.values()) < 1:
        raise ValueError("every split needs at least one utterance")
    out = Path(out_dir)
    manifests = {}
    for split, n in counts.items():
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(n):
            ss = split_seed(seed, split, i)
            rng = np.random.default_rng(ss)
            spec = random_spec(rng, seed=int(np.random.SeedSequence(ss).generate_state(1)[0]))
            utt = synthesize(spec, fs)
            wav, lab = d / f"{split}_{i:04d}.wav", d / f"{split}_{i:04d}.csv"
            write_wav(wav, utt.clip)
            write_label_csv(lab, utt.track)
            entries.append((str(wav), str(lab)))
        manifests[split] = out / f"{split}.manifest"
        write_manifest(manifests[split], entries)
    return manifests
