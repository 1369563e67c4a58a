"""Acoustic front end: framing, LPC analysis and the 350-dim feature vector.

Features per 30 ms frame are ten stacked 30-coefficient LPC cepstra (orders
8..17) followed by the first 50 real-cepstrum coefficients of the frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LPC_ORDERS = tuple(range(8, 18))
N_LPCC = 30
N_PSCC = 50
LPCC_DIM = len(LPC_ORDERS) * N_LPCC
FEATURE_DIM = LPCC_DIM + N_PSCC
MAX_REFLECTION = 0.999999
STD_FLOOR = 1e-8
LOG_FLOOR = 1e-10


class DegenerateFrameError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class FrameSpec:
    window_ms: float = 30.0
    hop_ms: float = 10.0
    window_kind: str = "hamming"

    def __post_init__(self):
        if not self.window_ms >= self.hop_ms > 0:
            raise ValueError("need window_ms >= hop_ms > 0")
        if self.window_kind != "hamming":
            raise ValueError(f"unsupported window {self.window_kind!r}")

    def sizes(self, sample_rate: int) -> tuple[int, int]:
        """(window, hop) lengths in samples."""
        return (int(round(self.window_ms * sample_rate / 1000.0)),
                int(round(self.hop_ms * sample_rate / 1000.0)))


@dataclass
class FeatureMatrix:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or len(self.mask) != len(self.values):
            raise ValueError("values must be T x D with a length-T mask")

    def __len__(self):
        return len(self.values)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), STD_FLOOR)


def preemphasize(samples, coef=0.97, remove_dc=True):
    """First-order pre-emphasis y[n] = x[n] - coef * x[n-1], y[0] = x[0].

    The clip mean is subtracted first unless ``remove_dc`` is False.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    if remove_dc:
        x = x - x.mean()
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - coef * x[:-1]
    return y


def hamming(n):
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def frame_and_window(clip: AudioClip, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """Split a clip into Hamming-windowed frames, shape (T, N_win)."""
    n_win, n_hop = spec.sizes(clip.sample_rate)
    x = clip.samples
    if len(x) < n_win:
        raise ValueError(f"clip of {len(x)} samples is shorter than one {n_win}-sample window")
    n_frames = (len(x) - n_win) // n_hop + 1
    idx = np.arange(n_win)[None, :] + n_hop * np.arange(n_frames)[:, None]
    return x[idx] * hamming(n_win)


def autocorr(frame, max_lag):
    """Biased, unnormalized autocorrelation r[0..max_lag].

    Accepts a single frame or a stack of frames along the last axis.
    """
    x = np.asarray(frame, dtype=np.float64)
    n = x.shape[-1]
    if max_lag >= n:
        raise ValueError("max_lag must be smaller than the frame length")
    r = np.empty(x.shape[:-1] + (max_lag + 1,))
    for k in range(max_lag + 1):
        r[..., k] = np.einsum("...i,...i->...", x[..., k:], x[..., :n - k])
    return r


def _levinson_steps(r, order):
    """Levinson-Durbin over a stack of autocorrelation rows.

    Yields (p, a, err, clamped) after each order p = 1..order, where a holds
    a_1..a_p for A(z) = 1 + sum a_k z^-k. Rows with r[0] <= 0 must be
    removed by the caller.
    """
    r = np.atleast_2d(r)
    n = r.shape[0]
    a = np.zeros((n, order))
    err = r[:, 0].copy()
    clamped = np.zeros(n, dtype=bool)
    for p in range(1, order + 1):
        acc = r[:, p] + np.einsum("ij,ij->i", a[:, :p - 1], r[:, p - 1:0:-1])
        # a perfectly predictable row stops improving; leave its tail at zero
        k = np.divide(-acc, err, out=np.zeros_like(acc), where=err > 0)
        over = np.abs(k) >= 1.0
        if over.any():
            clamped |= over
            k = np.where(over, np.sign(k) * MAX_REFLECTION, k)
        prev = a[:, :p - 1].copy()
        a[:, :p - 1] = prev + k[:, None] * prev[:, ::-1]
        a[:, p - 1] = k
        err = err * (1.0 - k * k)
        yield p, a[:, :p], err, clamped


def levinson(r, order):
    """Solve the order-p autocorrelation normal equations.

    Returns (a, gain) with a = [a_1..a_p] and gain the final prediction
    error energy. Reflection coefficients with |k| >= 1 are clamped.
    """
    r = np.asarray(r, dtype=np.float64)
    if r[0] <= 0:
        raise DegenerateFrameError("degenerate frame")
    if len(r) < order + 1:
        raise ValueError("need order + 1 autocorrelation lags")
    for p, a, err, clamped in _levinson_steps(r[None, :order + 1], order):
        pass
    if clamped[0]:
        log.warning("reflection coefficient clamped to keep A(z) minimum phase")
    return a[0].copy(), float(err[0])


def lpc_to_cepstrum(a, n_ceps):
    """Cepstrum c_1..c_n of the all-pole model 1/A(z).

    Works on one coefficient vector or a stack of them (last axis).
    """
    a = np.asarray(a, dtype=np.float64)
    p = a.shape[-1]
    c = np.zeros(a.shape[:-1] + (n_ceps,))
    for n in range(1, n_ceps + 1):
        acc = -a[..., n - 1] if n <= p else 0.0
        for k in range(max(1, n - p), n):
            acc = acc - (k / n) * c[..., k - 1] * a[..., n - k - 1]
        c[..., n - 1] = acc
    return c


def extract_lpcc_stack(windowed_frames):
    """LPCC stack for one frame (300,) or for T frames (T, 300).

    Returns (features, valid); all-zero frames give zeros and valid=False.
    """
    x = np.asarray(windowed_frames, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    r = autocorr(x, LPC_ORDERS[-1])
    valid = r[:, 0] > 0
    out = np.zeros((len(x), LPCC_DIM))
    if valid.any():
        for p, a, _, _ in _levinson_steps(r[valid], LPC_ORDERS[-1]):
            if p in LPC_ORDERS:
                j = LPC_ORDERS.index(p) * N_LPCC
                out[valid, j:j + N_LPCC] = lpc_to_cepstrum(a, N_LPCC)
    if single:
        return out[0], bool(valid[0])
    return out, valid


def extract_pscc_surrogate(windowed_frames):
    """First 50 real-cepstrum coefficients, c_1..c_50, per frame."""
    x = np.asarray(windowed_frames, dtype=np.float64)
    spectrum = np.abs(np.fft.fft(x, axis=-1))
    ceps = np.fft.ifft(np.log(spectrum + LOG_FLOOR), axis=-1).real
    return ceps[..., 1:N_PSCC + 1]


def extract_features(clip: AudioClip, spec: FrameSpec = FrameSpec(), coef=0.97) -> FeatureMatrix:
    """Full pipeline: DC removal, pre-emphasis, framing, LPCC + cepstrum."""
    emphasized = AudioClip(preemphasize(clip.samples, coef), clip.sample_rate)
    frames = frame_and_window(emphasized, spec)
    lpcc, valid = extract_lpcc_stack(frames)
    pscc = extract_pscc_surrogate(frames)
    pscc[~valid] = 0.0
    values = np.concatenate([lpcc, pscc], axis=1)
    finite = np.isfinite(values).all(axis=1)
    values[~finite] = 0.0
    return FeatureMatrix(values, valid & finite)


def fit_norm(features) -> NormStats:
    """Per-dimension mean/std over valid frames of all matrices."""
    rows = [f.values[f.mask] for f in features]
    stacked = np.concatenate(rows, axis=0) if rows else np.empty((0, FEATURE_DIM))
    if len(stacked) == 0:
        raise ValueError("no valid frames to fit normalization")
    mean = stacked.mean(axis=0)
    std = np.sqrt(((stacked - mean) ** 2).mean(axis=0))
    return NormStats(mean, std)


def apply_norm(features: FeatureMatrix, stats: NormStats) -> FeatureMatrix:
    values = (features.values - stats.mean) / stats.std
    values[~features.mask] = 0.0
    return FeatureMatrix(values, features.mask.copy())
