"""Classical LPC root-finding formant tracker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import medfilt

from .dsp import AudioClip, FrameSpec, autocorr, frame_and_window, preemphasize, _levinson_steps
from .tracks import FormantTrack, frames_to_grid, n_label_frames


REAL_ROOT_TOL = 1e-7


class RootFindingError(ArithmeticError):
    def __init__(self, message, best, residual):
        super().__init__(message)
        self.best = best
        self.residual = residual


@dataclass(frozen=True)
class FormantCandidate:
    frequency: float
    bandwidth: float


@dataclass(frozen=True)
class BaselineConfig:
    order: int = 12
    max_bandwidth: float = 400.0
    min_freq: float = 90.0
    edge_margin: float = 50.0
    median: bool = False
    preemph: float = 0.97
    frame: FrameSpec = field(default_factory=FrameSpec)


def _residual(coeffs, z):
    return np.abs(np.polyval(coeffs, z)) / np.abs(coeffs).max()


def poly_roots(coeffs, tol=1e-8, max_iter=500):
    """All roots of a polynomial (highest power first) by Durand-Kerner iteration."""
    c = np.trim_zeros(np.asarray(coeffs, dtype=np.complex128), "f")
    n = len(c) - 1
    if n < 1:
        raise ValueError("polynomial degree must be at least 1")
    c = c / c[0]
    # start on a circle enclosing the roots, angles offset to break symmetry
    k = np.arange(1, n + 1)
    radius = max(1.0, float(np.max(np.abs(c[1:]) ** (1.0 / k))))
    z = radius * np.exp(1j * (2 * np.pi * np.arange(n) / n + 0.4))
    if n == 1:
        return np.array([-c[1]])
    best, best_res = z, np.inf
    for _ in range(max_iter):
        res = _residual(c, z).max()
        if res < best_res:
            best, best_res = z.copy(), res
        if res < tol:
            return z
        diff = z[:, None] - z[None, :]
        np.fill_diagonal(diff, 1.0)
        denom = diff.prod(axis=1)
        denom[denom == 0] = 1e-300
        z = z - np.polyval(c, z) / denom
    res = _residual(c, z).max()
    if res < tol:
        return z
    if res < best_res:
        best, best_res = z, res
    raise RootFindingError(f"Durand-Kerner did not converge (residual {best_res:.3g})", best, best_res)


def roots_to_candidates(roots, sample_rate):
    """Upper-half-plane poles as (frequency, bandwidth) pairs, ascending frequency."""
    out = []
    for r in np.asarray(roots, dtype=np.complex128):
        # Durand-Kerner leaves ~1e-9 imaginary noise on real roots
        if r.imag <= REAL_ROOT_TOL:
            continue
        freq = sample_rate / (2 * np.pi) * np.arctan2(r.imag, r.real)
        bw = -sample_rate / np.pi * np.log(abs(r))
        out.append(FormantCandidate(float(freq), float(bw)))
    return sorted(out, key=lambda c: c.frequency)


def pick_formants(candidates, sample_rate, cfg: BaselineConfig = BaselineConfig()):
    """Three lowest admissible candidates; missing slots are 0."""
    ok = [c.frequency for c in candidates
          if c.bandwidth < cfg.max_bandwidth
          and cfg.min_freq < c.frequency < sample_rate / 2 - cfg.edge_margin]
    ok = (ok + [0.0, 0.0, 0.0])[:3]
    return np.array(ok)


def analyze_frames(clip: AudioClip, cfg: BaselineConfig = BaselineConfig()):
    """Per analysis frame F1-F3 estimates, shape (T, 3)."""
    x = AudioClip(preemphasize(clip.samples, cfg.preemph), clip.sample_rate)
    frames = frame_and_window(x, cfg.frame)
    r = autocorr(frames, cfg.order)
    out = np.zeros((len(frames), 3))
    valid = np.flatnonzero(r[:, 0] > 0)
    if len(valid):
        for p, a, _, _ in _levinson_steps(r[valid], cfg.order):
            pass
        for row, t in zip(a, valid):
            poly = np.concatenate([[1.0], row])
            cands = roots_to_candidates(poly_roots(poly), clip.sample_rate)
            out[t] = pick_formants(cands, clip.sample_rate, cfg)
    if cfg.median and len(out) >= 3:
        out = np.column_stack([medfilt(out[:, i], 3) for i in range(3)])
    return out


def track_baseline(clip: AudioClip, cfg: BaselineConfig = BaselineConfig()) -> FormantTrack:
    """LPC root-picking track placed on the 10 ms label grid."""
    if clip.sample_rate <= 2 * (cfg.min_freq + cfg.edge_margin):
        raise ValueError("sample rate too low for the candidate band")
    per_frame = analyze_frames(clip, cfg)
    _, hop = cfg.frame.sizes(clip.sample_rate)
    n_grid = max(n_label_frames(len(clip), clip.sample_rate, cfg.frame.hop_ms), len(per_frame))
    return FormantTrack(frames_to_grid(per_frame, n_grid), hop_s=hop / clip.sample_rate)
