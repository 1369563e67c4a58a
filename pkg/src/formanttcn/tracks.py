"""Per-frame formant tracks on the 10 ms label grid and their CSV formats."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_HEADER = ["frame_index", "time_s", "f1_hz", "f2_hz", "f3_hz", "phone_label", "is_speech"]
TRACK_HEADER = ["frame_index", "time_s", "f1_hz", "f2_hz", "f3_hz"]


@dataclass
class FormantTrack:
    """F1-F3 per frame in Hz (0 = undefined) plus phone labels and speech flags."""

    formants: np.ndarray
    phones: list = field(default=None)
    is_speech: np.ndarray = field(default=None)
    hop_s: float = 0.01

    def __post_init__(self):
        self.formants = np.asarray(self.formants, dtype=np.float64).reshape(-1, 3)
        n = len(self.formants)
        if self.phones is None:
            self.phones = [""] * n
        if self.is_speech is None:
            self.is_speech = np.ones(n, dtype=bool)
        self.is_speech = np.asarray(self.is_speech, dtype=bool)
        if len(self.phones) != n or len(self.is_speech) != n:
            raise ValueError("phones and is_speech must have one entry per frame")

    def __len__(self):
        return len(self.formants)

    @property
    def times(self):
        return (np.arange(len(self)) + 0.5) * self.hop_s


def n_label_frames(n_samples, sample_rate, hop_ms=10.0):
    return int(n_samples // int(round(hop_ms * sample_rate / 1000.0)))


def frames_to_grid(values, n_grid):
    """Place per-analysis-frame rows onto the 10 ms label grid.

    Analysis frame t (30 ms window, 10 ms hop) is centred on label frame
    t + 1; the grid ends are filled from the nearest analysis frame.
    """
    values = np.asarray(values)
    if len(values) == 0:
        raise ValueError("no analysis frames")
    idx = np.clip(np.arange(n_grid) - 1, 0, len(values) - 1)
    return values[idx]


def grid_to_frames(values, n_frames):
    """Inverse of frames_to_grid: label-grid rows for analysis frames 0..n-1."""
    values = np.asarray(values)
    idx = np.clip(np.arange(n_frames) + 1, 0, len(values) - 1)
    return values[idx]


def _fmt(x):
    return repr(float(x))


def write_track_csv(path, track: FormantTrack):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_HEADER)
        for i, (t, f) in enumerate(zip(track.times, track.formants)):
            w.writerow([i, _fmt(t), _fmt(f[0]), _fmt(f[1]), _fmt(f[2])])


def write_label_csv(path, track: FormantTrack):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LABEL_HEADER)
        for i, (t, f) in enumerate(zip(track.times, track.formants)):
            w.writerow([i, _fmt(t), _fmt(f[0]), _fmt(f[1]), _fmt(f[2]),
                        track.phones[i], int(track.is_speech[i])])


def read_track_csv(path) -> FormantTrack:
    """Read either a track CSV or a label CSV (extra columns are used if present)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, skipinitialspace=True))
    if not rows:
        raise ValueError(f"{path}: no frames")
    missing = set(TRACK_HEADER) - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    formants = [[float(r["f1_hz"]), float(r["f2_hz"]), float(r["f3_hz"])] for r in rows]
    phones = [r.get("phone_label", "") or "" for r in rows]
    speech = [str(r.get("is_speech", "1")).strip().lower() in ("1", "true", "yes") for r in rows]
    hop = float(rows[1]["time_s"]) - float(rows[0]["time_s"]) if len(rows) > 1 else 0.01
    return FormantTrack(np.array(formants), phones, np.array(speech), hop_s=round(hop, 6))


def _header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh, skipinitialspace=True), [])


def is_label_csv(path):
    return set(LABEL_HEADER) <= set(_header(path))


def read_label_csv(path) -> FormantTrack:
    missing = set(LABEL_HEADER) - set(_header(path))
    if missing:
        raise ValueError(f"{Path(path).name}: label file missing columns {sorted(missing)}")
    return read_track_csv(path)
