"""Utterance-level training examples: normalized features aligned with formant targets."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from .dsp import (AudioClip, FeatureMatrix, FrameSpec, NormStats, apply_norm,
                  extract_features, fit_norm)
from .evaluation import align_labels_30ms
from .io import read_manifest, read_wav
from .tracks import (FormantTrack, frames_to_grid, grid_to_frames, n_label_frames,
                     read_label_csv)


@dataclass
class Utterance:
    name: str
    features: FeatureMatrix
    targets: np.ndarray
    is_speech: np.ndarray
    n_label_frames: int = 0

    def __len__(self):
        return len(self.features)

    def loss_mask(self):
        """Valid feature frames inside the speech span with all three targets defined.

        Silence before the first and after the last speech frame is excluded.
        """
        mask = self.features.mask & np.all(self.targets > 0, axis=1)
        speech = np.flatnonzero(self.is_speech)
        span = np.zeros(len(self), dtype=bool)
        if len(speech):
            span[speech[0]:speech[-1] + 1] = True
        return mask & span

    def normalized(self, stats: NormStats) -> "Utterance":
        return Utterance(self.name, apply_norm(self.features, stats), self.targets,
                         self.is_speech, self.n_label_frames)


def prepare_utterance(clip: AudioClip, labels: FormantTrack | None, name="",
                      spec: FrameSpec = FrameSpec()) -> Utterance:
    """Features for every 30 ms frame and the 3-frame-averaged labels centred on it."""
    feats = extract_features(clip, spec)
    n = len(feats)
    if labels is None:
        return Utterance(name, feats, np.zeros((n, 3)), np.ones(n, dtype=bool), 0)
    aligned = align_labels_30ms(labels)
    targets = grid_to_frames(aligned.formants, n)
    speech = grid_to_frames(aligned.is_speech, n)
    return Utterance(name, feats, targets, speech, len(labels))


def load_manifest(path, spec: FrameSpec = FrameSpec(), allow_any_rate=False):
    out = []
    for audio, labels in read_manifest(path):
        clip = read_wav(audio, allow_any_rate=allow_any_rate)
        out.append(prepare_utterance(clip, read_label_csv(labels), name=audio, spec=spec))
    return out


def normalize_sets(train_set, *others):
    """Fit statistics on ``train_set`` only and apply them to every set.

    Returns (stats, normalized train set, *normalized others).
    """
    stats = fit_norm([u.features for u in train_set])
    return (stats,) + tuple([u.normalized(stats) for u in s] for s in (train_set,) + others)


def predict_track(weights, stats: NormStats, clip: AudioClip, spec: FrameSpec = FrameSpec(),
                  dtype=np.float64) -> FormantTrack:
    """Network formant track for one clip on the 10 ms label grid."""
    feats = apply_norm(extract_features(clip, spec), stats)
    preds = M.predict_hz(weights, feats.values[None], feats.mask[None], dtype=dtype)
    per_frame = preds[:, 0].T.astype(np.float64)
    n_grid = n_label_frames(len(clip.samples), clip.sample_rate, spec.hop_ms)
    return FormantTrack(frames_to_grid(per_frame, n_grid))
