"""MAE / MAPE over speech frames, per broad phone class and around CV/VC boundaries."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .tracks import FormantTrack

CLASSES = ("vowel", "semivowel", "nasal", "fricative", "affricate", "stop")
OTHER = "other"
CONSONANTS = ("semivowel", "nasal", "fricative", "affricate", "stop")
FORMANTS = ("F1", "F2", "F3")
REPORT_HEADER = ["scope", "region", "formant", "mae_hz", "mape_pct", "frames"]


class UnmappedLabelError(KeyError):
    pass


def parse_class_map(text):
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"class map line {lineno}: expected 'label class'")
        label, cls = parts
        if cls not in CLASSES + (OTHER,):
            raise ValueError(f"class map line {lineno}: unknown class {cls!r}")
        mapping[label] = cls
    return mapping


def default_class_map():
    return parse_class_map(resources.files("formanttcn.data").joinpath("phone_classes.txt").read_text())


def load_class_map(path=None):
    if path is None:
        return default_class_map()
    return parse_class_map(Path(path).read_text())


def align_labels_30ms(track: FormantTrack) -> FormantTrack:
    """Average each 10 ms label frame with its two neighbours (edges clamped).

    Undefined values (0) are left out of the average; a frame whose own
    value is undefined stays undefined.
    """
    f = track.formants
    n = len(f)
    if n < 3:
        raise ValueError("need at least 3 label frames")
    idx = np.arange(n)
    win = np.stack([f[np.clip(idx - 1, 0, n - 1)], f, f[np.clip(idx + 1, 0, n - 1)]])
    defined = win > 0
    counts = defined.sum(axis=0)
    mean = np.where(defined, win, 0.0).sum(axis=0) / np.maximum(counts, 1)
    out = np.where(f > 0, mean, 0.0)
    return FormantTrack(out, list(track.phones), track.is_speech.copy(), track.hop_s)


def _selection(pred, ref, selector):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    sel = np.ones(len(ref), dtype=bool) if selector is None else np.asarray(selector, dtype=bool)
    sel = sel & (ref > 0)
    return pred[sel], ref[sel]


def mae(pred, ref, selector=None):
    """Mean |pred - ref| in Hz over selected frames with a defined reference; None if empty."""
    p, r = _selection(pred, ref, selector)
    if len(r) == 0:
        return None
    return float(np.abs(p - r).mean())


def mape(pred, ref, selector=None):
    """100 * mean |pred - ref| / ref over selected frames; None if empty."""
    p, r = _selection(pred, ref, selector)
    if len(r) == 0:
        return None
    return float(100.0 * (np.abs(p - r) / r).mean())


def classify_frames(track: FormantTrack, class_map) -> np.ndarray:
    missing = sorted({ph for ph, sp in zip(track.phones, track.is_speech)
                      if sp and ph not in class_map})
    if missing:
        raise UnmappedLabelError(f"phone labels missing from class map: {missing}")
    return np.array([class_map[ph] if sp else OTHER
                     for ph, sp in zip(track.phones, track.is_speech)], dtype=object)


def transition_regions(classes, window_frames=3):
    """Frames near consonant->vowel (CV) and vowel->consonant (VC) boundaries.

    A boundary lies between adjacent frames t, t+1 whose classes switch
    between a consonant class and vowel. The ``window_frames`` frames on each
    side of it are selected (at least the two frames touching it).
    """
    classes = np.asarray(classes, dtype=object)
    n = len(classes)
    speech = np.array([c != OTHER for c in classes], dtype=bool)
    is_vowel = np.array([c == "vowel" for c in classes], dtype=bool)
    is_cons = np.array([c in CONSONANTS for c in classes], dtype=bool)
    k = max(int(window_frames), 1)
    out = {}
    for name, left, right in (("CV", is_cons, is_vowel), ("VC", is_vowel, is_cons)):
        sel = np.zeros(n, dtype=bool)
        for t in np.flatnonzero(left[:-1] & right[1:]):
            sel[max(t - k + 1, 0):t + 1 + k] = True
        out[name] = sel & speech
    return out


@dataclass(frozen=True)
class ReportRow:
    scope: str
    region: str
    formant: str
    mae_hz: float
    mape_pct: float
    frames: int


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def get(self, scope, region, formant):
        for r in self.rows:
            if (r.scope, r.region, r.formant) == (scope, region, formant):
                return r
        return None

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.scope, r.region, r.formant, f"{r.mae_hz:.6f}", f"{r.mape_pct:.6f}", r.frames])
        return buf.getvalue()

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())

    def to_table(self):
        head = f"{'scope':<11}{'region':<11}{'formant':<9}{'MAE (Hz)':>10}{'MAPE (%)':>10}{'frames':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.scope:<11}{r.region:<11}{r.formant:<9}"
                         f"{r.mae_hz:>10.2f}{r.mape_pct:>10.2f}{r.frames:>9d}")
        return "\n".join(lines)


def read_report_csv(path) -> EvalReport:
    with open(path, newline="") as fh:
        rows = [ReportRow(r["scope"], r["region"], r["formant"], float(r["mae_hz"]),
                          float(r["mape_pct"]), int(r["frames"])) for r in csv.DictReader(fh)]
    return EvalReport(rows)


def _rows(scope, region, pred, ref, sel):
    rows = []
    abs_err, pct_err = [], []
    for k, name in enumerate(FORMANTS):
        p, r = _selection(pred[:, k], ref[:, k], sel)
        if len(r) == 0:
            continue
        e = np.abs(p - r)
        abs_err.append(e)
        pct_err.append(100.0 * e / r)
        rows.append(ReportRow(scope, region, name, float(e.mean()), float(pct_err[-1].mean()), len(r)))
    if abs_err:
        rows.append(ReportRow(scope, region, "overall", float(np.concatenate(abs_err).mean()),
                              float(np.concatenate(pct_err).mean()), int(np.count_nonzero(sel))))
    return rows


def evaluate(pairs, class_map=None, transition_window=3) -> EvalReport:
    """Report over one (pred, ref) pair or a list of them.

    The reference is averaged onto 30 ms frames first; tracks are pooled
    across utterances in the given order. Selections with no frames produce
    no rows.
    """
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], FormantTrack):
        pairs = [pairs]
    class_map = default_class_map() if class_map is None else class_map
    preds, refs, classes, regions = [], [], [], {"CV": [], "VC": []}
    for pred, ref in pairs:
        if len(pred) != len(ref):
            raise ValueError(f"prediction has {len(pred)} frames, reference {len(ref)}")
        aligned = align_labels_30ms(ref)
        cls = classify_frames(aligned, class_map)
        preds.append(pred.formants)
        refs.append(aligned.formants)
        classes.append(cls)
        for name, sel in transition_regions(cls, transition_window).items():
            regions[name].append(sel)
    pred = np.concatenate(preds)
    ref = np.concatenate(refs)
    cls = np.concatenate(classes)
    speech = np.isin(cls, CLASSES)

    rows = _rows("overall", "all", pred, ref, speech)
    for c in CLASSES:
        rows += _rows("class", c, pred, ref, cls == c)
    for name in ("CV", "VC"):
        rows += _rows("transition", name, pred, ref, np.concatenate(regions[name]))
    return EvalReport(rows)


def plot_data_csv(pred: FormantTrack, ref: FormantTrack):
    aligned = align_labels_30ms(ref)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "ref_f1", "pred_f1", "ref_f2", "pred_f2", "ref_f3", "pred_f3"])
    for i, (r, p) in enumerate(zip(aligned.formants, pred.formants)):
        w.writerow([i, r[0], p[0], r[1], p[1], r[2], p[2]])
    return buf.getvalue()
