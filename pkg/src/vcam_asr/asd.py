"""Active-speaker detection from attention maps, scored by average precision.

A visual frame's score is the largest attention weight any audio frame puts
on it. Ground truth marks a frame active when it falls inside the track's
speech interval.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frontend import STACK

THRESHOLDS = tuple(np.round(np.linspace(0.0, 1.0, 21), 2))


class UndefinedAPError(ValueError):
    pass


@dataclass
class FrameScores:
    scores: np.ndarray        # (T,)
    labels: np.ndarray        # (T,) bool

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")


def block_labels(interval, t: int) -> np.ndarray:
    lab = np.zeros(t, dtype=bool)
    if interval is not None:
        lab[max(0, interval[0]):min(t, interval[1])] = True
    return lab


def frames_to_blocks(interval, t: int) -> tuple:
    """Map a raw-frame interval to encoded (stacked) frames by each block's centre frame."""
    if interval is None:
        return None
    s, e = interval
    lo = min(t, max(0, (s + 1) // STACK))
    hi = min(t, max(0, (e + 1) // STACK))
    return (lo, max(lo, hi))


def score_frames(amap, interval=None, labels=None) -> FrameScores:
    """Column maxima of a (audio x visual) weight map, labelled from ``interval``."""
    w = np.asarray(getattr(amap, "weights", amap), dtype=np.float64)
    scores = w.max(axis=0)
    if labels is None:
        labels = block_labels(interval, w.shape[1])
    return FrameScores(scores, labels)


def _unpack(scores, labels):
    if isinstance(scores, FrameScores):
        return scores.scores, scores.labels
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool)


def average_precision(scores, labels=None) -> float:
    """Sum over score levels of (recall gained) x (precision at that level).

    Frames are ranked by descending score and tied frames enter together, so
    this is the PR curve integrated over every distinct threshold; without
    ties it is the mean over positives of the precision at their rank.
    """
    s, y = _unpack(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedAPError("average precision needs at least one positive frame")
    order = np.argsort(-s, kind="stable")
    s, hits = s[order], y[order]
    tp = np.cumsum(hits)
    # last index of every run of equal scores
    ends = np.append(np.nonzero(s[1:] != s[:-1])[0], len(s) - 1)
    gained = np.diff(tp[ends], prepend=0)
    return float(np.sum(gained * tp[ends] / (ends + 1)) / n_pos)


def pr_curve(scores, labels=None, overlap=None, thresholds=None) -> list:
    """(threshold, precision, recall, recall_overlap, recall_nonoverlap) rows.

    A frame is detected when its score is >= threshold. Without explicit
    thresholds every distinct score is used, in increasing order. Recall is
    split by ``overlap`` (a per-frame mask); undefined entries are NaN.
    """
    s, y = _unpack(scores, labels)
    ov = np.zeros_like(y) if overlap is None else np.asarray(overlap, dtype=bool)
    thr = np.unique(s) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    rows = []
    n_pos, n_ov, n_non = y.sum(), (y & ov).sum(), (y & ~ov).sum()
    for th in thr:
        det = s >= th
        tp = (det & y).sum()
        nd = det.sum()
        rows.append((float(th),
                     float(tp / nd) if nd else float("nan"),
                     float(tp / n_pos) if n_pos else float("nan"),
                     float((det & y & ov).sum() / n_ov) if n_ov else float("nan"),
                     float((det & y & ~ov).sum() / n_non) if n_non else float("nan")))
    return rows


def map_over_tracks(aps) -> float:
    aps = [a for a in aps if a is not None]
    if not aps:
        raise UndefinedAPError("no track has a defined average precision")
    return float(np.mean(aps))


def summarize_tracks(tracks: list) -> dict:
    """ASD summary over (FrameScores, overlap_mask) pairs.

    Returns per-track mAP, AP of all frames pooled, the overlapped share of
    active frames, the fraction of tracks whose mean score inside the speech
    interval beats the mean outside, and a fixed-threshold recall table.
    """
    aps, higher, n_contrast = [], 0, 0
    for fs, _ in tracks:
        if fs.labels.any():
            aps.append(average_precision(fs))
        if fs.labels.any() and (~fs.labels).any():
            n_contrast += 1
            higher += fs.scores[fs.labels].mean() > fs.scores[~fs.labels].mean()
    s = np.concatenate([fs.scores for fs, _ in tracks])
    y = np.concatenate([fs.labels for fs, _ in tracks])
    ov = np.concatenate([o for _, o in tracks])
    return {
        "map": map_over_tracks(aps),
        "track_aps": aps,
        "pooled_ap": average_precision(s, y),
        "overlap_fraction": float((y & ov).sum() / max(1, y.sum())),
        "contrast_fraction": float(higher / n_contrast) if n_contrast else float("nan"),
        "recall_table": pr_curve(s, y, ov, THRESHOLDS),
    }


def write_pr_tsv(rows, path) -> None:
    lines = ["threshold\tprecision\trecall\trecall_overlap\trecall_nonoverlap"]
    lines += ["\t".join(f"{v:.6f}" for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
