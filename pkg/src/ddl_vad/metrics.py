"""Frame-level ROC-AUC and average precision over pooled test videos."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

FRAMES_PER_SNIPPET = 16


class UndefinedMetricError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass
class FrameAnnotation:
    video_id: str
    total_frames: int
    intervals: list[tuple[int, int]] = field(default_factory=list)  # inclusive, 0-based

    def __post_init__(self):
        self.intervals = [(int(s), int(e)) for s, e in self.intervals]
        if self.total_frames < 1:
            raise AnnotationError(f"{self.video_id}: total_frames must be >= 1")
        last_end = -1
        for s, e in sorted(self.intervals):
            if not 0 <= s <= e < self.total_frames:
                raise AnnotationError(f"{self.video_id}: interval [{s}, {e}] outside [0, {self.total_frames})")
            if s <= last_end:
                raise AnnotationError(f"{self.video_id}: overlapping intervals")
            last_end = e

    def frame_labels(self) -> np.ndarray:
        labels = np.zeros(self.total_frames, dtype=np.int8)
        for s, e in self.intervals:
            labels[s: e + 1] = 1
        return labels


@dataclass
class EvalResult:
    auc: float
    ap: float
    frames: int
    positives: int

    def to_dict(self):
        return {"auc": self.auc, "ap": self.ap, "frames": self.frames, "positives": self.positives}


def expand_scores(snippet_scores, total_frames: int) -> np.ndarray:
    """Frame f gets the score of snippet f // 16; a ragged tail reuses the last one."""
    s = np.asarray(snippet_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("empty score vector")
    if total_frames < 1:
        raise ValueError("total_frames must be >= 1")
    idx = np.minimum(np.arange(total_frames) // FRAMES_PER_SNIPPET, s.size - 1)
    return s[idx]


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0/1")
    return scores, labels.astype(bool)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both positive and negative frames")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum of (recall step) x precision over descending thresholds; tied
    scores form a single threshold."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive frame")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1.0)
    recall_step = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(recall_step * precision))


def evaluate(scores: dict[str, np.ndarray], annotations) -> EvalResult:
    """Pool frames across videos and compute AUC and AP.

    ``scores`` maps video id to snippet scores or to per-frame scores (length
    equal to the annotation's ``total_frames``).
    """
    by_id = {a.video_id: a for a in annotations}
    frame_scores, frame_labels = [], []
    for vid in scores:
        if vid not in by_id:
            raise AnnotationError(f"no annotation for video {vid!r}")
        ann = by_id[vid]
        s = np.asarray(scores[vid], dtype=np.float64).ravel()
        if s.size != ann.total_frames:
            t_len = s.size
            if not FRAMES_PER_SNIPPET * (t_len - 1) < ann.total_frames < FRAMES_PER_SNIPPET * (t_len + 1):
                raise AnnotationError(
                    f"{vid}: {t_len} snippet scores cannot cover {ann.total_frames} frames"
                )
            s = expand_scores(s, ann.total_frames)
        frame_scores.append(s)
        frame_labels.append(ann.frame_labels())
    if not frame_scores:
        raise UndefinedMetricError("no scored videos")
    pooled_s = np.concatenate(frame_scores)
    pooled_y = np.concatenate(frame_labels)
    return EvalResult(
        auc=roc_auc(pooled_s, pooled_y),
        ap=average_precision(pooled_s, pooled_y),
        frames=int(pooled_y.size),
        positives=int(pooled_y.sum()),
    )


def write_annotations(annotations, path) -> None:
    data = [
        {"video_id": a.video_id, "total_frames": a.total_frames, "intervals": [list(iv) for iv in a.intervals]}
        for a in annotations
    ]
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def read_annotations(path) -> list[FrameAnnotation]:
    try:
        with open(path) as fh:
            data = json.load(fh)
        return [FrameAnnotation(str(d["video_id"]), int(d["total_frames"]), d.get("intervals", [])) for d in data]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, AnnotationError):
            raise
        raise AnnotationError(f"{path}: malformed annotation file ({exc})") from exc


def write_score_csv(frame_scores: dict[str, np.ndarray], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame", "score"])
        for vid, scores in frame_scores.items():
            for f, s in enumerate(scores):
                w.writerow([vid, f, repr(float(s))])


def read_score_csv(path) -> dict[str, np.ndarray]:
    rows: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["video_id", "frame", "score"]:
            raise ValueError(f"{path}: expected header video_id,frame,score")
        for row in reader:
            rows.setdefault(row["video_id"], []).append((int(row["frame"]), float(row["score"])))
    out = {}
    for vid, items in rows.items():
        items.sort()
        if [f for f, _ in items] != list(range(len(items))):
            raise ValueError(f"{path}: frames for {vid} are not contiguous from 0")
        out[vid] = np.array([s for _, s in items])
    return out
