"""Frame-wise accuracy and segmental F1 at IoU overlap thresholds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

F1_THRESHOLDS = (25, 50, 75)


@dataclass(frozen=True)
class AnnotatedSegment:
    """Half-open frame span [start, end) labeled with a gloss id."""

    gloss_id: int
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end <= self.start:
            raise DataError(f"segment needs 0 <= start < end, got [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class MetricsReport:
    acc: float
    f1: dict[int, float]
    counts: dict[int, tuple[int, int, int]]  # k -> (TP, FP, FN)


def frame_accuracy(pred, gt) -> float:
    """Ratio of correctly predicted frames to total frames."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 1 or pred.size == 0:
        raise ShapeError(f"need equal non-empty label vectors, got {pred.shape} vs {gt.shape}")
    return float(np.count_nonzero(pred.astype(bool) == gt.astype(bool)) / pred.size)


def segments_from_frames(probs, threshold: float = 0.5, gloss_id: int = 0) -> list[AnnotatedSegment]:
    """Maximal runs of frames with probability >= threshold, sorted by start."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ShapeError("probabilities must be a non-empty vector")
    active = probs >= threshold
    segments = []
    start = None
    for t, on in enumerate(active):
        if on and start is None:
            start = t
        elif not on and start is not None:
            segments.append(AnnotatedSegment(gloss_id, start, t))
            start = None
    if start is not None:
        segments.append(AnnotatedSegment(gloss_id, start, len(active)))
    return segments


def segment_iou(a: AnnotatedSegment, b: AnnotatedSegment) -> float:
    overlap = min(a.end, b.end) - max(a.start, b.start)
    if overlap <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return overlap / union


def f1_at_k(pred: list[AnnotatedSegment], gt: list[AnnotatedSegment], k: float) -> tuple[float, int, int, int]:
    """Greedy segmental matching at IoU threshold k percent.

    Predictions are walked in start order; each claims the not-yet-matched
    ground-truth segment of maximal IoU and counts as a true positive only if
    that IoU reaches k/100 (consuming the segment). F1 is defined 0 when
    precision + recall is 0.
    """
    if not 0 < k <= 100:
        raise DataError(f"overlap threshold must be in (0, 100], got {k}")
    for seg in list(pred) + list(gt):
        if not isinstance(seg, AnnotatedSegment):
            raise DataError(f"expected AnnotatedSegment, got {type(seg).__name__}")
    pred = sorted(pred, key=lambda s: (s.start, s.end))
    matched = [False] * len(gt)
    tp = fp = 0
    for p in pred:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(gt):
            if matched[j]:
                continue
            iou = segment_iou(p, g)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= k / 100.0:
            matched[best_j] = True
            tp += 1
        else:
            fp += 1
    fn = len(gt) - sum(matched)
    f1 = _f1_from_counts(tp, fp, fn)
    return f1, tp, fp, fn


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate(probs, gt_segments: list[AnnotatedSegment], threshold: float = 0.5,
             thresholds=F1_THRESHOLDS) -> MetricsReport:
    """Frame accuracy plus F1 at each overlap threshold for one prediction."""
    probs = np.asarray(probs, dtype=np.float64)
    gt_labels = np.zeros(probs.shape[0], dtype=bool)
    for seg in gt_segments:
        if seg.end > probs.shape[0]:
            raise DataError(f"segment [{seg.start}, {seg.end}) exceeds {probs.shape[0]} frames")
        gt_labels[seg.start:seg.end] = True
    pred_labels = probs >= threshold
    acc = frame_accuracy(pred_labels, gt_labels)
    pred_segments = segments_from_frames(probs, threshold)
    f1 = {}
    counts = {}
    for k in thresholds:
        score, tp, fp, fn = f1_at_k(pred_segments, gt_segments, k)
        f1[k] = score
        counts[k] = (tp, fp, fn)
    return MetricsReport(acc=acc, f1=f1, counts=counts)


class PooledF1:
    """TP/FP/FN accumulator over many query/target evaluations."""

    def __init__(self, thresholds=F1_THRESHOLDS):
        self.thresholds = tuple(thresholds)
        self.counts = {k: [0, 0, 0] for k in self.thresholds}
        self.frames_correct = 0
        self.frames_total = 0

    def add(self, probs, gt_segments: list[AnnotatedSegment], threshold: float = 0.5) -> None:
        probs = np.asarray(probs, dtype=np.float64)
        gt_labels = np.zeros(probs.shape[0], dtype=bool)
        for seg in gt_segments:
            gt_labels[seg.start:seg.end] = True
        pred_labels = probs >= threshold
        self.frames_correct += int(np.count_nonzero(pred_labels == gt_labels))
        self.frames_total += int(probs.shape[0])
        pred_segments = segments_from_frames(probs, threshold)
        for k in self.thresholds:
            _, tp, fp, fn = f1_at_k(pred_segments, gt_segments, k)
            self.counts[k][0] += tp
            self.counts[k][1] += fp
            self.counts[k][2] += fn

    def report(self) -> MetricsReport:
        if self.frames_total == 0:
            raise ShapeError("no evaluations accumulated")
        return MetricsReport(
            acc=self.frames_correct / self.frames_total,
            f1={k: _f1_from_counts(*self.counts[k]) for k in self.thresholds},
            counts={k: tuple(self.counts[k]) for k in self.thresholds},
        )
