"""Detection evaluation: IOU, greedy matching, AP/mAP at IOU 0.5, FR and MR.

Matching is per frame and per class. Predictions are visited in descending
score order and each one claims the unmatched ground truth of its class with
the highest IOU; it is a true positive when that IOU reaches the threshold.

AP uses all-point interpolation of the precision-recall curve. FR and MR
are the per-frame false-positive and false-negative counts divided by the
class count and averaged over frames.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

NUM_CLASSES = 8
IOU_THRESHOLD = 0.5
SCORE_THRESHOLD = 0.5


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if min(self.x1, self.y1) < 0.0 or max(self.x2, self.y2) > 1.0:
            raise ValueError(f"box {self.as_tuple()} leaves the unit square")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class DetectionRecord:
    """One labelled box. ``score`` is None for ground truth."""

    clip_id: str
    frame_id: int
    class_id: int
    box: Box
    score: Optional[float] = None

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def frame(self) -> Tuple[str, int]:
        return (self.clip_id, self.frame_id)

    @property
    def is_prediction(self) -> bool:
        return self.score is not None


@dataclass
class FrameMatch:
    pred_tp: List[bool]
    gt_matched: List[bool]

    @property
    def tp(self) -> int:
        return sum(self.pred_tp)

    @property
    def fp(self) -> int:
        return len(self.pred_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


@dataclass
class EvalReport:
    per_class_ap: List[Optional[float]]
    map: float
    fr: float
    mr: float
    counts: Dict[int, Dict[str, int]] = field(default_factory=dict)
    num_frames: int = 0

    def evaluated_classes(self) -> List[int]:
        return [c for c, ap in enumerate(self.per_class_ap) if ap is not None]

    def mean_ap(self, classes: Iterable[int]) -> float:
        aps = [self.per_class_ap[c] for c in classes if self.per_class_ap[c] is not None]
        if not aps:
            raise ValueError("no evaluable class in the requested subset")
        return float(np.mean(aps))


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _sorted_by_score(preds: Sequence[DetectionRecord]) -> List[int]:
    # stable: equal scores keep input order
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)


def match_frame(gt: Sequence[DetectionRecord], pred: Sequence[DetectionRecord],
                thresh: float = IOU_THRESHOLD) -> FrameMatch:
    """Label each prediction TP/FP and each ground truth matched/missed.

    All records must belong to one frame. Results follow input order.
    """
    frames = {r.frame for r in gt} | {r.frame for r in pred}
    if len(frames) > 1:
        raise ValueError(f"match_frame got records from {len(frames)} frames: {sorted(frames)}")
    pred_tp = [False] * len(pred)
    gt_matched = [False] * len(gt)
    gt_by_class: Dict[int, List[int]] = defaultdict(list)
    for j, g in enumerate(gt):
        gt_by_class[g.class_id].append(j)

    for i in _sorted_by_score(pred):
        p = pred[i]
        best, best_iou = -1, -1.0
        for j in gt_by_class.get(p.class_id, ()):
            if gt_matched[j]:
                continue
            o = iou(p.box, gt[j].box)
            if o > best_iou:
                best, best_iou = j, o
        if best >= 0 and best_iou >= thresh:
            pred_tp[i] = True
            gt_matched[best] = True
    return FrameMatch(pred_tp, gt_matched)


def _group_by_frame(gt: Iterable[DetectionRecord], pred: Iterable[DetectionRecord]):
    frames: Dict[Hashable, Tuple[list, list]] = {}
    for r in gt:
        if r.is_prediction:
            raise ValueError(f"ground-truth record carries a score: {r}")
        frames.setdefault(r.frame, ([], []))[0].append(r)
    for r in pred:
        if not r.is_prediction:
            raise ValueError(f"prediction record has no score: {r}")
        frames.setdefault(r.frame, ([], []))[1].append(r)
    return frames


def ap_from_outcomes(n_gt: int, outcomes: Sequence[Tuple[float, bool, int]]) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt <= 0:
        raise ValueError("average precision needs at least one ground truth")
    if not outcomes:
        return 0.0
    ranked = sorted(outcomes, key=lambda o: (-o[0], o[2]))
    tp = np.cumsum([1.0 if o[1] else 0.0 for o in ranked])
    fp = np.cumsum([0.0 if o[1] else 1.0 for o in ranked])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


class Evaluator:
    """Evaluate one set of ground truths against one set of predictions."""

    def __init__(self, gt: Sequence[DetectionRecord], pred: Sequence[DetectionRecord],
                 num_classes: int = NUM_CLASSES, iou_thresh: float = IOU_THRESHOLD):
        for r in list(gt) + list(pred):
            if not 0 <= r.class_id < num_classes:
                raise ValueError(f"class_id {r.class_id} outside [0, {num_classes})")
        self.num_classes = num_classes
        self.iou_thresh = iou_thresh
        self.frames = _group_by_frame(gt, pred)
        self._keys = sorted(self.frames, key=str)
        self._matches = {k: match_frame(*self.frames[k], iou_thresh) for k in self._keys}

    def _outcomes(self, class_id: int):
        n_gt = 0
        outcomes = []
        order = 0
        for k in self._keys:
            g, p = self.frames[k]
            n_gt += sum(1 for r in g if r.class_id == class_id)
            for r, tp in zip(p, self._matches[k].pred_tp):
                if r.class_id == class_id:
                    outcomes.append((r.score, tp, order))
                order += 1
        return n_gt, outcomes

    def average_precision(self, class_id: int) -> Optional[float]:
        """AP for one class, or None when the class has no ground truth."""
        n_gt, outcomes = self._outcomes(class_id)
        if n_gt == 0:
            return None
        return ap_from_outcomes(n_gt, outcomes)

    def per_class_ap(self) -> List[Optional[float]]:
        return [self.average_precision(c) for c in range(self.num_classes)]

    def map(self) -> float:
        aps = [ap for ap in self.per_class_ap() if ap is not None]
        if not aps:
            raise ValueError("no class has ground truth; mAP undefined")
        return float(np.mean(aps))

    def thresholded_counts(self, score_thresh: float = SCORE_THRESHOLD):
        """Per-frame (fp, fn) and per-class TP/FP/FN with predictions below threshold dropped."""
        per_frame = []
        per_class = {c: {"tp": 0, "fp": 0, "fn": 0} for c in range(self.num_classes)}
        for k in self._keys:
            g, p = self.frames[k]
            kept = [r for r in p if r.score >= score_thresh]
            m = match_frame(g, kept, self.iou_thresh)
            per_frame.append((m.fp, m.fn))
            for r, tp in zip(kept, m.pred_tp):
                per_class[r.class_id]["tp" if tp else "fp"] += 1
            for r, hit in zip(g, m.gt_matched):
                if not hit:
                    per_class[r.class_id]["fn"] += 1
        return per_frame, per_class

    def fr_mr(self, score_thresh: float = SCORE_THRESHOLD) -> Tuple[float, float]:
        per_frame, _ = self.thresholded_counts(score_thresh)
        return _rates(per_frame, self.num_classes)

    def report(self, score_thresh: float = SCORE_THRESHOLD) -> EvalReport:
        aps = self.per_class_ap()
        evaluated = [ap for ap in aps if ap is not None]
        if not evaluated:
            raise ValueError("no class has ground truth; mAP undefined")
        per_frame, per_class = self.thresholded_counts(score_thresh)
        fr, mr = _rates(per_frame, self.num_classes)
        return EvalReport(per_class_ap=aps, map=float(np.mean(evaluated)), fr=fr, mr=mr,
                          counts=per_class, num_frames=len(per_frame))


def _rates(per_frame: Sequence[Tuple[int, int]], num_classes: int) -> Tuple[float, float]:
    if not per_frame:
        raise ValueError("FR/MR need at least one frame")
    n = len(per_frame)
    fr = sum(fp / num_classes for fp, _ in per_frame) / n
    mr = sum(fn / num_classes for _, fn in per_frame) / n
    return fr, mr


def average_precision(class_id: int, gt, pred, iou_thresh: float = IOU_THRESHOLD,
                      num_classes: int = NUM_CLASSES) -> Optional[float]:
    return Evaluator(gt, pred, num_classes, iou_thresh).average_precision(class_id)


def mean_average_precision(gt, pred, iou_thresh: float = IOU_THRESHOLD,
                           num_classes: int = NUM_CLASSES) -> float:
    return Evaluator(gt, pred, num_classes, iou_thresh).map()


def fr_mr(gt, pred, num_classes: int = NUM_CLASSES, score_thresh: float = SCORE_THRESHOLD,
          iou_thresh: float = IOU_THRESHOLD) -> Tuple[float, float]:
    return Evaluator(gt, pred, num_classes, iou_thresh).fr_mr(score_thresh)


def evaluate(gt, pred, num_classes: int = NUM_CLASSES, iou_thresh: float = IOU_THRESHOLD,
             score_thresh: float = SCORE_THRESHOLD) -> EvalReport:
    return Evaluator(gt, pred, num_classes, iou_thresh).report(score_thresh)


# ---------------------------------------------------------------------------
# report output


def format_report(report: EvalReport, class_names: Optional[Sequence[str]] = None) -> str:
    lines = [f"frames  {report.num_frames}",
             f"mAP@0.5 {report.map:.6f}",
             f"FR      {report.fr:.6f}",
             f"MR      {report.mr:.6f}",
             "class  AP        TP   FP   FN"]
    for c, ap in enumerate(report.per_class_ap):
        name = class_names[c] if class_names else str(c)
        cnt = report.counts.get(c, {"tp": 0, "fp": 0, "fn": 0})
        ap_s = "n/a     " if ap is None else f"{ap:.6f}"
        lines.append(f"{name:<6} {ap_s}  {cnt['tp']:>4} {cnt['fp']:>4} {cnt['fn']:>4}")
    return "\n".join(lines) + "\n"


def report_items(report: EvalReport) -> List[Tuple[str, str]]:
    items = [("map", repr(report.map)), ("fr", repr(report.fr)), ("mr", repr(report.mr)),
             ("frames", str(report.num_frames))]
    for c, ap in enumerate(report.per_class_ap):
        items.append((f"ap.{c}", "na" if ap is None else repr(ap)))
    return items


def write_report(path, report: EvalReport) -> None:
    with open(path, "w") as fh:
        for k, v in report_items(report):
            fh.write(f"{k}={v}\n")


def read_report(path) -> Dict[str, Optional[float]]:
    out: Dict[str, Optional[float]] = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            k, v = line.split("=", 1)
            out[k] = None if v == "na" else float(v)
    return out
