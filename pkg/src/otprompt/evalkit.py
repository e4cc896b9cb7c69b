"""Temporal IoU, per-class average precision and mAP over tIoU thresholds."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

DEFAULT_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


def iou_1d(a, b) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def _iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    inter = np.clip(np.minimum(pred[:, None, 1], gt[None, :, 1]) - np.maximum(pred[:, None, 0], gt[None, :, 0]),
                    0.0, None)
    union = (pred[:, 1] - pred[:, 0])[:, None] + (gt[:, 1] - gt[:, 0])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def average_precision(predictions, gts, iou_threshold: float) -> float:
    """Non-interpolated AP for one class.

    ``predictions`` holds ``(start, end, score)`` triples or ``(video, start,
    end, score)`` quadruples; ``gts`` holds ``(start, end)`` pairs or
    ``(video, start, end)`` triples.  Matching only happens within a video.
    Each prediction, in descending score order, takes the unmatched ground
    truth of highest IoU if that IoU reaches the threshold.  AP sums precision
    times the recall increment at each true positive.
    """
    preds = [p if len(p) == 4 else (None, *p) for p in predictions]
    gts = [g if len(g) == 3 else (None, *g) for g in gts]
    if not gts:
        return 0.0
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][3], preds[i][1], preds[i][2]))
    by_video: dict = {}
    for j, g in enumerate(gts):
        by_video.setdefault(g[0], []).append(j)
    gt_arr = np.array([[g[1], g[2]] for g in gts], dtype=float)
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(preds))
    for rank, i in enumerate(order):
        vid, s, e, _ = preds[i]
        cand = by_video.get(vid)
        if not cand:
            continue
        cand = np.array(cand)
        ious = _iou_matrix(np.array([[s, e]], dtype=float), gt_arr[cand])[0]
        ious[matched[cand]] = -1.0
        k = int(np.argmax(ious))
        if ious[k] >= iou_threshold:
            matched[cand[k]] = True
            tp[rank] = 1.0
    if not len(preds):
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(preds) + 1)
    return float(np.sum(precision * tp) / len(gts))


@dataclass
class EvalReport:
    thresholds: list[float]
    map_by_threshold: dict[float, float]
    average_map: float
    per_class_ap: dict[int, dict[float, float]]
    num_predictions: int
    num_ground_truths: int
    excluded_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "map": {f"{t:g}": v for t, v in self.map_by_threshold.items()},
            "average_map": self.average_map,
            "per_class_ap": {str(c): {f"{t:g}": v for t, v in aps.items()}
                             for c, aps in sorted(self.per_class_ap.items())},
            "num_predictions": self.num_predictions,
            "num_ground_truths": self.num_ground_truths,
            "excluded_classes": list(self.excluded_classes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "class", "AP"])
        for t in self.thresholds:
            for c, aps in sorted(self.per_class_ap.items()):
                w.writerow([f"{t:g}", c, repr(aps[t])])
        for t in self.thresholds:
            w.writerow([f"{t:g}", "mAP", repr(self.map_by_threshold[t])])
        w.writerow(["average", "mAP", repr(self.average_map)])
        return buf.getvalue()

    def table(self) -> str:
        head = " ".join(f"mAP@{t:g}".rjust(9) for t in self.thresholds) + "       avg"
        row = " ".join(f"{100 * self.map_by_threshold[t]:9.2f}" for t in self.thresholds)
        return f"{head}\n{row} {100 * self.average_map:9.2f}"


def evaluate(predictions: dict, corpus, thresholds=DEFAULT_THRESHOLDS, num_classes: int | None = None) -> EvalReport:
    """mAP of ``predictions`` (video id -> list of ActionInstance) on ``corpus``.

    ``corpus`` is a list of FeatureSequence with ground-truth annotations.
    Classes with no ground truth are excluded from the class mean.
    """
    thresholds = [float(t) for t in thresholds]
    gts_by_class: dict[int, list] = {}
    for seq in corpus:
        for a in seq.annotations:
            gts_by_class.setdefault(a.class_id, []).append((seq.video_id, a.start, a.end))
    known = set(range(num_classes)) if num_classes is not None else set(gts_by_class)
    preds_by_class: dict[int, list] = {}
    n_pred = 0
    for vid, insts in predictions.items():
        for p in insts:
            if p.class_id not in known:
                raise DataError(f"prediction for video {vid} has unknown class id {p.class_id}")
            preds_by_class.setdefault(p.class_id, []).append((vid, p.start, p.end, p.score))
            n_pred += 1
    classes = sorted(known)
    scored = [c for c in classes if gts_by_class.get(c)]
    excluded = [c for c in classes if not gts_by_class.get(c)]
    per_class = {c: {t: average_precision(preds_by_class.get(c, []), gts_by_class[c], t) for t in thresholds}
                 for c in scored}
    maps = {t: float(np.mean([per_class[c][t] for c in scored])) if scored else 0.0 for t in thresholds}
    return EvalReport(thresholds, maps, float(np.mean(list(maps.values()))), per_class, n_pred,
                      sum(len(v) for v in gts_by_class.values()), excluded)
