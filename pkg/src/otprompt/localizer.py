"""Per-location heads, target assignment, the detection loss and decoding.

Classification logits come from the alignment: a location's logit for class
``c`` is ``(1 - transported_cost) / tau`` where the transported cost is the
plan-weighted average of that location's costs against the class prompts.
Offsets come from a shared linear head with a ReLU on the level features.
Offsets and regression targets are measured in units of the level stride.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .numerics import DTYPE, GradSlot, make_rng
from .representation import FeaturePyramid, GroundTruthSegment

PROB_EPS = 1e-7


@dataclass
class LevelLogits:
    cls: list[np.ndarray]      # per level, T_l x C
    offsets: list[np.ndarray]  # per level, T_l x 2 (start, end), >= 0


@dataclass
class TargetAssignment:
    labels: list[np.ndarray]   # per level, T_l ints; 0 background, c + 1 for class c
    offsets: list[np.ndarray]  # per level, T_l x 2; zero where negative
    ignore: list[np.ndarray]   # per level, T_l bools; excluded from classification

    @property
    def positive(self) -> list[np.ndarray]:
        return [lab > 0 for lab in self.labels]

    @property
    def n_pos(self) -> int:
        return int(sum(int((lab > 0).sum()) for lab in self.labels))


@dataclass
class LossBreakdown:
    cls: float
    reg: float
    total: float
    n_pos: int


@dataclass
class ActionInstance:
    start: float
    end: float
    class_id: int
    score: float

    def as_tuple(self):
        return (self.start, self.end, self.class_id, self.score)


@dataclass
class RegressionHead:
    weight: GradSlot  # D x 2
    bias: GradSlot    # 2

    @classmethod
    def init(cls, dim: int, rng=None, std: float = 0.01, bias: float = 1.0) -> "RegressionHead":
        rng = make_rng(0) if rng is None else rng
        return cls(GradSlot(rng.normal(0.0, std, size=(dim, 2))), GradSlot(np.full(2, float(bias))))

    def slots(self) -> list[GradSlot]:
        return [self.weight, self.bias]


# --------------------------------------------------------------------------
# heads


def location_weights(plan) -> np.ndarray:
    """Row-normalised coupling: each location's distribution over prompts."""
    T = np.asarray(plan, dtype=DTYPE)
    mass = T.sum(axis=-1, keepdims=True)
    if np.any(mass <= 0):
        raise ValueError("transport plan has a location with zero mass")
    return T / mass


def score_locations(plan, cost, tau: float = 0.07) -> np.ndarray:
    """``(1 - sum_j w_tj C_tj) / tau`` with ``w`` the row-normalised plan.

    Backward: ``dlogit_t / dC_tj = -w_tj / tau``; the plan is a constant.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    C = np.asarray(getattr(cost, "values", cost), dtype=DTYPE)
    T = np.asarray(getattr(plan, "coupling", plan), dtype=DTYPE)
    if C.shape != T.shape:
        raise ShapeError(f"score_locations: plan {T.shape} vs cost {C.shape}")
    w = location_weights(T)
    return (1.0 - np.sum(w * C, axis=-1)) / tau


def regress_offsets(level_features, head: RegressionHead) -> np.ndarray:
    return np.maximum(np.asarray(level_features, dtype=DTYPE) @ head.weight.value + head.bias.value, 0.0)


def regress_offsets_backward(level_features, head: RegressionHead, grad_out) -> np.ndarray:
    """Accumulate head gradients; return the gradient w.r.t. the features."""
    f = np.asarray(level_features, dtype=DTYPE)
    pre = f @ head.weight.value + head.bias.value
    g = np.asarray(grad_out, dtype=DTYPE) * (pre > 0)
    head.weight.grad += f.T @ g
    head.bias.grad += g.sum(axis=0)
    return g @ head.weight.value.T


# --------------------------------------------------------------------------
# targets


def default_ranges(num_levels: int) -> list[tuple[float, float]]:
    """Regression ranges in stride units: [0,4], [2,8], [4,16], ... last open."""
    ranges = [(0.0 if l == 0 else 2.0 ** l, 4.0 * 2.0 ** l) for l in range(num_levels)]
    ranges[-1] = (ranges[-1][0], math.inf)
    return ranges


def level_centers(length: int, stride: int, clip_stride_seconds: float) -> np.ndarray:
    return (np.arange(length) + 0.5) * stride * clip_stride_seconds


def assign_targets(pyramid: FeaturePyramid, annotations, ranges=None,
                   clip_stride_seconds: float = 1.0, ignored=()) -> TargetAssignment:
    """Centre-sampling assignment with per-level regression ranges.

    A location is positive for a segment when its centre lies inside the
    segment and ``max(d_s, d_e)`` falls within the level's range; among several
    such segments the shortest wins.  Locations whose centre falls inside an
    ``ignored`` segment and that are not positive are masked out.
    """
    ranges = default_ranges(len(pyramid)) if ranges is None else list(ranges)
    if len(ranges) != len(pyramid):
        raise ShapeError(f"{len(ranges)} ranges for {len(pyramid)} levels")
    segs = list(annotations)
    starts = np.array([s.start for s in segs], dtype=DTYPE)
    ends = np.array([s.end for s in segs], dtype=DTYPE)
    classes = np.array([s.class_id for s in segs], dtype=int)
    durations = ends - starts
    labels, offsets, ignore = [], [], []
    for feats, stride, (lo, hi) in zip(pyramid.levels, pyramid.strides, ranges):
        n = feats.shape[0]
        stride_sec = stride * clip_stride_seconds
        centers = level_centers(n, stride, clip_stride_seconds)
        lab = np.zeros(n, dtype=int)
        off = np.zeros((n, 2), dtype=DTYPE)
        if segs:
            ds = (centers[:, None] - starts[None, :]) / stride_sec
            de = (ends[None, :] - centers[:, None]) / stride_sec
            m = np.maximum(ds, de)
            ok = (ds >= 0) & (de >= 0) & (m >= lo) & (m <= hi)
            dur = np.where(ok, durations[None, :], np.inf)
            best = np.argmin(dur, axis=1)  # first segment wins duration ties
            pos = ok.any(axis=1)
            rows = np.nonzero(pos)[0]
            lab[rows] = classes[best[rows]] + 1
            off[rows, 0] = ds[rows, best[rows]]
            off[rows, 1] = de[rows, best[rows]]
        ign = np.zeros(n, dtype=bool)
        for s in ignored:
            ign |= (centers >= s.start) & (centers <= s.end)
        ign &= lab == 0
        labels.append(lab)
        offsets.append(off)
        ignore.append(ign)
    return TargetAssignment(labels, offsets, ignore)


# --------------------------------------------------------------------------
# losses


def focal_loss(p, y, alpha: float | None = 0.25, gamma: float = 2.0):
    """Binary focal loss on probabilities; ``alpha=None`` disables weighting."""
    p = np.clip(np.asarray(p, dtype=DTYPE), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y)
    pt = np.where(y > 0, p, 1.0 - p)
    at = 1.0 if alpha is None else np.where(y > 0, alpha, 1.0 - alpha)
    out = -at * (1.0 - pt) ** gamma * np.log(pt)
    return float(out) if np.ndim(out) == 0 else out


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def focal_loss_logits(x, y, alpha: float | None = 0.25, gamma: float = 2.0):
    """Focal loss on logits and its derivative with respect to the logits."""
    s = sigmoid(x)
    p = np.clip(s, PROB_EPS, 1.0 - PROB_EPS)
    clipped = p != s
    y = np.asarray(y) > 0
    pt = np.where(y, p, 1.0 - p)
    at = 1.0 if alpha is None else np.where(y, alpha, 1.0 - alpha)
    q = 1.0 - pt
    logpt = np.log(pt)
    loss = -at * q ** gamma * logpt
    dq = np.where(q > 0, gamma * q ** (gamma - 1.0), 0.0) if gamma != 0 else 0.0
    dloss_dpt = -at * (-dq * logpt + q ** gamma / pt)
    dpt_dx = np.where(y, 1.0, -1.0) * s * (1.0 - s)
    grad = np.where(clipped, 0.0, dloss_dpt * dpt_dx)
    return loss, grad


def diou_loss_and_grad(ps, pe, gs, ge):
    """1-D DIoU loss between ``[ps, pe]`` and ``[gs, ge]`` plus d/dps, d/dpe.

    ``1 - IoU + (centre distance)^2 / (enclosing length)^2``; 0 when both are
    the same point.  Gradients are one-sided subgradients at the kinks.
    """
    ps, pe, gs, ge = (np.asarray(a, dtype=DTYPE) for a in (ps, pe, gs, ge))
    lo, hi = np.maximum(ps, gs), np.minimum(pe, ge)
    overlapping = hi > lo
    inter = np.where(overlapping, hi - lo, 0.0)
    union = (pe - ps) + (ge - gs) - inter
    enc = np.maximum(pe, ge) - np.minimum(ps, gs)
    c = 0.5 * (ps + pe) - 0.5 * (gs + ge)
    safe_union = np.where(union > 0, union, 1.0)
    safe_enc = np.where(enc > 0, enc, 1.0)
    iou = np.where(union > 0, inter / safe_union, 0.0)
    # (c / enc)^2 rather than c^2 / enc^2 so tiny intervals do not underflow
    r = c / safe_enc
    pen = np.where(enc > 0, r * r, 0.0)
    loss = np.where(enc > 0, 1.0 - iou + pen, 0.0)

    d_inter_s = np.where(overlapping & (ps > gs), -1.0, 0.0)
    d_inter_e = np.where(overlapping & (pe < ge), 1.0, 0.0)
    d_union_s = -1.0 - d_inter_s
    d_union_e = 1.0 - d_inter_e
    d_iou_s = np.where(union > 0, (d_inter_s - iou * d_union_s) / safe_union, 0.0)
    d_iou_e = np.where(union > 0, (d_inter_e - iou * d_union_e) / safe_union, 0.0)
    d_enc_s = np.where(ps < gs, -1.0, 0.0)
    d_enc_e = np.where(pe > ge, 1.0, 0.0)
    d_pen_s = np.where(enc > 0, (r - 2 * r * r * d_enc_s) / safe_enc, 0.0)
    d_pen_e = np.where(enc > 0, (r - 2 * r * r * d_enc_e) / safe_enc, 0.0)
    live = enc > 0
    return loss, np.where(live, -d_iou_s + d_pen_s, 0.0), np.where(live, -d_iou_e + d_pen_e, 0.0)


def diou_loss(pred, gt) -> float:
    """DIoU loss between two intervals given as ``(start, end)``."""
    loss, _, _ = diou_loss_and_grad(pred[0], pred[1], gt[0], gt[1])
    return float(loss)


def total_loss_and_grad(logits: LevelLogits, targets: TargetAssignment, lambda_reg: float = 1.0,
                        alpha: float | None = 0.25, gamma: float = 2.0):
    """Detection loss summed over levels/locations, divided by ``max(N_pos, 1)``.

    Returns the breakdown and gradients w.r.t. every level's logits and
    offsets (already divided by the normaliser).
    """
    if not (len(logits.cls) == len(logits.offsets) == len(targets.labels)):
        raise ShapeError("logits and targets disagree on the number of levels")
    norm = max(targets.n_pos, 1)
    cls_sum = reg_sum = 0.0
    g_cls, g_off = [], []
    for x, off, lab, tgt, ign in zip(logits.cls, logits.offsets, targets.labels,
                                     targets.offsets, targets.ignore):
        if x.shape[0] != lab.shape[0] or off.shape != tgt.shape:
            raise ShapeError(f"level shape mismatch: logits {x.shape}, offsets {off.shape}, targets {lab.shape}")
        onehot = (lab[:, None] - 1) == np.arange(x.shape[1])[None, :]
        fl, dfl = focal_loss_logits(x, onehot, alpha, gamma)
        keep = ~ign[:, None]
        cls_sum += float(np.sum(fl * keep))
        g_cls.append(dfl * keep / norm)
        gof = np.zeros_like(off)
        pos = lab > 0
        if pos.any():
            l, ds, de = diou_loss_and_grad(-off[pos, 0], off[pos, 1], -tgt[pos, 0], tgt[pos, 1])
            reg_sum += float(l.sum())
            gof[pos, 0] = -ds * lambda_reg / norm
            gof[pos, 1] = de * lambda_reg / norm
        g_off.append(gof)
    total = (cls_sum + lambda_reg * reg_sum) / norm
    return LossBreakdown(cls_sum, reg_sum, total, targets.n_pos), g_cls, g_off


def total_loss(logits: LevelLogits, targets: TargetAssignment, lambda_reg: float = 1.0,
               alpha: float | None = 0.25, gamma: float = 2.0) -> LossBreakdown:
    return total_loss_and_grad(logits, targets, lambda_reg, alpha, gamma)[0]


# --------------------------------------------------------------------------
# decoding


def decode(logits: LevelLogits, score_threshold: float, strides, clip_stride_seconds: float = 1.0,
           duration: float | None = None) -> list[ActionInstance]:
    out = []
    for x, off, stride in zip(logits.cls, logits.offsets, strides):
        stride_sec = stride * clip_stride_seconds
        centers = level_centers(x.shape[0], stride, clip_stride_seconds)
        scores = sigmoid(x)
        ts, cs = np.nonzero(scores > score_threshold)
        starts = centers[ts] - off[ts, 0] * stride_sec
        ends = centers[ts] + off[ts, 1] * stride_sec
        starts = np.maximum(starts, 0.0)
        if duration is not None:
            ends = np.minimum(ends, duration)
        for s, e, c, sc in zip(starts, ends, cs, scores[ts, cs]):
            if e > s:
                out.append(ActionInstance(float(s), float(e), int(c), float(sc)))
    return out


def _order_key(a: ActionInstance):
    # class id last so equal-score, equal-extent detections still sort stably
    return (-a.score, a.start, a.end, a.class_id)


def nms(instances, iou_threshold: float = 0.5, top_k: int = 200) -> list[ActionInstance]:
    """Greedy per-class suppression of overlaps with IoU above the threshold."""
    kept = []
    by_class: dict[int, list[ActionInstance]] = {}
    for a in instances:
        by_class.setdefault(a.class_id, []).append(a)
    for cls_id in sorted(by_class):
        group = sorted(by_class[cls_id], key=_order_key)
        s = np.array([a.start for a in group])
        e = np.array([a.end for a in group])
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            kept.append(group[i])
            inter = np.clip(np.minimum(e[i], e[i + 1:]) - np.maximum(s[i], s[i + 1:]), 0.0, None)
            union = (e[i] - s[i]) + (e[i + 1:] - s[i + 1:]) - inter
            iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
            alive[i + 1:] &= ~(iou > iou_threshold)
    kept.sort(key=_order_key)
    return kept[:top_k]
