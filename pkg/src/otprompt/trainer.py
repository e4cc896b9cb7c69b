"""Two-phase training loop, Adam, and K-shot support sampling.

Each step first solves every (class, level) alignment with the parameters
fixed, then computes the detection loss with those plans frozen and
backpropagates into the context vectors, the temporal convolutions and the
regression head.  The pseudo text encoder never changes.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NonFiniteError
from .localizer import LossBreakdown, assign_targets, total_loss_and_grad
from .model import ModelState, TrainConfig, backward, forward
from .numerics import GradSlot, make_rng
from .representation import FeatureSequence

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# few-shot sampling


def sample_few_shot(corpus, shots: int, rng, num_classes: int | None = None) -> list[FeatureSequence]:
    """Pick ``shots`` annotated instances per class and the videos holding them.

    Instances are drawn in random order but those living in already-selected
    videos are preferred, which keeps the video set small.  Returned videos
    keep only the sampled annotations; the others move to ``ignored`` so they
    are not mistaken for background.
    """
    instances: dict[int, list[tuple[int, int]]] = {}
    for v, seq in enumerate(corpus):
        for a, ann in enumerate(seq.annotations):
            instances.setdefault(ann.class_id, []).append((v, a))
    classes = range(num_classes) if num_classes is not None else sorted(instances)
    for c in classes:
        have = len(instances.get(c, []))
        if have < shots:
            raise DataError(f"class {c} has {have} annotated instances, fewer than the {shots} shots requested")
    chosen_videos: set[int] = set()
    chosen: set[tuple[int, int]] = set()
    for c in classes:
        pool = instances[c]
        order = rng.permutation(len(pool))
        ranked = sorted((pool[i] for i in order), key=lambda va: va[0] not in chosen_videos)
        for va in ranked[:shots]:
            chosen.add(va)
            chosen_videos.add(va[0])
    out = []
    for v in sorted(chosen_videos):
        seq = corpus[v]
        keep = [ann for a, ann in enumerate(seq.annotations) if (v, a) in chosen]
        drop = [ann for a, ann in enumerate(seq.annotations) if (v, a) not in chosen]
        out.append(FeatureSequence(seq.video_id, seq.features, seq.clip_stride_seconds, keep,
                                   list(seq.ignored) + drop))
    return out


# --------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_slots(cls, slots) -> "OptimizerState":
        return cls([np.zeros_like(s.value) for s in slots], [np.zeros_like(s.value) for s in slots])


def adam_update(slots: list[GradSlot], opt: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam step applied in place to ``slot.value``."""
    if len(slots) != len(opt.m):
        raise ValueError(f"optimizer tracks {len(opt.m)} parameters, got {len(slots)}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for s, m, v in zip(slots, opt.m, opt.v):
        if m.shape != s.value.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {s.value.shape}")
        m *= b1
        m += (1.0 - b1) * s.grad
        v *= b2
        v += (1.0 - b2) * s.grad * s.grad
        s.value = s.value - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


# --------------------------------------------------------------------------
# training


def video_loss(model: ModelState, seq: FeatureSequence, scale: float = 1.0,
               with_grad: bool = True) -> LossBreakdown:
    """Forward (and optionally backward) for one video; gradients accumulate."""
    cfg = model.config
    fwd = forward(model, seq.features)
    targets = assign_targets(fwd.pyramid, seq.annotations, None, seq.clip_stride_seconds, seq.ignored)
    br, g_cls, g_off = total_loss_and_grad(fwd.logits, targets, cfg.lambda_reg, cfg.focal_alpha, cfg.focal_gamma)
    if with_grad:
        backward(model, fwd, g_cls, g_off, scale)
    return br


def train_step(model: ModelState, batch: list[FeatureSequence], opt: OptimizerState,
               cfg: TrainConfig | None = None) -> LossBreakdown:
    """One optimiser update on ``batch``; returns the pre-update mean loss."""
    cfg = model.config if cfg is None else cfg
    model.zero_grad()
    scale = 1.0 / len(batch)
    parts = [video_loss(model, seq, scale) for seq in batch]
    slots = model.slots()
    for name, s in model.named_slots().items():
        if not np.all(np.isfinite(s.grad)):
            raise NonFiniteError(f"non-finite gradient in {name} (batch {[b.video_id for b in batch]})")
    adam_update(slots, opt, cfg.learning_rate)
    return LossBreakdown(
        cls=sum(p.cls for p in parts) * scale,
        reg=sum(p.reg for p in parts) * scale,
        total=sum(p.total for p in parts) * scale,
        n_pos=sum(p.n_pos for p in parts),
    )


@dataclass
class TrainResult:
    model: ModelState
    history: list[LossBreakdown] = field(default_factory=list)
    support: list[FeatureSequence] = field(default_factory=list)


def train(train_corpus: list[FeatureSequence], cfg: TrainConfig, num_classes: int, progress=None) -> TrainResult:
    """Sample the K-shot support set and run ``cfg.epochs`` passes over it.

    One epoch visits every support video once in a seeded shuffled order, in
    batches of ``cfg.batch_size``.  ``progress(epoch, breakdown)`` is called
    after each epoch with the epoch-mean loss.
    """
    if not train_corpus:
        raise DataError("training split is empty")
    dim = train_corpus[0].features.shape[1]
    rng = make_rng(cfg.seed + 1)
    support = sample_few_shot(train_corpus, cfg.shots, rng, num_classes)
    model = ModelState.init(copy.deepcopy(cfg), num_classes, dim)
    opt = OptimizerState.for_slots(model.slots())
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(support))
        steps = []
        for i in range(0, len(order), cfg.batch_size):
            batch = [support[j] for j in order[i:i + cfg.batch_size]]
            steps.append(train_step(model, batch, opt, cfg))
        n = len(steps)
        br = LossBreakdown(sum(s.cls for s in steps) / n, sum(s.reg for s in steps) / n,
                           sum(s.total for s in steps) / n, sum(s.n_pos for s in steps))
        history.append(br)
        model.epoch = epoch + 1
        if progress is not None:
            progress(epoch + 1, br)
        log.debug("epoch %d loss %.6f", epoch + 1, br.total)
    return TrainResult(model, history, support)
