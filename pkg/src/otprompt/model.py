"""Model state, forward pass, hand-derived backward pass and persistence.

Forward for one video::

    clip features -> temporal conv -> max-pool pyramid
    for every level: normalise rows, cost against every class ensemble,
                     align (plan held constant), score locations
                     regress offsets from the un-normalised level features

Backward runs the same chain in reverse with the alignment weights frozen.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import otalign
from .errors import DataError, SchemaVersionError, ShapeError
from .localizer import (ActionInstance, LevelLogits, RegressionHead, decode, location_weights, nms,
                        regress_offsets, regress_offsets_backward)
from .numerics import DTYPE, GradSlot, l2_normalize_rows, make_rng, split_rng
from .representation import (ContextBank, FeaturePyramid, PseudoEncoder, TemporalConvStack, build_pyramid,
                             encode_all, encode_prompts_backward, init_context_bank, pyramid_backward,
                             temporal_conv, temporal_conv_backward)

STRATEGIES = ("ot", "hungarian", "euclidean", "mean")
SCHEMA_VERSION = 1
MODEL_FORMAT = "otprompt-model"


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 2
    learning_rate: float = 1e-3
    shots: int = 5
    lam: float = 0.1
    sinkhorn_delta: float = 0.01
    sinkhorn_max_iters: int = 100
    lambda_reg: float = 1.0
    tau: float = 0.07
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    strategy: str = "ot"
    num_prompts: int = 6
    n_ctx: int = 16
    d_ctx: int = 32
    fpn_levels: int = 5
    conv_depth: int = 2
    encoder_seed: int = 0
    class_token_std: float = 0.3
    # probability the shared classification bias starts at (focal-loss prior)
    prior_prob: float = 0.01
    score_threshold: float = 0.1
    nms_iou: float = 0.5
    top_k: int = 200

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if min(self.num_prompts, self.n_ctx, self.d_ctx, self.fpn_levels, self.conv_depth) < 1:
            raise ValueError("num_prompts, n_ctx, d_ctx, fpn_levels and conv_depth must be >= 1")

    @property
    def sinkhorn(self) -> otalign.SinkhornConfig:
        return otalign.SinkhornConfig(self.lam, self.sinkhorn_delta, self.sinkhorn_max_iters)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelState:
    config: TrainConfig
    num_classes: int
    dim: int
    bank: ContextBank
    conv: TemporalConvStack
    head: RegressionHead
    encoder: PseudoEncoder
    cls_bias: GradSlot
    epoch: int = 0

    @classmethod
    def init(cls, config: TrainConfig, num_classes: int, dim: int) -> "ModelState":
        bank_rng, conv_rng, head_rng = split_rng(make_rng(config.seed), 3)
        bank = init_context_bank(num_classes, config.num_prompts, config.n_ctx, config.d_ctx, bank_rng)
        conv = TemporalConvStack.init(dim, config.conv_depth, conv_rng)
        head = RegressionHead.init(dim, head_rng)
        enc = PseudoEncoder.from_seed(config.encoder_seed, num_classes, config.n_ctx, config.d_ctx, dim,
                                      config.class_token_std)
        bias = GradSlot(np.array([np.log(config.prior_prob / (1.0 - config.prior_prob))]))
        return cls(config, num_classes, dim, bank, conv, head, enc, bias)

    def named_slots(self) -> dict[str, GradSlot]:
        out = {f"ctx.{c}": s for c, s in enumerate(self.bank.slots)}
        for k, (w, b) in enumerate(zip(self.conv.weights, self.conv.biases)):
            out[f"conv.{k}.weight"] = w
            out[f"conv.{k}.bias"] = b
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        out["cls.bias"] = self.cls_bias
        return out

    def slots(self) -> list[GradSlot]:
        return list(self.named_slots().values())

    def zero_grad(self) -> None:
        for s in self.slots():
            s.zero_grad()


@dataclass
class LevelCache:
    feats: np.ndarray      # pyramid level, T_l x D
    unit: np.ndarray       # row-normalised level
    norms: np.ndarray      # T_l x 1
    degenerate: np.ndarray
    cost: np.ndarray       # C x T_l x N (N = 1 for the mean strategy)
    weights: np.ndarray    # row-normalised alignment weights, same shape as cost
    plan: np.ndarray       # raw coupling the weights came from


@dataclass
class Forward:
    logits: LevelLogits
    pyramid: FeaturePyramid
    prompts: np.ndarray    # C x N x D
    levels: list[LevelCache]
    conv_cache: list = field(default_factory=list)

    @property
    def plans(self) -> list[np.ndarray]:
        return [lv.plan for lv in self.levels]


def _alignment_plan(strategy: str, cost: np.ndarray, sk: otalign.SinkhornConfig) -> np.ndarray:
    if strategy == "ot":
        return otalign.sinkhorn(otalign.CostMatrix(cost), cfg=sk).coupling
    if strategy == "hungarian":
        return np.stack([otalign.hungarian_plan(c) for c in cost])
    # euclidean sums every pair; mean has a single column
    return np.full_like(cost, 1.0 / cost.shape[-1])


def _level_cost(strategy: str, unit: np.ndarray, prompts: np.ndarray) -> np.ndarray:
    if strategy in ("euclidean", "hungarian"):
        return otalign.sqeuclidean_cost(unit, prompts).values
    if strategy == "mean":
        prompts = otalign.mean_prompt(prompts)
    return otalign.cosine_cost(unit, prompts).values


def forward(model: ModelState, features, plans: list[np.ndarray] | None = None) -> Forward:
    """Full forward pass for one video.

    ``plans`` replays previously computed couplings (one ``C x T_l x N`` array
    per level) instead of re-running the inner alignment.
    """
    cfg = model.config
    x = np.asarray(features, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ShapeError(f"model expects T x {model.dim} features, got {x.shape}")
    conv_cache: list = []
    refined = temporal_conv(x, model.conv, conv_cache)
    pyr = build_pyramid(refined, cfg.fpn_levels)
    prompts = encode_all(model.bank, model.encoder)
    cls_logits, offsets, levels = [], [], []
    for l, feats in enumerate(pyr.levels):
        unit, degenerate = l2_normalize_rows(feats)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        cost = _level_cost(cfg.strategy, unit, prompts)
        plan = _alignment_plan(cfg.strategy, cost, cfg.sinkhorn) if plans is None else plans[l]
        if plan.shape != cost.shape:
            raise ShapeError(f"level {l}: replayed plan {plan.shape} does not match cost {cost.shape}")
        w = location_weights(plan)
        cls_logits.append(((1.0 - np.sum(w * cost, axis=-1)) / cfg.tau).T + model.cls_bias.value[0])
        offsets.append(regress_offsets(feats, model.head))
        levels.append(LevelCache(feats, unit, norms, degenerate, cost, w, plan))
    return Forward(LevelLogits(cls_logits, offsets), pyr, prompts, levels, conv_cache)


def backward(model: ModelState, fwd: Forward, grad_cls: list[np.ndarray], grad_off: list[np.ndarray],
             scale: float = 1.0) -> None:
    """Accumulate parameter gradients for one forward pass.

    ``grad_cls``/``grad_off`` are dL/dlogits and dL/doffsets per level.
    Alignment weights stay fixed, so gradients reach the prompts and features
    only through the cost matrices.
    """
    cfg = model.config
    prompts = fwd.prompts
    g_prompts = np.zeros_like(prompts)
    g_mean = np.zeros((prompts.shape[0], 1, prompts.shape[2])) if cfg.strategy == "mean" else None
    g_levels = []
    for lv, gc, go in zip(fwd.levels, grad_cls, grad_off):
        model.cls_bias.grad[0] += scale * gc.sum()
        dcost = -lv.weights * (scale * gc.T / cfg.tau)[:, :, None]
        if cfg.strategy in ("euclidean", "hungarian"):
            # C = |f|^2 - 2 f.g + |g|^2
            d_unit = 2.0 * (dcost.sum(axis=(0, 2))[:, None] * lv.unit - np.einsum("ctn,cnd->td", dcost, prompts))
            g_prompts += 2.0 * (dcost.sum(axis=1)[:, :, None] * prompts - np.einsum("ctn,td->cnd", dcost, lv.unit))
        elif cfg.strategy == "mean":
            mean = otalign.mean_prompt(prompts)
            d_unit = -np.einsum("ctn,cnd->td", dcost, mean)
            g_mean -= np.einsum("ctn,td->cnd", dcost, lv.unit)
        else:
            d_unit = -np.einsum("ctn,cnd->td", dcost, prompts)
            g_prompts -= np.einsum("ctn,td->cnd", dcost, lv.unit)
        # through row normalisation; degenerate rows were passed through as-is
        proj = d_unit - np.sum(d_unit * lv.unit, axis=1, keepdims=True) * lv.unit
        d_feats = np.where(lv.degenerate[:, None], d_unit, proj / np.where(lv.norms > 0, lv.norms, 1.0))
        d_feats = d_feats + regress_offsets_backward(lv.feats, model.head, scale * go)
        g_levels.append(d_feats)
    if g_mean is not None:
        g_prompts += otalign.mean_prompt_backward(prompts, g_mean)
    for c in range(model.num_classes):
        encode_prompts_backward(model.bank, model.encoder, c, g_prompts[c])
    d_refined = pyramid_backward(fwd.pyramid, g_levels)
    temporal_conv_backward(d_refined, model.conv, fwd.conv_cache)


def predict(model: ModelState, seq) -> list[ActionInstance]:
    """Decoded, NMS-filtered detections for one :class:`FeatureSequence`."""
    cfg = model.config
    fwd = forward(model, seq.features)
    raw = decode(fwd.logits, cfg.score_threshold, fwd.pyramid.strides, seq.clip_stride_seconds, seq.duration)
    return nms(raw, cfg.nms_iou, cfg.top_k)


# --------------------------------------------------------------------------
# persistence


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(name: str, d: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        raw = base64.b64decode(d["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"tensor {name!r} is malformed: {exc}") from exc
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise DataError(f"tensor {name!r}: payload has {len(raw)} bytes, shape {shape} needs {8 * int(np.prod(shape))}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(DTYPE)


def model_to_dict(model: ModelState) -> dict:
    return {
        "format": MODEL_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "config": asdict(model.config),
        "num_classes": model.num_classes,
        "dim": model.dim,
        "encoder_seed": model.encoder.seed,
        "epoch": model.epoch,
        "tensors": {name: _encode_array(s.value) for name, s in model.named_slots().items()},
    }


def model_from_dict(doc: dict) -> ModelState:
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise DataError("not a model file")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"model schema version {version!r} is not supported (expected {SCHEMA_VERSION})")
    try:
        cfg = TrainConfig.from_dict(doc["config"])
        model = ModelState.init(cfg, int(doc["num_classes"]), int(doc["dim"]))
        tensors = doc["tensors"]
        model.epoch = int(doc.get("epoch", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"model file is malformed: {exc}") from exc
    if int(doc.get("encoder_seed", cfg.encoder_seed)) != model.encoder.seed:
        raise DataError("encoder seed in model file disagrees with its config")
    for name, slot in model.named_slots().items():
        if name not in tensors:
            raise DataError(f"model file is missing tensor {name!r}")
        arr = _decode_array(name, tensors[name])
        if arr.shape != slot.value.shape:
            raise DataError(f"tensor {name!r} has shape {arr.shape}, expected {slot.value.shape}")
        slot.value = arr
        slot.zero_grad()
    return model


def save_model(model: ModelState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> ModelState:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: corrupt model file ({exc})") from exc
    return model_from_dict(doc)
