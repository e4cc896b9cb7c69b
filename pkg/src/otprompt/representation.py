"""Both sides of the alignment: temporal feature pyramid and prompt ensembles.

Visual side: clip features -> stacked width-3 temporal convolutions ->
max-pool pyramid.  Text side: learnable context blocks plus a frozen class
token, flattened and pushed through a frozen random projection, then
L2-normalised.  Only the context blocks and the convolution weights train.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, ShapeError
from .numerics import DTYPE, GradSlot, make_rng


@dataclass
class GroundTruthSegment:
    start: float
    end: float
    class_id: int

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"segment start {self.start} must precede end {self.end}")


@dataclass
class FeatureSequence:
    video_id: str
    features: np.ndarray
    clip_stride_seconds: float = 1.0
    annotations: list[GroundTruthSegment] = field(default_factory=list)
    # annotated instances left out of a few-shot sample; excluded from the
    # classification loss rather than treated as background
    ignored: list[GroundTruthSegment] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ShapeError(f"{self.video_id}: features must be T x D with T >= 1, got {self.features.shape}")
        if not self.clip_stride_seconds > 0:
            raise ValueError("clip_stride_seconds must be positive")
        extent = self.duration
        for seg in self.annotations:
            if seg.start < 0 or seg.end > extent + 1e-9:
                raise ValueError(f"{self.video_id}: annotation [{seg.start}, {seg.end}] outside [0, {extent}]")

    @property
    def num_clips(self) -> int:
        return self.features.shape[0]

    @property
    def duration(self) -> float:
        return self.num_clips * self.clip_stride_seconds


# --------------------------------------------------------------------------
# temporal convolution


@dataclass
class TemporalConvStack:
    """Width-3 same-length convolutions; ReLU between layers.

    ``weights[k]`` has shape ``(3, D_in, D_out)``: tap 0 reads ``t - 1``,
    tap 1 reads ``t`` and tap 2 reads ``t + 1``.  The last layer is linear.
    """

    weights: list[GradSlot]
    biases: list[GradSlot]
    activation: bool = True

    @classmethod
    def init(cls, dim: int, depth: int = 2, rng=None) -> "TemporalConvStack":
        rng = make_rng(0) if rng is None else rng
        std = math.sqrt(2.0 / (3 * dim))
        weights = [GradSlot(rng.normal(0.0, std, size=(3, dim, dim))) for _ in range(depth)]
        biases = [GradSlot(np.zeros(dim)) for _ in range(depth)]
        return cls(weights, biases)

    @classmethod
    def identity(cls, dim: int, depth: int = 1) -> "TemporalConvStack":
        w = np.zeros((3, dim, dim))
        w[1] = np.eye(dim)
        return cls([GradSlot(w.copy()) for _ in range(depth)],
                   [GradSlot(np.zeros(dim)) for _ in range(depth)], activation=False)

    def slots(self) -> list[GradSlot]:
        return [*self.weights, *self.biases]


def _conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    pad = np.pad(x, ((1, 1), (0, 0)))
    return pad[:-2] @ w[0] + pad[1:-1] @ w[1] + pad[2:] @ w[2] + b


def temporal_conv(seq, stack: TemporalConvStack, cache: list | None = None) -> np.ndarray:
    """Run the stack; ``cache`` (if given) collects what backward needs."""
    x = np.asarray(seq, dtype=DTYPE)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"temporal_conv expects T x D with T >= 1, got {x.shape}")
    depth = len(stack.weights)
    for k, (w, b) in enumerate(zip(stack.weights, stack.biases)):
        z = _conv1d(x, w.value, b.value)
        relu = stack.activation and k < depth - 1
        if cache is not None:
            cache.append((x, z, relu))
        x = np.maximum(z, 0.0) if relu else z
    return x


def temporal_conv_backward(grad_out, stack: TemporalConvStack, cache: list) -> np.ndarray:
    """Accumulate weight/bias gradients and return the input gradient.

    For ``z[t] = sum_k x[t-1+k] W_k + b``: ``dW_k = x_shift_k^T dz``,
    ``db = sum_t dz`` and ``dx[t] = sum_k dz[t+1-k] W_k^T``.
    """
    g = np.asarray(grad_out, dtype=DTYPE)
    for k in reversed(range(len(cache))):
        x, z, relu = cache[k]
        if relu:
            g = g * (z > 0)
        w = stack.weights[k]
        pad = np.pad(x, ((1, 1), (0, 0)))
        w.grad[0] += pad[:-2].T @ g
        w.grad[1] += pad[1:-1].T @ g
        w.grad[2] += pad[2:].T @ g
        stack.biases[k].grad += g.sum(axis=0)
        gp = np.pad(g, ((1, 1), (0, 0)))
        # x[t] feeds z[t+1] via tap 0, z[t] via tap 1, z[t-1] via tap 2
        g = gp[2:] @ w.value[0].T + gp[1:-1] @ w.value[1].T + gp[:-2] @ w.value[2].T
    return g


# --------------------------------------------------------------------------
# pyramid


@dataclass
class FeaturePyramid:
    levels: list[np.ndarray]
    strides: list[int]
    # argmax source row in the previous level for every pooled row
    sources: list[np.ndarray] = field(default_factory=list)

    @property
    def lengths(self) -> list[int]:
        return [lvl.shape[0] for lvl in self.levels]

    def __len__(self):
        return len(self.levels)


def max_pool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping width-2 max pool along time; an odd tail pools alone."""
    T = x.shape[0]
    if T % 2:
        x = np.concatenate([x, np.full((1, x.shape[1]), -np.inf)], axis=0)
    pairs = x.reshape(-1, 2, x.shape[1])
    pick = np.argmax(pairs, axis=1)  # first index wins ties
    pooled = np.take_along_axis(pairs, pick[:, None, :], axis=1)[:, 0]
    src = 2 * np.arange(pairs.shape[0])[:, None] + pick
    return pooled, src


def build_pyramid(seq, num_levels: int) -> FeaturePyramid:
    x = np.asarray(seq, dtype=DTYPE)
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    if x.shape[0] < 1:
        raise ShapeError("cannot build a pyramid on an empty sequence")
    levels, strides, sources = [x], [1], []
    for _ in range(num_levels - 1):
        if levels[-1].shape[0] == 1:
            warnings.warn(
                f"pyramid clamped at {len(levels)} levels: sequence of {x.shape[0]} clips "
                f"cannot be pooled {num_levels - 1} times",
                stacklevel=2,
            )
            break
        pooled, src = max_pool2(levels[-1])
        levels.append(pooled)
        sources.append(src)
        strides.append(strides[-1] * 2)
    return FeaturePyramid(levels, strides, sources)


def pyramid_backward(pyr: FeaturePyramid, level_grads: list[np.ndarray]) -> np.ndarray:
    """Route per-level gradients back to the base sequence through the argmaxes."""
    g = np.asarray(level_grads[-1], dtype=DTYPE).copy()
    D = g.shape[1]
    cols = np.arange(D)[None, :]
    for l in range(len(pyr.levels) - 1, 0, -1):
        below = np.asarray(level_grads[l - 1], dtype=DTYPE).copy()
        np.add.at(below, (pyr.sources[l - 1], np.broadcast_to(cols, g.shape)), g)
        g = below
    return g


# --------------------------------------------------------------------------
# prompts


@dataclass
class ContextBank:
    """Per-class learnable context blocks, ``slots[c].value`` is ``N x n_ctx x d_ctx``."""

    slots: list[GradSlot]

    @property
    def num_classes(self) -> int:
        return len(self.slots)

    @property
    def num_prompts(self) -> int:
        return self.slots[0].value.shape[0]

    @property
    def n_ctx(self) -> int:
        return self.slots[0].value.shape[1]

    @property
    def d_ctx(self) -> int:
        return self.slots[0].value.shape[2]


def init_context_bank(num_classes: int, num_prompts: int, n_ctx: int, d_ctx: int,
                      rng, std: float = 0.02) -> ContextBank:
    if min(num_classes, num_prompts, n_ctx, d_ctx) < 1:
        raise ValueError("all context bank dimensions must be >= 1")
    return ContextBank([GradSlot(rng.normal(0.0, std, size=(num_prompts, n_ctx, d_ctx)))
                        for _ in range(num_classes)])


@dataclass(frozen=True)
class PseudoEncoder:
    """Frozen stand-in for a text encoder: fixed class tokens and projection."""

    class_tokens: np.ndarray
    projection: np.ndarray
    seed: int

    @classmethod
    def from_seed(cls, seed: int, num_classes: int, n_ctx: int, d_ctx: int, dim: int,
                  class_token_std: float = 0.3) -> "PseudoEncoder":
        rng = make_rng(seed)
        tokens = rng.normal(0.0, class_token_std, size=(num_classes, d_ctx))
        fan_in = (n_ctx + 1) * d_ctx
        proj = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, dim))
        tokens.setflags(write=False)
        proj.setflags(write=False)
        return cls(tokens, proj, int(seed))

    @property
    def dim(self) -> int:
        return self.projection.shape[1]


def _prompt_inputs(bank: ContextBank, enc: PseudoEncoder, class_id: int) -> np.ndarray:
    if not 0 <= class_id < bank.num_classes:
        raise IndexError(f"class_id {class_id} outside [0, {bank.num_classes})")
    ctx = bank.slots[class_id].value
    N, n_ctx, d_ctx = ctx.shape
    if enc.projection.shape[0] != (n_ctx + 1) * d_ctx:
        raise ShapeError(f"encoder expects {enc.projection.shape[0]} inputs, bank provides {(n_ctx + 1) * d_ctx}")
    token = np.broadcast_to(enc.class_tokens[class_id], (N, 1, d_ctx))
    return np.concatenate([ctx, token], axis=1).reshape(N, -1)


def encode_prompts(bank: ContextBank, enc: PseudoEncoder, class_id: int) -> np.ndarray:
    """Unit-norm prompt embeddings ``G_c`` of shape ``N x D``."""
    z = _prompt_inputs(bank, enc, class_id) @ enc.projection
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateError(f"class {class_id}: prompt embedding has zero norm before normalisation")
    return z / norms


def encode_all(bank: ContextBank, enc: PseudoEncoder) -> np.ndarray:
    """Stack of ``encode_prompts`` over every class, ``C x N x D``."""
    return np.stack([encode_prompts(bank, enc, c) for c in range(bank.num_classes)])


def encode_prompts_backward(bank: ContextBank, enc: PseudoEncoder, class_id: int, grad_g) -> None:
    """Accumulate ``dL/dctx`` for one class given ``dL/dG_c``.

    With ``z = x P`` and ``g = z / |z|``: ``dz = (dg - (dg.g) g) / |z|`` and
    ``dx = dz P^T``; the class-token part of ``dx`` is dropped (frozen).
    """
    x = _prompt_inputs(bank, enc, class_id)
    z = x @ enc.projection
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    g = z / norms
    grad_g = np.asarray(grad_g, dtype=DTYPE)
    dz = (grad_g - np.sum(grad_g * g, axis=1, keepdims=True) * g) / norms
    dx = dz @ enc.projection.T
    slot = bank.slots[class_id]
    N, n_ctx, d_ctx = slot.value.shape
    slot.grad += dx.reshape(N, n_ctx + 1, d_ctx)[:, :n_ctx]
