"""Dense float64 helpers, seeded generators and gradient slots.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Every
differentiable operation elsewhere in the package documents its own backward
rule and pushes the result into a :class:`GradSlot`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

DTYPE = np.float64


def as_matrix(x) -> np.ndarray:
    """Return ``x`` as a 2-D float64 array (1-D input becomes a single row)."""
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with shape {m.shape}")
    return m


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator.

    PCG64 produces the same stream on every platform numpy supports and can be
    split with :func:`split_rng` without correlating the children.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return list(rng.spawn(n))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_normalize_rows(m, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Scale each row to unit Euclidean norm.

    Rows whose norm is below ``eps`` are returned unchanged; the second return
    value is a boolean mask flagging them.
    """
    m = np.asarray(m, dtype=DTYPE)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    degenerate = norms[..., 0] < eps
    safe = np.where(norms < eps, 1.0, norms)
    out = m / safe
    # re-normalising a unit row must be a no-op, bit for bit
    already_unit = np.abs(norms - 1.0) <= 2 * np.finfo(DTYPE).eps
    out = np.where(already_unit, m, out)
    return out, degenerate


@dataclass
class GradSlot:
    """A trainable tensor and its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def accumulate_grad(slot: GradSlot, delta) -> GradSlot:
    delta = np.asarray(delta, dtype=DTYPE)
    if delta.shape != slot.value.shape:
        raise ShapeError(f"accumulate_grad: delta {delta.shape} does not match slot {slot.value.shape}")
    slot.grad += delta
    return slot


def zero_grads(slots) -> None:
    for s in slots:
        s.zero_grad()
