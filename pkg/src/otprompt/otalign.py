"""Alignment between a level's temporal features and a class prompt ensemble.

Four strategies are available:

* ``ot``        entropic optimal transport solved with Sinkhorn scaling,
* ``hungarian`` hard one-to-one assignment (Kuhn-Munkres),
* ``euclidean`` all-pairs squared Euclidean sum, no coupling,
* ``mean``      the prompts are averaged into a single vector first.

Costs and plans may carry a leading batch axis (one slice per class); every
function here broadcasts over it.  Plans are always treated as constants for
differentiation: the gradient of ``<T, C>`` with respect to ``C`` is ``T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .errors import DegenerateError, ShapeError, SinkhornUnderflowError
from .numerics import DTYPE, l2_normalize_rows

METRICS = ("cosine", "sqeuclidean")

# largest (max C - min C) / lambda the plain-domain kernel iteration tolerates;
# exp(-500) ~ 7e-218 leaves headroom for the scaling vectors in float64
_MAX_KERNEL_RANGE = 500.0


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray
    metric: str = "cosine"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class Marginals:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def uniform(cls, n_rows: int, n_cols: int) -> "Marginals":
        return cls(np.full(n_rows, 1.0 / n_rows), np.full(n_cols, 1.0 / n_cols))

    def __post_init__(self):
        for name in ("u", "v"):
            x = np.asarray(getattr(self, name), dtype=DTYPE)
            if np.any(x <= 0):
                raise ValueError(f"marginal {name} must be strictly positive")
            if abs(x.sum() - 1.0) > 1e-12:
                raise ValueError(f"marginal {name} sums to {x.sum()!r}, not 1")
            object.__setattr__(self, name, x)


@dataclass(frozen=True)
class SinkhornConfig:
    lam: float = 0.1
    delta: float = 0.01
    max_iters: int = 100
    # switch to log-domain updates instead of raising when the kernel underflows
    log_fallback: bool = True

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class TransportPlan:
    coupling: np.ndarray
    iterations_used: int
    converged: bool
    residual: float
    log_domain: bool = False


def cosine_cost(features, prompts) -> CostMatrix:
    """``C[..., i, j] = 1 - <f_i, g_j>`` for row-normalised inputs.

    ``features`` is ``(T, D)``; ``prompts`` is ``(N, D)`` or ``(B, N, D)``.
    """
    f = np.asarray(features, dtype=DTYPE)
    g = np.asarray(prompts, dtype=DTYPE)
    if f.shape[-1] != g.shape[-1]:
        raise ShapeError(f"cosine_cost: feature dim {f.shape} vs prompt dim {g.shape}")
    sim = np.matmul(f, np.swapaxes(g, -1, -2))
    return CostMatrix(1.0 - sim, "cosine")


def sqeuclidean_cost(features, prompts) -> CostMatrix:
    """``C[..., t, i] = ||f_t - g_i||^2``."""
    f = np.asarray(features, dtype=DTYPE)
    g = np.asarray(prompts, dtype=DTYPE)
    if f.shape[-1] != g.shape[-1]:
        raise ShapeError(f"sqeuclidean_cost: feature dim {f.shape} vs prompt dim {g.shape}")
    diff = f[..., :, None, :] - g[..., None, :, :]
    return CostMatrix(np.einsum("...tnd,...tnd->...tn", diff, diff), "sqeuclidean")


def _residual(plan, u, v) -> float:
    return max(
        float(np.max(np.abs(plan.sum(axis=-1) - u))),
        float(np.max(np.abs(plan.sum(axis=-2) - v))),
    )


def _sinkhorn_plain(K, u, v, cfg):
    # literal scaling updates: a <- u / (K b), b <- v / (K^T a)
    b = np.broadcast_to(v, K.shape[:-2] + v.shape).copy()
    it, res = 0, math.inf
    for it in range(1, cfg.max_iters + 1):
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            a = u / np.einsum("...ij,...j->...i", K, b)
            b = v / np.einsum("...ij,...i->...j", K, a)
            plan = a[..., :, None] * K * b[..., None, :]
        if not np.all(np.isfinite(plan)):
            return None, it, math.inf
        res = _residual(plan, u, v)
        if res < cfg.delta:
            break
    return plan, it, res


def _sinkhorn_log(C, u, v, cfg):
    # same iteration on dual potentials f = lam log a, g = lam log b
    lam = cfg.lam
    logu, logv = np.log(u), np.log(v)
    g = np.broadcast_to(lam * logv, C.shape[:-2] + v.shape).copy()
    it, res = 0, math.inf
    for it in range(1, cfg.max_iters + 1):
        f = lam * logu - lam * logsumexp((g[..., None, :] - C) / lam, axis=-1)
        g = lam * logv - lam * logsumexp((f[..., :, None] - C) / lam, axis=-2)
        plan = np.exp((f[..., :, None] + g[..., None, :] - C) / lam)
        res = _residual(plan, u, v)
        if res < cfg.delta:
            break
    return plan, it, res


def sinkhorn(cost: CostMatrix, marginals: Marginals | None = None,
             cfg: SinkhornConfig = SinkhornConfig()) -> TransportPlan:
    """Entropic OT plan ``diag(a) K diag(b)`` with ``K = exp(-C / lam)``.

    Iterates until the largest marginal violation (infinity norm over both row
    and column sums) drops below ``cfg.delta`` or ``cfg.max_iters`` is hit.
    Uniform marginals are used when ``marginals`` is None.

    The plain-domain kernel is used while ``(max C - min C) / lam`` stays in a
    range float64 can scale safely.  Beyond that (or if the plain iteration
    overflows) the identical iteration runs on log-domain potentials, or
    :class:`SinkhornUnderflowError` is raised when ``cfg.log_fallback`` is off.
    """
    C = np.asarray(cost.values if isinstance(cost, CostMatrix) else cost, dtype=DTYPE)
    if C.ndim < 2:
        raise ShapeError(f"sinkhorn: cost must be at least 2-D, got {C.shape}")
    n_rows, n_cols = C.shape[-2:]
    if marginals is None:
        marginals = Marginals.uniform(n_rows, n_cols)
    u, v = marginals.u, marginals.v
    if u.shape != (n_rows,) or v.shape != (n_cols,):
        raise ShapeError(f"sinkhorn: marginals {u.shape}/{v.shape} do not fit cost {C.shape}")

    plan = None
    use_log = (C.max() - C.min()) / cfg.lam > _MAX_KERNEL_RANGE
    if not use_log:
        plan, it, res = _sinkhorn_plain(np.exp(-C / cfg.lam), u, v, cfg)
        use_log = plan is None
    if use_log:
        if not cfg.log_fallback:
            raise SinkhornUnderflowError(
                f"exp(-C/lambda) underflows for lambda={cfg.lam} with cost range "
                f"[{C.min():.3g}, {C.max():.3g}]; use a larger lambda"
            )
        plan, it, res = _sinkhorn_log(C, u, v, cfg)
    if not np.all(np.isfinite(plan)) or np.any(plan.sum(axis=-1) <= 0):
        raise SinkhornUnderflowError(f"transport plan degenerated for lambda={cfg.lam}; use a larger lambda")
    return TransportPlan(plan, it, res < cfg.delta, res, use_log)


def ot_distance(plan, cost) -> float | np.ndarray:
    """Frobenius product ``<T, C>`` (per batch entry when batched)."""
    T = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=DTYPE)
    C = cost.values if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=DTYPE)
    if T.shape != C.shape:
        raise ShapeError(f"ot_distance: plan {T.shape} vs cost {C.shape}")
    out = np.einsum("...ij,...ij->...", T, C)
    return float(out) if out.ndim == 0 else out


def hungarian_align(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one matching; rectangular inputs are zero-padded."""
    C = np.asarray(cost.values if isinstance(cost, CostMatrix) else cost, dtype=DTYPE)
    n, m = C.shape
    size = max(n, m)
    padded = np.zeros((size, size), dtype=DTYPE)
    padded[:n, :m] = C
    rows, cols = linear_sum_assignment(padded)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if r < n and c < m]
    return pairs, float(sum(C[r, c] for r, c in pairs))


def hungarian_plan(cost) -> np.ndarray:
    """0/1 coupling assigning every row to exactly one column.

    Columns are replicated ``ceil(rows / cols)`` times so the matching is
    one-to-one against the replicated set while every feature row receives a
    prompt and prompt loads stay balanced.
    """
    C = np.asarray(cost.values if isinstance(cost, CostMatrix) else cost, dtype=DTYPE)
    n, m = C.shape
    reps = max(1, math.ceil(n / m))
    expanded = np.repeat(C, reps, axis=1)
    pairs, _ = hungarian_align(expanded)
    plan = np.zeros_like(C)
    for r, c in pairs:
        plan[r, c // reps] = 1.0
    return plan


def euclidean_align(features, prompts) -> float:
    """``sum_t sum_i ||f_t - g_i||^2`` over all pairs."""
    return float(sqeuclidean_cost(features, prompts).values.sum())


def mean_prompt(prompts, eps: float = 1e-12) -> np.ndarray:
    """Average the prompt rows (last two axes ``N x D``) and re-normalise."""
    g = np.asarray(prompts, dtype=DTYPE)
    if g.shape[-2] == 1:
        # a one-prompt average is that prompt
        return g.copy()
    mean = g.mean(axis=-2, keepdims=True)
    out, degenerate = l2_normalize_rows(mean, eps)
    if degenerate.any():
        raise DegenerateError("mean prompt has (near) zero norm; prompts cancel out")
    return out


def mean_prompt_backward(prompts, grad_mean) -> np.ndarray:
    """Gradient w.r.t. the prompts given the gradient w.r.t. ``mean_prompt``."""
    g = np.asarray(prompts, dtype=DTYPE)
    n = g.shape[-2]
    if n == 1:
        return np.asarray(grad_mean, dtype=DTYPE).copy()
    mean = g.mean(axis=-2, keepdims=True)
    norm = np.linalg.norm(mean, axis=-1, keepdims=True)
    unit = mean / norm
    proj = grad_mean - np.sum(grad_mean * unit, axis=-1, keepdims=True) * unit
    return np.broadcast_to(proj / norm / n, g.shape).copy()


def mean_prompt_align(features, prompts, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity of each feature row against the averaged prompt."""
    f = np.asarray(features, dtype=DTYPE)
    g = mean_prompt(prompts, eps)
    if f.shape[-1] != g.shape[-1]:
        raise ShapeError(f"mean_prompt_align: feature dim {f.shape} vs prompt dim {g.shape}")
    return (f @ g[0]) if g.ndim == 2 else np.einsum("td,bd->bt", f, g[:, 0])

