"""Flow-matching objective, temporal-delta auxiliary loss, and training plans.

Noising follows the linear interpolant x_t = (1 - sigma) x0 + sigma eps with
velocity target u_t = eps - x0, so the clean latent is recovered exactly from
a prediction u by x0_hat = x_t - sigma * u. The auxiliary loss penalizes the
mismatch of within-chunk inter-frame deltas and is weighted by
alpha * exp(-gamma * Var(delta x0)), enabled after a warmup.

Four training regimes (plus the reference-cache variant) are expressed as
:class:`TrainingPlan` values: per-chunk noise levels, a chunk loss mask, a
noise-replacement drop set, and optional reference-prepend instructions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .framegraph import FrameGraph
from .numerics import Tensor

REGIMES = ("all_history", "noisy_memory", "node_drop", "v2v_frontier", "reference_cache")

ALPHA_DEFAULT = 0.2
GAMMA_DEFAULT = 5.0
# Desk-scale warmup; the production-scale setting is 2,000 iterations.
WARMUP_DEFAULT = 200


class CurriculumError(ValueError):
    pass


@dataclass(frozen=True)
class CurriculumConfig:
    sigma_min: float = 0.02
    sigma_max: float = 0.98
    noisy_sigma_min: float = 0.8
    noisy_sigma_max: float = 1.0
    gap_min: int = 2
    gap_max: int = 8
    ref_chunks: int = 1
    alpha: float = ALPHA_DEFAULT
    gamma: float = GAMMA_DEFAULT
    warmup: int = WARMUP_DEFAULT


@dataclass
class TrainingPlan:
    sigmas: np.ndarray  # (chunks,) noise level per chunk
    loss_mask: np.ndarray  # (chunks,) 0/1
    drop_set: frozenset = frozenset()
    cache_prepend: tuple[tuple[int, ...], int] | None = None  # (ref chunk ids, gap G)
    regime: str = "all_history"

    def validate(self, graph: FrameGraph | None = None) -> None:
        if not (0.0 <= self.sigmas).all() or not (self.sigmas <= 1.0).all():
            raise CurriculumError("chunk noise levels must lie in [0, 1]")
        if self.loss_mask.sum() < 1:
            raise CurriculumError("loss mask must select at least one chunk")
        if graph is not None:
            protected = {n.chunk_id for n in graph.nodes if n.protected}
            if protected & set(self.drop_set):
                raise CurriculumError("drop set touches a protected anchor")


@dataclass(frozen=True)
class LossBundle:
    flow: float
    delta: float
    lam: float

    @property
    def total(self) -> float:
        return self.flow + self.lam * self.delta

    def validate(self) -> None:
        for v in (self.flow, self.delta, self.lam, self.total):
            if not np.isfinite(v):
                raise CurriculumError(f"non-finite loss bundle: {self}")
        if self.lam < 0:
            raise CurriculumError("adaptive weight must be nonnegative")


# ---------------------------------------------------------------------------
# objective pieces


def noise_sample(
    x0: np.ndarray, sigma_t: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """x_t = (1 - sigma) x0 + sigma eps and target u_t = eps - x0."""
    if not 0.0 <= sigma_t <= 1.0:
        raise CurriculumError(f"sigma must lie in [0, 1], got {sigma_t}")
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = (1.0 - sigma_t) * x0 + sigma_t * eps
    return x_t, eps - x0


def flow_loss(pred: Tensor, u_t: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean squared error over the elements of mask-selected chunks.

    ``pred`` and ``u_t`` are (chunks, ...); the mask has one entry per chunk.
    """
    loss_mask = np.asarray(loss_mask, dtype=float)
    selected = loss_mask.sum()
    if selected < 1:
        raise CurriculumError("flow loss needs at least one masked-in chunk")
    per_chunk = int(np.prod(pred.shape[1:]))
    weights = loss_mask.reshape((-1,) + (1,) * (len(pred.shape) - 1)) / (
        selected * per_chunk
    )
    diff = pred - Tensor(np.asarray(u_t, dtype=pred.dtype))
    return nm.sum_(nm.mul(nm.mul(diff, diff), Tensor(weights.astype(pred.dtype))))


def delta_loss(
    x0_hat: Tensor, x0: np.ndarray, loss_mask: np.ndarray | None = None
) -> Tensor:
    """Squared mismatch of within-chunk temporal deltas, averaged.

    Inputs are (chunks, frames_per_chunk, ...); deltas are taken between
    consecutive frames inside each chunk. Invariant to any constant offset
    applied to whole frames.
    """
    if x0_hat.shape[1] < 2:
        raise CurriculumError("delta loss needs at least two frames per chunk")
    fpc = x0_hat.shape[1]
    d_hat = nm.add(
        nm.slice_axis(x0_hat, 1, 1, fpc), -nm.slice_axis(x0_hat, 1, 0, fpc - 1)
    )
    x0 = np.asarray(x0, dtype=x0_hat.dtype)
    d_true = x0[:, 1:] - x0[:, :-1]
    diff = d_hat - Tensor(d_true)
    if loss_mask is None:
        loss_mask = np.ones(x0_hat.shape[0])
    loss_mask = np.asarray(loss_mask, dtype=float)
    selected = loss_mask.sum()
    if selected < 1:
        raise CurriculumError("delta loss needs at least one masked-in chunk")
    per_chunk = int(np.prod(d_true.shape[1:]))
    weights = loss_mask.reshape((-1,) + (1,) * (len(d_true.shape) - 1)) / (
        selected * per_chunk
    )
    return nm.sum_(nm.mul(nm.mul(diff, diff), Tensor(weights.astype(x0_hat.dtype))))


def sigma_batch(x0_batch: np.ndarray) -> float:
    """Population variance of all consecutive-frame differences in the batch.

    Accepts (batch, chunks, frames_per_chunk, ...) or (batch, frames, ...);
    chunked input is flattened to the global frame order first.
    """
    x = np.asarray(x0_batch, dtype=np.float64)
    if x.ndim >= 4:
        x = x.reshape(x.shape[0], x.shape[1] * x.shape[2], *x.shape[3:])
    if x.shape[1] < 2:
        raise CurriculumError("sigma_batch needs at least two frames")
    deltas = x[:, 1:] - x[:, :-1]
    return float(deltas.var())


def adaptive_weight(
    sigma_b: float,
    iteration: int,
    alpha: float = ALPHA_DEFAULT,
    gamma: float = GAMMA_DEFAULT,
    warmup: int = WARMUP_DEFAULT,
) -> float:
    """alpha * exp(-gamma * sigma_batch), zero before the warmup iteration."""
    if sigma_b < 0:
        raise CurriculumError("sigma_batch must be nonnegative")
    if iteration < warmup:
        return 0.0
    return alpha * float(np.exp(-gamma * sigma_b))


# ---------------------------------------------------------------------------
# regime plans


def applicable_regimes(graph: FrameGraph, regimes: tuple[str, ...]) -> tuple[str, ...]:
    """Subset of ``regimes`` this graph supports."""
    out = []
    has_recovery = bool(graph.role_chunks("recovery"))
    has_interruption = bool(graph.role_chunks("interruption"))
    tail_degraded = graph.degradation_interval is not None and not has_recovery
    for r in regimes:
        if r == "node_drop" and not (has_interruption and has_recovery):
            continue
        if r in ("v2v_frontier", "reference_cache") and tail_degraded:
            continue
        out.append(r)
    return tuple(out)


def make_plan(
    graph: FrameGraph,
    regime: str,
    rng: np.random.Generator,
    cfg: CurriculumConfig | None = None,
) -> TrainingPlan:
    """Per-chunk noise/mask/drop instructions for one regime sample."""
    cfg = cfg or CurriculumConfig()
    n = len(graph.nodes)
    if regime not in REGIMES:
        raise CurriculumError(f"unknown regime {regime!r}")
    sigmas = np.zeros(n)
    mask = np.zeros(n)
    drop: frozenset = frozenset()
    prepend = None

    if regime == "all_history":
        sigmas = rng.uniform(cfg.sigma_min, cfg.sigma_max, size=n)
        mask[:] = 1.0
    elif regime == "noisy_memory":
        if n < 2:
            raise CurriculumError("noisy_memory needs at least two chunks")
        current = int(rng.integers(1, n))
        sigmas = rng.uniform(cfg.noisy_sigma_min, cfg.noisy_sigma_max, size=n)
        sigmas[current] = rng.uniform(cfg.sigma_min, cfg.sigma_max)
        mask[current] = 1.0
    elif regime == "node_drop":
        interruption = graph.role_chunks("interruption")
        recovery = graph.role_chunks("recovery")
        if not interruption or not recovery:
            raise CurriculumError("node_drop needs interruption and recovery nodes")
        drop = frozenset(interruption)
        suffix_start = min(recovery)
        mask[suffix_start:] = 1.0
        sigmas[suffix_start:] = rng.uniform(
            cfg.sigma_min, cfg.sigma_max, size=n - suffix_start
        )
        sigmas[list(drop)] = 1.0
    elif regime in ("v2v_frontier", "reference_cache"):
        recovery = graph.role_chunks("recovery")
        if graph.degradation_interval is not None and not recovery:
            raise CurriculumError("frontier training needs a recovery suffix")
        if recovery:
            frontier = min(recovery)
        elif n < 2:
            raise CurriculumError("frontier training needs at least two chunks")
        else:
            frontier = int(rng.integers(1, n))
        mask[frontier:] = 1.0
        sigmas[frontier:] = rng.uniform(cfg.sigma_min, cfg.sigma_max, size=n - frontier)
        if regime == "reference_cache":
            gap = int(rng.integers(max(cfg.gap_min, cfg.ref_chunks), cfg.gap_max + 1))
            prepend = (tuple(range(cfg.ref_chunks)), gap)

    plan = TrainingPlan(
        sigmas=sigmas,
        loss_mask=mask,
        drop_set=drop,
        cache_prepend=prepend,
        regime=regime,
    )
    plan.validate(graph)
    return plan
