"""Training objectives.

Every per-ray objective is a batch MEAN (not a sum), so the loss weights are
independent of batch size. The beta prior operates on a contracted-then-
clipped copy of the accumulated foreground density,

    A' = clamp(0.5 + 2*half_width*(A - 0.5), clip_lo, clip_hi),

which with half_width 0.4 maps [0,1] -> [0.1, 0.9]: the log terms stay finite
and their gradients bounded even for fully-empty or fully-opaque rays. The
prior is applied only to the top-k fraction of rays by per-ray value, with k
following a staged schedule (hard-negative focusing).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    lambda_bg: float = 1.0
    lambda_sparse: float = 1e-3
    lambda_beta: float = 1e-4
    lambda_warp: float = 1e-5

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class BetaPriorParams:
    alpha: float = 3.0
    beta: float = 2.0
    clip_lo: float = 1e-4
    clip_hi: float = 1.0 - 1e-4
    contract_half_width: float = 0.4

    def __post_init__(self):
        if not (self.alpha > 1 and self.beta > 1):
            raise ValueError("alpha and beta must exceed 1")
        if not (0 < self.clip_lo < self.clip_hi < 1):
            raise ValueError("clip bounds must satisfy 0 < lo < hi < 1")


@dataclass
class BetaSchedule:
    """Ordered (duration, k_frac) stages; the last stage runs forever."""
    stages: list[tuple[float, float]] = field(default_factory=lambda: [
        (50_000, 0.0), (50_000, 0.5), (50_000, 0.25), (50_000, 0.1),
        (float("inf"), 0.05),
    ])

    def __post_init__(self):
        for _, k in self.stages:
            if not (0.0 <= k <= 1.0):
                raise ValueError("k fractions must lie in [0, 1]")
        if self.stages[-1][0] != float("inf"):
            raise ValueError("last stage must be unbounded")

    def scaled(self, factor: float) -> "BetaSchedule":
        """Stage durations multiplied by ``factor`` (desk-scale runs)."""
        return BetaSchedule([(d * factor if np.isfinite(d) else d, k)
                             for d, k in self.stages])


def schedule_kfrac(schedule: BetaSchedule, iteration: int) -> float:
    """k fraction of the stage containing ``iteration`` (cumulative boundaries)."""
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    edge = 0.0
    for duration, k in schedule.stages:
        edge += duration
        if iteration < edge:
            return k
    return schedule.stages[-1][1]


def photometric_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rays of the squared L2 color error."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = ad.sub(pred, target.astype(pred.dtype))
    return ad.tmean(ad.tsum(ad.mul(diff, diff), axis=-1))


def sparsity_loss(alpha_fg: Tensor) -> Tensor:
    """Mean accumulated foreground density (L1 on values already in [0,1])."""
    return ad.tmean(alpha_fg)


def beta_loss(alpha_fg: Tensor, params: BetaPriorParams, k_frac: float) -> Tensor:
    """Beta(alpha, beta) log-density of the contracted A_f, meaned over the
    top-k fraction of rays by per-ray value (ties broken by ray index)."""
    if k_frac == 0.0:
        return Tensor(np.zeros((), dtype=alpha_fg.dtype))
    contracted = ad.add(0.5, ad.mul(2.0 * params.contract_half_width,
                                    ad.sub(alpha_fg, 0.5)))
    a_prime = ad.clip(contracted, params.clip_lo, params.clip_hi)
    per_ray = ad.add(ad.mul(params.alpha - 1.0, ad.log(a_prime)),
                     ad.mul(params.beta - 1.0, ad.log(ad.sub(1.0, a_prime))))
    n = per_ray.size
    m = int(np.ceil(k_frac * n))
    if m >= n:
        return ad.tmean(per_ray)
    values = per_ray.numpy()
    # Highest values first; stable sort on -value keeps ray order among ties.
    order = np.argsort(-values, kind="stable")[:m]
    return ad.tmean(ad.gather(per_ray, order, axis=0))


def warp_loss(residuals: Tensor) -> Tensor:
    """Mean squared norm of the deformation residuals at the render samples."""
    sq = ad.tsum(ad.mul(residuals, residuals), axis=-1)
    return ad.tmean(sq)


def density_perturbation(sigma: Tensor, iteration: int, cutoff: int,
                         rng: np.random.Generator) -> Tensor:
    """sigma + N(0,1) noise, clamped nonnegative, while iteration < cutoff.

    Identity (the same tensor object) once the cutoff has passed.
    """
    if iteration >= cutoff:
        return sigma
    noise = rng.standard_normal(sigma.shape).astype(sigma.dtype)
    return ad.relu(ad.add(sigma, noise))


_PARTS = ("fg", "bg", "sparse", "beta", "warp")


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """fg + lambda_bg*bg + lambda_sparse*sparse + lambda_beta*beta + lambda_warp*warp."""
    missing = [p for p in _PARTS if p not in parts]
    if missing:
        raise KeyError(f"missing loss parts: {missing}")
    return ad.add(
        parts["fg"],
        ad.add(ad.mul(weights.lambda_bg, parts["bg"]),
               ad.add(ad.mul(weights.lambda_sparse, parts["sparse"]),
                      ad.add(ad.mul(weights.lambda_beta, parts["beta"]),
                             ad.mul(weights.lambda_warp, parts["warp"])))))
