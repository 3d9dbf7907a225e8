"""Turbo compressed sensing for partial-orthogonal sensing operators.

Module A is the LMMSE estimator for ``r = A g + w`` with ``A A^H = I``;
module B is the per-entry MMSE denoiser for a Bernoulli-Gaussian prior.  The
two exchange extrinsic means and variances until the variance settles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

__all__ = [
    "EXTRINSIC_CLAMP",
    "PriorParams",
    "TurboResult",
    "bg_denoise",
    "bg_responsibility",
    "em_update_prior",
    "extrinsic",
    "lmmse_step",
    "run_turbo_cs",
]

EXTRINSIC_CLAMP = 1e8
LAMBDA_FLOOR = 1e-6


@dataclass(frozen=True)
class PriorParams:
    """Bernoulli-Gaussian prior: zero w.p. ``1 - sparsity``, else ``CN(0, variance)``."""

    sparsity: float
    variance: float

    def __post_init__(self):
        if not 0.0 < self.sparsity <= 1.0:
            raise ValueError(f"sparsity must lie in (0, 1], got {self.sparsity}")
        if not self.variance > 0:
            raise ValueError(f"nonzero variance must be positive, got {self.variance}")

    @property
    def second_moment(self) -> float:
        return self.sparsity * self.variance

    @classmethod
    def unit_power(cls, sparsity: float) -> "PriorParams":
        return cls(sparsity, 1.0 / sparsity)


def lmmse_step(mean_pri, v_pri: float, r, op, sigma_w: float):
    """Posterior mean and variance of module A.

    ``op`` provides ``compress``/``adjoint`` and ``kappa``.
    """
    if not v_pri > 0:
        raise ValueError(f"prior variance must be positive, got {v_pri}")
    if sigma_w < 0:
        raise ValueError("sigma_w must be non-negative")
    gain = v_pri / (v_pri + sigma_w)
    mean_post = mean_pri + gain * op.adjoint(r - op.compress(mean_pri))
    v_post = v_pri - op.kappa * v_pri * gain
    return mean_post, max(v_post, 0.0)


def extrinsic(mean_post, v_post: float, mean_pri, v_pri: float):
    """Remove the prior's contribution from a Gaussian posterior.

    Returns ``(mean_ext, v_ext, ok)``.  A non-contracting step
    (``v_post >= v_pri``) is clamped to ``v_ext = EXTRINSIC_CLAMP`` with the
    posterior mean passed through and ``ok = False``.  ``v_post = 0`` gives
    the exact limit ``(mean_post, 0)``.
    """
    if v_post <= 0.0:
        return mean_post, 0.0, True
    if v_post >= v_pri:
        return mean_post, EXTRINSIC_CLAMP, False
    v_ext = 1.0 / (1.0 / v_post - 1.0 / v_pri)
    mean_ext = v_ext * (mean_post / v_post - mean_pri / v_pri)
    return mean_ext, v_ext, True


def bg_responsibility(y, v: float, prior: PriorParams):
    """Posterior probability that each entry is active given ``y = g + CN(0, v)``."""
    s1 = prior.variance + v
    r2 = np.abs(y) ** 2
    lam = prior.sparsity
    if lam >= 1.0:
        return np.ones(np.shape(y))
    # log of lam CN(y; 0, s1) / ((1 - lam) CN(y; 0, v))
    logit = (np.log(lam) - np.log1p(-lam) + np.log(v / s1) + r2 * (1.0 / v - 1.0 / s1))
    return expit(logit)


def bg_denoise(y, v: float, prior: PriorParams):
    """Per-entry MMSE estimate and the averaged posterior variance."""
    if not v > 0:
        raise ValueError(f"noise variance must be positive, got {v}")
    y = np.asarray(y)
    pi = bg_responsibility(y, v, prior)
    shrink = prior.variance / (prior.variance + v)
    active_mean = shrink * y
    mean = pi * active_mean
    var = pi * shrink * v + pi * (1.0 - pi) * np.abs(active_mean) ** 2
    return mean, float(np.mean(var))


def em_update_prior(y, v: float, prior: PriorParams):
    """One expectation-maximisation step on ``(sparsity, variance)``.

    Returns ``(new_prior, clamped)``; ``clamped`` is set when the sparsity
    estimate collapsed below ``1e-6`` and was floored there.
    """
    y = np.asarray(y)
    pi = bg_responsibility(y, v, prior)
    shrink = prior.variance / (prior.variance + v)
    second = np.abs(shrink * y) ** 2 + shrink * v
    lam = float(np.mean(pi))
    clamped = lam < LAMBDA_FLOOR
    if clamped:
        logger.warning("EM sparsity estimate collapsed to %.3g; flooring", lam)
        return PriorParams(LAMBDA_FLOOR, prior.variance), True
    var = float(np.sum(pi * second) / np.sum(pi))
    return PriorParams(min(lam, 1.0), max(var, np.finfo(float).tiny)), False


@dataclass
class TurboResult:
    estimate: np.ndarray
    iterations: int
    v_trace: list = field(default_factory=list)    # (v_A_pri, v_B_pri) per iteration
    v_post: float = 0.0                            # final v_B_post
    converged: bool = False
    diverged: bool = False
    clamped_steps: int = 0
    prior: PriorParams | None = None


def run_turbo_cs(r, op, sigma_w: float, prior: PriorParams, max_iter: int = 50,
                 tol: float = 1e-6, em: bool = False, damping: float = 0.0,
                 v_init: float = 1.0) -> TurboResult:
    """Recover ``g`` from ``r = A g + w`` with ``w ~ CN(0, sigma_w)``.

    Starts from the zero mean and ``v_A_pri = v_init``; stops when the
    change of ``v_A_pri`` drops below ``tol`` or after ``max_iter`` rounds.
    ``damping`` in ``[0, 1)`` blends each new extrinsic mean with the
    previous one.  The estimate is module B's posterior mean; when the
    variance rises for 5 consecutive iterations the run stops as diverged
    and returns the posterior mean with the smallest posterior variance seen.
    """
    r = np.asarray(r, dtype=complex)
    if r.shape != (op.compressed_len,):
        raise ValueError(f"observation must have length {op.compressed_len}")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    mean_a = np.zeros(op.half_dim, dtype=complex)
    v_a = float(v_init)
    estimate = mean_a
    v_b_post = v_a
    trace = []
    clamped = 0
    rising = 0
    diverged = converged = False
    prev_b = None
    best = (np.inf, estimate)
    it = 0
    for it in range(1, max_iter + 1):
        post_a, v_post_a = lmmse_step(mean_a, v_a, r, op, sigma_w)
        mean_b, v_b, ok = extrinsic(post_a, v_post_a, mean_a, v_a)
        clamped += not ok
        if v_b == 0.0:
            # noiseless full-rank case: module A already inverted exactly
            trace.append((v_a, 0.0))
            estimate, v_b_post, converged = post_a, 0.0, True
            break
        if damping and prev_b is not None:
            mean_b = damping * prev_b + (1 - damping) * mean_b
        prev_b = mean_b
        trace.append((v_a, v_b))
        if em:
            prior, _ = em_update_prior(mean_b, v_b, prior)
        estimate, v_b_post = bg_denoise(mean_b, v_b, prior)
        if v_b_post < best[0]:
            best = (v_b_post, estimate)
        new_mean_a, new_v_a, ok = extrinsic(estimate, v_b_post, mean_b, v_b)
        clamped += not ok
        if new_v_a == 0.0:
            converged = True
            break
        rising = rising + 1 if new_v_a > v_a else 0
        if rising >= 5:
            logger.warning("Turbo-CS variance rose for 5 consecutive iterations")
            diverged = True
            v_b_post, estimate = best
            break
        change = abs(new_v_a - v_a)
        mean_a, v_a = new_mean_a, new_v_a
        if change < tol:
            converged = True
            break
    return TurboResult(estimate=estimate, iterations=it, v_trace=trace, v_post=v_b_post,
                       converged=converged, diverged=diverged, clamped_steps=clamped, prior=prior)
