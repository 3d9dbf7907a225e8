"""Scalar performance analysis: state evolution, error bounds and the stream-count scan."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .turbo_cs import PriorParams

logger = logging.getLogger(__name__)

__all__ = [
    "AnalysisParams",
    "ScanRow",
    "SeTrace",
    "StateEvolutionDivergence",
    "bound_trajectory",
    "convergence_constants",
    "mmse_monte_carlo",
    "mmse_scalar",
    "scan_streams",
    "se_fixed_point",
    "sparsification_bound",
    "write_scan_csv",
]


class StateEvolutionDivergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# scalar MMSE of the Bernoulli-Gaussian channel


def _radial_rule(n_panels: int = 48, order: int = 16, u_max: float = 80.0):
    """Composite Gauss-Legendre nodes/weights for int_0^inf f(u) e^{-u} du.

    Panels are geometrically spaced so the sharp responsibility switch is
    resolved whatever its location.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.concatenate([[0.0], np.geomspace(1e-10, u_max, n_panels)])
    a, b = edges[:-1, None], edges[1:, None]
    nodes = (0.5 * (b - a) * x + 0.5 * (b + a)).ravel()
    weights = (0.5 * (b - a) * w).ravel() * np.exp(-nodes)
    return nodes, weights


_NODES, _WEIGHTS = _radial_rule()


def _posterior_variance(r2, v, prior: PriorParams):
    # per-entry var(g | y) as a function of |y|^2 = r2
    lam, sg = prior.sparsity, prior.variance
    shrink = sg / (sg + v)
    if lam >= 1.0:
        return np.full(np.shape(r2), shrink * v)
    logit = math.log(lam) - math.log1p(-lam) + math.log(v / (sg + v)) + r2 * (1 / v - 1 / (sg + v))
    pi = expit(logit)
    return pi * shrink * v + pi * (1 - pi) * shrink ** 2 * r2


def mmse_scalar(z: float, prior: PriorParams) -> float:
    """``E[var(g | g + delta)]`` with ``delta ~ CN(0, 1/z)``.

    The observation is a two-component circular Gaussian mixture, so
    ``|y|^2`` scaled by each component's variance is Exp(1).  The radial
    integral is evaluated with a fixed 768-node composite Gauss-Legendre rule.
    """
    if not z > 0:
        raise ValueError(f"precision z must be positive, got {z}")
    if math.isinf(z):
        return 0.0
    v = 1.0 / z
    lam, sg = prior.sparsity, prior.variance
    active = np.dot(_WEIGHTS, _posterior_variance(_NODES * (sg + v), v, prior))
    if lam >= 1.0:
        return float(active)
    silent = np.dot(_WEIGHTS, _posterior_variance(_NODES * v, v, prior))
    return float(lam * active + (1 - lam) * silent)


def mmse_monte_carlo(z: float, prior: PriorParams, n: int = 10**6, seed=0) -> float:
    """Sampling estimate of :func:`mmse_scalar` used for validation."""
    rng = np.random.default_rng(seed)
    v = 1.0 / z
    on = rng.random(n) < prior.sparsity
    g = np.where(on, math.sqrt(prior.variance / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n)), 0)
    y = g + math.sqrt(v / 2) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return float(np.mean(_posterior_variance(np.abs(y) ** 2, v, prior)))


# ---------------------------------------------------------------------------
# state evolution


@dataclass
class SeTrace:
    v: list
    z: list
    v_star: float
    final_mse: float
    iterations: int
    converged: bool
    kappa: float
    sigma_w: float
    prior: PriorParams


def se_fixed_point(kappa: float, sigma_w: float, prior: PriorParams, tol: float = 1e-10,
                   max_iter: int = 10000, v0: float = 1.0) -> SeTrace:
    """Iterate the two variance transfer functions from ``v = v0``.

        z = ((v + sigma_w) / kappa - v)^{-1}
        v = (1 / mmse(z) - z)^{-1}

    ``v_star`` is the fixed point of the LMMSE-side prior variance and
    ``final_mse = mmse(z_star)`` is the predicted per-entry error of the
    denoiser output.
    """
    if not 0 < kappa <= 1:
        raise ValueError("kappa must lie in (0, 1]")
    if sigma_w < 0:
        raise ValueError("sigma_w must be non-negative")
    v = float(v0)
    vs, zs = [v], []
    converged = False
    mse = v
    it = 0
    for it in range(1, max_iter + 1):
        ext = (v + sigma_w) / kappa - v
        if ext <= 0.0:
            # noiseless full sampling: one LMMSE pass is exact
            zs.append(math.inf)
            vs.append(0.0)
            v, mse, converged = 0.0, 0.0, True
            break
        z = 1.0 / ext
        mse = mmse_scalar(z, prior)
        denom = 1.0 / mse - z if mse > 0 else math.inf
        if not denom > 0:
            raise StateEvolutionDivergence(
                f"denoiser gives no gain at z={z:.4g} (mmse={mse:.4g}); v grows without bound")
        v_new = 1.0 / denom
        zs.append(z)
        vs.append(v_new)
        if not math.isfinite(v_new):
            raise StateEvolutionDivergence(f"non-finite variance at iteration {it}")
        done = abs(v_new - v) < tol
        v = v_new
        if done:
            converged = True
            break
    if not converged:
        logger.warning("state evolution did not settle within %d iterations", max_iter)
    return SeTrace(v=vs, z=zs, v_star=v, final_mse=mse, iterations=it, converged=converged,
                   kappa=kappa, sigma_w=sigma_w, prior=prior)


# ---------------------------------------------------------------------------
# learning-performance bounds


@dataclass(frozen=True)
class AnalysisParams:
    smoothness: float
    strong_convexity: float
    chi1: float
    chi2: float
    n_devices: int
    sparsity: float
    sigma_bar: float = 1.0

    def __post_init__(self):
        if not (0 < self.strong_convexity <= self.smoothness * (1 + 1e-12)):
            raise ValueError("need 0 < mu <= omega")
        if self.chi1 < 0 or self.chi2 < 0:
            raise ValueError("chi constants must be non-negative")
        if not 0 <= self.sparsity < 1:
            raise ValueError("bounds need sparsity ratio in [0, 1)")

    @property
    def sparsification_factor(self) -> float:
        lam = self.sparsity
        return 4 * self.n_devices * lam ** 2 / (1 - lam) ** 2


def sparsification_bound(params: AnalysisParams, grad_norm_sq: float) -> float:
    """``4 M lam^2 / (1 - lam)^2 (chi1 + chi2 ||grad F||^2)``."""
    return params.sparsification_factor * (params.chi1 + params.chi2 * grad_norm_sq)


def convergence_constants(params: AnalysisParams, v_star: float):
    """Contraction factor ``Psi`` and per-round offset ``C``.

    ``v_star`` is the total (not per-entry) recovery MSE of the normalised
    aggregate.
    """
    mu, om = params.strong_convexity, params.smoothness
    s = params.sparsification_factor
    psi = 1 - mu / om + (2 * mu * params.chi2 / om) * s
    c = (params.chi1 * s + params.sigma_bar * v_star) / om
    return psi, c


def bound_trajectory(psi: float, f0_gap: float, offsets, n_rounds: int) -> np.ndarray:
    """Upper bound on ``F(theta^(t+1)) - F*`` for ``t = 0 .. n_rounds-1``.

    Unrolls ``gap_{t+1} <= psi gap_t + C_t`` exactly:
    ``f0_gap psi^(t+1) + sum_{tau=0}^{t} psi^(t - tau) C_tau``.
    """
    if n_rounds < 1:
        raise ValueError("need at least one round")
    offsets = np.broadcast_to(np.asarray(offsets, dtype=float), (n_rounds,))
    out = np.empty(n_rounds)
    acc = f0_gap
    for t in range(n_rounds):
        acc = psi * acc + offsets[t]
        out[t] = acc
    return out


# ---------------------------------------------------------------------------
# stream-count scan


@dataclass
class ScanRow:
    n_streams: int
    kappa: float
    sigma_w: float
    v_star: float
    C: float


def scan_streams(k_fixed: int, n_tx: int, n_rx: int, model_dim: int, prior: PriorParams,
                 sigma_w_of, params: AnalysisParams | None = None, n_max: int | None = None):
    """Evaluate the convergence offset for every stream count at fixed ``K``.

    ``sigma_w_of(n_streams)`` returns the aggregation MSE relative to the
    unit-power normalised signal.  ``kappa = N_S K / (D/2)`` is capped at 1.
    Returns ``(rows, best_n_streams)``.
    """
    half = model_dim // 2
    n_max = n_tx + n_rx if n_max is None else n_max
    rows = []
    for n_s in range(1, n_max + 1):
        kappa = min(1.0, n_s * k_fixed / half)
        sw = float(sigma_w_of(n_s))
        trace = se_fixed_point(kappa, sw, prior)
        v_total = trace.v_star * half
        if params is None:
            c = v_total
        else:
            c = convergence_constants(params, v_total)[1]
        rows.append(ScanRow(n_streams=n_s, kappa=kappa, sigma_w=sw, v_star=trace.v_star, C=c))
    best = min(rows, key=lambda r: r.C).n_streams
    return rows, best


def write_scan_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N_S", "kappa", "sigma_w", "v_star", "C"])
        for r in rows:
            w.writerow([r.n_streams, f"{r.kappa:.17g}", f"{r.sigma_w:.17g}", f"{r.v_star:.17g}", f"{r.C:.17g}"])
