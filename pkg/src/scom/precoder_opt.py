"""Joint design of the post-processing matrix and the device precoders.

The aggregation error per received symbol is a quadratic function of the
post-processor ``F`` for fixed precoders and of each precoder ``P_m`` for a
fixed ``F`` and fixed other precoders.  :func:`ao_admm` alternates the
closed-form ``F`` update with a consensus-ADMM solve of each power-constrained
precoder subproblem.  :func:`zero_forcing` is the channel-inversion baseline.

Array conventions: ``H`` is ``(M, N_R, N_T)``, ``P`` is ``(M, N_T, N_S)`` and
``F`` is ``(N_S, N_R)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "AdmmResult",
    "CorrelationModel",
    "PrecoderSolution",
    "admm_precoder",
    "ao_admm",
    "build_quadratics",
    "initial_precoders",
    "objective",
    "penalty",
    "precoder_subobjective",
    "update_post_processor",
    "zero_forcing",
]


def _h(x):
    return np.conj(np.swapaxes(x, -1, -2))


@dataclass(frozen=True)
class CorrelationModel:
    """Spatial correlation ``rho`` between device frames and aggregation weights ``q``."""

    rho: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        q = np.asarray(self.weights, dtype=float)
        m = q.size
        if rho.shape != (m, m):
            raise ValueError(f"rho must be {m}x{m}, got {rho.shape}")
        if not np.allclose(rho, rho.T, atol=1e-12):
            raise ValueError("rho must be symmetric")
        if not np.allclose(np.diag(rho), 1.0, atol=1e-9):
            raise ValueError("rho must have a unit diagonal")
        off = rho[~np.eye(m, dtype=bool)]
        if off.size and (off.min() < -1e-12 or off.max() > 1 + 1e-12):
            raise ValueError("off-diagonal correlations must lie in [0, 1]")
        if np.linalg.eigvalsh(rho).min() < -1e-9:
            raise ValueError("rho must be positive semidefinite")
        if np.any(q < 0) or not math.isclose(q.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "weights", q)

    @classmethod
    def constant(cls, weights, rho0: float = 0.0) -> "CorrelationModel":
        """Identity plus a constant off-diagonal correlation ``rho0``."""
        q = np.asarray(weights, dtype=float)
        m = q.size
        rho = np.full((m, m), float(rho0))
        np.fill_diagonal(rho, 1.0)
        return cls(rho=rho, weights=q)

    @classmethod
    def uniform(cls, n_devices: int, rho0: float = 0.0) -> "CorrelationModel":
        return cls.constant(np.full(n_devices, 1.0 / n_devices), rho0)

    @classmethod
    def from_frames(cls, frames, weights) -> "CorrelationModel":
        """Estimate ``rho`` from one round of frames.

        Normalised real inner products, negatives clipped to zero and, if the
        result is indefinite, shrunk toward the identity just enough to be
        positive semidefinite.
        """
        m = len(frames)
        rho = np.eye(m)
        live = [i for i, G in enumerate(frames) if G is not None and np.any(G)]
        if live:
            X = np.stack([np.asarray(frames[i]).reshape(-1) for i in live])
            gram = np.real(X @ X.conj().T)
            d = np.sqrt(np.diag(gram))
            sub = np.clip(gram / np.outer(d, d), 0.0, 1.0)
            np.fill_diagonal(sub, 1.0)
            rho[np.ix_(live, live)] = sub
        return cls(rho=_shrink_to_psd(rho), weights=weights)

    @property
    def signal_power(self) -> float:
        """Per-entry power ``q^T rho q`` of the target aggregate."""
        return float(self.weights @ self.rho @ self.weights)


def _shrink_to_psd(rho: np.ndarray) -> np.ndarray:
    m = rho.shape[0]
    if np.linalg.eigvalsh(rho).min() >= 0:
        return rho
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.linalg.eigvalsh((1 - mid) * rho + mid * np.eye(m)).min() >= 0:
            hi = mid
        else:
            lo = mid
    out = (1 - hi) * rho + hi * np.eye(m)
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------------
# objective and closed-form post-processor


def _effective(F, H, P):
    # E_m = F H_m P_m, shape (M, N_S, N_S)
    return np.einsum("sr,mrt,mtk->msk", F, H, P)


def objective(F, P, H, corr: CorrelationModel, noise_power: float) -> float:
    """Expected aggregation MSE per received stream symbol.

    With unit-variance symbols whose cross-device correlation is ``rho``,
    ``E||F Y - sum_m q_m G_m||_F^2 / (N_S K)`` equals

        (1/N_S) [ sum_{m,m'} rho_{m'm} tr((E_{m'} - q_{m'} I)(E_m - q_m I)^H)
                  + noise_power ||F||_F^2 ]

    with ``E_m = F H_m P_m``.
    """
    F = np.asarray(F)
    H = np.asarray(H)
    P = np.asarray(P)
    if H.shape[0] != P.shape[0] or H.shape[2] != P.shape[1] or F.shape[1] != H.shape[1]:
        raise ValueError("inconsistent shapes for F, H, P")
    n_s = F.shape[0]
    if P.shape[2] != n_s:
        raise ValueError("precoders and post-processor disagree on N_S")
    q = corr.weights
    A = _effective(F, H, P) - q[:, None, None] * np.eye(n_s)
    # sum_{m,m'} rho_{m'm} tr(A_{m'} A_m^H)
    flat = A.reshape(A.shape[0], -1)
    cross = np.real(np.einsum("ab,ai,bi->", corr.rho, flat, flat.conj()))
    value = (cross + noise_power * np.linalg.norm(F) ** 2) / n_s
    return float(max(value, 0.0))


def update_post_processor(P, H, corr: CorrelationModel, noise_power: float) -> np.ndarray:
    """Minimiser of :func:`objective` over ``F`` for fixed precoders."""
    HP = np.einsum("mrt,mtk->mrk", H, P)             # (M, N_R, N_S)
    u = corr.rho @ corr.weights                      # u_m = sum_m' rho_{m'm} q_m'
    T = np.einsum("m,mrk->rk", u, HP)                # (N_R, N_S)
    mixed = np.einsum("ab,brk->ark", corr.rho, HP)   # sum_m rho_{a m} H_m P_m
    Q = np.einsum("ark,ask->rs", HP, mixed.conj()) + noise_power * np.eye(H.shape[1])
    Q = 0.5 * (Q + _h(Q))
    try:
        # F Q = T^H  <=>  Q^H F^H = T
        return _h(np.linalg.solve(_h(Q), T))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "post-processor system is singular; noise_power = 0 with rank-deficient channels") from exc


# ---------------------------------------------------------------------------
# per-device subproblem


def build_quadratics(m: int, F, P, H, corr: CorrelationModel, variant: str = "derived"):
    """Quadratic and linear terms of the objective as a function of ``P_m`` alone.

    The objective equals ``tr(P_m^H B P_m) - 2 Re tr(C P_m)`` plus terms
    independent of ``P_m`` (up to the common ``1/N_S`` factor).

    ``variant="derived"`` uses the expansion that matches :func:`objective`;
    ``variant="literal"`` doubles the cross-device weight term, which does not
    reproduce the objective and is kept for comparison only.
    """
    if variant not in ("derived", "literal"):
        raise ValueError(f"unknown variant {variant!r}")
    F = np.asarray(F)
    H = np.asarray(H)
    FH = F @ H[m]                                   # (N_S, N_T)
    B = _h(FH) @ FH
    q = corr.weights
    rho_col = corr.rho[:, m].copy()
    rho_col[m] = 0.0
    factor = 1.0 if variant == "derived" else 2.0
    C = q[m] * FH + factor * float(rho_col @ q) * FH
    if np.any(rho_col):
        # sum_{m' != m} rho_{m'm} P_{m'}^H H_{m'}^H F^H
        FHP = _effective(F, H, P)                       # (M, N_S, N_S)
        interference = np.einsum("a,ask->sk", rho_col, _h(FHP))
        C = C - interference @ FH
    return 0.5 * (B + _h(B)), C


def precoder_subobjective(P_m, B, C) -> float:
    return float(np.real(np.trace(_h(P_m) @ B @ P_m)) - 2 * np.real(np.trace(C @ P_m)))


@dataclass
class AdmmResult:
    P: np.ndarray
    iterations: int
    residual: float
    zeta: float
    converged: bool


def admm_precoder(B, C, power: float, gamma="auto", eps: float = 1e-4,
                  max_inner: int = 20000, P0=None) -> AdmmResult:
    """Consensus ADMM for ``min tr(P^H B P) - 2 Re tr(C P)  s.t. ||P||_F^2 <= power``.

    Iterates

        P    <- (B + gamma I)^{-1} (C^H + gamma (Z + V))
        zeta <- max(||P - V||_F / sqrt(power) - 1, 0)
        Z    <- (P - V) / (1 + zeta)
        V    <- V + Z - P

    until both the primal residual ``||P - Z||_F`` and the dual residual
    ``||Z - Z_prev||_F`` are at most ``eps``, and returns ``Z`` (always
    feasible).  The primal test alone is met trivially whenever an iterate
    lands inside the power ball, long before the penalty term has relaxed.

    ``gamma="auto"`` sets the penalty to the mean eigenvalue of ``B``; the
    iteration count grows roughly like ``lambda(B) / gamma`` for much
    smaller penalties.
    """
    if power <= 0:
        raise ValueError("power budget must be positive")
    B = np.asarray(B)
    gamma = penalty(B, gamma)
    if gamma <= 0 or eps <= 0:
        raise ValueError("gamma and eps must be positive")
    Ch = _h(np.asarray(C))
    n_t, n_s = Ch.shape
    solve = np.linalg.inv(B + gamma * np.eye(n_t))
    sqrt_p = math.sqrt(power)
    Z = np.zeros((n_t, n_s), dtype=complex) if P0 is None else _project(np.asarray(P0, complex), sqrt_p)
    V = np.zeros_like(Z)
    zeta = 0.0
    residual = math.inf
    for it in range(1, max_inner + 1):
        P = solve @ (Ch + gamma * (Z + V))
        D = P - V
        zeta = max(np.linalg.norm(D) / sqrt_p - 1.0, 0.0)
        Z_prev = Z
        Z = D / (1.0 + zeta)
        V = V + Z - P
        residual = float(np.linalg.norm(P - Z))
        if residual <= eps and np.linalg.norm(Z - Z_prev) <= eps:
            return AdmmResult(P=Z, iterations=it, residual=residual, zeta=zeta, converged=True)
    logger.warning("ADMM hit max_inner=%d with primal residual %.3g", max_inner, residual)
    return AdmmResult(P=Z, iterations=max_inner, residual=residual, zeta=zeta, converged=False)


def penalty(B, gamma="auto") -> float:
    if gamma == "auto":
        scale = float(np.real(np.trace(B))) / B.shape[0]
        return scale if scale > 0 else 1e-4
    return float(gamma)


def _project(P, sqrt_p):
    nrm = np.linalg.norm(P)
    return P if nrm <= sqrt_p else P * (sqrt_p / nrm)


# ---------------------------------------------------------------------------
# alternating optimisation


@dataclass
class PrecoderSolution:
    F: np.ndarray
    P: np.ndarray
    objective: float
    iterations: int
    trace: list = field(default_factory=list)
    max_residual: float = 0.0
    converged: bool = True

    @property
    def powers(self) -> np.ndarray:
        return np.linalg.norm(self.P.reshape(self.P.shape[0], -1), axis=1) ** 2


def initial_precoders(H, n_streams: int, power: float) -> np.ndarray:
    """``sqrt(power / N_S)`` times the leading right-singular vectors of each ``H_m``.

    When ``N_S > N_T`` the extra columns are zero-padded copies of the basis
    cycled around, rescaled so ``||P_m||_F^2 = power``.
    """
    H = np.asarray(H)
    m_dev, _, n_t = H.shape
    P = np.zeros((m_dev, n_t, n_streams), dtype=complex)
    for m in range(m_dev):
        _, _, vh = np.linalg.svd(H[m])
        V = _h(vh)                                    # (N_T, N_T)
        cols = [V[:, j % n_t] for j in range(n_streams)]
        Pm = np.stack(cols, axis=1)
        P[m] = Pm * math.sqrt(power) / np.linalg.norm(Pm)
    return P


def ao_admm(H, corr: CorrelationModel, noise_power: float, power: float, n_streams: int,
            max_outer: int = 50, gamma="auto", eps: float = 1e-4, tol: float = 1e-8,
            max_inner: int = 20000, P_init=None) -> PrecoderSolution:
    """Alternate the closed-form ``F`` with per-device ADMM precoder solves.

    A device's new precoder is kept only if it does not raise its
    subproblem value, which makes the objective sequence non-increasing even
    when an inner solve stops at a loose tolerance.
    """
    if power <= 0:
        raise ValueError("power budget must be positive")
    H = np.asarray(H)
    m_dev = H.shape[0]
    if corr.weights.size != m_dev:
        raise ValueError("correlation model and channel disagree on M")
    P = initial_precoders(H, n_streams, power) if P_init is None else np.array(P_init, dtype=complex)
    F = update_post_processor(P, H, corr, noise_power)
    obj = objective(F, P, H, corr, noise_power)
    trace = [obj]
    max_res = 0.0
    all_converged = True
    it = 0
    for it in range(1, max_outer + 1):
        F = update_post_processor(P, H, corr, noise_power)
        for m in range(m_dev):
            B, C = build_quadratics(m, F, P, H, corr)
            res = admm_precoder(B, C, power, gamma=gamma, eps=eps, max_inner=max_inner, P0=P[m])
            max_res = max(max_res, res.residual)
            all_converged &= res.converged
            if precoder_subobjective(res.P, B, C) <= precoder_subobjective(P[m], B, C):
                P[m] = res.P
        new_obj = objective(F, P, H, corr, noise_power)
        trace.append(new_obj)
        done = abs(obj - new_obj) < tol
        obj = new_obj
        if done:
            break
    # final F is optimal for the final precoders and can only lower the objective
    F_final = update_post_processor(P, H, corr, noise_power)
    final = objective(F_final, P, H, corr, noise_power)
    if final <= obj:
        F, obj = F_final, final
    return PrecoderSolution(F=F, P=P, objective=obj, iterations=it, trace=trace,
                            max_residual=max_res, converged=all_converged)


def zero_forcing(H, corr: CorrelationModel, power: float, n_streams: int,
                 noise_power: float = 0.0, selector=None) -> PrecoderSolution:
    """Channel-inversion baseline.

    ``F = a S`` with ``S`` selecting ``N_S`` receive antennas and
    ``P_m = (q_m / a) (S H_m)^+`` so that ``F H_m P_m = q_m I``.  The common
    gain ``a`` is the smallest value keeping every device within budget, so
    the weakest channel sets the noise amplification.
    """
    H = np.asarray(H)
    m_dev, n_r, n_t = H.shape
    if n_streams > min(n_t, n_r):
        raise ValueError(f"zero forcing needs N_S <= min(N_T, N_R) = {min(n_t, n_r)}")
    S = np.eye(n_r)[:n_streams] if selector is None else np.asarray(selector)
    q = corr.weights
    pinv = np.zeros((m_dev, n_t, n_streams), dtype=complex)
    for m in range(m_dev):
        SH = S @ H[m]
        if np.linalg.matrix_rank(SH) < n_streams:
            raise np.linalg.LinAlgError(f"device {m}: selected channel is rank deficient")
        pinv[m] = np.linalg.pinv(SH)
    norms = np.linalg.norm(pinv.reshape(m_dev, -1), axis=1)
    a = float(np.max(q * norms) / math.sqrt(power))
    P = (q / a)[:, None, None] * pinv
    F = a * S
    obj = objective(F, P, H, corr, noise_power)
    return PrecoderSolution(F=F, P=P, objective=obj, iterations=0, trace=[obj])
