"""Round-by-round simulation of MIMO over-the-air federated learning.

Three aggregation modes share the learning loop:

* ``scom``: sparse coding, AO-ADMM transceivers and Turbo-CS recovery
* ``zero_forcing``: the same codec and receiver with channel-inversion precoders
* ``ideal``: the exact weighted gradient average, no channel
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .. import precoder_opt as po
from ..channel import sample_channels, sample_geometry, transmit
from ..sparse_coding import (CodecConfig, DeviceCodecState, build_compressor, decomplexify,
                             encode_gradient, flatten_streams, make_flip_vector, rescale_output)
from ..state_evolution import (AnalysisParams, StateEvolutionDivergence, bound_trajectory,
                               convergence_constants, se_fixed_point, sparsification_bound)
from ..turbo_cs import PriorParams, run_turbo_cs
from .config import SimConfig
from .tasks import FederatedTask, make_synthetic_task

logger = logging.getLogger(__name__)

__all__ = [
    "ModelState",
    "RoundMetrics",
    "Simulation",
    "TrainingResult",
    "run_training",
    "write_csv",
]

NAN = float("nan")


@dataclass
class ModelState:
    theta: np.ndarray
    round: int = 0


@dataclass
class RoundMetrics:
    """One row of ``metrics.csv``; communication fields are ``nan`` where not applicable."""

    round: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    gap: float
    grad_norm_sq: float = NAN
    sigma_w: float = NAN
    sigma_w_pred: float = NAN
    signal_power: float = NAN
    prior_sparsity: float = NAN
    prior_variance: float = NAN
    turbo_iters: int = 0
    turbo_v: float = NAN
    turbo_diverged: int = 0
    v_star: float = NAN
    sigma_bar: float = NAN
    e_sp: float = NAN
    e_com: float = NAN
    e_total: float = NAN
    sp_bound: float = NAN
    opt_objective: float = NAN
    opt_iters: int = 0
    opt_refreshed: int = 0
    silent_devices: int = 0
    bound: float = NAN


METRICS_COLUMNS = [f.name for f in fields(RoundMetrics)]


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence(list(key)))


class Simulation:
    """Holds the per-run state that persists across rounds.

    Geometry, the sensing operator, the flip vector and the device error
    residuals live here; ``run_round`` advances one round of Algorithm 1.
    """

    def __init__(self, cfg: SimConfig, task: FederatedTask | None = None):
        cfg = cfg.resolved().validate()
        self.cfg = cfg
        tc, seeds = cfg.task, cfg.seeds
        self.task = task if task is not None else make_synthetic_task(
            seeds.data, kind=tc.kind, n_devices=tc.n_devices,
            samples_per_device=tc.samples_per_device, n_features=tc.n_features,
            n_classes=tc.n_classes, heterogeneity=tc.heterogeneity, reg=tc.reg,
            test_samples=tc.test_samples)
        self.constants = self.task.constants(seed=seeds.data)
        self.eta = tc.learning_rate or 1.0 / self.constants.smoothness
        self.theta_star, self.f_star = self.task.optimum()
        self.dim = self.task.dim
        self.weights = self.task.weights
        self.geometry = cfg.channel.geometry()
        self.noise_power = self.geometry.noise_power
        self.codec = CodecConfig(model_dim=self.dim, sparsity_ratio=cfg.codec.sparsity,
                                 compression_ratio=cfg.codec.compression,
                                 streams=cfg.codec.streams, shared_seed=seeds.codec)
        self.op = build_compressor(seeds.codec, self.dim, cfg.codec.compression)
        self.flips = make_flip_vector(seeds.codec, self.codec.half_dim)
        self.positions = sample_geometry(seeds.geometry, self.task.n_devices, self.geometry)
        self.device_states = [DeviceCodecState.zeros(self.codec.half_dim)
                              for _ in range(self.task.n_devices)]
        self.prev_frames = None
        self.channel = None
        self.solution = None

    # -- helpers -------------------------------------------------------------

    def initial_state(self) -> ModelState:
        return ModelState(theta=np.zeros(self.dim), round=0)

    def evaluate(self, state: ModelState) -> RoundMetrics:
        loss = self.task.loss(state.theta)
        if not math.isfinite(loss):
            raise FloatingPointError(f"round {state.round}: training loss is not finite")
        return RoundMetrics(round=state.round, train_loss=loss,
                            test_loss=self.task.test_loss(state.theta),
                            test_accuracy=self.task.accuracy(state.theta),
                            gap=loss - self.f_star)

    def analysis_params(self) -> AnalysisParams:
        c = self.constants
        lam = self.cfg.codec.sparsity
        if self.cfg.mode == "ideal" or lam >= 1.0:
            lam = 0.0   # keeping every entry leaves no sparsification error
        return AnalysisParams(smoothness=c.smoothness, strong_convexity=c.strong_convexity,
                              chi1=c.chi1, chi2=c.chi2, n_devices=self.task.n_devices, sparsity=lam)

    def _local_gradients(self, theta, t):
        bs = self.cfg.task.batch_size
        grads = []
        for m in range(self.task.n_devices):
            batch = None
            n = len(self.task.X[m])
            if 0 < bs < n:
                batch = _rng(self.cfg.seeds.data, t, m).choice(n, size=bs, replace=False)
            grads.append(self.task.device_grad(m, theta, batch))
        return grads

    def _channel_block(self, t):
        """Sample fresh channels and report whether the transceivers must be re-solved."""
        every = self.cfg.optimizer.refresh_every
        if self.channel is not None and t % every:
            return False
        ch = sample_channels(_rng(self.cfg.seeds.channel, t), self.positions,
                             self.cfg.channel.n_rx, self.cfg.channel.n_tx, self.geometry)
        if self.cfg.channel.deep_fade_device >= 0:
            ch = ch.faded(self.cfg.channel.deep_fade_device, self.cfg.channel.deep_fade_gain)
        self.channel = ch
        return True

    def _correlation(self):
        oc = self.cfg.optimizer
        if oc.rho_mode == "constant" or self.prev_frames is None:
            return po.CorrelationModel.constant(self.weights, oc.rho0)
        return po.CorrelationModel.from_frames(self.prev_frames, self.weights)

    def _solve_transceivers(self, corr):
        oc, n_s = self.cfg.optimizer, self.cfg.codec.streams
        H = self.channel.H
        if self.cfg.mode == "zero_forcing":
            return po.zero_forcing(H, corr, self.geometry.power_w, n_s, noise_power=self.noise_power)
        warm = self.solution.P if self.solution is not None and self.solution.P.shape[2] == n_s else None
        return po.ao_admm(H, corr, self.noise_power, self.geometry.power_w, n_s,
                          max_outer=oc.max_outer, gamma=oc.penalty, eps=oc.eps, tol=oc.tol,
                          max_inner=oc.max_inner, P_init=warm)

    def _prior(self, x_true, r, sigma_w):
        if self.cfg.turbo.prior == "genie":
            nz = np.abs(x_true) > 0
            lam = max(float(np.mean(nz)), 1.0 / x_true.size)
            var = float(np.mean(np.abs(x_true[nz]) ** 2)) if nz.any() else 1.0
            return PriorParams(min(lam, 1.0), max(var, np.finfo(float).tiny))
        lam = min(1.0, self.task.n_devices * self.codec.sparsity_ratio)
        power = max(float(np.mean(np.abs(r) ** 2)) - sigma_w, 1e-12)
        return PriorParams(lam, power / lam)

    # -- one round -------------------------------------------------------------

    def run_round(self, state: ModelState):
        t = state.round
        try:
            return self._run_round(state)
        except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise type(exc)(f"round {t}: {exc}") from exc

    def _run_round(self, state: ModelState):
        t = state.round
        theta = state.theta
        grads = self._local_gradients(theta, t)
        full_grad = self.task.grad(theta)
        q = self.weights
        extra = {"grad_norm_sq": float(full_grad @ full_grad)}

        if self.cfg.mode == "ideal":
            g_hat = sum(qm * g for qm, g in zip(q, grads))
            e = full_grad - g_hat
            extra.update(e_sp=float(e @ e), e_com=0.0, e_total=float(e @ e), sp_bound=0.0)
        else:
            refreshed = self._channel_block(t)
            encoded = []
            for m, g in enumerate(grads):
                enc, self.device_states[m] = encode_gradient(g, self.device_states[m], self.codec,
                                                             self.op, self.flips)
                encoded.append(enc)
            frames = [None if e is None else e.frame for e in encoded]
            live = [m for m, e in enumerate(encoded) if e is not None]
            corr = self._correlation()
            if refreshed or self.solution is None:
                self.solution = self._solve_transceivers(corr)
            sol = self.solution
            g_sp_agg = sum(q[m] * decomplexify(encoded[m].g_sp)[:self.dim] for m in live) if live \
                else np.zeros(self.dim)
            if live:
                Y = transmit(self.channel.H, sol.P, frames, self.noise_power,
                             seed=_rng(self.cfg.seeds.noise, t), power_budget=self.geometry.power_w + 1e-6)
                R_hat = sol.F @ Y
                R_true = sum(q[m] * frames[m] for m in live)
                sigma_w = float(np.mean(np.abs(R_hat - R_true) ** 2))
                sigma_w_pred = po.objective(sol.F, sol.P, self.channel.H, corr, self.noise_power)
                x_true = sum(q[m] * encoded[m].g_no for m in live)
                r = flatten_streams(R_hat)[:self.op.compressed_len]
                prior = self._prior(x_true, r, sigma_w_pred)
                tb = self.cfg.turbo
                res = run_turbo_cs(r, self.op, sigma_w_pred, prior, max_iter=tb.max_iter, tol=tb.tol,
                                   em=tb.prior == "em", damping=tb.damping)
                sigma_bar = float(np.mean([encoded[m].sigma for m in live]))
                g_hat = rescale_output(res.estimate, self.flips, sigma_bar)[:self.dim]
                try:
                    se = se_fixed_point(self.op.kappa, sigma_w, prior)
                    v_star = se.v_star
                except StateEvolutionDivergence:
                    v_star = NAN
                extra.update(sigma_w=sigma_w, sigma_w_pred=sigma_w_pred,
                             signal_power=float(np.mean(np.abs(R_true) ** 2)),
                             prior_sparsity=prior.sparsity, prior_variance=prior.variance,
                             turbo_iters=res.iterations, turbo_v=res.v_post,
                             turbo_diverged=int(res.diverged), v_star=v_star, sigma_bar=sigma_bar)
            else:
                logger.warning("round %d: every device is silent", t)
                g_hat = np.zeros(self.dim)
            self.prev_frames = frames
            e_sp = full_grad - g_sp_agg
            e_com = g_sp_agg - g_hat
            e = full_grad - g_hat
            extra.update(e_sp=float(e_sp @ e_sp), e_com=float(e_com @ e_com), e_total=float(e @ e),
                         sp_bound=sparsification_bound(self.analysis_params(), extra["grad_norm_sq"]),
                         opt_objective=sol.objective, opt_iters=sol.iterations,
                         opt_refreshed=int(refreshed), silent_devices=self.task.n_devices - len(live))

        new_state = ModelState(theta=theta - self.eta * g_hat, round=t + 1)
        metrics = self.evaluate(new_state)
        for k, v in extra.items():
            setattr(metrics, k, v)
        return new_state, metrics


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainingResult:
    metrics: list
    timing: list
    psi: float
    final_state: ModelState


def _attach_bound(sim: Simulation, rows: list) -> float:
    """Fill the ``bound`` column and return ``Psi``."""
    params = sim.analysis_params()
    half = sim.codec.half_dim
    offsets = []
    for row in rows[1:]:
        v_total = 0.0
        if sim.cfg.mode != "ideal":
            v_total = row.v_star * half * (row.sigma_bar if math.isfinite(row.sigma_bar) else 0.0)
        psi, c = convergence_constants(params, v_total if math.isfinite(v_total) else math.inf)
        offsets.append(c)
    psi, _ = convergence_constants(params, 0.0)
    if offsets:
        b = bound_trajectory(psi, rows[0].gap, offsets, len(offsets))
        for row, val in zip(rows[1:], b):
            row.bound = float(val)
    rows[0].bound = rows[0].gap
    return psi


def run_training(cfg: SimConfig, task: FederatedTask | None = None) -> TrainingResult:
    """Run ``cfg.task.rounds`` rounds; row 0 is the initial evaluation."""
    sim = Simulation(cfg, task)
    state = sim.initial_state()
    rows = [sim.evaluate(state)]
    timing = [(0, 0.0)]
    for _ in range(sim.cfg.task.rounds):
        start = time.perf_counter()
        state, metrics = sim.run_round(state)
        timing.append((state.round, time.perf_counter() - start))
        rows.append(metrics)
    psi = _attach_bound(sim, rows)
    return TrainingResult(metrics=rows, timing=timing, psi=psi, final_state=state)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, columns, rows) -> None:
    """Write dataclass rows or dicts with 17-significant-digit floats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            d = row if isinstance(row, dict) else asdict(row)
            w.writerow([_fmt(d[c]) for c in columns])
