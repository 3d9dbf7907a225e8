"""Experiment drivers behind the ``scan-ns``, ``opt-bench`` and ``compare`` subcommands."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .. import precoder_opt as po
from ..channel import sample_channels, sample_geometry
from ..sparse_coding import channel_uses
from ..state_evolution import AnalysisParams, scan_streams
from ..turbo_cs import PriorParams
from .config import SimConfig
from .simulation import run_training

__all__ = [
    "COMPARE_COLUMNS",
    "OPT_TRACE_COLUMNS",
    "SCAN_COLUMNS",
    "draw_channels",
    "opt_bench",
    "run_compare",
    "scan_ns",
]

SCAN_COLUMNS = ["N_T", "N_R", "N_S", "kappa", "sigma_w", "v_star", "C"]
OPT_TRACE_COLUMNS = ["instance", "method", "iteration", "objective", "max_power", "max_residual"]
COMPARE_COLUMNS = ["mode", "kappa", "channel_uses", "seed", "rounds", "final_loss",
                   "final_accuracy", "final_gap"]


def draw_channels(seed_key, n_devices, n_rx, n_tx, geometry):
    """Geometry and one block of channels from a tuple seed key."""
    ss = np.random.SeedSequence(list(seed_key))
    g_seed, c_seed = ss.spawn(2)
    positions = sample_geometry(np.random.default_rng(g_seed), n_devices, geometry)
    return sample_channels(np.random.default_rng(c_seed), positions, n_rx, n_tx, geometry)


def _uniform_corr(n_devices, rho0):
    return po.CorrelationModel.constant(np.full(n_devices, 1.0 / n_devices), rho0)


def scan_ns(cfg: SimConfig):
    """Stream-count scan at fixed channel uses for every configured antenna pair.

    ``sigma_w`` for each ``N_S`` is the AO-ADMM objective averaged over
    ``scan.n_draws`` channel draws and divided by the aggregate's signal
    power ``q^T rho q``.  ``C`` is reported with unit curvature and no
    sparsification term, i.e. it equals the total recovery MSE
    ``(D/2) v_star``; its minimiser is what the scan is after.
    Returns ``(rows, best)`` where ``best`` maps ``(N_T, N_R)`` to the
    minimising ``N_S``.
    """
    cfg = cfg.resolved().validate()
    sc, oc = cfg.scan, cfg.optimizer
    geometry = cfg.channel.geometry()
    corr = _uniform_corr(sc.n_devices, oc.rho0)
    prior = PriorParams(sc.prior_sparsity, sc.prior_variance)
    params = AnalysisParams(smoothness=1.0, strong_convexity=1.0, chi1=0.0, chi2=0.0,
                            n_devices=sc.n_devices, sparsity=0.0)
    rows, best = [], {}
    for pair_idx, (n_t, n_r) in enumerate(sc.antennas):
        draws = [draw_channels((cfg.seeds.channel, pair_idx, d), sc.n_devices, n_r, n_t, geometry).H
                 for d in range(sc.n_draws)]

        def sigma_w_of(n_s):
            vals = [po.ao_admm(H, corr, geometry.noise_power, geometry.power_w, n_s,
                               max_outer=oc.max_outer, gamma=oc.penalty, eps=oc.eps, tol=oc.tol,
                               max_inner=oc.max_inner).objective for H in draws]
            return float(np.mean(vals)) / corr.signal_power

        scan_rows, best[(n_t, n_r)] = scan_streams(sc.channel_uses, n_t, n_r, sc.model_dim, prior,
                                                   sigma_w_of, params=params)
        for r in scan_rows:
            rows.append({"N_T": n_t, "N_R": n_r, "N_S": r.n_streams, "kappa": r.kappa,
                         "sigma_w": r.sigma_w, "v_star": r.v_star, "C": r.C})
    return rows, best


def opt_bench(cfg: SimConfig):
    """AO-ADMM objective traces and the zero-forcing reference per instance."""
    cfg = cfg.resolved().validate()
    bc, oc = cfg.bench, cfg.optimizer
    geometry = cfg.channel.geometry()
    corr = _uniform_corr(bc.n_devices, oc.rho0)
    rows, solutions = [], []
    for i in range(bc.n_instances):
        H = draw_channels((cfg.seeds.channel, i), bc.n_devices, bc.n_rx, bc.n_tx, geometry).H
        sol = po.ao_admm(H, corr, geometry.noise_power, geometry.power_w, bc.streams,
                         max_outer=oc.max_outer, gamma=oc.penalty, eps=oc.eps, tol=oc.tol,
                         max_inner=oc.max_inner)
        solutions.append(sol)
        for it, val in enumerate(sol.trace):
            rows.append({"instance": i, "method": "ao_admm", "iteration": it, "objective": val,
                         "max_power": float(np.max(sol.powers)), "max_residual": sol.max_residual})
        if bc.streams <= min(bc.n_tx, bc.n_rx):
            zf = po.zero_forcing(H, corr, geometry.power_w, bc.streams, noise_power=geometry.noise_power)
            rows.append({"instance": i, "method": "zero_forcing", "iteration": 0,
                         "objective": zf.objective, "max_power": float(np.max(zf.powers)),
                         "max_residual": 0.0})
    return rows, solutions


def run_compare(cfg: SimConfig):
    """Final loss and accuracy per (mode, compression ratio, seed)."""
    cfg = cfg.resolved().validate()
    cc = cfg.compare
    rows = []
    for kappa in cc.compression:
        for mode in cc.modes:
            for s in range(cc.n_seeds):
                run_cfg = dataclasses.replace(
                    cfg, mode=mode,
                    codec=dataclasses.replace(cfg.codec, compression=kappa),
                    seeds=dataclasses.replace(cfg.seeds, base=cfg.seeds.base + s, geometry=-1,
                                              channel=-1, noise=-1, data=-1, codec=-1))
                run_cfg.validate()
                res = run_training(run_cfg)
                last = res.metrics[-1]
                k = 0 if mode == "ideal" else channel_uses(run_cfg.task.model_dim, kappa,
                                                          run_cfg.codec.streams)
                rows.append({"mode": mode, "kappa": kappa, "channel_uses": k, "seed": s,
                             "rounds": last.round, "final_loss": last.train_loss,
                             "final_accuracy": last.test_accuracy, "final_gap": last.gap})
    return rows


def summarize_compare(rows):
    """Mean final accuracy per ``(mode, kappa)``."""
    out = {}
    for r in rows:
        out.setdefault((r["mode"], r["kappa"]), []).append(r["final_accuracy"])
    return {k: float(np.mean(v)) if not any(math.isnan(x) for x in v) else float("nan")
            for k, v in out.items()}
