"""Cell geometry, block-fading MIMO MAC channels and over-the-air superposition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AggregateStats",
    "ChannelRealization",
    "GeometryConfig",
    "Positions",
    "PowerConstraintError",
    "aggregate_stats",
    "cn",
    "db_to_linear",
    "dbm_to_watts",
    "empirical_sigma_w",
    "post_process",
    "sample_channels",
    "sample_geometry",
    "transmit",
]


def db_to_linear(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def dbm_to_watts(x_dbm: float) -> float:
    return 10.0 ** ((x_dbm - 30.0) / 10.0)


def cn(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with per-entry variance ``var``."""
    scale = math.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


class PowerConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryConfig:
    """Physical parameters; dB quantities are kept as given and converted on access."""

    cell_radius_m: float = 100.0
    ps_height_m: float = 10.0
    path_loss_exp: float = 3.8
    ref_loss_db: float = -60.0
    gain_tx_dbi: float = 5.0
    gain_rx_dbi: float = 5.0
    noise_dbm: float = -90.0
    power_w: float = 0.1

    def __post_init__(self):
        if self.cell_radius_m < 0 or self.ps_height_m <= 0:
            raise ValueError("cell radius must be >= 0 and PS height > 0")
        if self.path_loss_exp < 0 or self.power_w <= 0:
            raise ValueError("path-loss exponent must be >= 0 and power budget > 0")

    @property
    def ref_loss(self) -> float:
        return db_to_linear(self.ref_loss_db)

    @property
    def gain_tx(self) -> float:
        return db_to_linear(self.gain_tx_dbi)

    @property
    def gain_rx(self) -> float:
        return db_to_linear(self.gain_rx_dbi)

    @property
    def noise_power(self) -> float:
        return dbm_to_watts(self.noise_dbm)

    def large_scale_gain(self, distance_m):
        d = np.asarray(distance_m, dtype=float)
        return self.gain_rx * self.gain_tx * self.ref_loss * d ** (-self.path_loss_exp)


@dataclass(frozen=True)
class Positions:
    """Device positions in cylindrical coordinates around the PS foot point."""

    radial: np.ndarray
    azimuth: np.ndarray
    height: np.ndarray
    distance: np.ndarray


def sample_geometry(seed, n_devices: int, config: GeometryConfig) -> Positions:
    if n_devices < 1:
        raise ValueError("need at least one device")
    rng = np.random.default_rng(seed)
    radial_sq = rng.uniform(0.0, config.cell_radius_m ** 2, size=n_devices)
    azimuth = rng.uniform(0.0, 2 * np.pi, size=n_devices)
    radial = np.sqrt(radial_sq)
    distance = np.sqrt(radial_sq + config.ps_height_m ** 2)
    return Positions(radial=radial, azimuth=azimuth, height=np.zeros(n_devices), distance=distance)


@dataclass
class ChannelRealization:
    H: np.ndarray          # (M, N_R, N_T)
    distance: np.ndarray   # (M,)
    gain: np.ndarray       # (M,) large-scale power gain

    @property
    def n_devices(self) -> int:
        return self.H.shape[0]

    @property
    def n_rx(self) -> int:
        return self.H.shape[1]

    @property
    def n_tx(self) -> int:
        return self.H.shape[2]

    def faded(self, device: int, factor: float) -> "ChannelRealization":
        """Copy with one device's power gain multiplied by ``factor``."""
        H = self.H.copy()
        H[device] *= math.sqrt(factor)
        gain = self.gain.copy()
        gain[device] *= factor
        return ChannelRealization(H=H, distance=self.distance.copy(), gain=gain)


def sample_channels(seed, positions: Positions, n_rx: int, n_tx: int,
                    config: GeometryConfig) -> ChannelRealization:
    rng = np.random.default_rng(seed)
    m = positions.distance.size
    gain = config.large_scale_gain(positions.distance)
    H = np.sqrt(gain)[:, None, None] * cn(rng, (m, n_rx, n_tx))
    return ChannelRealization(H=H, distance=positions.distance.copy(), gain=gain)


def transmit(H, precoders, frames, noise_power: float, seed=None, power_budget=None,
             active=None) -> np.ndarray:
    """Receive matrix ``Y = sum_m H_m P_m G_m + N``.

    ``frames[m]`` may be ``None`` for a silent device.  When ``power_budget``
    is given every precoder is checked against it.
    """
    H = np.asarray(H)
    m_dev, n_rx, n_tx = H.shape
    if len(precoders) != m_dev or len(frames) != m_dev:
        raise ValueError("need one precoder and one frame per device")
    k = None
    Y = None
    for m in range(m_dev):
        P = np.asarray(precoders[m])
        if P.shape[0] != n_tx:
            raise ValueError(f"precoder {m} has {P.shape[0]} rows, channel has {n_tx} tx antennas")
        if power_budget is not None and np.linalg.norm(P) ** 2 > power_budget + 1e-9:
            raise PowerConstraintError(
                f"device {m}: ||P||_F^2 = {np.linalg.norm(P) ** 2:.6g} exceeds {power_budget:.6g}")
        G = frames[m]
        if G is None:
            continue
        G = np.asarray(G)
        if G.shape[0] != P.shape[1]:
            raise ValueError(f"frame {m} has {G.shape[0]} streams, precoder has {P.shape[1]}")
        if k is None:
            k = G.shape[1]
            Y = np.zeros((n_rx, k), dtype=complex)
        elif G.shape[1] != k:
            raise ValueError("frames disagree on the number of channel uses")
        Y += H[m] @ (P @ G)
    if Y is None:
        raise ValueError("no device transmitted")
    rng = np.random.default_rng(seed)
    if noise_power > 0:
        Y += cn(rng, Y.shape, noise_power)
    return Y


def post_process(F, Y) -> np.ndarray:
    F = np.asarray(F)
    Y = np.asarray(Y)
    if F.shape[1] != Y.shape[0]:
        raise ValueError(f"F is {F.shape}, Y has {Y.shape[0]} rows")
    return F @ Y


def empirical_sigma_w(R_hat, R) -> float:
    R_hat = np.asarray(R_hat)
    R = np.asarray(R)
    if R_hat.shape != R.shape:
        raise ValueError("shape mismatch")
    return float(np.sum(np.abs(R_hat - R) ** 2) / R.size)


@dataclass
class AggregateStats:
    sigma_w: float
    residual: np.ndarray
    noise_seed: object = None


def aggregate_stats(R_hat, frames, weights, noise_seed=None) -> AggregateStats:
    """Residual ``W = R_hat - sum_m q_m G_m`` and its per-entry power."""
    R = sum(q * G for q, G in zip(weights, frames) if G is not None)
    W = np.asarray(R_hat) - R
    return AggregateStats(sigma_w=float(np.mean(np.abs(W) ** 2)), residual=W, noise_seed=noise_seed)
