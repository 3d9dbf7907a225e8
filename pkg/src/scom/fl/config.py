"""Experiment configuration: nested dataclasses read from and written to TOML.

Every physical quantity carries its unit in the key name.  Unknown keys are
rejected so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

from ..channel import GeometryConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = [
    "ChannelConfig",
    "CodecSettings",
    "CompareConfig",
    "ConfigError",
    "BenchConfig",
    "OptimizerConfig",
    "ScanConfig",
    "SeedConfig",
    "SimConfig",
    "TaskConfig",
    "TurboConfig",
    "from_dict",
    "load_config",
    "to_dict",
    "write_resolved",
]

MODES = ("scom", "ideal", "zero_forcing")


class ConfigError(ValueError):
    pass


@dataclass
class TaskConfig:
    kind: str = "logistic"
    n_devices: int = 20
    samples_per_device: int = 3000
    n_features: int = 20
    n_classes: int = 10
    heterogeneity: str = "iid"
    reg: float = 1e-2
    test_samples: int = 2000
    rounds: int = 100
    learning_rate: float = 0.0          # 0 selects 1/omega
    batch_size: int = 0                 # 0 means full batch

    def validate(self):
        if self.kind not in ("linear", "logistic"):
            raise ConfigError(f"task.kind must be 'linear' or 'logistic', got {self.kind!r}")
        if self.heterogeneity not in ("iid", "label-skew"):
            raise ConfigError(f"task.heterogeneity must be 'iid' or 'label-skew', got {self.heterogeneity!r}")
        if self.n_devices < 1:
            raise ConfigError("task.n_devices must be positive")
        if self.samples_per_device < 1:
            raise ConfigError("task.samples_per_device must be positive (a device needs data)")
        if self.rounds < 0:
            raise ConfigError("task.rounds must be non-negative")
        if self.learning_rate < 0:
            raise ConfigError("task.learning_rate must be positive (or 0 for 1/omega)")
        if self.batch_size < 0:
            raise ConfigError("task.batch_size must be non-negative")
        if self.reg <= 0:
            raise ConfigError("task.reg must be positive to keep the loss strongly convex")

    @property
    def model_dim(self) -> int:
        return self.n_features * (self.n_classes if self.kind == "logistic" else 1)


@dataclass
class ChannelConfig:
    n_tx: int = 8
    n_rx: int = 16
    cell_radius_m: float = 100.0
    ps_height_m: float = 10.0
    path_loss_exp: float = 3.8
    ref_loss_db: float = -60.0
    gain_tx_dbi: float = 5.0
    gain_rx_dbi: float = 5.0
    noise_dbm: float = -90.0
    power_w: float = 0.1
    deep_fade_device: int = -1          # -1 disables
    deep_fade_gain: float = 1e-2

    def validate(self):
        if self.n_tx < 1 or self.n_rx < 1:
            raise ConfigError("antenna counts must be positive")
        if self.deep_fade_gain <= 0:
            raise ConfigError("channel.deep_fade_gain must be positive")
        try:
            self.geometry()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def geometry(self) -> GeometryConfig:
        return GeometryConfig(
            cell_radius_m=self.cell_radius_m, ps_height_m=self.ps_height_m,
            path_loss_exp=self.path_loss_exp, ref_loss_db=self.ref_loss_db,
            gain_tx_dbi=self.gain_tx_dbi, gain_rx_dbi=self.gain_rx_dbi,
            noise_dbm=self.noise_dbm, power_w=self.power_w)


@dataclass
class CodecSettings:
    sparsity: float = 0.05
    compression: float = 0.5
    streams: int = 4

    def validate(self):
        if not 0 < self.sparsity <= 1:
            raise ConfigError("codec.sparsity must lie in (0, 1]")
        if not 0 < self.compression <= 1:
            raise ConfigError("codec.compression must lie in (0, 1]")
        if self.streams < 1:
            raise ConfigError("codec.streams must be positive")


@dataclass
class OptimizerConfig:
    max_outer: int = 50
    gamma: float = 0.0                  # 0 selects the scale-aware penalty
    eps: float = 1e-4
    tol: float = 1e-8
    max_inner: int = 20000
    rho_mode: str = "measured"          # measured | constant
    rho0: float = 0.5
    refresh_every: int = 1

    def validate(self):
        if self.max_outer < 1 or self.max_inner < 1:
            raise ConfigError("optimizer iteration limits must be positive")
        if self.gamma < 0 or self.eps <= 0 or self.tol < 0:
            raise ConfigError("optimizer.gamma must be >= 0; eps > 0; tol >= 0")
        if self.rho_mode not in ("measured", "constant"):
            raise ConfigError("optimizer.rho_mode must be 'measured' or 'constant'")
        if not 0 <= self.rho0 <= 1:
            raise ConfigError("optimizer.rho0 must lie in [0, 1]")
        if self.refresh_every < 1:
            raise ConfigError("optimizer.refresh_every must be positive")

    @property
    def penalty(self):
        return "auto" if self.gamma == 0 else self.gamma


@dataclass
class TurboConfig:
    max_iter: int = 50
    tol: float = 1e-6
    prior: str = "genie"                # genie | em
    damping: float = 0.0

    def validate(self):
        if self.max_iter < 1:
            raise ConfigError("turbo.max_iter must be positive")
        if self.prior not in ("genie", "em"):
            raise ConfigError("turbo.prior must be 'genie' or 'em'")
        if not 0 <= self.damping < 1:
            raise ConfigError("turbo.damping must lie in [0, 1)")


@dataclass
class SeedConfig:
    """Independent streams; ``-1`` derives the stream from the base seed."""

    base: int = 0
    geometry: int = -1
    channel: int = -1
    noise: int = -1
    data: int = -1
    codec: int = -1

    NAMES = ("geometry", "channel", "noise", "data", "codec")

    def resolved(self) -> "SeedConfig":
        children = np.random.SeedSequence(self.base).generate_state(len(self.NAMES))
        out = dataclasses.replace(self)
        for name, child in zip(self.NAMES, children):
            if getattr(self, name) < 0:
                setattr(out, name, int(child))
        return out

    def validate(self):
        if self.base < 0:
            raise ConfigError("seeds.base must be non-negative")


@dataclass
class ScanConfig:
    antennas: list = field(default_factory=lambda: [[4, 8]])     # (N_T, N_R) pairs
    channel_uses: int = 1584
    model_dim: int = 39604
    prior_sparsity: float = 0.05
    prior_variance: float = 20.0
    n_draws: int = 20
    n_devices: int = 20

    def validate(self):
        if not self.antennas or any(len(p) != 2 or min(p) < 1 for p in self.antennas):
            raise ConfigError("scan.antennas must be a list of positive [N_T, N_R] pairs")
        if self.channel_uses < 1 or self.model_dim < 2 or self.n_draws < 1 or self.n_devices < 1:
            raise ConfigError("scan sizes must be positive")


@dataclass
class BenchConfig:
    n_instances: int = 5
    n_devices: int = 20
    n_tx: int = 8
    n_rx: int = 16
    streams: int = 4

    def validate(self):
        if min(self.n_instances, self.n_devices, self.n_tx, self.n_rx, self.streams) < 1:
            raise ConfigError("bench sizes must be positive")


@dataclass
class CompareConfig:
    compression: list = field(default_factory=lambda: [0.25, 0.5, 1.0])
    modes: list = field(default_factory=lambda: list(MODES))
    n_seeds: int = 5

    def validate(self):
        if not self.compression or any(not 0 < k <= 1 for k in self.compression):
            raise ConfigError("compare.compression entries must lie in (0, 1]")
        if not self.modes or any(m not in MODES for m in self.modes):
            raise ConfigError(f"compare.modes entries must be among {MODES}")
        if self.n_seeds < 1:
            raise ConfigError("compare.n_seeds must be positive")


@dataclass
class SimConfig:
    mode: str = "scom"
    task: TaskConfig = field(default_factory=TaskConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    codec: CodecSettings = field(default_factory=CodecSettings)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    turbo: TurboConfig = field(default_factory=TurboConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    def validate(self) -> "SimConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for f in dataclasses.fields(self):
            if f.name != "mode":
                getattr(self, f.name).validate()
        if self.mode == "zero_forcing" and self.codec.streams > min(self.channel.n_tx, self.channel.n_rx):
            raise ConfigError("zero forcing needs codec.streams <= min(n_tx, n_rx)")
        if self.channel.deep_fade_device >= self.task.n_devices:
            raise ConfigError("channel.deep_fade_device is not a device index")
        return self

    def resolved(self) -> "SimConfig":
        return dataclasses.replace(self, seeds=self.seeds.resolved())

    def with_seed(self, seed: int) -> "SimConfig":
        return dataclasses.replace(self, seeds=dataclasses.replace(self.seeds, base=seed))


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, name)
        elif isinstance(default, float) and type(value) in (int, float):
            kwargs[name] = float(value)
        elif type(value) is type(default):
            kwargs[name] = value
        else:
            raise ConfigError(f"{where}.{name}: expected {type(default).__name__}, got {value!r}")
    return cls(**kwargs)


def from_dict(data: dict) -> SimConfig:
    return _build(SimConfig, data, "root").validate()


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> SimConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return from_dict(data)


def write_resolved(cfg: SimConfig, path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(to_dict(cfg), fh)
