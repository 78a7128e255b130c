"""Run configuration: schema-validated nested dataclasses loaded from YAML.

Unknown keys are rejected up front so a typo cannot silently fall back to a
default; all validation happens before any compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

__all__ = ["ConfigError", "RunConfig", "load_config", "config_from_dict"]


class ConfigError(ValueError):
    """Invalid or malformed run configuration."""


@dataclass
class ProblemConfig:
    name: str = "heat1d"
    n: int = 256
    kappa: float = 1.0
    grid: int = 24
    n_rays: int = 360
    noise_level: float = 0.02
    prior_std: float = 0.8
    ell: float = 0.08

    def validate(self):
        if self.name not in ("heat1d", "ray_tomo"):
            raise ConfigError(f"unknown problem {self.name!r}")
        if self.name == "heat1d" and self.n < 2:
            raise ConfigError("heat1d needs n >= 2")
        if self.name == "ray_tomo" and (self.grid < 4 or self.n_rays < 1):
            raise ConfigError("ray_tomo needs grid >= 4 and n_rays >= 1")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be nonnegative")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")


@dataclass
class KernelConfig:
    nu: float = 1.5

    def validate(self):
        if self.nu <= 0:
            raise ConfigError("nu must be positive")


@dataclass
class HyperpriorConfig:
    kind: str = "flat"
    gamma: float = 1e-4

    def validate(self):
        if self.kind not in ("flat", "gamma"):
            raise ConfigError(f"hyperprior kind must be flat or gamma, got {self.kind!r}")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")


@dataclass
class EstimateConfig:
    k: int = 22
    theta0: list = field(default_factory=lambda: [1e-4, 0.5, 0.1])
    bounds: list = field(
        default_factory=lambda: [[1e-10, 1.0], [1e-3, 10.0], [5e-3, 0.5]]
    )
    parameterization: str = "log"
    max_iters: int = 200
    grad_tol: float = 1e-6

    def validate(self):
        if self.k < 1:
            raise ConfigError("estimate.k must be at least 1")
        theta0 = np.asarray(self.theta0, dtype=float)
        bounds = np.asarray(self.bounds, dtype=float)
        if theta0.ndim != 1 or np.any(theta0 <= 0):
            raise ConfigError("theta0 must be a positive vector")
        if bounds.shape != (theta0.size, 2) or np.any(bounds <= 0):
            raise ConfigError("bounds must be a positive (K, 2) table")
        if self.parameterization not in ("log", "linear"):
            raise ConfigError("parameterization must be log or linear")


@dataclass
class MonitorConfig:
    k_max: int = 50
    n_mc: int = 10
    probe_kind: str = "gaussian"
    theta: list = field(default_factory=lambda: [1e-5, 0.4, 0.08])

    def validate(self):
        if self.k_max < 1:
            raise ConfigError("monitor.k_max must be at least 1")
        if self.n_mc < 1:
            raise ConfigError("monitor.n_mc must be at least 1")
        if self.probe_kind not in ("gaussian", "rademacher"):
            raise ConfigError("probe_kind must be gaussian or rademacher")
        if np.any(np.asarray(self.theta, dtype=float) <= 0):
            raise ConfigError("monitor.theta must be positive")


@dataclass
class BenchmarkConfig:
    sizes: list = field(default_factory=lambda: [256, 512])
    k: int = 22
    repeats: int = 3
    theta: list = field(default_factory=lambda: [1e-5, 0.4, 0.08])

    def validate(self):
        if not self.sizes or any(int(s) < 2 for s in self.sizes):
            raise ConfigError("benchmark.sizes must be integers >= 2")
        if self.k < 1 or self.repeats < 1:
            raise ConfigError("benchmark.k and repeats must be positive")
        if np.any(np.asarray(self.theta, dtype=float) <= 0):
            raise ConfigError("benchmark.theta must be positive")


@dataclass
class ReconstructConfig:
    theta: list = field(default_factory=lambda: [1e-5, 0.4, 0.08])
    k: int = 22

    def validate(self):
        if self.k < 1:
            raise ConfigError("reconstruct.k must be at least 1")
        if np.any(np.asarray(self.theta, dtype=float) <= 0):
            raise ConfigError("reconstruct.theta must be positive")


@dataclass
class RunConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    hyperprior: HyperpriorConfig = field(default_factory=HyperpriorConfig)
    estimate: EstimateConfig = field(default_factory=EstimateConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    reconstruct: ReconstructConfig = field(default_factory=ReconstructConfig)
    seed: int = 0
    dense_cap: int = 4096

    def validate(self):
        for section in (self.problem, self.kernel, self.hyperprior, self.estimate,
                        self.monitor, self.benchmark, self.reconstruct):
            section.validate()
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.dense_cap < 1:
            raise ConfigError("dense_cap must be positive")


_SECTIONS = {
    "problem": ProblemConfig,
    "kernel": KernelConfig,
    "hyperprior": HyperpriorConfig,
    "estimate": EstimateConfig,
    "monitor": MonitorConfig,
    "benchmark": BenchmarkConfig,
    "reconstruct": ReconstructConfig,
}


def _build_section(cls, payload, where):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad values in {where!r}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    known = set(_SECTIONS) | {"seed", "dense_cap"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build_section(cls, raw[name], name)
    for scalar in ("seed", "dense_cap"):
        if scalar in raw:
            try:
                kwargs[scalar] = int(raw[scalar])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{scalar} must be an integer") from exc
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw)
