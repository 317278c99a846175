"""Run configuration: one YAML document drives the whole workflow.

Every command takes ``--config file.yaml`` merged over the built-in defaults
of the selected plant, plus ``--set section.key=value`` overrides.  All
randomness is derived from the single ``seed`` through
:func:`sub_seed`, so any intermediate artifact is reproducible on its own.
"""

from __future__ import annotations

import dataclasses
import hashlib
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

__all__ = [
    "ConfigError",
    "RunConfig",
    "default_config",
    "load_config",
    "apply_overrides",
    "sub_seed",
]


class ConfigError(ValueError):
    """Bad configuration file or override."""


def sub_seed(master: int, *path: int | str) -> int:
    """Derive an independent 64-bit seed from the master seed and a label path."""
    parts = [int(master) & 0xFFFFFFFF]
    for p in path:
        parts.append(zlib.crc32(str(p).encode()) if isinstance(p, str) else int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(parts).generate_state(1, np.uint64)[0])


@dataclass
class DataSection:
    duration: float = 20.0
    split_fraction: float = 0.75
    x0: list = field(default_factory=list)
    reference: dict = field(default_factory=dict)


@dataclass
class EnsembleSection:
    n_members: int = 5
    hidden_sizes: list = field(default_factory=list)


@dataclass
class TrainingSection:
    epochs: int = 500
    learning_rate: float = 2e-2
    weight_decay: float = 1e-8


@dataclass
class WeightsSection:
    epochs: int = 1500
    learning_rate: float = 2e-3
    weight_decay: float = 1e-9
    nonnegative: bool = True


@dataclass
class MpcSection:
    horizon: int = 10
    q_diag: list = field(default_factory=list)
    r_diag: list = field(default_factory=list)
    rho: float = 1.1
    gamma: float = 0.01  # target sublevel size, validated against the certificate
    x_lo: list = field(default_factory=list)
    x_hi: list = field(default_factory=list)
    u_lo: list = field(default_factory=list)
    u_hi: list = field(default_factory=list)
    enforce_terminal_set: bool = False
    sqp_max_iterations: int = 25
    qp_max_iterations: int = 4000


@dataclass
class CertifySection:
    delta: float = 0.3
    n_samples: int = 10000
    model: str = "true"  # true | nominal | ensemble
    hessian_points: int = 8


@dataclass
class EvaluateSection:
    n_runs: int = 30
    duration: float = 8.0
    n_closedloop_runs: int = 10
    closedloop_duration: float = 5.0
    closedloop_nominal: bool = True
    x0_delta: list = field(default_factory=list)
    reference: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    plant: str = "pendulum"
    seed: int = 0
    dt: float = 0.01
    substeps: int = 1
    out_dir: str = "runs/pendulum"
    plant_params: dict = field(default_factory=dict)
    data: DataSection = field(default_factory=DataSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    certify: CertifySection = field(default_factory=CertifySection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_yaml().encode()).hexdigest()

    def provenance(self) -> dict:
        return {"config_sha256": self.sha256(), "seed": self.seed}


_PENDULUM = {
    "plant": "pendulum",
    "seed": 0,
    "dt": 0.01,
    "substeps": 1,
    "out_dir": "runs/pendulum",
    "plant_params": {
        "mass_true": 0.55,
        "mass_nominal": 1.0,
        "length": 1.0,
        "gravity": 9.81,
    },
    "data": {
        "duration": 20.0,
        "split_fraction": 0.75,
        "x0": [0.0, 0.0],
        "reference": {"magnitude": [-1.0, 1.0], "hold": [2.0, 4.0]},
    },
    "ensemble": {"n_members": 5, "hidden_sizes": [64, 128, 192, 256, 320]},
    "training": {"epochs": 500, "learning_rate": 2e-2, "weight_decay": 1e-8},
    "weights": {"epochs": 1500, "learning_rate": 2e-3, "weight_decay": 1e-9, "nonnegative": True},
    "mpc": {
        "horizon": 10,
        "q_diag": [1.0, 0.1],
        "r_diag": [1e-5],
        "rho": 1.1,
        "gamma": 0.01,
        "x_lo": [-3.15, -12.0],
        "x_hi": [3.15, 12.0],
        "u_lo": [-5.0],
        "u_hi": [5.0],
        "enforce_terminal_set": False,
        "sqp_max_iterations": 25,
        "qp_max_iterations": 4000,
    },
    "certify": {"delta": 0.3, "n_samples": 10000, "model": "true", "hessian_points": 8},
    "evaluate": {
        "n_runs": 30,
        "duration": 8.0,
        "n_closedloop_runs": 10,
        "closedloop_duration": 5.0,
        "closedloop_nominal": True,
        "x0_delta": [0.3, 0.3],
        "reference": {"magnitude": [-1.0, 1.0], "hold": [2.0, 4.0]},
    },
}

_QUADROTOR = {
    "plant": "quadrotor",
    "seed": 0,
    "dt": 0.005,
    "substeps": 1,
    "out_dir": "runs/quadrotor",
    "plant_params": {
        "mass": 0.03,
        "inertia_diag": [1.43e-5, 1.43e-5, 2.17e-5],
        "gravity": 9.81,
        "drag_diag": [0.02, 0.02, 0.04],
    },
    "data": {
        "duration": 20.0,
        "split_fraction": 0.75,
        "x0": [],  # empty: start exactly on the reference circle
        "reference": {"radius": 1.0, "speed": 1.0, "altitude": 1.0},
    },
    "ensemble": {"n_members": 5, "hidden_sizes": [8, 16, 24, 32, 40]},
    "training": {"epochs": 1000, "learning_rate": 2e-2, "weight_decay": 1e-9},
    "weights": {"epochs": 1500, "learning_rate": 3e-2, "weight_decay": 1e-9, "nonnegative": True},
    "mpc": {
        "horizon": 20,
        "q_diag": [0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1],
        "r_diag": [0.001, 0.001, 0.001, 0.001],
        "rho": 1.1,
        "gamma": 0.5,
        "x_lo": [-10.0, -10.0, -10.0, -8.0, -8.0, -8.0, -1.01, -1.01, -1.01, -1.01, -60.0, -60.0, -60.0],
        "x_hi": [10.0, 10.0, 10.0, 8.0, 8.0, 8.0, 1.01, 1.01, 1.01, 1.01, 60.0, 60.0, 60.0],
        "u_lo": [0.0, -0.02, -0.02, -0.02],
        "u_hi": [0.575, 0.02, 0.02, 0.02],
        "enforce_terminal_set": False,
        "sqp_max_iterations": 25,
        "qp_max_iterations": 4000,
    },
    "certify": {"delta": 0.3, "n_samples": 10000, "model": "true", "hessian_points": 4},
    "evaluate": {
        "n_runs": 30,
        "duration": 4.0,
        "n_closedloop_runs": 8,
        "closedloop_duration": 2.0,
        "closedloop_nominal": False,
        "x0_delta": [0.1, 0.1, 0.1],
        "reference": {"radius": [0.7, 1.3], "speed": [0.7, 1.3], "altitude": 1.0},
    },
}

_DEFAULTS = {"pendulum": _PENDULUM, "quadrotor": _QUADROTOR}

_SECTION_TYPES = {
    "data": DataSection,
    "ensemble": EnsembleSection,
    "training": TrainingSection,
    "weights": WeightsSection,
    "mpc": MpcSection,
    "certify": CertifySection,
    "evaluate": EvaluateSection,
}


def _build_section(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section {where!r}")
    return cls(**values)


def _from_dict(doc: dict) -> RunConfig:
    top_known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    if cfg.plant not in _DEFAULTS:
        raise ConfigError(f"unknown plant {cfg.plant!r}")
    if cfg.dt <= 0 or cfg.substeps < 1:
        raise ConfigError("dt must be positive and substeps >= 1")
    return cfg


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def default_config(plant: str = "pendulum") -> RunConfig:
    if plant not in _DEFAULTS:
        raise ConfigError(f"unknown plant {plant!r}")
    return _from_dict(_DEFAULTS[plant])


def load_config(
    path: str | Path | None = None,
    plant: str | None = None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """Merge default <- file <- ``--set`` overrides into a validated config."""
    doc: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        doc = loaded
    plant_name = plant or doc.get("plant", "pendulum")
    if plant_name not in _DEFAULTS:
        raise ConfigError(f"unknown plant {plant_name!r}")
    merged = _deep_merge(_DEFAULTS[plant_name], doc)
    merged["plant"] = plant_name
    cfg = _from_dict(merged)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    doc = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"override path {dotted!r} does not exist")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"override path {dotted!r} does not exist")
        node[leaf] = value
    return _from_dict(doc)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.canonical_yaml())
