"""Experiment configuration: one JSON document, validated before anything runs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError
from .integrate import SCHEMES
from .model import SdeModel
from .zoo import ZOO, default_x0, model_zoo

CONFIG_VERSION = 1
COMMANDS = ("simulate", "malliavin", "hormander", "verify", "density")
SUITES = ("gateaux", "cameron_martin", "flow_identity", "moment")


@dataclass
class ExperimentConfig:
    command: str = "simulate"
    model: str = "ginzburg_landau"
    params: dict = field(default_factory=dict)
    x0: list | None = None
    T: float = 1.0
    steps: int = 100
    paths: int = 1
    scheme: str = "implicit"
    seed: int = 0
    out: str | None = None
    workers: int | None = None
    max_dt: float | None = None
    version: int = CONFIG_VERSION
    # malliavin
    order: int = 1
    method: str = "flow"
    coarsen: int = 4
    # hormander
    x: list | None = None
    depth: int = 6
    tol: float = 1e-9
    # verify
    suites: list = field(default_factory=lambda: list(SUITES))
    epsilons: list = field(default_factory=lambda: [0.1, 0.01, 0.001])
    p_list: list = field(default_factory=lambda: [2, 4])
    # density
    component: int = 0
    bandwidth: Any = "silverman"

    def build_model(self) -> SdeModel:
        return model_zoo(self.model, self.params)

    def initial_state(self, model: SdeModel) -> np.ndarray:
        return default_x0(self.model, model) if self.x0 is None else np.asarray(self.x0, dtype=float)

    @property
    def dt(self) -> float:
        return self.T / self.steps

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


FIELD_NAMES = tuple(f.name for f in fields(ExperimentConfig))


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {message}", key)


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def config_from_mapping(data: Mapping[str, Any]) -> ExperimentConfig:
    unknown = [k for k in data if k not in FIELD_NAMES]
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}", unknown[0])
    cfg = ExperimentConfig(**dict(data))
    validate_config(cfg)
    return cfg


def load_config(path, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Read a JSON config; entries of ``overrides`` (e.g. CLI flags) win."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", None) from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", None)
    data.update(overrides or {})
    return config_from_mapping(data)


def validate_config(cfg: ExperimentConfig) -> None:
    _require(cfg.version == CONFIG_VERSION, "version", f"unsupported version {cfg.version!r} (expected {CONFIG_VERSION})")
    _require(cfg.command in COMMANDS, "command", f"must be one of {COMMANDS}")
    _require(cfg.model in ZOO, "model", f"unknown model {cfg.model!r}; choose from {sorted(ZOO)}")
    _require(isinstance(cfg.params, dict), "params", "must be an object")
    try:
        model = cfg.build_model()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"params: {exc}", "params") from None
    _require(_is_int(cfg.steps) and cfg.steps >= 1, "steps", "must be an integer >= 1")
    _require(_is_int(cfg.paths) and cfg.paths >= 1, "paths", "must be an integer >= 1")
    _require(isinstance(cfg.T, (int, float)) and np.isfinite(cfg.T) and cfg.T > 0, "T", "must be a positive number")
    _require(_is_int(cfg.seed) and cfg.seed >= 0, "seed", "must be a non-negative integer")
    _require(cfg.scheme in SCHEMES, "scheme", f"must be one of {SCHEMES}")
    _require(cfg.scheme != "explicit" or model.globally_lipschitz, "scheme", f"explicit scheme needs a globally Lipschitz model, {cfg.model!r} is not")
    _require(cfg.workers is None or (_is_int(cfg.workers) and cfg.workers >= 1), "workers", "must be an integer >= 1")
    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, dtype=float).reshape(-1)
        _require(x0.size == model.d and np.all(np.isfinite(x0)), "x0", f"must be {model.d} finite numbers")
    if cfg.command != "hormander":
        _check_step(cfg, model)
    _require(cfg.order in (1, 2), "order", "must be 1 or 2")
    _require(cfg.method in ("flow", "direct"), "method", "must be 'flow' or 'direct'")
    _require(_is_int(cfg.coarsen) and cfg.coarsen >= 1, "coarsen", "must be an integer >= 1")
    _require(_is_int(cfg.depth) and cfg.depth >= 0, "depth", "must be an integer >= 0")
    _require(isinstance(cfg.tol, (int, float)) and 0 < cfg.tol < 1, "tol", "must lie in (0, 1)")
    if cfg.x is not None:
        _require(np.asarray(cfg.x, dtype=float).size == model.d, "x", f"must have {model.d} entries")
    _require(isinstance(cfg.suites, list) and all(s in SUITES for s in cfg.suites) and cfg.suites, "suites", f"must be a non-empty subset of {SUITES}")
    eps = np.asarray(cfg.epsilons, dtype=float)
    _require(eps.ndim == 1 and eps.size >= 1 and np.all(eps > 0) and np.all(eps <= 1) and np.all(np.diff(eps) < 0), "epsilons", "must be strictly decreasing values in (0, 1]")
    _require(len(cfg.p_list) >= 1 and all(float(p) >= 2 for p in cfg.p_list), "p_list", "moment orders must be >= 2")
    _require(_is_int(cfg.component) and 0 <= cfg.component < model.d, "component", f"must be in [0, {model.d})")
    _require(cfg.bandwidth == "silverman" or (isinstance(cfg.bandwidth, (int, float)) and cfg.bandwidth > 0), "bandwidth", "must be 'silverman' or a positive number")
    if cfg.command == "density":
        _require(cfg.paths >= 100, "paths", "density estimation needs at least 100 paths")


def _check_step(cfg: ExperimentConfig, model: SdeModel) -> None:
    dt = cfg.dt
    L = model.monotone_constant
    if L is not None and L > 0:
        _require(dt * L < 1, "steps", f"dt * L = {dt * L:.4g} must be < 1 (dt={dt:.4g}, L={L:.4g})")
    if cfg.max_dt is not None:
        _require(isinstance(cfg.max_dt, (int, float)) and cfg.max_dt > 0, "max_dt", "must be a positive number")
        _require(dt <= cfg.max_dt, "steps", f"dt={dt:.4g} exceeds max_dt={cfg.max_dt:.4g}")
        return
    limit = cfg.T / 100
    if L is not None and L > 0:
        limit = min(limit, 1.0 / (2.0 * L))
    # tiny slack so that steps = 100 T passes despite rounding in T / steps
    _require(dt <= limit * (1 + 1e-12), "steps", f"dt={dt:.4g} exceeds the default limit min(1/(2L), T/100) = {limit:.4g}; raise steps or set max_dt")
