"""Experiment configuration.

A config file is a JSON object.  Only ``system`` is required; every other
field has a default, and unknown keys are rejected.  Example::

    {"system": "lotka-volterra", "scenario": "case-b",
     "data": {"density": 0.1, "noise_level": 0.0},
     "inference": {"threshold": 0.1}}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "SCENARIOS", "DEFAULT_SCENARIO"]

SCENARIOS = ("case-a", "case-b", "nn-mcmc", "shared-param")
DEFAULT_SCENARIO = {"lotka-volterra": "case-a", "logistic": "nn-mcmc", "black-hole": "shared-param"}
VALID = {
    "lotka-volterra": {"case-a", "case-b"},
    "logistic": {"nn-mcmc"},
    "black-hole": {"shared-param"},
}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (a usage error)."""


@dataclass
class DataConfig:
    density: float = 1.0
    noise_level: float = 0.0
    n_points: Optional[int] = None
    pool_seed: int = 0
    ics: Optional[list] = None
    train_window: Optional[float] = None


@dataclass
class GPConfig:
    restarts: int = 8
    chi_d_init: Optional[float] = None
    screen_size: Optional[int] = 400


@dataclass
class InferenceConfig:
    prior_precision: float = 0.0
    threshold: float = 0.1
    lambda_active: float = 1e-7
    lambda_sparse: float = 1e7
    hidden: int = 8
    nn_lambda: float = 0.01
    shared_lambda: float = 1e-8
    steps: int = 50_000
    burn_in: int = 10_000
    thin: int = 10
    init_draws: int = 16


@dataclass
class PredictionConfig:
    draws: int = 100
    t_end: Optional[float] = None
    n_out: int = 1001
    ic: Optional[list] = None


@dataclass
class BenchmarkConfig:
    densities: list = field(default_factory=lambda: [1.0, 0.1, 0.05, 0.01])
    noise_levels: list = field(default_factory=lambda: [0.0, 0.1, 0.2])
    seeds: list = field(default_factory=lambda: [0])
    baseline: bool = True


@dataclass
class ExperimentConfig:
    system: str
    scenario: Optional[str] = None
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    gp: GPConfig = field(default_factory=GPConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    def __post_init__(self):
        if self.system not in VALID:
            raise ConfigError(f"unknown system {self.system!r}; choose from {sorted(VALID)}")
        if self.scenario is None:
            self.scenario = DEFAULT_SCENARIO[self.system]
        if self.scenario not in VALID[self.system]:
            raise ConfigError(f"scenario {self.scenario!r} is not available for {self.system!r}")
        d = self.data
        if not (0 < d.density <= 1):
            raise ConfigError("data.density must lie in (0, 1]")
        if d.noise_level < 0:
            raise ConfigError("data.noise_level must be non-negative")
        inf = self.inference
        if not inf.steps > inf.burn_in >= 0:
            raise ConfigError("inference.steps must exceed inference.burn_in")
        if not (inf.lambda_sparse > 1 > inf.lambda_active > 0):
            raise ConfigError("need lambda_sparse > 1 > lambda_active > 0")
        if self.prediction.draws < 2:
            raise ConfigError("prediction.draws must be at least 2")

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return _build(cls, raw, "")

    def override(self, **flat):
        """Copy with dotted-key overrides such as ``{"data.density": 0.1}``; ``None`` values are ignored."""
        raw = self.to_dict()
        for key, value in flat.items():
            if value is None:
                continue
            node = raw
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        if "system" in flat and flat["system"] is not None and flat.get("scenario") is None and raw["system"] != self.system:
            raw["scenario"] = None
        return ExperimentConfig.from_dict(raw)


def _build(cls, raw, prefix):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, value in raw.items():
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{name} must be an object")
            kwargs[name] = _build(sub, value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(raw)
