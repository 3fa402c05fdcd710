"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .domain import Arc, MachineConstraints


class ConfigError(ValueError):
    pass


@dataclass
class FMDConfig:
    sigma_min: float = 0.02
    sigma_max: float = 10.0
    sigma_data: float = 2.5
    batch_size: int = 16
    teacher_lr: float = 1e-3
    teacher_steps: int = 2000
    sample_steps: int = 18
    distill_steps: int = 200
    generator_lr: float = 1e-4
    fake_lr: float = 1e-3
    disc_lr: float = 1e-3
    fake_updates_per_generator: int = 5
    lambda_dmd: float = 1.0
    lambda_gan: float = 0.1
    dmd_normalize: bool = True
    # lower end of the noise range for the distribution-matching gradient; <= sigma_min means the full range
    dmd_sigma_min: float = 2.0

    def validate(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigError("need 0 < sigma_min < sigma_max")
        if self.batch_size < 1 or self.sample_steps < 1:
            raise ConfigError("batch_size and sample_steps must be >= 1")


@dataclass
class L2PlanConfig:
    inner_steps: int = 20
    meta_steps: int = 180
    meta_lr: float = 1e-3
    outer_window: int = 5
    eta: float = 1e-2
    hidden: int = 16
    features: int = 8
    bias_correction: str = "geometric"
    plan_steps: int = 100
    lambda_z: float = 5.0
    lambda_mu: float = 1.0
    train_cases: int = 180
    # cases after the training ones score full-length plans; the best snapshot is kept for planning
    validation_cases: int = 2
    validate_every: int = 30

    def validate(self):
        if self.inner_steps < 1 or self.meta_steps < 0 or self.plan_steps < 1:
            raise ConfigError("inner_steps and plan_steps must be >= 1, meta_steps >= 0")
        if self.bias_correction not in ("geometric", "constant"):
            raise ConfigError("bias_correction must be 'geometric' or 'constant'")
        if self.validation_cases < 0 or self.validate_every < 1:
            raise ConfigError("validation_cases must be >= 0 and validate_every >= 1")


@dataclass
class MetricsConfig:
    dvh_bins: int = 512
    lambda_flex: float = 1.0


@dataclass
class Config:
    seed: int = 0
    n_cp: int = 24
    machine: MachineConstraints = field(default_factory=MachineConstraints)
    fmd: FMDConfig = field(default_factory=FMDConfig)
    l2plan: L2PlanConfig = field(default_factory=L2PlanConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    @property
    def arc(self) -> Arc:
        return Arc(self.n_cp)

    def validate(self) -> "Config":
        if self.n_cp < 2:
            raise ConfigError("n_cp must be >= 2")
        self.fmd.validate()
        self.l2plan.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"machine": MachineConstraints, "fmd": FMDConfig, "l2plan": L2PlanConfig, "metrics": MetricsConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        if k in _SECTIONS and cls is Config:
            kwargs[k] = _build(_SECTIONS[k], v, f"{where}.{k}")
        else:
            default = getattr(cls(), k) if cls is not MachineConstraints else getattr(MachineConstraints(), k)
            if isinstance(default, bool) and not isinstance(v, bool):
                raise ConfigError(f"{where}.{k}: expected a boolean")
            if isinstance(default, (int, float)) and not isinstance(default, bool):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{where}.{k}: expected a number")
                v = type(default)(v) if isinstance(default, float) or float(v).is_integer() else v
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> Config:
    return _build(Config, data, "config").validate()


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config().validate()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)
