"""Experiment configuration: nested dataclasses loaded from strict JSON."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class LayoutSection:
    T: int = 12
    H: int = 2
    W: int = 2
    D_model: int = 16
    heads: int = 2
    Tc: int = 2
    To: int = 1
    causal: bool = True


@dataclass
class PhiSection:
    P: int = 2
    D_h: int | None = None  # default 2 * head_dim
    D_e: int | None = None  # default 2 * head_dim
    nonneg_mode: str = "shifted-elu"
    activation: str = "tanh"


@dataclass
class DistillSection:
    lr: float = 1e-3
    steps: int = 500
    seed: int = 7
    optimizer: str = "sgd"
    match: str = "block"
    batch_size: int = 1
    n_heldout: int = 8
    eval_every: int = 50


@dataclass
class SweepSection:
    durations: list[int] = field(default_factory=lambda: [21, 42, 84, 168])
    variants: list[str] = field(default_factory=lambda: ["softmax", "linear", "hybrid"])
    H: int = 30
    W: int = 52
    heads: int = 12
    head_dim: int = 128
    Tc: int = 3
    To: int = 1
    Dprime: int = 256
    Dprime_sensitivity: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    include_phi_cost: bool = True


@dataclass
class StreamSection:
    durations: list[int] = field(default_factory=lambda: [21, 210, 2100])


@dataclass
class EquivalenceSection:
    instances: int = 100


@dataclass
class GradcheckSection:
    instances: int = 5
    params_per_instance: int = 20
    h: float = 1e-5
    threshold: float = 1e-4


@dataclass
class ExperimentConfig:
    layout: LayoutSection = field(default_factory=LayoutSection)
    phi: PhiSection = field(default_factory=PhiSection)
    distill: DistillSection = field(default_factory=DistillSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    stream: StreamSection = field(default_factory=StreamSection)
    equivalence: EquivalenceSection = field(default_factory=EquivalenceSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    precision: str = "double"
    seed: int = 0
    out: str = "out"
    fault: str | None = None

    @property
    def head_dim(self) -> int:
        return self.layout.D_model // self.layout.heads

    def validate(self) -> "ExperimentConfig":
        from . import faults
        from .chunking import make_layout

        lay = self.layout
        if lay.heads < 1 or lay.D_model % lay.heads:
            raise ConfigError(f"D_model={lay.D_model} must be a positive multiple of heads={lay.heads}")
        try:
            make_layout(lay.T, lay.H, lay.W, self.head_dim, lay.Tc, lay.To)
            make_layout(max(self.sweep.durations, default=1), self.sweep.H, self.sweep.W,
                        self.sweep.head_dim, self.sweep.Tc, self.sweep.To)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be single or double, got {self.precision!r}")
        if self.phi.nonneg_mode not in ("shifted-elu", "none"):
            raise ConfigError(f"unknown nonneg_mode {self.phi.nonneg_mode!r}")
        if self.phi.activation not in ("identity", "tanh", "softplus"):
            raise ConfigError(f"unknown activation {self.phi.activation!r}")
        d_e = self.phi.D_e if self.phi.D_e is not None else 2 * self.head_dim
        if self.phi.P < 1 or d_e % self.phi.P:
            raise ConfigError(f"D_e={d_e} must be divisible by P={self.phi.P}")
        if not self.distill.lr > 0:
            raise ConfigError("distill.lr must be positive")
        if self.distill.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.distill.optimizer!r}")
        if self.distill.match not in ("block", "attention"):
            raise ConfigError(f"unknown match target {self.distill.match!r}")
        if not self.sweep.durations or not self.stream.durations:
            raise ConfigError("duration lists must be non-empty")
        if set(self.sweep.variants) - {"softmax", "linear", "hybrid"}:
            raise ConfigError(f"unknown sweep variants {self.sweep.variants}")
        if self.fault is not None and self.fault not in faults.KNOWN:
            raise ConfigError(f"unknown fault {self.fault!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = _coerce(value, tp, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return [_coerce(v, args[0], f"{where}[]") for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise ConfigError(f"unsupported type for {where}")


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(data)
