"""Experiment configuration: nested dataclasses addressed by flat dotted keys."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..classifier import TrainConfig
from ..data import DEFAULT_DIMS
from ..errors import ParameterError
from ..segmenter import InferenceConfig
from ..selfplay import DEFAULT_POLICY_INPUT, RLConfig

AXES = ("none", "train_size", "window_size", "rho")
DEFAULT_AXIS_VALUES = {
    "train_size": [4, 8, 16, 24],
    "window_size": [[8, 8, 4], [16, 16, 8], [32, 32, 16]],
    "rho": [0.1, 0.2, 0.3, 0.4, 0.5],
}


@dataclass
class DataConfig:
    n_cases: int = 100
    dims: tuple = DEFAULT_DIMS
    roi_count_range: tuple = (1, 3)
    positive_fraction: float = 0.5
    split_ratio: tuple = (3, 2)


@dataclass
class PolicyConfig:
    input_dims: tuple = DEFAULT_POLICY_INPUT


@dataclass
class AblationConfig:
    axis: str = "none"
    values: list = field(default_factory=list)
    seeds: int = 3


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    classifier: TrainConfig = field(default_factory=TrainConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self):
        if self.ablation.axis not in AXES:
            raise ParameterError(f"ablation.axis must be one of {AXES}, got {self.ablation.axis!r}")
        if self.ablation.axis != "none" and not self.axis_values():
            raise ParameterError("ablation.values must be non-empty when an axis is set")
        if self.ablation.seeds < 1:
            raise ParameterError("ablation.seeds must be positive")
        if self.data.n_cases < 2:
            raise ParameterError("data.n_cases must be at least 2")
        return self

    def axis_values(self):
        return list(self.ablation.values) or list(DEFAULT_AXIS_VALUES.get(self.ablation.axis, []))

    def to_flat(self):
        return flatten(self)

    def to_json(self):
        return json.dumps(self.to_flat(), indent=1, sort_keys=True)


def flatten(obj, prefix=""):
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(current, value, key):
    if isinstance(current, str) and isinstance(value, str) and len(value) >= 2 and value[0] == value[-1] == '"':
        value = json.loads(value)  # a JSON-quoted string is accepted as well as a bare one
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"cannot parse value for {key!r}: {value!r}") from exc
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ParameterError(f"{key!r} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ParameterError(f"{key!r} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ParameterError(f"{key!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, list):
            raise ParameterError(f"{key!r} expects a list, got {value!r}")
        return tuple(value)
    if isinstance(current, list) and not isinstance(value, list):
        raise ParameterError(f"{key!r} expects a list, got {value!r}")
    return value


def apply_overrides(cfg: ExperimentConfig, flat: dict) -> ExperimentConfig:
    """Return a copy of ``cfg`` with dotted-key values applied and sub-configs re-validated."""
    current = flatten(cfg)
    merged = {}
    for key, value in flat.items():
        if key not in current:
            raise ParameterError(f"unknown config key {key!r}")
        merged[key] = _coerce(_raw(cfg, key), value, key)
    return _rebuild(cfg, merged, "")


def _raw(obj, key):
    for part in key.split("."):
        obj = getattr(obj, part)
    return obj


def _rebuild(obj, merged, prefix):
    kwargs = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            kwargs[f.name] = _rebuild(v, merged, key + ".")
        else:
            kwargs[f.name] = merged.get(key, v)
    try:
        return type(obj)(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"invalid configuration in {prefix or 'top level'}: {exc}") from exc


def parse_set_args(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ParameterError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def load_config(path=None, overrides=None, seed=None, out=None) -> ExperimentConfig:
    """Defaults, then the JSON file, then ``--set`` pairs, then ``--seed``/``--out``."""
    cfg = ExperimentConfig()
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParameterError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise ParameterError("config file must hold a JSON object of dotted keys")
        cfg = apply_overrides(cfg, flat)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    extra = {}
    if seed is not None:
        extra["seed"] = int(seed)
    if out is not None:
        extra["out"] = str(out)
    if extra:
        cfg = apply_overrides(cfg, extra)
    return cfg.validate()
