"""Experiment configuration: nested dataclasses loaded from JSON with strict keys.

Schema (all sections optional, unknown keys rejected)::

    {"seed": 0, "seeds": [0, 1, 2], "out_dir": "runs/default",
     "world":  {WorldConfig fields},
     "rm":     {RMConfig fields, "ensemble_size": 2, "n_pairs": 3072},
     "rl":     {RLConfig fields for RLHF runs},
     "attack": {AttackConfig fields, "rl": {RLConfig fields}},
     "rounds": 2,
     "data":   {"bank_size": 64, "calibration_per_prompt": 4},
     "eval":   {EvalConfig fields}}
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..adversarial import AttackConfig
from ..errors import ConfigError
from ..policy import RLConfig
from ..reward import RMConfig
from ..world import WorldConfig

OUT_ENV = "ADVRM_OUT"


def _rlhf_rl():
    return RLConfig(max_steps=300, kl_beta=0.02)


@dataclass
class RMSection(RMConfig):
    ensemble_size: int = 2
    n_pairs: int = 3072


@dataclass
class DataConfig:
    bank_size: int = 64
    calibration_per_prompt: int = 4


@dataclass
class EvalConfig:
    eval_every: int = 10
    eval_samples: int = 4
    hacking_margin: float = 0.25
    n_variants: int = 100
    max_edits: int = 3
    ensemble_lambdas: tuple = (0.1, 0.5, 1.0)
    rrm_multipliers: tuple = (2, 3, 5)
    baselines: bool = True
    ablations: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: tuple = (0, 1, 2)
    out_dir: str = ""
    rounds: int = 2
    world: WorldConfig = field(default_factory=WorldConfig)
    rm: RMSection = field(default_factory=RMSection)
    rl: RLConfig = field(default_factory=_rlhf_rl)
    attack: AttackConfig = field(default_factory=AttackConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.world.validate()
        self.rl.validate()
        self.attack.validate()
        if self.rm.ensemble_size < 2:
            raise ConfigError("the ensemble needs at least two reward models")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.data.bank_size < 64:
            raise ConfigError("strict references need at least 64 SFT samples per prompt")
        if self.rm.n_pairs < 1 or self.rm.epochs < 1 or self.rm.batch_size < 1:
            raise ConfigError("bad reward-model training settings")
        if self.eval.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def output_dir(self, override=None) -> Path:
        if override:
            return Path(override)
        if self.out_dir:
            return Path(self.out_dir)
        return Path(os.environ.get(OUT_ENV, "runs")) / f"seed{self.seed}"


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, data, path, base=None):
    """Override fields of ``base`` (default: ``cls()``), so partial sections keep their section defaults."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    base = cls() if base is None else base
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{path}{name}.", getattr(base, name))
        else:
            kwargs[name] = _coerce(tp, value, path + name)
    return dataclasses.replace(base, **kwargs)


def _coerce(tp, value, name):
    try:
        if tp is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if tp is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError
            return int(value)
        if tp is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if tp is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        if tp is tuple:
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return tuple(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None
    return value


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    for item in overrides:
        apply_override(data, item)
    return from_dict(data)


def apply_override(data: dict, item: str):
    """``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value
    return data
