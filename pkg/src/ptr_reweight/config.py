"""One JSON document that resolves into every module's configuration."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .bench.train import TrainConfig
from .bench.world import CorruptionSpec, WorldConfig
from .verify import VerifyConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    n_episodes: int = 400


@dataclass
class RunConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    world: WorldConfig = field(default_factory=WorldConfig)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of length {len(default)}")
        return tuple(_coerce(v, d, f"{where}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    return value


def build(cls, data: dict | None, where: str = "config"):
    """Instantiate dataclass ``cls`` from ``data``, recursing into nested dataclasses.

    Missing keys take their defaults; unknown keys raise :class:`ConfigError`.
    """
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    default = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        cur = getattr(default, name)
        if dataclasses.is_dataclass(cur):
            kwargs[name] = build(type(cur), value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(value, cur, f"{where}.{name}")
    try:
        return dataclasses.replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return build(RunConfig, data)


# Sweepable shorthand names and where they live in the resolved config.
SWEEP_PARAMS = {
    "tau0": ("train", "scorer", "tau_score"),
    "beta0": ("train", "weight", "beta"),
    "w_max": ("train", "weight", "w_max"),
    "alpha": ("train", "weight", "alpha"),
    "gamma": ("train", "weight", "gamma"),
}


def with_param(cfg: RunConfig, param: str, value: float) -> RunConfig:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    data = cfg.to_dict()
    node = data
    *path, leaf = SWEEP_PARAMS[param]
    for key in path:
        node = node[key]
    node[leaf] = float(value)
    return build(RunConfig, data)
