"""JSON run configuration with strict key checking.

Four optional sections mirror the dataclass configs: "synth", "network",
"train", "ransac". Unknown sections or keys fail with an error naming the
offending key. Worker count for scene-parallel commands comes from the
A2_THREADS environment variable (default 1).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .network import NetworkConfig
from .posemetrics import RansacConfig
from .synth import InvalidConfig, SynthConfig
from .training import TrainConfig

SECTIONS = {
    "synth": SynthConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "ransac": RansacConfig,
}


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise InvalidConfig(f"config section '{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise InvalidConfig(f"unknown config key: {name}.{key}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"invalid '{name}' config: {exc}") from exc


def parse_run_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise InvalidConfig("run config must be a JSON object")
    for key in obj:
        if key not in SECTIONS:
            raise InvalidConfig(f"unknown config key: {key}")
    built = {}
    for name, cls in SECTIONS.items():
        built[name] = _build_section(name, cls, obj.get(name, {}))
    cfg = RunConfig(**built)
    cfg.synth.validate()
    return cfg


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_run_config(obj)


def worker_count() -> int:
    raw = os.environ.get("A2_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidConfig(f"A2_THREADS must be an integer, got {raw!r}")
