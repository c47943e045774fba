"""Layered run configuration: defaults < preset < config file < environment < flags."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigError
from .policy import PolicyConfig
from .pruning import PruningConfig
from .search import PRESETS, SearchConfig

ENV_PREFIX = "SQLO1_"


def _bool(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _opt_int(v: Any) -> Optional[int]:
    return None if v is None or v == "" else int(v)


def _opt_str(v: Any) -> Optional[str]:
    return None if v is None or v == "" else str(v)


# key -> (parser, default); every key doubles as a config-file field, an
# SQLO1_<KEY> environment variable and a --<key> flag
FIELDS: dict[str, tuple] = {
    "preset": (str, "spider"),
    "rollouts": (int, None),
    "beam_width": (int, 5),
    "top_d": (int, 3),
    "max_depth": (int, None),
    "exploration_weight": (float, None),
    "delta": (float, 0.5),
    "similarity_threshold": (float, 0.7),
    "reward_mode": (str, "oracle"),
    "early_stop": (_bool, True),
    "alpha": (float, 0.6),
    "beta": (float, 100.0),
    "max_fragment_tokens": (int, 64),
    "temperature": (float, 0.6),
    "prune": (_bool, True),
    "prune_lambda": (float, 0.9),
    "prune_t0": (_opt_int, None),
    "samples": (int, 3),
    "timeout_ms": (float, 30000.0),
    "workers": (int, 1),
    "endpoint": (_opt_str, None),
    "api_key": (_opt_str, None),
    "model": (_opt_str, None),
    "max_in_flight": (int, 8),
    "native_beam": (_bool, False),
    "seed": (_opt_int, None),
}

_PRESET_KEYS = {"n_rollouts": "rollouts", "max_depth": "max_depth", "exploration_weight": "exploration_weight"}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    def __getattr__(self, name: str):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def search(self) -> SearchConfig:
        v = self.values
        return SearchConfig(
            n_rollouts=v["rollouts"], beam_width=v["beam_width"], top_d=v["top_d"],
            max_depth=v["max_depth"], exploration_weight=v["exploration_weight"], delta=v["delta"],
            similarity_threshold=v["similarity_threshold"], reward_mode=v["reward_mode"],
            early_stop=v["early_stop"],
        )

    @property
    def policy(self) -> PolicyConfig:
        v = self.values
        return PolicyConfig(alpha=v["alpha"], beta=v["beta"], beam_width=v["beam_width"],
                            max_fragment_tokens=v["max_fragment_tokens"], decode_temperature=v["temperature"])

    @property
    def pruning(self) -> PruningConfig:
        v = self.values
        t0 = v["prune_t0"] if v["prune_t0"] is not None else max(1, v["max_depth"] // 2)
        return PruningConfig(lam=v["prune_lambda"], t0=t0, enabled=v["prune"])

    def validate(self) -> "RunConfig":
        self.search
        self.policy
        self.pruning
        if self.values["workers"] < 1:
            raise ConfigError("workers must be >= 1")
        if self.values["samples"] < 0:
            raise ConfigError("samples must be >= 0")
        return self


def _parse_layer(layer: Mapping[str, Any], origin: str) -> dict:
    out = {}
    for key, raw in layer.items():
        if raw is None:
            continue
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r} in {origin}")
        parser = FIELDS[key][0]
        try:
            out[key] = parser(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r} in {origin}: {raw!r}") from exc
    return out


def load_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def env_layer(environ: Optional[Mapping[str, str]] = None) -> dict:
    environ = os.environ if environ is None else environ
    return {k: environ[ENV_PREFIX + k.upper()] for k in FIELDS if ENV_PREFIX + k.upper() in environ}


def resolve(flags: Optional[Mapping[str, Any]] = None, config_file: Optional[Path] = None,
            environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Merge every layer and validate the result."""
    layers = [
        ("file", _parse_layer(load_file(config_file), str(config_file)) if config_file else {}),
        ("env", _parse_layer(env_layer(environ), "environment")),
        ("flags", _parse_layer(flags or {}, "flags")),
    ]
    values = {k: d for k, (_, d) in FIELDS.items()}
    sources = {k: "default" for k in FIELDS}

    preset = values["preset"]
    for _, layer in layers:
        preset = layer.get("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    for src_key, key in _PRESET_KEYS.items():
        values[key] = PRESETS[preset][src_key]
        sources[key] = f"preset:{preset}"

    for origin, layer in layers:
        for key, value in layer.items():
            values[key] = value
            sources[key] = origin
    return RunConfig(values, sources).validate()
