"""Run configuration: one validated, fingerprintable bundle of every knob.

Configs load from a JSON file whose sections mirror the module parameter
types; command-line flags override file values field by field. The
fingerprint is a stable hash of the canonicalized config, so equal
fingerprints plus equal inputs imply byte-identical artifacts.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

from .client import GenParams
from .prompts import PromptConfig
from .retrieval import RetrievalConfig
from .rules import MiningParams


class ConfigError(ValueError):
    """Invalid run configuration; message starts with the offending path."""


@dataclass(frozen=True)
class DatasetConfig:
    dir: str = ""
    time_gap: int = 1
    inverse: bool = True

    def __post_init__(self):
        if self.time_gap < 1:
            raise ValueError("time_gap must be >= 1")

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "dataset": DatasetConfig,
    "mining": MiningParams,
    "retrieval": RetrievalConfig,
    "prompt": PromptConfig,
    "generation": GenParams,
}
_SCALARS = ("endpoint", "seed")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig
    mining: MiningParams
    retrieval: RetrievalConfig
    prompt: PromptConfig
    generation: GenParams
    endpoint: Optional[str] = None
    seed: int = 1

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset.as_dict(),
            "mining": self.mining.as_dict(),
            "retrieval": self.retrieval.as_dict(),
            "prompt": self.prompt.as_dict(),
            "generation": self.generation.as_dict(),
            "endpoint": self.endpoint,
            "seed": self.seed,
        }

    @property
    def fingerprint(self) -> str:
        return stable_hash(self.as_dict())


def stable_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _build_section(name: str, cls, file_values: dict, overrides: dict):
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def build_run_config(
    file_payload: Optional[dict] = None, overrides: Optional[dict] = None
) -> RunConfig:
    """Merge a config-file payload with per-field overrides (None = not set)."""
    payload = file_payload or {}
    overrides = overrides or {}
    unknown = set(payload) - set(_SECTIONS) - set(_SCALARS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    for name in _SECTIONS:
        section = payload.get(name, {})
        if section is not None and not isinstance(section, dict):
            raise ConfigError(f"{name}: expected an object")

    sections = {
        name: _build_section(
            name, cls, payload.get(name) or {}, overrides.get(name) or {}
        )
        for name, cls in _SECTIONS.items()
    }
    endpoint = overrides.get("endpoint")
    if endpoint is None:
        endpoint = payload.get("endpoint")
    seed = overrides.get("seed")
    if seed is None:
        seed = payload.get("seed", 1)
    if not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")
    return RunConfig(endpoint=endpoint, seed=seed, **sections)


def load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return payload
