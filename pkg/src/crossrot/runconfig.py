"""Run configuration: one JSON file with dataset/model/train sections.

Every field is optional and falls back to the dataclass defaults; unknown
keys are rejected by name so typos fail loudly instead of silently using a
default. Flag overrides merge on top of the file (flags > file > defaults).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .harness.train import TrainConfig
from .model import ModelConfig
from .panorama import DatasetSpec, IoFailure


class ConfigError(ValueError):
    """Malformed run configuration (unknown key, bad type, bad value)."""


# fields without a dataclass default that still need one for empty configs
_SECTION_DEFAULTS = {
    "dataset": {"n_panoramas": 4},
    "model": {},
    "train": {},
}
_SECTION_TYPES = {"dataset": DatasetSpec, "model": ModelConfig, "train": TrainConfig}


@dataclass
class RunConfig:
    dataset: DatasetSpec
    model: ModelConfig
    train: TrainConfig

    def as_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTION_TYPES}


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(doc).__name__}")
    unknown = set(doc) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config section {sorted(unknown)[0]!r} "
                          f"(expected {sorted(_SECTION_TYPES)})")
    built = {}
    for name, cls in _SECTION_TYPES.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be a JSON object")
        allowed = {f.name for f in fields(cls)}
        for key in section:
            if key not in allowed:
                raise ConfigError(f"unknown key {name}.{key!r} "
                                  f"(known keys: {sorted(allowed)})")
        merged = dict(_SECTION_DEFAULTS[name])
        merged.update(section)
        try:
            obj = cls(**merged)
            obj.validate()
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"section {name!r}: {e}") from e
        built[name] = obj
    return RunConfig(**built)


def load_run_config(path: str | Path | None,
                    overrides: dict[str, dict] | None = None) -> RunConfig:
    """Read the JSON file (or start empty) and merge flag overrides on top."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as e:
            raise IoFailure(f"could not read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    for section, values in (overrides or {}).items():
        slot = doc.setdefault(section, {})
        if not isinstance(slot, dict):
            raise ConfigError(f"section {section!r} must be a JSON object")
        slot.update({k: v for k, v in values.items() if v is not None})
    return parse_run_config(doc)


def echo_config(resolved: dict, out_dir: str | Path) -> Path:
    """Write the exact resolved configuration into an output directory."""
    out_dir = Path(out_dir)
    path = out_dir / "resolved_config.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(resolved, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        raise IoFailure(f"could not write {path}: {e}") from e
    return path
