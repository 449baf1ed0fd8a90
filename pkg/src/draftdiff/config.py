"""Run configuration: a TOML or JSON file mirroring every pipeline knob.

Unknown keys are rejected loudly; every field has a default, so an empty
file (or no file) is a valid configuration.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .sampler import SamplerConfig
from .trainer import TrainConfig
from .unet import UNetConfig


@dataclass(frozen=True)
class DataConfig:
    dir: str = "data/glyphs"
    n_per_category: int = 350
    seed: int = 7


@dataclass(frozen=True)
class EditDefaults:
    rho: float = 0.5
    inner_steps: int = 1


@dataclass(frozen=True)
class EvalConfig:
    n_drafts: int = 32
    coverage_k: int = 5
    seed: int = 2024
    extractor_epochs: int = 8


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "runs/default"
    model: str = ""
    codec: str = ""
    extractor: str = ""


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    edit: EditDefaults = field(default_factory=EditDefaults)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d = dataclasses.asdict(v)
            if f.name == "unet":
                d["channel_multipliers"] = list(v.channel_multipliers)
            out[f.name] = d
        return out


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _build_section(name: str, cls_factory, payload: dict):
    proto = cls_factory()
    cls = type(proto)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ValueError(f"config section [{name}] has unknown keys: {unknown}")
    if name == "unet" and "channel_multipliers" in payload:
        payload = {**payload, "channel_multipliers": tuple(payload["channel_multipliers"])}
    return dataclasses.replace(proto, **payload)


def parse_config(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ValueError(f"config has unknown sections: {unknown}")
    sections = {
        name: _build_section(name, factory, raw.get(name, {}))
        for name, factory in _SECTIONS.items()
    }
    return RunConfig(**sections)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    text = p.read_text()
    if p.suffix.lower() == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        raw = tomllib.loads(text)
    elif p.suffix.lower() == ".json":
        raw = json.loads(text)
    else:
        raise ValueError(f"config {p} must be .toml or .json")
    return parse_config(raw)
