"""Pipeline configuration: defaults, JSON loading and validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .fitting import FitConfig
from .registration import MatchWeights
from .tracking import TrackConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiseConfig:
    sigma: float = 1.0
    lam: float = 3.0
    tau: float = 0.1
    steps: int = 20


@dataclass(frozen=True)
class PalateConfig:
    length: int = 15
    d: float = 1.0
    seeds: int = 8


@dataclass(frozen=True)
class BootstrapConfig:
    tongue_iterations: int = 5
    palate_iterations: int = 1


@dataclass(frozen=True)
class EvalConfig:
    samples: int = 10_000
    chunk: int = 1000
    generalization_h: float = 2.0
    pose_dim: int = 4
    speaker_dim: int = 5


@dataclass(frozen=True)
class CorrespondenceConfig:
    restarts: int = 10
    h: float = 1.0
    rounds: int = 20


PATH_KEYS = ("tongue_template", "tongue_landmarks", "palate_template", "palate_landmarks", "regions",
             "midsagittal")


@dataclass(frozen=True)
class PipelineConfig:
    match: MatchWeights = MatchWeights()
    palate_match: MatchWeights = MatchWeights(gamma_min=10.0)
    fit: FitConfig = FitConfig()
    palate_fit: FitConfig = FitConfig(h=1.0)
    track: TrackConfig = TrackConfig()
    denoise: DenoiseConfig = DenoiseConfig()
    palate: PalateConfig = PalateConfig()
    bootstrap: BootstrapConfig = BootstrapConfig()
    evaluation: EvalConfig = EvalConfig()
    correspondence: CorrespondenceConfig = CorrespondenceConfig()
    paths: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return out

    def path(self, key, required=True):
        """Configured path, or the shipped data file for template keys."""
        if key not in PATH_KEYS:
            raise ConfigError(f"unknown path key {key!r}")
        val = self.paths.get(key)
        if val is None:
            from .templates import data_path
            shipped = {"tongue_template": "tongue", "tongue_landmarks": "tongue_landmarks",
                       "palate_template": "palate", "palate_landmarks": "palate_landmarks",
                       "regions": "tongue_regions", "midsagittal": "tongue_midsagittal"}
            return data_path(shipped[key])
        return Path(val)


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    try:
        base = getattr(PipelineConfig(), name)
        return dataclasses.replace(base, **data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {name!r} settings: {e}") from None


def config_from_dict(data: dict, base_dir=None) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        if name == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError("seed must be a nonnegative integer")
            kw[name] = value
        elif name == "paths":
            if not isinstance(value, dict):
                raise ConfigError("paths must be an object")
            bad = sorted(set(value) - set(PATH_KEYS))
            if bad:
                raise ConfigError(f"unknown path key(s): {', '.join(bad)}")
            root = Path(base_dir) if base_dir is not None else Path(".")
            kw[name] = {k: str(root / v) for k, v in value.items()}
        else:
            kw[name] = _section(type(getattr(PipelineConfig(), name)), value, name)
    cfg = PipelineConfig(**kw)
    validate_paths(cfg)
    return cfg


def validate_paths(cfg: PipelineConfig, keys=PATH_KEYS):
    for key in keys:
        p = cfg.path(key)
        if not p.exists():
            raise ConfigError(f"path {key!r} does not exist: {p}")


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    return config_from_dict(data, base_dir=p.parent)
