"""Pipeline configuration: one YAML file drives every subcommand.

Defaults reproduce the reference settings (48 kHz audio, 512-tap design,
15 look directions, 25 epochs / batch 64 / Adam 2e-4, 201 sigmoid-spaced
thresholds). A stable hash of the canonical config is embedded in every
produced artifact so mismatched artifacts are detectable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import yaml

from .beamform import DEFAULT_FFT_SIZE, DEFAULT_SAMPLE_RATE, DEFAULT_WNG_MIN_DB
from .geometry import LookDirectionSet, LOOK_DIR_PRESETS, default_look_directions
from .model import NetworkConfig, TrainerConfig

FRONT_ENDS = ("mono", "stereo", "raw16", "beamformed")


class ConfigError(ValueError):
    """Raised on invalid or inconsistent pipeline configuration."""


@dataclass(frozen=True)
class BeamformerConfig:
    fft_size: int = DEFAULT_FFT_SIZE
    sample_rate: int = DEFAULT_SAMPLE_RATE
    wng_min_db: float = DEFAULT_WNG_MIN_DB


@dataclass(frozen=True)
class FeatureConfig:
    target_rms: float = 1.0
    per_channel_stats: bool = False
    cache_dtype: str = "float32"  # float32 | float16

    def __post_init__(self):
        if self.cache_dtype not in ("float32", "float16"):
            raise ConfigError(f"cache_dtype must be float32/float16, got {self.cache_dtype}")
        if self.target_rms <= 0:
            raise ConfigError("target_rms must be positive")


@dataclass(frozen=True)
class SimulateConfig:
    """Synthetic benchmark shape: speech scenes with activity gaps plus
    fully silent captures for the balanced negatives."""

    train_speech_scenes: int = 2
    train_speech_duration_s: float = 40.0
    train_silent_scenes: int = 1
    train_silent_duration_s: float = 40.0
    test_scenes: int = 1
    test_duration_s: float = 30.0
    noise_floor_db: float = -30.0
    source_distance_m: float | None = None
    azimuth_limit_deg: float = 24.0
    n_views: int = 1

    def __post_init__(self):
        if self.azimuth_limit_deg <= 0 or self.azimuth_limit_deg > 60:
            raise ConfigError("azimuth_limit_deg must be in (0, 60]")
        if self.n_views < 1 or self.n_views > 11:
            raise ConfigError("n_views must be in [1, 11]")


@dataclass(frozen=True)
class EvalConfig:
    n_thresholds: int = 201
    smooth_sigma: float | None = None


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    front_end: str = "beamformed"
    look_dirs: tuple = LOOK_DIR_PRESETS[15]
    geometry_file: str | None = None
    camera_files: tuple = ()
    max_train_frames: int | None = None
    beamformer: BeamformerConfig = field(default_factory=BeamformerConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    model: NetworkConfig = field(default_factory=NetworkConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.front_end not in FRONT_ENDS:
            raise ConfigError(f"front_end must be one of {FRONT_ENDS}, got {self.front_end}")
        object.__setattr__(self, "look_dirs", tuple(float(a) for a in self.look_dirs))
        object.__setattr__(self, "camera_files", tuple(self.camera_files))
        # The network's input width is bound to the front end.
        expected = self.n_channels
        if self.model.in_channels != expected:
            object.__setattr__(self, "model",
                               NetworkConfig(**{**asdict(self.model),
                                                "in_channels": expected,
                                                "conv_channels": self.model.conv_channels,
                                                "fc_dims": self.model.fc_dims}))

    @property
    def n_channels(self) -> int:
        return {"mono": 1, "stereo": 2, "raw16": 16,
                "beamformed": len(self.look_dirs)}[self.front_end]

    @property
    def look_dir_set(self) -> LookDirectionSet:
        return LookDirectionSet(tuple(sorted(self.look_dirs)))

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        doc = config_to_dict(self)
        doc.update({k: v for k, v in kwargs.items() if v is not None})
        return config_from_dict(doc)


def _filtered_kwargs(cls, doc: dict, where: str) -> dict:
    valid = {f.name for f in cls.__dataclass_fields__.values()} \
        if hasattr(cls, "__dataclass_fields__") else set()
    unknown = set(doc) - valid
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return doc


def config_from_dict(doc: dict) -> PipelineConfig:
    doc = dict(doc or {})
    look = doc.pop("look_dirs", None)
    sub = {}
    for key, cls in (("beamformer", BeamformerConfig), ("features", FeatureConfig),
                     ("trainer", TrainerConfig), ("model", NetworkConfig),
                     ("simulate", SimulateConfig), ("eval", EvalConfig)):
        part = doc.pop(key, {}) or {}
        if not isinstance(part, dict):
            raise ConfigError(f"{key} section must be a mapping")
        for tkey in ("conv_channels", "fc_dims"):
            if tkey in part:
                part[tkey] = tuple(part[tkey])
        sub[key] = cls(**_filtered_kwargs(cls, part, key))
    kwargs = _filtered_kwargs(PipelineConfig, doc, "config")
    if look is not None:
        if isinstance(look, int):
            kwargs["look_dirs"] = default_look_directions(look).azimuths_deg
        else:
            kwargs["look_dirs"] = tuple(float(a) for a in look)
    return PipelineConfig(**kwargs, **sub)


def config_to_dict(config: PipelineConfig) -> dict:
    doc = asdict(config)
    doc["look_dirs"] = list(config.look_dirs)
    doc["camera_files"] = list(config.camera_files)
    for key in ("conv_channels", "fc_dims"):
        doc["model"][key] = list(doc["model"][key])
    return doc


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        doc = yaml.safe_load(f)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return config_from_dict(doc)


def save_config(path, config: PipelineConfig) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(config), f, sort_keys=True)


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
