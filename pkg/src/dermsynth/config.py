"""Pipeline configuration: one document holding the experiment spec plus every stage's settings."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .classifier import ClassifierConfig
from .diffusion.sampling import SamplerConfig
from .diffusion.train import DiffusionTrainConfig
from .errors import ConfigError
from .types import ExperimentSpec


@dataclass
class DataConfig:
    # Unset paths mean "generate the procedural fixture corpus".
    d7p_metadata: str | None = None
    d7p_images: str | None = None
    ham_metadata: str | None = None
    ham_images: str | None = None
    test_fraction: float = 0.2
    fixture_seed: int = 0
    fixture_size: int = 64

    @property
    def uses_fixtures(self):
        return not (self.d7p_metadata or self.ham_metadata)


@dataclass
class CaptionConfig:
    d7p_provider: str = "remote_text"
    ham_provider: str = "remote_vision"
    model: str | None = None
    base_url: str | None = None
    temperature: float = 0.3
    max_retries: int = 3
    max_workers: int = 4
    budget: int = 77
    tokenizer: str = "whitespace"
    paraphrase_provider: str = "remote_text"


@dataclass
class DiffusionConfig:
    backend: str = "pretrained"
    checkpoint: str = "CompVis/stable-diffusion-v1-4"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lora_rank: int = 64
    lora_alpha: float | None = None
    lora_targets: tuple = ("to_q", "to_k", "to_v", "to_out")
    joint_adapter: bool = True
    train: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    # Toy backend only: steps used to build its base checkpoint when none is shipped.
    base_steps: int = 8000


@dataclass
class PipelineConfig:
    profile: str = "full"
    seed: int = 0
    offline: bool = False
    work_dir: str = "runs"
    spec: ExperimentSpec = field(default_factory=ExperimentSpec)
    data: DataConfig = field(default_factory=DataConfig)
    captions: CaptionConfig = field(default_factory=CaptionConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def to_dict(self):
        out = _plain(self)
        out["spec"] = self.spec.to_dict()
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed):
        cfg = copy.deepcopy(self)
        cfg.seed = seed
        cfg.spec = ExperimentSpec.from_dict({**self.spec.to_dict(), "seed": seed})
        return cfg


def _plain(obj):
    if isinstance(obj, ExperimentSpec):
        return obj.to_dict()
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def desk_profile() -> PipelineConfig:
    """CPU-sized run: fixture corpus, offline providers, toy diffusion, at most 20 images per class."""
    return PipelineConfig(
        profile="desk",
        offline=True,
        spec=ExperimentSpec(real_cap_per_class=10, total_per_class=20),
        captions=CaptionConfig(d7p_provider="offline_template", ham_provider="offline_template",
                               paraphrase_provider="offline_template"),
        diffusion=DiffusionConfig(
            backend="toy",
            checkpoint="",
            timesteps=200,
            beta_start=5e-4,
            beta_end=0.1,
            train=DiffusionTrainConfig(
                steps=200, learning_rate=1e-3, resolution=32, batch_size=16, caption_dropout=0.3, log_every=50,
                validate_every_epochs=5,
            ),
            sampler=SamplerConfig(steps=20, guidance_scale=7.5, eta=1.0, resolution=32, batch_size=64),
        ),
        classifier=ClassifierConfig(input_size=32, max_epochs=15, patience=5),
    )


def full_profile() -> PipelineConfig:
    return PipelineConfig(profile="full")


PROFILES = {"desk": desk_profile, "full": full_profile}


def _merge(target, updates, path=""):
    """Overlay a nested dict onto a dataclass tree; unknown keys are errors."""
    for key, value in updates.items():
        where = f"{path}{key}"
        if not hasattr(target, key) or key not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {where!r}")
        current = getattr(target, key)
        if isinstance(current, ExperimentSpec):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            merged = {**current.to_dict(), **value}
            unknown = set(value) - set(current.to_dict())
            if unknown:
                raise ConfigError(f"unknown config key(s) under {where}: {sorted(unknown)}")
            setattr(target, key, ExperimentSpec.from_dict(merged))
        elif is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            _merge(current, value, where + ".")
            if hasattr(current, "__post_init__"):
                current.__post_init__()
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(target, key, value)


def load_config(path=None, profile=None, seed=None, offline=None) -> PipelineConfig:
    """Profile defaults, overlaid with the YAML document at ``path``, then CLI overrides."""
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a mapping")
    name = profile or doc.pop("profile", None) or "desk"
    doc.pop("profile", None)
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    cfg = PROFILES[name]()
    try:
        _merge(cfg, doc)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    if seed is not None:
        cfg = cfg.with_seed(seed)
    elif cfg.spec.seed != cfg.seed:
        cfg = cfg.with_seed(cfg.seed)
    if offline is not None:
        cfg.offline = bool(offline) or cfg.offline
    return cfg


def dump_config(cfg: PipelineConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))

