"""Layered run configuration: dataclass defaults < YAML file < environment
variables < command-line overrides.

Environment variables use the prefix EXPRSYNTH_ with double underscores for
nesting, e.g. EXPRSYNTH_TRAIN__BASE_STEPS=100. CLI overrides are dotted
key=value strings, e.g. ``train.base_steps=100``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from pathlib import Path

import yaml

from .manifest import config_digest

ENV_PREFIX = "EXPRSYNTH_"


@dataclass
class ScheduleConfig:
    total_steps: int = 50
    shape: str = "cosine"
    floor: float = 1e-4


@dataclass
class ModelConfig:
    image_size: int = 48
    channels: list = field(default_factory=lambda: [12, 24, 36, 48])
    blocks_per_level: int = 2
    cond_dim: int = 32
    text_len: int = 16
    au_tokens: int = 4
    lambda_au: float = 1.0
    time_dim: int = 64


@dataclass
class CorpusConfig:
    n_train: int = 2000
    n_test: int = 600
    noise_prob: float = 0.15


@dataclass
class TrainStagesConfig:
    base_steps: int = 2500
    base_batch: int = 32
    base_lr: float = 2e-4
    adapter_steps: int = 1200
    adapter_batch: int = 32
    adapter_lr: float = 1e-3
    adapter_text_dropout: float = 0.5
    classifier_steps: int = 1200
    classifier_batch: int = 64
    classifier_lr: float = 1e-3
    head_steps: int = 800
    head_batch: int = 32
    head_lr: float = 1e-3
    cond_dropout: float = 0.1
    ema_decay: float = 0.999


@dataclass
class GuidanceKnobs:
    lambda_g: float | None = None      # None -> 0.05 * sqrt(L * d)
    start_fraction: float = 0.5
    guidance_sign: int = -1


@dataclass
class SynthConfig:
    n_guided: int = 1000
    n_ablation: int = 1000             # per ablation variant (au_only, text_only)
    n_unconditional: int = 512
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    batch_size: int = 64
    agree_threshold: int = 2
    conf_floor: float = 0.5


@dataclass
class EvalConfig:
    downstream_real: int = 30          # real records for downstream baselines
    downstream_synth: int = 120        # accepted synthetic records mixed in (0 = all)
    downstream_steps: int = 600
    downstream_batch: int = 64
    downstream_lr: float = 1e-3
    train_reps: int = 3                # training replicates averaged per point
    scaling_sizes: list = field(default_factory=lambda: [30, 60, 120])
    seeds: list = field(default_factory=lambda: [1, 2, 3])


@dataclass
class RunConfig:
    seed: int = 1337
    out_root: str = "runs/reference"
    workers: int = 1                   # 0 -> leave torch's thread count alone
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    train: TrainStagesConfig = field(default_factory=TrainStagesConfig)
    guidance: GuidanceKnobs = field(default_factory=GuidanceKnobs)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Digest of everything that affects results (runtime knobs like the
        thread count and output root are excluded)."""
        d = self.to_dict()
        d.pop("workers", None)
        d.pop("out_root", None)
        return config_digest(d)


def smoke_profile() -> RunConfig:
    """Minutes-scale profile exercising every stage end to end."""
    cfg = RunConfig(out_root="runs/smoke")
    cfg.schedule.total_steps = 8
    cfg.corpus.n_train = 96
    cfg.corpus.n_test = 48
    cfg.train.base_steps = 20
    cfg.train.adapter_steps = 10
    cfg.train.classifier_steps = 40
    cfg.train.head_steps = 10
    cfg.synth.n_guided = 12
    cfg.synth.n_ablation = 12
    cfg.synth.n_unconditional = 12
    cfg.synth.seeds = [1]
    cfg.synth.batch_size = 12
    cfg.synth.conf_floor = 0.0     # smoke generations are too crude to filter
    cfg.eval.downstream_real = 48
    cfg.eval.downstream_steps = 20
    cfg.eval.scaling_sizes = [4, 8, 12]
    cfg.eval.seeds = [1]
    return cfg


PROFILES = {"reference": RunConfig, "smoke": smoke_profile}


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, list):
        return yaml.safe_load(value)
    if current is None:
        return yaml.safe_load(value)
    return value


def _apply(cfg, dotted: str, value: str) -> None:
    parts = dotted.split(".")
    target = cfg
    for name in parts[:-1]:
        if not hasattr(target, name):
            raise KeyError(f"unknown config section {name!r} in {dotted!r}")
        target = getattr(target, name)
    leaf = parts[-1]
    if not hasattr(target, leaf):
        raise KeyError(f"unknown config key {dotted!r}")
    setattr(target, leaf, _coerce(str(value), getattr(target, leaf)))


def _apply_mapping(cfg, mapping: dict, prefix: str = "") -> None:
    for key, value in mapping.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            _apply_mapping(cfg, value, prefix=f"{dotted}.")
        else:
            _apply(cfg, dotted, value)


def _env_overrides() -> list:
    out = []
    for key, value in sorted(os.environ.items()):
        if not key.startswith(ENV_PREFIX) or key == "EXPRSYNTH_LLM_URL":
            continue
        dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
        out.append((dotted, value))
    return out


def resolve_config(
    profile: str = "reference",
    config_file: str | Path | None = None,
    overrides: list | None = None,
) -> RunConfig:
    """Merge layers in increasing priority: profile, file, env, flags."""
    if profile not in PROFILES:
        raise KeyError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = PROFILES[profile]()
    if config_file:
        loaded = yaml.safe_load(Path(config_file).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {config_file} must hold a mapping")
        _apply_mapping(cfg, loaded)
    for dotted, value in _env_overrides():
        _apply(cfg, dotted, value)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        dotted, value = item.split("=", 1)
        _apply(cfg, dotted.strip(), value.strip())
    return cfg
