"""Run configuration: one flat key/value record covering every tunable.

Precedence is profile defaults < config file < command-line flags. Config
files are JSON objects; unknown keys are rejected and every offending key is
reported at once.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError, PathError

CONFIG_ENV = "DUALDIFF_CONFIG"


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0

    # synthetic data
    image_size: int = 64
    object_kind: str = "disk"
    anomaly_type: str = "spot"
    fewshot_count: int = 8
    normal_count: int = 2000
    heldout_normal_count: int = 200
    test_anomaly_count: int = 100
    test_normal_count: int = 100

    # schedule / sampler
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    inference_steps: int = 50
    eta: float = 0.0

    # denoiser
    base_channels: int = 32
    channel_multipliers: list = field(default_factory=lambda: [1, 2, 4])
    num_res_blocks: int = 1
    attention_resolutions: list = field(default_factory=lambda: [16, 8])
    heads: int = 4
    time_embed_dim: int = 128
    context_dim: int = 64
    lora_rank: int = 4
    lora_alpha: float | None = None

    # base pretraining
    pretrain_steps: int = 2000
    pretrain_batch_size: int = 16
    pretrain_learning_rate: float = 5e-4
    pretrain_lr_schedule: str = "constant"

    # dual fine-tuning
    batch_size: int = 4
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"
    steps: int = 2000
    stratify_steps: int = 10
    offset_noise: float = 0.0
    bcm_enabled: bool = False
    cfg_dropout: float = 0.1
    flip: bool = True
    checkpoint_every: int = 0

    # prompts and sampling
    prompt: str = "a vfx with sks"
    prompt_anomaly: str = "sks"
    guidance_scale: float = 2.5
    n_generate: int = 200
    sample_batch_size: int = 25
    background_source: str = ""

    # mask extraction
    mask_threshold: float = 0.05
    close_radius: int = 1
    min_component_area: int = 4

    # downstream detector
    detector_epochs: int = 30
    detector_learning_rate: float = 1e-3
    detector_batch_size: int = 16
    detector_repeats: int = 3

    # paths
    data_dir: str = ""
    base_checkpoint: str = ""
    checkpoint: str = ""
    pairs_dir: str = ""
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# Desk defaults above; "smoke" is the single-CPU acceptance profile and
# "full" the documented full-fidelity settings.
PROFILES: dict[str, dict] = {
    "desk": {},
    "smoke": {
        "image_size": 32, "base_channels": 16, "time_embed_dim": 64, "context_dim": 32,
        "pretrain_steps": 1500, "pretrain_learning_rate": 1e-3, "steps": 2000, "learning_rate": 1e-3,
        "normal_count": 2000, "offset_noise": 0.3, "eta": 1.0,
    },
    "full": {
        "image_size": 512, "lora_rank": 32, "learning_rate": 5e-6, "steps": 5000,
        "inference_steps": 50, "guidance_scale": 2.5, "n_generate": 1000,
    },
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _check_type(name, value):
    default = getattr(RunConfig(), name)
    if name == "lora_alpha":
        return value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list) and all(isinstance(v, int) for v in value)
    return isinstance(value, str)


def validate(cfg: RunConfig) -> RunConfig:
    problems = []
    for name in _FIELDS:
        if not _check_type(name, getattr(cfg, name)):
            problems.append(f"{name}: wrong type {type(getattr(cfg, name)).__name__}")
    if not problems:
        if cfg.profile not in PROFILES:
            problems.append(f"profile: unknown profile {cfg.profile!r}")
        if cfg.image_size < 32 or cfg.image_size & (cfg.image_size - 1):
            problems.append("image_size: must be a power of two >= 32")
        if cfg.object_kind not in ("disk", "rounded_square"):
            problems.append("object_kind: must be disk or rounded_square")
        if cfg.anomaly_type not in ("scratch", "spot", "crack", "missing"):
            problems.append("anomaly_type: must be scratch, spot, crack or missing")
        for name in ("lr_schedule", "pretrain_lr_schedule"):
            if getattr(cfg, name) not in ("constant", "cosine"):
                problems.append(f"{name}: must be constant or cosine")
        for name in ("fewshot_count", "normal_count", "heldout_normal_count", "test_anomaly_count",
                     "test_normal_count", "batch_size", "pretrain_batch_size", "sample_batch_size",
                     "n_generate", "lora_rank", "heads", "detector_repeats", "detector_batch_size"):
            if getattr(cfg, name) < 1:
                problems.append(f"{name}: must be >= 1")
        for name in ("steps", "pretrain_steps", "detector_epochs", "checkpoint_every", "stratify_steps",
                     "close_radius", "min_component_area"):
            if getattr(cfg, name) < 0:
                problems.append(f"{name}: must be >= 0")
        if cfg.offset_noise < 0:
            problems.append("offset_noise: must be >= 0")
        if cfg.T < 2:
            problems.append("T: must be >= 2")
        if not 0 < cfg.beta_start < cfg.beta_end < 1:
            problems.append("beta_start/beta_end: need 0 < beta_start < beta_end < 1")
        if not 2 <= cfg.inference_steps <= cfg.T:
            problems.append("inference_steps: must lie in [2, T]")
        if not 0 <= cfg.eta <= 1:
            problems.append("eta: must lie in [0, 1]")
        if not 0 <= cfg.cfg_dropout < 1:
            problems.append("cfg_dropout: must lie in [0, 1)")
        if not 0 < cfg.mask_threshold < 1:
            problems.append("mask_threshold: must lie in (0, 1)")
        for name in ("learning_rate", "pretrain_learning_rate", "detector_learning_rate"):
            if getattr(cfg, name) <= 0:
                problems.append(f"{name}: must be > 0")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return cfg


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = sorted(set(file_values) - set(_FIELDS)) + sorted(set(overrides) - set(_FIELDS))
    if unknown:
        raise ConfigError("invalid config:\n  " + "\n  ".join(f"{k}: unknown key" for k in unknown))
    profile = overrides.get("profile", file_values.get("profile", "desk"))
    if profile not in PROFILES:
        raise ConfigError(f"invalid config:\n  profile: unknown profile {profile!r}")
    merged = {**PROFILES[profile], **file_values, **overrides, "profile": profile}
    cfg = replace(RunConfig(), **merged)
    return validate(cfg)


def load_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise PathError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def default_config_path() -> str | None:
    return os.environ.get(CONFIG_ENV) or None


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
