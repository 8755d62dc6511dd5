"""Run configuration: every training hyperparameter surfaced, validated up
front, serialized into checkpoints and reports.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


DEFAULT_CLASS_WEIGHTS = {"object": 1.0, "building": 0.5, "ground": 0.5, "sky": 0.0}

# CPU-scale preset; everything else keeps the full-scale defaults.
PROFILES = {
    "desk": {
        "width": 128,
        "height": 96,
        "batch_size": 4,
        "steps": 1500,
        "checkpoint_every": 500,
        "encoder_widths": [8, 16, 32, 64, 128],
        "decoder_widths": [8, 16, 32, 64, 128],
    },
}


@dataclass
class TrainConfig:
    """Hyperparameters of one training run (full-scale defaults)."""

    width: int = 640
    height: int = 192
    backbone: str = "small"
    encoder_widths: list | None = None   # "small" backbone only
    pyramid_channels: list | None = None
    decoder_widths: list | None = None

    lr: float = 1e-4
    batch_size: int = 16
    real_fraction: float = 0.5
    steps: int = 1500
    seed: int = 1

    smooth_weight: float = 1e-3     # weight of the disparity smoothness term
    beta_da: float = 10.0           # task-accuracy vs domain-invariance trade-off
    grl_enabled: bool = True        # False: classifier trains on detached features
    reversal_scale: float = 1.0

    d_min: float = 0.1              # disparity-to-depth range (meters)
    d_max_model: float = 100.0
    d_max: float = 80.0             # supervision / evaluation depth cap (meters)

    flip_prob: float = 0.5
    jitter_prob: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.1

    checkpoint_every: int = 500
    class_weights: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_WEIGHTS))

    def __post_init__(self):
        if not 0.0 < self.real_fraction < 1.0:
            raise ConfigError("real_fraction must lie strictly inside (0, 1), got %r" % self.real_fraction)
        n_real = self.batch_size * self.real_fraction
        if abs(n_real - round(n_real)) > 1e-9 or round(n_real) == 0:
            raise ConfigError("batch_size * real_fraction must be a positive integer, "
                              "got %r * %r" % (self.batch_size, self.real_fraction))
        if self.width % 32 or self.height % 32:
            raise ConfigError("width and height must be divisible by 32, got %dx%d" % (self.width, self.height))
        if self.lr <= 0:
            raise ConfigError("lr must be positive, got %r" % self.lr)
        if self.steps < 0:
            raise ConfigError("steps must be non-negative, got %r" % self.steps)
        if self.d_min <= 0 or self.d_min >= self.d_max_model:
            raise ConfigError("need 0 < d_min < d_max_model, got %r / %r" % (self.d_min, self.d_max_model))
        if self.d_max <= 0:
            raise ConfigError("d_max must be positive, got %r" % self.d_max)
        if self.beta_da < 0:
            raise ConfigError("beta_da must be non-negative, got %r" % self.beta_da)
        for key in ("flip_prob", "jitter_prob"):
            value = getattr(self, key)
            if not 0.0 <= value <= 1.0:
                raise ConfigError("%s must lie in [0, 1], got %r" % (key, value))
        for name, weight in self.class_weights.items():
            if not 0.0 <= float(weight) <= 1.0:
                raise ConfigError("class weight for %r must lie in [0, 1], got %r" % (name, weight))

    @property
    def n_real(self):
        return round(self.batch_size * self.real_fraction)

    @property
    def n_virtual(self):
        return self.batch_size - self.n_real


@dataclass
class RunConfig(TrainConfig):
    """TrainConfig plus data locations, evaluation, and calibration options."""

    data_root: str = ""
    output_dir: str = "runs/default"
    psi_file: str | None = None

    eval_cap: float = 80.0
    d_eval_min: float = 1e-3
    eval_crop: list | None = None   # [y0, y1, x0, x1] in pixels, optional

    calibration_steps: int = 300
    calibration_batch: int = 4
    calibration_lr: float = 1e-4

    def __post_init__(self):
        super().__post_init__()
        if self.eval_cap <= self.d_eval_min:
            raise ConfigError("eval_cap must exceed d_eval_min, got %r / %r" % (self.eval_cap, self.d_eval_min))
        if self.eval_crop is not None and len(self.eval_crop) != 4:
            raise ConfigError("eval_crop must be [y0, y1, x0, x1], got %r" % (self.eval_crop,))
        if self.calibration_steps < 0 or self.calibration_batch <= 0:
            raise ConfigError("calibration_steps/calibration_batch out of range")


_FIELD_NAMES = {f.name for f in dataclasses.fields(RunConfig)}


def config_from_dict(data, profile=None):
    """Build a RunConfig from a plain dict, rejecting unknown keys.

    A profile (e.g. 'desk') supplies alternative defaults; explicit keys win.
    """
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping, got %s" % type(data).__name__)
    unknown = sorted(set(data) - _FIELD_NAMES)
    if unknown:
        raise ConfigError("unknown config key %r" % unknown[0])
    merged = {}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError("unknown profile %r (have %s)" % (profile, sorted(PROFILES)))
        merged.update(PROFILES[profile])
    merged.update(data)
    return RunConfig(**merged)


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def load_config(path, profile=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found: %s" % path)
    data = yaml.safe_load(path.read_text())
    if data is None:
        data = {}
    return config_from_dict(data, profile=profile)


def save_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
