"""Flat ``section.key`` experiment configuration with full-scale defaults.

Precedence: built-in defaults < config file < profile < ``--set`` overrides. The
profile is a command-line choice, so it outranks the file; the ``full`` profile is
empty and leaves file values alone. Unknown keys are rejected everywhere.
"""
from __future__ import annotations

import ast
import json
import os
from copy import deepcopy
from typing import Any, Dict, Iterable, Mapping, Optional

import tomli

from .augment import CropPolicy
from .dataset import SplitSpec, SyntheticSpec
from .losses import TNC_VARIANTS, LossWeights
from .models import DiscriminatorConfig, EncoderConfig, ProjectorConfig
from .preprocess import SpectrogramParams

CACHE_ENV = "VNIBCREG_CACHE"


class ConfigError(ValueError):
    pass


DEFAULTS: Dict[str, Any] = {
    "dataset.manifest": "",
    "dataset.synthetic": False,
    "dataset.synthetic_n_per_class": 50,
    "dataset.synthetic_recipes": {"Regional": "low_to_mid", "Rockfall": "mid_to_high", "Spike": "high_to_low"},
    "dataset.synthetic_noise_level": 0.2,
    "dataset.synthetic_seed": 0,
    "dataset.synthetic_background_lines": [2, 5],
    "dataset.synthetic_background_amplitude": [0.3, 1.0],
    "dataset.train_fraction": 0.8,
    "dataset.min_test_per_class": 1,
    "preprocess.window_seconds": 0.08,
    "preprocess.overlap_fraction": 0.125,
    "preprocess.target_height": 128,
    "preprocess.log_epsilon": 1e-12,
    "preprocess.taper": "tukey",
    "preprocess.taper_param": 0.25,
    "preprocess.cache_root": "",
    "crop.policy": "NC",
    "crop.width_fraction": 0.10,
    "crop.sigma": 1.0,
    "crop.radius": 2.0,
    "crop.exclusion_radius": 4.0,
    "loss.lambda": 10.0,
    "loss.mu": 10.0,
    "loss.nu": 10.0,
    "loss.rho": 13.0,
    "loss.gamma": 1.0,
    "loss.epsilon": 1e-4,
    "loss.unbiased_variance": True,
    "loss.invariance_reduction": "mean",
    "loss.tnc_variant": "modified",
    "loss.vibcreg": "on",
    "tnc.paper_literal_sign": False,
    "model.encoder": "resnet34_1ch",
    "model.representation_dim": 512,
    "model.projector_hidden_dim": 1024,
    "model.projector_output_dim": 512,
    "model.projector_hidden_layers": 2,
    "model.whitening_iterations": 5,
    "model.whitening_group_size": 64,
    "model.discriminator_hidden_dim": 0,
    "model.discriminator_dropout": 0.5,
    "train.epochs": 300,
    "train.batch_size": 128,
    "train.learning_rate": 0.001,
    "train.seed": 0,
    "train.samples_per_event": 1,
    "train.num_threads": 0,
    "eval.epochs": 100,
    "eval.finetune_epochs": 100,
    "eval.batch_size": 64,
    "eval.linear_lr": 0.001,
    "eval.encoder_lr": 0.0005,
    "eval.classifier_lr": 0.001,
    "eval.seeds": [0, 1, 2],
    "eval.channel_agg": "mean",
    "eval.n_percents": [5, 10, 80],
    "eval.standardize_features": True,
}

PROFILES: Dict[str, Dict[str, Any]] = {
    "full": {},
    "desk": {
        "dataset.synthetic": True,
        "model.encoder": "tiny_cnn",
        "model.representation_dim": 64,
        "model.projector_hidden_dim": 256,
        "model.projector_output_dim": 64,
        "model.whitening_group_size": 16,
        "train.epochs": 30,
        "train.batch_size": 32,
        "eval.finetune_epochs": 10,
        "eval.n_percents": [5, 80],
    },
}

# Rows of the linear / fine-tuning ablation tables, in display order.
ABLATION_ROWS: Dict[str, Dict[str, Any]] = {
    "RandInit": {"train.epochs": 0},
    "naive TNC": {"loss.vibcreg": "off", "loss.tnc_variant": "original", "crop.policy": "NC"},
    "naive VIbCReg": {"loss.vibcreg": "on", "loss.tnc_variant": "off", "crop.policy": "RC"},
    "VIbCReg+NC": {"loss.vibcreg": "on", "loss.tnc_variant": "off", "crop.policy": "NC"},
    "VIbCReg+NC+TNC-original": {"loss.vibcreg": "on", "loss.tnc_variant": "original", "crop.policy": "NC"},
    "VNIbCReg": {"loss.vibcreg": "on", "loss.tnc_variant": "modified", "crop.policy": "NC"},
}

_CHOICES = {
    "crop.policy": ("NC", "RC"),
    "loss.tnc_variant": TNC_VARIANTS,
    "loss.vibcreg": ("on", "off"),
    "loss.invariance_reduction": ("mean", "sum"),
    "model.encoder": ("resnet34_1ch", "tiny_cnn"),
    "eval.channel_agg": ("mean", "single_channel"),
}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes", "on"):
                return True
            if value.lower() in ("false", "0", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, (int, float)) and isinstance(value, str):
        try:
            value = ast.literal_eval(value)
        except (ValueError, SyntaxError) as exc:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from exc
    if isinstance(default, float):
        return float(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, list) and isinstance(value, str):
        value = [ast.literal_eval(v) for v in value.split(",") if v.strip()]
    if isinstance(default, dict) and isinstance(value, str):
        pairs = [item.split(":", 1) for item in value.split(",") if item.strip()]
        value = {k.strip(): v.strip() for k, v in pairs}
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"{key}: {value!r} is not one of {_CHOICES[key]}")
    return value


def flatten(doc: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for k, v in doc.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, Mapping) and key not in DEFAULTS:
            flat.update(flatten(v, key))
        else:
            flat[key] = v
    return flat


class ExperimentConfig:
    """Effective configuration: a validated flat mapping of every known key."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None) -> None:
        self.values: Dict[str, Any] = deepcopy(DEFAULTS)
        if values:
            self.update(values)

    @classmethod
    def build(
        cls,
        profile: str = "full",
        path: Optional[str | os.PathLike] = None,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> "ExperimentConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        cfg = cls()
        if path is not None:
            with open(path, "rb") as fh:
                try:
                    cfg.update(flatten(tomli.load(fh)))
                except tomli.TOMLDecodeError as exc:
                    raise ConfigError(f"{path}: {exc}") from exc
        cfg.update(PROFILES[profile])
        if overrides:
            cfg.update(overrides)
        return cfg

    def update(self, values: Mapping[str, Any]) -> None:
        for key, value in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value)

    def with_overrides(self, values: Mapping[str, Any]) -> "ExperimentConfig":
        out = ExperimentConfig(self.values)
        out.update(values)
        return out

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)

    # typed views -----------------------------------------------------------

    def spectrogram_params(self) -> SpectrogramParams:
        v = self.values
        return SpectrogramParams(
            window_seconds=v["preprocess.window_seconds"],
            overlap_fraction=v["preprocess.overlap_fraction"],
            target_height=v["preprocess.target_height"],
            log_epsilon=v["preprocess.log_epsilon"],
            window_shape=(v["preprocess.taper"], v["preprocess.taper_param"]),
        )

    def cache_root(self) -> Optional[str]:
        return self.values["preprocess.cache_root"] or os.environ.get(CACHE_ENV) or None

    def crop_policy(self) -> CropPolicy:
        v = self.values
        return CropPolicy(
            crop_width_fraction=v["crop.width_fraction"],
            neighborhood_radius_crops=v["crop.radius"],
            neighbor_sigma_crops=v["crop.sigma"],
            exclusion_radius_crops=v["crop.exclusion_radius"],
        )

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(
            lam=v["loss.lambda"], mu=v["loss.mu"], nu=v["loss.nu"], rho=v["loss.rho"],
            gamma=v["loss.gamma"], epsilon=v["loss.epsilon"],
            unbiased_variance=v["loss.unbiased_variance"],
            plus_log_negative=v["tnc.paper_literal_sign"],
            invariance_reduction=v["loss.invariance_reduction"],
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.values["model.encoder"], self.values["model.representation_dim"])

    def projector_config(self) -> ProjectorConfig:
        v = self.values
        return ProjectorConfig(
            hidden_dim=v["model.projector_hidden_dim"],
            output_dim=v["model.projector_output_dim"],
            hidden_layers=v["model.projector_hidden_layers"],
            whitening_iterations=v["model.whitening_iterations"],
            whitening_group_size=v["model.whitening_group_size"],
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        v = self.values
        return DiscriminatorConfig(v["model.discriminator_hidden_dim"] or None, v["model.discriminator_dropout"])

    def split_spec(self, seed: int) -> SplitSpec:
        return SplitSpec(self.values["dataset.train_fraction"], seed, self.values["dataset.min_test_per_class"])

    def synthetic_spec(self) -> SyntheticSpec:
        v = self.values
        return SyntheticSpec(
            n_per_class=v["dataset.synthetic_n_per_class"],
            recipes=dict(v["dataset.synthetic_recipes"]),
            noise_level=v["dataset.synthetic_noise_level"],
            background_lines=tuple(v["dataset.synthetic_background_lines"]),
            background_amplitude=tuple(v["dataset.synthetic_background_amplitude"]),
        )


def parse_overrides(items: Iterable[str]) -> Dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out
