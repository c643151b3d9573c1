"""One YAML config drives every pipeline stage.

The file has per-stage sections (pretrain, landmark, end2end) that all share
the single model section, so the two training arms are guaranteed the same
architecture by construction. Unknown keys are rejected to catch typos, and
the resolved config hashes stably for run manifests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from eqmark.data import (AugConfig, DatasetSpec, step1_default_aug,
                         step2_default_aug)
from eqmark.errors import ConfigurationError
from eqmark.losses import LossWeights
from eqmark.netarch import ModelConfig
from eqmark.training import TrainConfig, config_hash

SCHEMA_VERSION = 1

STAGE_KEYS = ("pretrain", "landmark", "end2end")

_TRAIN_FIELDS = ("epochs", "lr", "lr_decay", "weight_decay", "batch_size",
                 "tau", "n_locations", "checkpoint_every", "grad_clip")


@dataclass
class EvalSettings:
    alpha: float = 0.1
    metric: str = "pck"
    threshold: float = 3.0
    eye_indices: tuple = (1, 2)
    sweep_sizes: tuple = (5, 10, 50, 100, "full")
    sweep_repeats: int = 5
    curve_thresholds: tuple = (2, 4, 6, 8, 10, 12, 14, 16, 18, 20)
    aug: AugConfig = field(default_factory=step2_default_aug)

    def to_dict(self):
        return {"alpha": self.alpha, "metric": self.metric,
                "threshold": self.threshold,
                "eye_indices": list(self.eye_indices),
                "sweep_sizes": list(self.sweep_sizes),
                "sweep_repeats": self.sweep_repeats,
                "curve_thresholds": list(self.curve_thresholds),
                "aug": self.aug.to_dict()}


@dataclass
class ExperimentConfig:
    """Resolved settings for every stage of one experiment."""

    model: ModelConfig
    data: DatasetSpec
    stages: dict           # stage name -> per-stage override dict
    eval: EvalSettings
    seed: int = 0
    strict_determinism: bool = True
    data_root: str = None      # set when annotations come from a directory
    data_layout: str = "generic"

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION,
                "model": self.model.to_dict(),
                "data": self.data.to_dict(),
                "data_root": self.data_root,
                "data_layout": self.data_layout,
                "stages": {k: dict(v) for k, v in self.stages.items()},
                "eval": self.eval.to_dict(),
                "seed": self.seed,
                "strict_determinism": self.strict_determinism}

    def hash(self):
        return config_hash(self.to_dict())

    def train_config(self, stage, **overrides):
        """Build the TrainConfig for a stage, applying CLI overrides last."""
        if stage not in STAGE_KEYS:
            raise ConfigurationError(
                f"unknown stage {stage!r}; expected one of {STAGE_KEYS}")
        section = dict(self.stages.get(stage, {}))
        kwargs = dict(step=stage, model=self.model, seed=self.seed,
                      strict_determinism=self.strict_determinism)
        kwargs.update(section)
        for key, value in overrides.items():
            if value is not None:
                kwargs[key] = value
        aug = kwargs.get("aug")
        if isinstance(aug, dict):
            kwargs["aug"] = AugConfig.from_dict(aug)
        weights = kwargs.get("loss_weights")
        if isinstance(weights, dict):
            kwargs["loss_weights"] = LossWeights(**weights)
        k_override = kwargs.pop("k_landmarks", None)
        if k_override is not None:
            kwargs["model"] = ModelConfig.from_dict(
                {**self.model.to_dict(), "k": int(k_override)})
        return TrainConfig(**kwargs)


def _check_keys(section, allowed, where):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigurationError(
            f"unknown keys in {where}: {sorted(unknown)}; "
            f"allowed: {sorted(allowed)}")


def default_config_dict():
    """Desk-scale defaults for the full pipeline."""
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": 0,
        "strict_determinism": True,
        "model": {"d": 32, "k": 10, "in_channels": 3, "width_mult": 0.25,
                  "t_width": 16, "norm": "group"},
        "data": {"source": "synthetic", "height": 64, "width": 64,
                 "n_train": 512, "n_val": 128, "n_test": 64, "seed": 0},
        "pretrain": {"epochs": 20, "lr": 2e-3, "lr_decay": 0.9,
                     "weight_decay": 5e-4, "batch_size": 32, "tau": 0.1,
                     "n_locations": 16},
        "landmark": {"epochs": 20, "lr": 3e-4, "lr_decay": 0.9,
                     "weight_decay": 5e-4, "batch_size": 32,
                     "grad_clip": 1.0,
                     "loss_weights": {"w_eqv": 1.0, "w_div": 0.5,
                                      "w_var": 0.001, "patch_size": 8}},
        "end2end": {"epochs": 20, "lr": 3e-4, "lr_decay": 0.9,
                    "weight_decay": 5e-4, "batch_size": 32,
                    "grad_clip": 1.0,
                    "loss_weights": {"w_eqv": 1.0, "w_div": 0.5,
                                     "w_var": 0.001, "patch_size": 8}},
        "eval": {"alpha": 0.1, "metric": "pck", "threshold": 3.0,
                 "eye_indices": [1, 2],
                 "sweep_sizes": [5, 10, 50, 100, "full"],
                 "sweep_repeats": 5,
                 "curve_thresholds": [2, 4, 6, 8, 10, 12, 14, 16, 18, 20]},
    }


_TOP_KEYS = ("schema_version", "seed", "strict_determinism", "model", "data",
             "pretrain", "landmark", "end2end", "eval")

_EVAL_KEYS = ("alpha", "metric", "threshold", "eye_indices", "sweep_sizes",
              "sweep_repeats", "curve_thresholds", "aug")

_DATA_KEYS = ("source", "height", "width", "n_train", "n_val", "n_test",
              "seed", "landmark_names", "root", "layout")

_MODEL_KEYS = ("d", "k", "in_channels", "width_mult", "t_width", "norm")

_STAGE_SECTION_KEYS = _TRAIN_FIELDS + ("aug", "loss_weights")

_AUG_KEYS = ("rotation", "scale", "shear", "translation", "elastic_magnitude",
             "elastic_smoothness", "elastic_grid", "noise_sigma",
             "intensity_scale", "intensity_shift", "contrast", "margin")


def config_from_dict(raw):
    """Validate and resolve a config mapping into an ExperimentConfig."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    merged = default_config_dict()
    _check_keys(raw, _TOP_KEYS, "config")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(
            f"config schema_version {version} unsupported; "
            f"this build reads version {SCHEMA_VERSION}")
    for key in ("model", "data", "eval", "pretrain", "landmark", "end2end"):
        if key in raw:
            if not isinstance(raw[key], dict):
                raise ConfigurationError(f"section {key!r} must be a mapping")
            merged[key].update(raw[key])
    for key in ("seed", "strict_determinism"):
        if key in raw:
            merged[key] = raw[key]
    _check_keys(merged["model"], _MODEL_KEYS, "model")
    _check_keys(merged["data"], _DATA_KEYS, "data")
    _check_keys(merged["eval"], _EVAL_KEYS, "eval")
    for stage in STAGE_KEYS:
        _check_keys(merged[stage], _STAGE_SECTION_KEYS, stage)
        if "aug" in merged[stage]:
            _check_keys(merged[stage]["aug"], _AUG_KEYS, f"{stage}.aug")
    data_section = dict(merged["data"])
    data_section.pop("root", None)
    data_section.pop("layout", None)
    if "landmark_names" in data_section:
        data_section["landmark_names"] = tuple(data_section["landmark_names"])
    eval_section = dict(merged["eval"])
    eval_aug = eval_section.pop("aug", None)
    eval_settings = EvalSettings(
        alpha=float(eval_section["alpha"]),
        metric=eval_section["metric"],
        threshold=float(eval_section["threshold"]),
        eye_indices=tuple(eval_section["eye_indices"]),
        sweep_sizes=tuple(eval_section["sweep_sizes"]),
        sweep_repeats=int(eval_section["sweep_repeats"]),
        curve_thresholds=tuple(eval_section["curve_thresholds"]),
        aug=AugConfig.from_dict(eval_aug) if eval_aug else step2_default_aug())
    return ExperimentConfig(
        model=ModelConfig.from_dict(merged["model"]),
        data=DatasetSpec(**data_section),
        stages={k: dict(merged[k]) for k in STAGE_KEYS},
        eval=eval_settings,
        seed=int(merged["seed"]),
        strict_determinism=bool(merged["strict_determinism"]),
        data_root=merged["data"].get("root"),
        data_layout=merged["data"].get("layout", "generic"))


def load_config(path=None):
    """Read a YAML config file, or the built-in defaults when path is None."""
    if path is None:
        return config_from_dict({})
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}")
    return config_from_dict(raw)


def write_config(cfg_dict, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg_dict, fh, sort_keys=True)
