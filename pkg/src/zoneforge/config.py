"""Strict JSON config files: unknown keys are rejected, never ignored."""

import json
from pathlib import Path

from .dense_unet import ArchConfig
from .errors import ConfigError
from .phantom import DwiProtocol, PhantomConfig, ZoneIntensityModel
from .prep import ElasticParams, PrepConfig
from .trainer import OptimizerConfig

PHANTOM_KEYS = {
    "preset",
    "dims",
    "spacing_mm",
    "pg_semi_axes_mm",
    "center_jitter_mm",
    "axis_jitter",
    "cz_fraction",
    "pz_thickness_mm",
    "blur_sigma",
    "noise_scale",
    "intensities",
    "dwi",
    "seed",
}
PREP_KEYS = {"target_spacing_mm", "crop_size", "alpha", "sigma", "n_augment", "seed"}
TRAIN_KEYS = {
    "regime",
    "combo",
    "arch",
    "lr",
    "momentum",
    "decay",
    "decay_mode",
    "batch_size",
    "epochs",
    "seed",
    "per_zone",
}
ARCH_KEYS = {"preset", "n_stages", "growth", "stem_channels", "compression", "convs_per_block"}


def load_json(path):
    if path is None:
        return {}
    try:
        with open(Path(path), encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def _check_keys(data, allowed, what):
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown {what} config key(s): {', '.join(unknown)}")


def phantom_config(data):
    _check_keys(data, PHANTOM_KEYS, "phantom")
    data = dict(data)
    preset = data.pop("preset", "desk")
    try:
        if "dwi" in data:
            dwi = data["dwi"]
            _check_keys(dwi, {"b", "s0", "noise_sd"}, "phantom.dwi")
            data["dwi"] = DwiProtocol(**dwi)
        if "intensities" in data:
            model = ZoneIntensityModel().stats
            for kind, zones in data["intensities"].items():
                model.setdefault(kind, {}).update(zones)
            data["intensities"] = ZoneIntensityModel(model)
        if preset == "full":
            return PhantomConfig.full_scale(**data)
        if preset != "desk":
            raise ConfigError(f"unknown phantom preset {preset!r}")
        return PhantomConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid phantom config: {exc}") from None


def prep_config(data):
    _check_keys(data, PREP_KEYS, "prep")
    try:
        prep = PrepConfig(
            target_spacing_mm=float(data.get("target_spacing_mm", 0.5)),
            crop_size=data.get("crop_size", 256),
        )
        elastic = ElasticParams(
            alpha=float(data.get("alpha", 21.0)),
            sigma=float(data.get("sigma", 512.0)),
            n_augment=int(data.get("n_augment", 9)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid prep config: {exc}") from None
    return prep, elastic, int(data.get("seed", 0))


def arch_kwargs(data):
    data = dict(data or {})
    _check_keys(data, ARCH_KEYS, "arch")
    preset = data.pop("preset", "desk")
    if preset == "full":
        base = dict(n_stages=4, growth=16, stem_channels=32)
    elif preset == "desk":
        base = {}
    else:
        raise ConfigError(f"unknown arch preset {preset!r}")
    base.update(data)
    try:
        ArchConfig(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid arch config: {exc}") from None
    return base


def train_config(data):
    """Return ``(estimator kwargs, OptimizerConfig)`` from a train.json dict."""
    _check_keys(data, TRAIN_KEYS, "train")
    arch = arch_kwargs(data.get("arch"))
    try:
        opt = OptimizerConfig(
            lr=float(data.get("lr", 1e-3)),
            momentum=float(data.get("momentum", 0.9)),
            decay=float(data.get("decay", 1e-6)),
            batch_size=int(data.get("batch_size", 25)),
            epochs=int(data.get("epochs", 1)),
            seed=int(data.get("seed", 0)),
            decay_mode=data.get("decay_mode", "lr"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train config: {exc}") from None
    if arch.get("convs_per_block", 4) != 4:
        raise ConfigError("the estimator uses four convolutions per dense block")
    arch.pop("convs_per_block", None)
    kwargs = dict(
        regime=data.get("regime", "im"),
        combo=data.get("combo", "mag"),
        learning_rate=opt.lr,
        momentum=opt.momentum,
        decay=opt.decay,
        decay_mode=opt.decay_mode,
        batch_size=opt.batch_size,
        epochs=opt.epochs,
        per_zone=bool(data.get("per_zone", False)),
        random_state=opt.seed,
        **arch,
    )
    return kwargs, opt
