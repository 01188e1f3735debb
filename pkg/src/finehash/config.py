"""Flat ``key = value`` run configuration files.

A config file collects model, training, and synthetic-data settings in one
flat namespace; ``#`` starts a comment, every key is optional, and an empty
file yields the library defaults.  Unknown and duplicate keys are config
errors naming the key, so typos fail loudly instead of training with a
silently ignored setting.  Path values resolve relative to the config file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

_MODEL_INTS = ("parts", "bits", "image_side", "in_channels", "refined_channels")
_MODEL_INT_LISTS = ("backbone_channels", "backbone_pools")
_TRAIN_INTS = ("outer_iters", "epochs_per_iter", "batch_size", "samples_per_epoch",
               "code_sweeps", "seed")
_TRAIN_FLOATS = ("learning_rate", "lr_drop_factor", "weight_decay", "warmup_fraction",
                 "margin")
_TRAIN_AUTOS = ("spatial_weight", "channel_weight")
_SYNTH_KEYS = {
    "synth_classes": ("num_classes", int),
    "synth_per_class": ("per_class", int),
    "synth_queries_per_class": ("queries_per_class", int),
    "synth_patch_size": ("patch_size", int),
    "synth_position_jitter": ("position_jitter", float),
    "synth_pixel_noise": ("pixel_noise", float),
    "synth_pattern_scale": ("pattern_scale", float),
    "synth_seed": ("seed", int),
}

KNOWN_KEYS = frozenset(
    _MODEL_INTS + _MODEL_INT_LISTS + _TRAIN_INTS + _TRAIN_FLOATS + _TRAIN_AUTOS
    + ("lr_drop_points", "exchange", "data_dir")
) | frozenset(_SYNTH_KEYS)


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs: architecture, schedule, data generator."""

    model: ModelConfig
    train: TrainConfig
    synth: SynthConfig
    data_dir: Path | None = None


def default_run_config() -> RunConfig:
    return _build({}, {}, {}, None)


def _build(model_kwargs: dict, train_kwargs: dict, synth_kwargs: dict,
           data_dir: Path | None) -> RunConfig:
    model = ModelConfig(**model_kwargs)
    # the generator renders what the model consumes, so geometry is shared
    synth_kwargs.setdefault("image_side", model.image_side)
    synth_kwargs.setdefault("parts_per_image", model.parts)
    return RunConfig(
        model=model,
        train=TrainConfig(**train_kwargs),
        synth=SynthConfig(**synth_kwargs),
        data_dir=data_dir,
    )


def load_config(path: str | Path) -> RunConfig:
    """Parse a config file; every omitted key keeps its default."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc

    model_kwargs: dict = {}
    train_kwargs: dict = {}
    synth_kwargs: dict = {}
    data_dir: Path | None = None
    seen: set[str] = set()

    for line_no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {line_no}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{path}: line {line_no}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{path}: line {line_no}: duplicate key {key!r}")
        seen.add(key)
        if not value:
            raise ConfigError(f"{path}: line {line_no}: key {key!r} has no value")

        def bad(expected: str):
            return ConfigError(
                f"{path}: line {line_no}: key {key!r} expects {expected}, got {value!r}"
            )

        if key in _MODEL_INTS:
            model_kwargs[key] = _parse_int(value, bad)
        elif key in _MODEL_INT_LISTS:
            model_kwargs[key] = tuple(
                _parse_int(item, bad) for item in value.split(",")
            )
        elif key in _TRAIN_INTS:
            train_kwargs[key] = _parse_int(value, bad)
        elif key in _TRAIN_FLOATS:
            train_kwargs[key] = _parse_float(value, bad)
        elif key in _TRAIN_AUTOS:
            train_kwargs[key] = None if value == "auto" else _parse_float(value, bad)
        elif key == "lr_drop_points":
            train_kwargs[key] = tuple(
                _parse_float(item, bad) for item in value.split(",")
            )
        elif key == "exchange":
            if value not in ("true", "false"):
                raise bad("true or false")
            train_kwargs[key] = value == "true"
        elif key == "data_dir":
            candidate = Path(value)
            data_dir = candidate if candidate.is_absolute() else path.parent / candidate
        else:
            field, kind = _SYNTH_KEYS[key]
            synth_kwargs[field] = (
                _parse_int(value, bad) if kind is int else _parse_float(value, bad)
            )

    return _build(model_kwargs, train_kwargs, synth_kwargs, data_dir)


def _parse_int(value: str, bad) -> int:
    try:
        return int(value.strip())
    except ValueError:
        raise bad("an integer") from None


def _parse_float(value: str, bad) -> float:
    try:
        return float(value.strip())
    except ValueError:
        raise bad("a number") from None
