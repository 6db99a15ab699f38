"""Run configuration: strict INI-style text with typed sections.

Sections [run], [model], [train], [data] map onto the corresponding config
dataclasses. Every key has a default, so an empty file is a valid config;
unknown sections or keys are errors, as are values that fail validation.
The canonical dump round-trips: parse(to_text(cfg)) == cfg.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from fractions import Fraction

from .data import DataConfig
from .errors import ConfigError, ValueCheckError
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    name: str = "run"
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig())

    def __post_init__(self):
        # the data pipeline always follows the model's geometry and classes
        self.data.image_size = self.model.image_size
        self.data.num_classes = self.model.num_classes


_MODEL_KEYS = ("image_size", "patch_size", "embed_dim", "depth", "heads",
               "num_queries", "num_classes", "variant", "adapter_layers",
               "rank", "channel_ratio", "mlp_ratio", "pixel_channels")
_TRAIN_KEYS = ("epochs", "arch_warmup", "lr_w", "wd_w", "lr_alpha", "wd_alpha",
               "lambda_seg", "lambda_cls", "batch", "flip_augment", "seed",
               "checkpoint_interval")
_DATA_KEYS = ("shapes_min", "shapes_max", "noise_amp", "train_size",
              "val_size", "test_size", "seed")
_RUN_KEYS = ("name", "out_dir")

_SECTIONS = {"run": _RUN_KEYS, "model": _MODEL_KEYS, "train": _TRAIN_KEYS,
             "data": _DATA_KEYS}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _convert(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key == "adapter_layers":
            if not raw:
                return ()
            return tuple(int(part) for part in raw.split(","))
        if key == "channel_ratio":
            # accepts "2/3" as well as decimal text
            return float(Fraction(raw))
        if isinstance(default, bool):
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"config: bad value for [{section}] {key} = {raw!r}") from e


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config: parse failure: {e}") from e

    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"config: unknown section [{section}]")
        allowed = _SECTIONS[section]
        defaults = _section_defaults(section)
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigError(f"config: unknown key {key!r} in [{section}]")
            values[section][key] = _convert(section, key, raw, defaults[key])

    try:
        model = ModelConfig(**values["model"])
        train = TrainConfig(**values["train"])
        data = DataConfig(**values["data"])
        run = RunConfig(model=model, train=train, data=data, **values["run"])
    except ValueCheckError as e:
        raise ConfigError(f"config: {e}") from e
    return run


def _section_defaults(section: str) -> dict:
    src = {"run": RunConfig(), "model": ModelConfig(), "train": TrainConfig(),
           "data": DataConfig()}[section]
    return {f.name: getattr(src, f.name) for f in fields(src)}


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e}") from e


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(cfg: RunConfig) -> str:
    """Canonical dump of every key in every section."""
    out = io.StringIO()
    sources = {"run": cfg, "model": cfg.model, "train": cfg.train,
               "data": cfg.data}
    for section, keys in _SECTIONS.items():
        out.write(f"[{section}]\n")
        for key in keys:
            value = getattr(sources[section], key)
            if section == "model" and key == "channel_ratio":
                frac = Fraction(value).limit_denominator(10**9)
                value = frac if float(frac) == value else float(value)
            out.write(f"{key} = {_fmt(value)}\n")
        out.write("\n")
    return out.getvalue()
