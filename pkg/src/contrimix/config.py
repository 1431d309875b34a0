"""Run configuration: training hyperparameters, architecture, and config files.

Config files are UTF-8 INI documents with two sections, ``[train]`` for
:class:`TrainConfig` keys and ``[data]`` for :class:`~contrimix.imaging.GenConfig`
keys (blob settings use a ``blob_`` prefix). Tuples are comma separated.
Keys use the same names as the CLI flags, with dashes or underscores.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .imaging import BlobParams, GenConfig


@dataclass
class TrainConfig:
    # optimizer
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    # mixing and losses
    num_mixes: int = 4
    num_attributes: int = 4
    lambda_s: float = 0.4
    lambda_a: float = 0.3
    lambda_c: float = 0.3
    lam: float = 0.5
    mix_strategy: str = "random"
    pre_transform: str = "od"
    generator_background: float = 1.0
    augment: tuple[str, ...] = ("hflip", "vflip", "rot90")
    # when False, the backbone loss on synthetic images also trains the encoders
    detach_synthetic: bool = True
    # architecture
    content_width: int = 16
    content_blocks: int = 2
    attr_width: int = 16
    attr_stages: int = 3
    backbone_widths: tuple[int, ...] = (16, 32, 32, 64)
    backbone_groups: int = 4
    num_classes: int = 2
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5
    # bookkeeping
    eval_batch_size: int = 250

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be > 0 and weight_decay >= 0")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        # M = 0 is only meaningful for the ERM reduction (lam = 1)
        if self.num_mixes < 0 or (self.num_mixes == 0 and self.lam != 1.0):
            raise ConfigError(f"num_mixes must be >= 1 (0 only with lam = 1), got {self.num_mixes}")
        if self.num_attributes < 1:
            raise ConfigError("num_attributes must be >= 1")
        if min(self.lambda_s, self.lambda_a, self.lambda_c) < 0:
            raise ConfigError("loss weights must be non-negative")
        if abs(self.lambda_s + self.lambda_a + self.lambda_c - 1.0) > 1e-9:
            raise ConfigError(
                f"lambda_s + lambda_a + lambda_c must equal 1, got {self.lambda_s + self.lambda_a + self.lambda_c}"
            )
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.mix_strategy not in ("random", "targeted"):
            raise ConfigError(f"mix_strategy must be random or targeted, got {self.mix_strategy!r}")
        if self.pre_transform not in ("identity", "od"):
            raise ConfigError(f"pre_transform must be identity or od, got {self.pre_transform!r}")
        bad = set(self.augment) - {"hflip", "vflip", "rot90"}
        if bad:
            raise ConfigError(f"unknown augmentations {sorted(bad)}")
        widths = [self.content_width, self.content_blocks, self.attr_width, self.attr_stages, *self.backbone_widths]
        if min(widths) < 1 or self.num_classes < 2:
            raise ConfigError("architecture sizes must be positive and num_classes >= 2")
        if any(w % self.backbone_groups for w in self.backbone_widths):
            raise ConfigError(f"backbone widths {self.backbone_widths} must be divisible by {self.backbone_groups} groups")

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg


def _coerce(value, tp, key: str):
    """Convert a string (or already-typed value) to the annotated field type."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        if value in (None, "", "none", "None"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, key)
    if origin is tuple:
        if isinstance(value, str):
            items = [v.strip() for v in value.split(",") if v.strip()]
        else:
            items = list(value)
        elem = args[0] if args else str
        return tuple(_coerce(v, elem, key) for v in items)
    try:
        if tp is bool:
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(tp, '__name__', tp)}") from None


def field_types(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.init}


def apply_overrides(cfg, overrides: dict):
    """Return a copy of dataclass ``cfg`` with string or typed overrides applied."""
    types = field_types(type(cfg))
    changes = {}
    for key, value in overrides.items():
        name = key.replace("-", "_")
        if name not in types:
            raise ConfigError(f"unknown {type(cfg).__name__} key {key!r}")
        changes[name] = _coerce(value, types[name], key)
    return dataclasses.replace(cfg, **changes)


def gen_config_overrides(gen: GenConfig, overrides: dict) -> GenConfig:
    blob_over = {k[5:]: v for k, v in overrides.items() if k.replace("-", "_").startswith("blob_")}
    rest = {k: v for k, v in overrides.items() if not k.replace("-", "_").startswith("blob_")}
    blob: BlobParams = apply_overrides(gen.blob, blob_over) if blob_over else gen.blob
    out = apply_overrides(gen, rest) if rest else gen
    return dataclasses.replace(out, blob=blob)


def gen_config_keys() -> list[str]:
    keys = [k for k in field_types(GenConfig) if k != "blob"]
    keys += ["blob_" + k for k in field_types(BlobParams)]
    return keys


def read_config_file(path) -> dict[str, dict[str, str]]:
    """Parse a config file into ``{"train": {...}, "data": {...}}`` raw strings."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    with open(p, encoding="utf-8") as fh:
        parser.read_file(fh)
    out: dict[str, dict[str, str]] = {"train": {}, "data": {}}
    for section in parser.sections():
        if section not in out:
            raise ConfigError(f"unknown config section [{section}]; expected [train] or [data]")
        out[section] = {k.replace("-", "_"): v for k, v in parser.items(section)}
    return out


@dataclass
class LoadedConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GenConfig = field(default_factory=GenConfig)


def load_config(path=None, train_overrides: dict | None = None, data_overrides: dict | None = None) -> LoadedConfig:
    raw = read_config_file(path) if path else {"train": {}, "data": {}}
    train = apply_overrides(TrainConfig(), {**raw["train"], **(train_overrides or {})})
    data = gen_config_overrides(GenConfig(), {**raw["data"], **(data_overrides or {})})
    train.validate()
    data.validate()
    return LoadedConfig(train, data)
