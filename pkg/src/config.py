# config.py - Functions to load network and training configuration
'''
The config.py module loads the run configuration from a file. JSON files
carry "net" and "train" sections; plain-text files carry key=value lines
("net." / "train." prefixes are optional, # starts a comment). Either way
load_config() returns a dictionary {"net": {...}, "train": {...}} that
net_config_from_dict() / train_config_from_dict() turn into validated
dataclasses. Flags given on the command line are merged on top of the file
with merge_overrides(), so the precedence is flags > file > defaults.
'''

import json
import os
import sys
from dataclasses import asdict, dataclass, fields

sys.path.insert(0, os.path.dirname(__file__))
from utils import logger

BLOCK_KINDS = ("mpeb", "fnb")
FUSION_KINDS = ("itfm", "conv")
ACTIVATIONS = ("gelu", "relu")

TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 24
    depths: tuple = (2, 2, 4)
    levels: int = 3
    block: str = "mpeb"
    fusion: str = "itfm"
    cmim: bool = True
    src: bool = True
    edf: bool = True
    pool_size: tuple = (1, 1)
    activation: str = "gelu"
    ln_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "pool_size", tuple(self.pool_size))
        if self.base_channels < 4 or self.base_channels % 4:
            raise ConfigError(f"base_channels must be a positive multiple of 4, got {self.base_channels}")
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if len(self.depths) != self.levels or any(d < 0 for d in self.depths):
            raise ConfigError(f"depths {self.depths} must give one non-negative depth per level ({self.levels})")
        if self.block not in BLOCK_KINDS:
            raise ConfigError(f"block must be one of {BLOCK_KINDS}, got {self.block!r}")
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if len(self.pool_size) != 2 or min(self.pool_size) < 1:
            raise ConfigError(f"pool_size must be two positive integers, got {self.pool_size}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    patch: int = 512
    batch_size: int = 14
    lr_max: float = 2e-4
    lr_min: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment_flip: bool = True
    augment_rotate: bool = True
    ssim_weight: float = 0.0
    clip_norm: float = 0.0
    weight_decay: float = 0.0
    val_every: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str = ""

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        if self.patch < 4 or self.patch % 4:
            raise ConfigError(f"patch must be a positive multiple of 4, got {self.patch}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


def _coerce(name, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            word = str(value).strip().lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else value
            return tuple(int(item) for item in items if str(item).strip() != "")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {name}: {value!r}") from None


def _from_dict(cls, values):
    known = {f.name: f.default for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(k, v, known[k]) for k, v in values.items()}
    return cls(**kwargs)


def net_config_from_dict(values):
    return _from_dict(NetConfig, values or {})


def train_config_from_dict(values):
    return _from_dict(TrainConfig, values or {})


def parse_key_values(text):
    net_keys = {f.name for f in fields(NetConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    config = {"net": {}, "train": {}}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, bare = key.rpartition(".")
        if section in ("net", "train"):
            config[section][bare] = value
        elif key in net_keys:
            config["net"][key] = value
        elif key in train_keys:
            config["train"][key] = value
        else:
            raise ConfigError(f"line {number}: unknown key {key!r}")
    return config


def load_config(config_path="config/rshazenet.json"):
    config_path = str(config_path)
    if not os.path.exists(config_path): # refuse to guess when the file is missing
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path, 'r') as the_file:
        if config_path.endswith(".json"):
            raw = json.load(the_file)
            config = {"net": dict(raw.get("net", {})), "train": dict(raw.get("train", {}))}
        else:
            config = parse_key_values(the_file.read())

    logger.info(f"✅ Loaded config {config_path}: "
                f"{len(config['net'])} net keys, {len(config['train'])} train keys")
    return config


def merge_overrides(values, overrides):
    # flags that were not given arrive as None and never override the file
    merged = dict(values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def format_net_config(cfg):
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
