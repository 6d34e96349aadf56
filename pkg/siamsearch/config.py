"""
Configuration loading and management for siamsearch.

The file format is TOML restricted to flat dotted keys (``search.epochs = 20``).
``[section]`` tables are read the same way, since TOML treats them identically.
"""

import dataclasses
import json
import logging
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

logger = logging.getLogger(__name__)

try:
    import tomllib
except ImportError:
    import tomli as tomllib

CONFIG_FILENAME = "siamsearch.toml"


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str = "data/cifar-10-batches-bin"
    seed: int = 0
    n: int = 512
    test_n: int = 256
    classes: int = 2
    size: int = 32
    # CIFAR subset size; 0 keeps every record
    limit: int = 2000
    split: float = 0.5


@dataclass
class ModelConfig:
    framework: str = "simsiam"
    space: str = "S"
    encoder_depth: int = 6
    predictor_depth: int = 4
    backbone_widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    hidden_dim: int = 128
    out_dim: int = 64
    temperature: float = 0.5


@dataclass
class AugmentConfig:
    enabled: bool = True
    crop_min: float = 0.2
    crop_max: float = 1.0
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    grayscale_prob: float = 0.2
    mean: list[float] = field(default_factory=lambda: [0.4914, 0.4822, 0.4465])
    std: list[float] = field(default_factory=lambda: [0.2470, 0.2435, 0.2616])


@dataclass
class SearchConfig:
    """Bi-level search hyperparameters: SGD on weights, Adam on alphas."""
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.06
    weight_decay: float = 5e-4
    momentum: float = 0.9
    arch_lr: float = 3e-4
    arch_weight_decay: float = 1e-3
    interleave: bool = False
    # off only drops augmentation from the search passes; pretraining and the probe keep augment.*
    augment: bool = True


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.06
    weight_decay: float = 5e-4
    momentum: float = 0.9
    collapse_window: int = 10


@dataclass
class ProbeConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.3
    weight_decay: float = 0.0
    momentum: float = 0.9


@dataclass
class AblationConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    arms: list[str] = field(default_factory=lambda: ["S+aug", "S_prime+aug", "S+noaug"])
    workers: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    name: str = ""


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out)

    @property
    def run_name(self) -> str:
        return self.run.name or self.out_dir.name


SECTIONS: dict[str, type] = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}

_CHOICES: dict[tuple[str, str], tuple[str, ...]] = {
    ("data", "kind"): ("synthetic", "cifar10"),
    ("model", "framework"): ("simsiam", "simclr"),
    ("model", "space"): ("S", "S_prime"),
}


def load_config(config_path: Path | str | None = None) -> ExperimentConfig:
    """
    Load configuration from a TOML file.

    Args:
        config_path: Path to the config file. If None, searches for siamsearch.toml
                    in the current directory and parent directories.

    Returns:
        Loaded configuration; built-in defaults when no file is found
    """
    if config_path is None:
        config_path = find_config_file()
    else:
        config_path = Path(config_path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")

    if config_path is None:
        logger.warning("No %s found, using built-in defaults", CONFIG_FILENAME)
        return ExperimentConfig()

    with open(config_path, "rb") as f:
        try:
            data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{config_path}: {e}") from e

    config = parse_config(data)
    data_path = Path(config.data.path)
    if not data_path.is_absolute():
        config.data.path = str(config_path.parent / data_path)
    logger.debug("Loaded config from %s", config_path)
    return config


def find_config_file() -> Path | None:
    """Search for siamsearch.toml in current and parent directories."""
    current = Path.cwd()

    for directory in [current] + list(current.parents):
        config_file = directory / CONFIG_FILENAME
        if config_file.exists():
            return config_file

    # Check the directory where the package is located
    module_dir = Path(__file__).parent.parent
    config_file = module_dir / CONFIG_FILENAME
    if config_file.exists():
        return config_file

    return None


def _coerce(section: str, key: str, value: Any, expected: Any) -> Any:
    where = f"{section}.{key}"
    origin = typing.get_origin(expected)
    if origin is list:
        (item_type,) = typing.get_args(expected)
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return [_coerce(section, key, item, item_type) for item in value]
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(f"{where} must be finite, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        choices = _CHOICES.get((section, key))
        if choices and value not in choices:
            raise ConfigError(f"{where} must be one of {', '.join(choices)}, got {value!r}")
        return value
    raise ConfigError(f"{where} has unsupported type {expected}")


def parse_config(data: dict[str, Any]) -> ExperimentConfig:
    """Parse configuration data into an ExperimentConfig, rejecting unknown keys."""
    sections = {}
    for name, values in data.items():
        section_type = SECTIONS.get(name)
        if section_type is None:
            raise ConfigError(f"unknown config section: {name}")
        if not isinstance(values, dict):
            raise ConfigError(f"{name} must be a section of dotted keys")
        known = {f.name: f.type for f in dataclasses.fields(section_type)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key: {name}.{key}")
            kwargs[key] = _coerce(name, key, value, known[key])
        sections[name] = section_type(**kwargs)
    config = ExperimentConfig(**sections)
    validate_config(config)
    return config


def validate_config(config: ExperimentConfig) -> None:
    """Cross-field checks that a single type check cannot express."""
    if not 0.0 < config.data.split < 1.0:
        raise ConfigError(f"data.split must lie in (0, 1), got {config.data.split}")
    if config.data.size < 8:
        raise ConfigError(f"data.size must be >= 8, got {config.data.size}")
    if config.data.n < config.data.classes or config.data.classes < 1:
        raise ConfigError("data.n must be at least data.classes")
    if not 1 <= config.model.encoder_depth <= 6:
        raise ConfigError(f"model.encoder_depth must lie in 1..6, got {config.model.encoder_depth}")
    if not 0 <= config.model.predictor_depth <= 4:
        raise ConfigError(f"model.predictor_depth must lie in 0..4, got {config.model.predictor_depth}")
    if config.model.framework == "simsiam" and config.model.predictor_depth == 0:
        raise ConfigError("simsiam framework needs model.predictor_depth >= 1")
    if config.model.temperature <= 0:
        raise ConfigError(f"model.temperature must be > 0, got {config.model.temperature}")
    if len(config.model.backbone_widths) != 3:
        raise ConfigError("model.backbone_widths must list three stage widths")
    if not 0.0 < config.augment.crop_min <= config.augment.crop_max <= 1.0:
        raise ConfigError("augment.crop_min and augment.crop_max must satisfy 0 < min <= max <= 1")
    if len(config.augment.mean) != 3 or len(config.augment.std) != 3:
        raise ConfigError("augment.mean and augment.std need one value per channel")
    if any(s <= 0 for s in config.augment.std):
        raise ConfigError("augment.std values must be > 0")
    for name in ("search", "pretrain", "probe"):
        section = getattr(config, name)
        if section.epochs < 1:
            raise ConfigError(f"{name}.epochs must be >= 1, got {section.epochs}")
        if section.batch_size < 2:
            raise ConfigError(f"{name}.batch_size must be >= 2, got {section.batch_size}")
    if config.ablation.workers < 1:
        raise ConfigError(f"ablation.workers must be >= 1, got {config.ablation.workers}")


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r}")


def serialize_config(config: ExperimentConfig) -> str:
    """Flat dotted TOML; parse_config(tomllib.loads(...)) gives the config back."""
    blocks = []
    for name in SECTIONS:
        section = getattr(config, name)
        lines = [f"{name}.{f.name} = {_toml_value(getattr(section, f.name))}" for f in dataclasses.fields(section)]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def write_config(config: ExperimentConfig, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_config(config))
    return path


def with_overrides(config: ExperimentConfig, seed: int | None = None, out: Path | str | None = None) -> ExperimentConfig:
    """Apply CLI --seed/--out on top of the file values."""
    run = config.run
    if seed is not None:
        run = dataclasses.replace(run, seed=seed)
    if out is not None:
        run = dataclasses.replace(run, out=str(out))
    return dataclasses.replace(config, run=run)
