"""Experiment configuration: one human-readable INI file, sections per
subsystem, every key typed and validated. Unknown sections or keys are
errors so typos cannot silently change a run. A persisted config plus its
seed replays a run exactly.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields

from .data import AugmentConfig
from .perturb import PerturbSpec


class ConfigError(ValueError):
    """Configuration file or flag set was invalid."""


@dataclass
class ModelConfig:
    dim: int = 64
    num_classes: int = 1


@dataclass
class TrainConfig:
    image_size: int = 128
    batch_size: int = 32
    accumulation_steps: int = 4
    max_epochs: int = 300
    patience: int = 10
    learning_rate: float = 8e-4
    seed: int = 1234

    def __post_init__(self):
        for name in ("image_size", "batch_size", "accumulation_steps", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")


@dataclass
class DataConfig:
    root: str = ""
    manifest: str = ""
    output_dir: str = "runs/default"
    train_fraction: float = 0.70
    val_fraction: float = 0.15
    test_fraction: float = 0.15

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    perturb: PerturbSpec = field(default_factory=PerturbSpec)

    def __post_init__(self):
        # one image size drives both the augment pipeline and the model input
        self.augment.target_size = self.train.image_size


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "data": DataConfig,
    "perturb": PerturbSpec,
}

_TUPLE_KEYS = {("augment", "mean"), ("augment", "std")}


def _parse_value(section: str, key: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if (section, key) in _TUPLE_KEYS:
            parts = tuple(float(v) for v in raw.split(","))
            if len(parts) != 3:
                raise ValueError("expected 3 comma-separated values")
            return parts
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "1"):
                return True
            if lowered in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        known = {f.name: f.type for f in fields(cls)}
        types = {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}
        section_values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            section_values[key] = _parse_value(section, key, raw, types[key])
        values[section] = section_values

    try:
        cfg = ExperimentConfig(
            model=ModelConfig(**values.get("model", {})),
            train=TrainConfig(**values.get("train", {})),
            augment=AugmentConfig(**values.get("augment", {})),
            data=DataConfig(**values.get("data", {})),
            perturb=PerturbSpec(**values.get("perturb", {})),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config '{path}': {e}") from None


def config_text(cfg: ExperimentConfig) -> str:
    """Serialize back to INI; parse(config_text(cfg)) round-trips all values."""
    parser = configparser.ConfigParser()
    for section, sub in (("model", cfg.model), ("train", cfg.train), ("augment", cfg.augment),
                         ("data", cfg.data), ("perturb", cfg.perturb)):
        parser[section] = {}
        for key, value in asdict(sub).items():
            if isinstance(value, tuple):
                parser[section][key] = ",".join(repr(v) for v in value)
            else:
                parser[section][key] = repr(value) if isinstance(value, float) else str(value)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# flag name -> (section attr, key); mirrors every ExperimentConfig field
FLAG_MAP = {
    "dim": ("model", "dim"),
    "num_classes": ("model", "num_classes"),
    "image_size": ("train", "image_size"),
    "batch_size": ("train", "batch_size"),
    "accumulation_steps": ("train", "accumulation_steps"),
    "max_epochs": ("train", "max_epochs"),
    "patience": ("train", "patience"),
    "learning_rate": ("train", "learning_rate"),
    "seed": ("train", "seed"),
    "hflip_prob": ("augment", "hflip_prob"),
    "vflip_prob": ("augment", "vflip_prob"),
    "max_rotation_deg": ("augment", "max_rotation_deg"),
    "brightness": ("augment", "brightness"),
    "contrast": ("augment", "contrast"),
    "saturation": ("augment", "saturation"),
    "hue": ("augment", "hue"),
    "root": ("data", "root"),
    "manifest": ("data", "manifest"),
    "output_dir": ("data", "output_dir"),
    "train_fraction": ("data", "train_fraction"),
    "val_fraction": ("data", "val_fraction"),
    "test_fraction": ("data", "test_fraction"),
    "perturb_kind": ("perturb", "kind"),
    "noise_std": ("perturb", "noise_std"),
    "occlusion_fraction": ("perturb", "occlusion_fraction"),
    "bias_positive_fraction": ("perturb", "bias_positive_fraction"),
    "perturb_seed": ("perturb", "seed"),
    "perturb_in_training": ("perturb", "apply_in_training"),
}


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply CLI flag overrides; revalidates by round-tripping through the parser."""
    for flag, value in overrides.items():
        if value is None:
            continue
        if flag not in FLAG_MAP:
            raise ConfigError(f"unknown override flag '{flag}'")
        section, key = FLAG_MAP[flag]
        setattr(getattr(cfg, section), key, value)
    return parse_config(config_text(cfg))
