"""INI run configuration with four sections: model, train, data, inference.

Every key is typed by the dataclass field it maps to; unknown sections or
keys are errors.  Tuples are comma-separated, booleans use configparser's
spellings (true/false, yes/no, on/off, 1/0).  ``overrides`` take
``section.key=value`` strings and win over the file.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticTaskSpec
from .encoder import ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "train", "data", "inference")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """``source = synthetic`` uses the generator fields; ``source = tsv`` reads
    the three paths (val may be empty, then it is held out of train)."""

    source: str = "synthetic"
    family: str = "mixture"
    n_train: int = 10_000
    n_val: int = 1_000
    n_test: int = 2_000
    min_len: int = 8
    max_len: int = 32
    easy_fraction: float = 0.6
    seed: int = 0
    train_path: str = ""
    val_path: str = ""
    test_path: str = ""
    text_columns: tuple[str, ...] = ("text",)
    label_column: str = "label"
    tag_column: str = ""
    max_vocab: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "tsv"):
            raise ConfigError(f"data.source must be synthetic or tsv, got {self.source!r}")
        if self.source == "tsv" and not (self.train_path and self.test_path):
            raise ConfigError("data.source = tsv needs train_path and test_path")

    def synthetic_spec(self, model: ModelConfig) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            family=self.family,
            n_train=self.n_train,
            n_val=self.n_val,
            n_test=self.n_test,
            min_len=self.min_len,
            max_len=self.max_len,
            vocab_size=model.vocab_size,
            num_classes=model.num_classes,
            easy_fraction=self.easy_fraction,
            seed=self.seed,
        )


@dataclass(frozen=True)
class InferenceConfig:
    threshold: float = 0.3
    thresholds: tuple[float, ...] = (0.0, 0.1, 0.3, 0.5, 0.7, 1.0)
    metric: str = "accuracy"
    mode: str = "full"
    batch_size: int = 256

    def __post_init__(self):
        if self.threshold < 0 or any(s < 0 for s in self.thresholds):
            raise ConfigError("entropy thresholds must be >= 0")
        if self.metric not in ("accuracy", "f1", "mcc"):
            raise ConfigError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}


_CLASSES = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "inference": InferenceConfig}


def _parse(raw: str, annotation, where: str):
    # annotations are strings under `from __future__ import annotations`
    kind = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"not a boolean: {raw!r}")
            return configparser.ConfigParser.BOOLEAN_STATES[low]
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        if kind.startswith("tuple[float"):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind.startswith("tuple[str"):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unsupported field type {kind}")


def _field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def build(values: dict[str, dict[str, str]], source: str = "<config>") -> RunConfig:
    parts = {}
    for section, cls in _CLASSES.items():
        types = _field_types(cls)
        kwargs = {}
        for key, raw in values.get(section, {}).items():
            if key not in types:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            kwargs[key] = _parse(raw, types[key], f"{source}: {section}.{key}")
        try:
            parts[section] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from exc
    return RunConfig(**parts)


def _read(text: str, source: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown sections {unknown}")
    return {s: dict(parser.items(s)) for s in parser.sections()}


def apply_overrides(values: dict[str, dict[str, str]], overrides) -> dict[str, dict[str, str]]:
    out = {k: dict(v) for k, v in values.items()}
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise ConfigError(f"override {item!r} is not section.key=value")
        out.setdefault(section, {})[name] = raw
    return out


def load_config(path: str | Path | None = None, overrides=None) -> RunConfig:
    values: dict[str, dict[str, str]] = {}
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        source = str(path)
        values = _read(text, source)
    return build(apply_overrides(values, overrides), source)


def dumps(cfg: RunConfig) -> str:
    """Render a config back to INI text (loads back to an equal config)."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in dataclasses.asdict(getattr(cfg, section)).items():
            if isinstance(value, (tuple, list)):
                value = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)

