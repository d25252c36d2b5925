"""Experiment configuration: a plain ``key = value`` file plus overrides.

Keys are ``section.field``; sections are ``pipeline``, ``model``, ``train``,
``transfer``, ``data`` and ``output``. ``#`` starts a comment. The window
length lives in ``pipeline.window_len`` and is copied into the model config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

from .model import ModelConfig
from .preprocess import PipelineConfig
from .train import TrainConfig

SECTIONS = {"pipeline": PipelineConfig, "model": ModelConfig, "train": TrainConfig}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TransferSettings:
    source_checkpoint: str = ""
    n_frozen: int = 20
    fraction: float = 0.5
    freeze_pool: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transfer: TransferSettings = field(default_factory=TransferSettings)
    data_dir: str = ""
    subset: str = "FD001"
    out_dir: str = "runs/default"
    plot: bool = False
    explicit: frozenset = frozenset()  # keys given by the user

    def __post_init__(self):
        if self.model.window_len != self.pipeline.window_len:
            raise ConfigError("model and pipeline window lengths differ")


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value: str, default: Any, name: str, annotation: str = ""):
    v = value.strip()
    if isinstance(default, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, tuple):
            return tuple(int(x) for x in v.replace("(", "").replace(")", "").split(",") if x.strip())
        if isinstance(default, int) or (default is None and "int" in annotation):
            return int(v)
        if isinstance(default, float):
            return float(v)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r}") from None
    return v


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def build_config(pairs: dict[str, str]) -> ExperimentConfig:
    groups: dict[str, dict[str, Any]] = {s: {} for s in (*SECTIONS, "transfer")}
    top: dict[str, Any] = {}
    top_keys = {"data.dir": "data_dir", "data.subset": "subset", "output.dir": "out_dir", "output.plot": "plot"}
    defaults = ExperimentConfig()
    for key, value in pairs.items():
        if key in top_keys:
            attr = top_keys[key]
            top[attr] = _coerce(value, getattr(defaults, attr), key)
            continue
        section, _, name = key.partition(".")
        cls = SECTIONS.get(section, TransferSettings if section == "transfer" else None)
        if cls is None or name not in _fields(cls):
            raise ConfigError(f"unknown config key {key!r}")
        f = _fields(cls)[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        groups[section][name] = _coerce(value, default, key, str(f.type))
    if "window_len" in groups["model"]:
        if "window_len" in groups["pipeline"] and groups["pipeline"]["window_len"] != groups["model"]["window_len"]:
            raise ConfigError("model.window_len disagrees with pipeline.window_len")
        groups["pipeline"]["window_len"] = groups["model"]["window_len"]
    try:
        pipeline = PipelineConfig(**groups["pipeline"])
        groups["model"]["window_len"] = pipeline.window_len
        model = ModelConfig(**groups["model"])
        train = TrainConfig(**groups["train"])
        transfer = TransferSettings(**groups["transfer"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return ExperimentConfig(pipeline, model, train, transfer, explicit=frozenset(pairs), **top)


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    pairs = parse_kv(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return build_config(pairs)
