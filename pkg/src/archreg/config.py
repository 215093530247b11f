"""Flat ``key=value`` experiment configuration."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

from .data import SyntheticSpec
from .trainer import TrainingConfig

AUTO = "auto"


@dataclass
class ExperimentConfig:
    # training
    strategy: str = "arch"
    lam: float = 1.0
    eps: float | None = None
    eta: float = 0.1
    steps: int = 3
    epochs: int = 30
    cache_gap: float = 15
    alpha: float = 0.01
    p: float = 0.1
    k: int = 1
    random_neighbors: bool = False
    batch_size: int = 32
    lr: float = 0.1
    optimizer: str = "sgd"
    seed: int = 0
    norm_kind: str = "l2"
    init: str = "uniform"
    clean_grad: bool = True
    # model
    dim: int = 16
    hidden: int = 64
    task: str = "classification"
    # data
    n: int = 2000
    n_test: int = 500
    vocab_size: int = 1000
    min_len: int = 5
    max_len: int = 20
    signal_tokens: int = 5
    n_classes: int = 2
    max_signal: int = 3
    label_noise: float = 0.1
    data_seed: int = 0
    train_tsv: str = ""
    test_tsv: str = ""
    knn_embedding: str = ""
    # output
    out_dir: str = "runs/latest"
    repeats: int = 1
    dump_cache: bool = False
    dump_index: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.training(self.seed)
        if not self.train_tsv:
            self.synthetic_spec().validate()
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.dim < 1 or self.hidden < 1:
            raise ValueError("dim and hidden must be >= 1")

    def training(self, seed: int | None = None) -> TrainingConfig:
        names = {f.name for f in fields(TrainingConfig)}
        values = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        if seed is not None:
            values["seed"] = seed
        return TrainingConfig(**values)

    def synthetic_spec(self) -> SyntheticSpec:
        names = {f.name for f in fields(SyntheticSpec)}
        return SyntheticSpec(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str) -> Any:
    kind = _FIELDS[key].type
    raw = raw.strip()
    if key == "eps":
        return None if raw.lower() in (AUTO, "none", "") else float(raw)
    if key == "cache_gap":
        return math.inf if raw.lower() in ("inf", "infinity") else int(raw)
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def format_value(key: str, value: Any) -> str:
    if key == "eps" and value is None:
        return AUTO
    if key == "cache_gap":
        return "inf" if value == math.inf else str(int(value))
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(pairs: Iterable[tuple[str, str]]) -> dict[str, Any]:
    out = {}
    for key, raw in pairs:
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise KeyError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def parse_text(text: str) -> dict[str, Any]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, raw = line.split("=", 1)
        pairs.append((key, raw))
    return parse_pairs(pairs)


def load_config(path: str | Path | None = None,
                overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        values.update(overrides)
    return ExperimentConfig(**values)


def serialize(config: ExperimentConfig) -> str:
    return "".join(f"{f.name}={format_value(f.name, getattr(config, f.name))}\n"
                   for f in fields(config))


def parse(text: str) -> ExperimentConfig:
    return ExperimentConfig(**parse_text(text))
