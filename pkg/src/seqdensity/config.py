"""Experiment configuration: a JSON tree of dataclasses, strictly validated and hashed."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import TaskSpec
from .errors import ConfigError
from .models import REGISTRY, ModelConfig, get_config
from .training import TrainSchedule

SCHEMA_VERSION = 1
SUITE_VERSION = "0.1.0"


@dataclass
class TaskConfig:
    kind: str = "synonym"
    vocab_size: int = 64
    min_len: int = 8
    max_len: int = 32
    m: int = 2
    seed: int = 0
    ref_cap: int = 1024
    n_train: int = 20000
    n_dev: int = 1000
    n_test: int = 1000

    def spec(self) -> TaskSpec:
        return TaskSpec(self.kind, self.vocab_size, self.min_len, self.max_len, self.m,
                        self.seed, self.ref_cap)


@dataclass
class ModelSection:
    size: str = "gauss-base-toy"
    overrides: dict = field(default_factory=dict)


@dataclass
class InferenceConfig:
    beam_width: int = 4
    k_list: list = field(default_factory=lambda: [0, 1, 2, 4, 8])
    length_mode: str = "predicted"


@dataclass
class EvalConfig:
    is_samples: int = 1000
    n_candidates: int = 10
    speed_sentences: int = 20
    speed_repetitions: int = 5


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelSection = field(default_factory=ModelSection)
    data: str = "raw"                      # raw | distilled
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.data not in ("raw", "distilled"):
            raise ConfigError(f"data must be 'raw' or 'distilled', got {self.data!r}")
        if self.model.size not in REGISTRY:
            raise ConfigError(f"unknown model size {self.model.size!r}; known: {sorted(REGISTRY)}")
        if self.inference.length_mode not in ("predicted", "gold"):
            raise ConfigError("length_mode must be 'predicted' or 'gold'")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema version {self.schema_version} unsupported")
        self.task.spec()
        self.model_config()

    def model_config(self) -> ModelConfig:
        try:
            return get_config(self.model.size, vocab_size=self.task.vocab_size,
                              **self.model.overrides)
        except TypeError as exc:
            raise ConfigError(f"bad model override: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def task_hash(self) -> str:
        return config_hash(asdict(self.task))


def config_hash(tree: dict) -> str:
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, tree, path: str):
    if not isinstance(tree, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(tree) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in tree.items():
        f = known[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(tree: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, tree, "")


def config_leaves(cls=ExperimentConfig, prefix: str = "") -> list[tuple[str, object]]:
    """Dotted paths and default values of every leaf field, e.g. ("task.m", 2)."""
    out = []
    for f in fields(cls):
        name = f"{prefix}{f.name}"
        if f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
            if dataclasses.is_dataclass(default):
                out.extend(config_leaves(type(default), name + "."))
                continue
        else:
            default = f.default
        out.append((name, default))
    return out


def parse_leaf(path: str, text: str, default):
    """Convert a command-line string to the type of a leaf's default value."""
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"expected true/false, got {text!r}")
            return text.lower() in ("true", "1")
        if isinstance(default, (list, dict)):
            value = json.loads(text)
            if not isinstance(value, type(default)):
                raise ValueError(f"expected a JSON {type(default).__name__}")
            return value
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"--{path}: {exc}") from exc


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Rebuild ``cfg`` with dotted-path overrides applied (values already parsed)."""
    if not overrides:
        return cfg
    tree = cfg.to_dict()
    for path, value in overrides.items():
        *parents, leaf = path.split(".")
        node = tree
        for key in parents:
            node = node[key]
        node[leaf] = value
    return from_dict(tree)


def load_config(path: Path) -> ExperimentConfig:
    try:
        tree = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return from_dict(tree)


def save_config(cfg: ExperimentConfig, path: Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
