"""Strict JSON run configuration.

Every section maps onto a dataclass; unknown keys, wrong types and missing
required fields raise ``ConfigError`` naming the offending field. Seeds that are
not given explicitly derive from the run seed by fixed offsets:

    dataset  = seed + 1
    stream   = seed + 2   (stream order)
    pretrain = seed + 3   (init and minibatch order)
    corrupt  = seed + 4   (per-sample corruption noise)
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .adaptation import AdaptConfig, PretrainConfig
from .data import CorruptionSpec, StreamProtocol
from .model import ModelConfig

SEED_OFFSETS = {"dataset": 1, "stream": 2, "pretrain": 3, "corruption": 4}


class ConfigError(ValueError):
    """Invalid, incomplete or over-specified configuration."""


@dataclass
class DataConfig:
    classes: int = 10
    per_class: int = 200
    test_per_class: int = 100
    image_size: int = 16
    dataset_seed: int | None = None

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("data.classes must be at least 2")
        if self.per_class <= 0 or self.test_per_class <= 0:
            raise ValueError("data.per_class and data.test_per_class must be positive")


@dataclass
class StreamConfig:
    protocol: str = "normal"
    batch_size: int = 64
    corruption: str = "gaussian_noise"
    severity: int = 5
    stream_seed: int | None = None
    corruption_seed: int | None = None
    concentration: float = 0.1

    def __post_init__(self):
        # reuse the domain validators
        StreamProtocol(self.protocol, self.batch_size, self.concentration)
        CorruptionSpec(self.corruption, self.severity)


@dataclass
class RunConfig:
    run_id: str
    model: ModelConfig = field(default_factory=ModelConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        if not self.run_id or any(c in self.run_id for c in "/\\"):
            raise ValueError("run_id must be a non-empty file-name-safe string")
        if self.data.classes != self.model.num_classes:
            raise ValueError(f"data.classes ({self.data.classes}) must equal model.num_classes "
                             f"({self.model.num_classes})")
        if self.data.image_size != self.model.image_size:
            raise ValueError(f"data.image_size ({self.data.image_size}) must equal model.image_size "
                             f"({self.model.image_size})")

    # -- derived seeds
    def child_seed(self, concern: str) -> int:
        explicit = {"dataset": self.data.dataset_seed, "stream": self.stream.stream_seed,
                    "corruption": self.stream.corruption_seed}.get(concern)
        return int(explicit) if explicit is not None else self.seed + SEED_OFFSETS[concern]

    def pretrain_config(self) -> PretrainConfig:
        return dataclasses.replace(self.pretrain, seed=self.seed + SEED_OFFSETS["pretrain"])

    def protocol(self) -> StreamProtocol:
        s = self.stream
        return StreamProtocol(s.protocol, s.batch_size, s.concentration, self.child_seed("stream"))

    def corruption(self, severity: int | None = None) -> CorruptionSpec:
        return CorruptionSpec(self.stream.corruption, self.stream.severity if severity is None else severity)

    def output(self, suffix: str) -> Path:
        return Path(self.out_dir) / f"{self.run_id}.{suffix}"

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"model": ModelConfig, "adapt": AdaptConfig, "pretrain": PretrainConfig,
             "data": DataConfig, "stream": StreamConfig}
_PRETRAIN_KEYS = {f.name for f in dataclasses.fields(PretrainConfig)} - {"seed"}


def _check_type(where: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) or default is None and where.endswith("_seed"):
        ok = isinstance(value, int) and not isinstance(value, bool) or (default is None and value is None)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__ if default is not None else 'int or null'}, "
                          f"got {value!r}")
    return float(value) if isinstance(default, float) else value


def _build(cls, where: str, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    if cls is PretrainConfig:
        allowed = {k: v for k, v in allowed.items() if k in _PRETRAIN_KEYS}
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        f = allowed[name]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[name] = _check_type(f"{where}.{name}", value, default)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    if "run_id" not in raw:
        raise ConfigError("config: missing required field run_id")
    kwargs = {"run_id": _check_type("run_id", raw["run_id"], "")}
    for key in ("out_dir", "seed"):
        if key in raw:
            kwargs[key] = _check_type(key, raw[key], RunConfig.__dataclass_fields__[key].default)
    for key, cls in _SECTIONS.items():
        if key in raw:
            kwargs[key] = _build(cls, key, raw[key])
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(f"config: duplicate key {k!r}")
        out[k] = v
    return out


def _reject_constant(name):
    raise ConfigError(f"config: non-standard JSON constant {name}")


def loads(text: str) -> RunConfig:
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from exc
    return parse_config(raw)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path} ({exc})") from exc
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    raw = cfg.to_dict()
    raw["pretrain"].pop("seed")
    return json.dumps(raw, indent=2, sort_keys=True)
