"""The run configuration: one JSON document with one section per component."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any

from .corpus import CorpusConfig
from .errors import ConfigError
from .model import ModelConfig
from .objectives import LossConfig


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    seed: int = 1
    eval_every_epochs: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    dtype: str = "float32"
    max_decode_len: int = 60
    validate_on_train: bool = False
    data_dir: str | None = None
    out_dir: str | None = None

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("train.max_epochs must be >= 0")
        if self.eval_every_epochs < 1:
            raise ConfigError("train.eval_every_epochs must be >= 1")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid optimizer hyperparameters")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if self.max_decode_len < 1:
            raise ConfigError("train.max_decode_len must be >= 1")


@dataclass
class MetricsConfig:
    # "model" (trained target embeddings), "hash", or a path to a vector file
    embedder: str = "model"


_LOSS_FIELDS = ("lambda_t", "lambda_c", "gamma_rule", "normalization")
_MODEL_FIELDS = ("d_emb", "d_h", "d_s", "K")


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        self.loss.K = self.model.K

    def validate(self) -> None:
        self.loss.K = self.model.K
        self.corpus.validate()
        for name in ("d_emb", "d_h", "d_s"):
            if getattr(self.model, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.model.K < 0:
            raise ConfigError("model.K must be >= 0")
        self.loss.validate()
        self.train.validate()

    def to_dict(self) -> dict:
        return {
            "corpus": asdict(self.corpus),
            "model": {k: getattr(self.model, k) for k in _MODEL_FIELDS},
            "loss": {k: getattr(self.loss, k) for k in _LOSS_FIELDS},
            "train": asdict(self.train),
            "metrics": asdict(self.metrics),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"corpus": CorpusConfig, "model": ModelConfig, "loss": LossConfig,
                    "train": TrainConfig, "metrics": MetricsConfig}
        allowed = {"model": _MODEL_FIELDS, "loss": _LOSS_FIELDS}
        unknown = set(obj) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, klass in sections.items():
            values = obj.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            names = allowed.get(name, tuple(f.name for f in dataclasses.fields(klass)))
            bad = set(values) - set(names)
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            built[name] = klass(**{k: _coerce(klass, k, v) for k, v in values.items()})
        return cls(**built)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
        obj = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            if section not in obj:
                raise ConfigError(f"unknown config section {section!r}")
            if name not in obj[section]:
                raise ConfigError(f"unknown key {key!r}")
            try:
                value: Any = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            obj[section][name] = value
        return RunConfig.from_dict(obj)

    def hash(self) -> str:
        """Digest of every setting except input/output locations."""
        obj = self.to_dict()
        obj["train"] = {k: v for k, v in obj["train"].items() if k not in ("data_dir", "out_dir")}
        blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _coerce(klass, name: str, value):
    ftype = {f.name: f.type for f in dataclasses.fields(klass)}[name]
    ftype = str(ftype)
    try:
        if ftype == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if ftype == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if ftype == "bool":
            if not isinstance(value, bool):
                raise ValueError
            return value
        if ftype == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r} for {klass.__name__}.{name} ({ftype})") from exc
    return value
