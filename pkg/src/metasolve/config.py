"""Training configuration: TOML loading, validation and the config hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .episodes import EpisodeSpec
from .errors import ValidationError
from .heads import HEADS

# fields that select budgets or files, not the model; left out of the hash
HASH_EXCLUDE = frozenset({"data", "max_episodes"})


@dataclass
class TrainConfig:
    head: str = "r2d2"
    ova: bool = False
    # evaluation / meta-validation episodes
    ways: int = 5
    shots: int = 1
    queries: int = 15
    # training episodes; None means "derive from the evaluation spec"
    train_ways: int | None = None
    train_shots: int | list | None = None
    train_queries: int | None = None
    train_batch: int | None = None
    # Adam and schedule
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 0.5
    lr_period: int = 2000
    grad_clip: float | None = None
    # stopping and validation
    max_episodes: int = 30000
    patience: int = 20000
    min_delta: float = 1e-4
    stop_metric: str = "loss"
    eval_period: int = 500
    val_episodes: int = 600
    # base learner
    steps: int = 5
    inner_lr: float = 0.01
    lambda_init: float = 1.0
    alpha_init: float = 1.0
    beta_init: float = 0.0
    learn_lambda: bool = True
    learn_alpha: bool = True
    learn_beta: bool = True
    diag_lambda: bool = False
    # embedding
    widths: list = field(default_factory=lambda: [64, 64])
    concat_last_two: bool = True
    dropout: list | None = None
    # pretrain-transfer baseline
    pretrain_steps: int = 3000
    pretrain_batch: int = 128
    seed: int = 0
    data: str | None = None

    def __post_init__(self):
        if self.ova and self.head == "lr-d2":
            self.head = "lr-d2-ova"
        if self.head == "lr-d2-ova":
            self.ova = True
        if isinstance(self.train_shots, tuple):
            self.train_shots = list(self.train_shots)
        self.widths = [int(w) for w in self.widths]
        if self.dropout is not None:
            self.dropout = [float(p) for p in self.dropout]

    # -- validation ---------------------------------------------------------

    def validate(self) -> "TrainConfig":
        def need(cond: bool, name: str, msg: str) -> None:
            if not cond:
                raise ValidationError(f"config field {name!r}: {msg}")

        need(self.head in HEADS, "head", f"must be one of {HEADS}")
        need(self.lr > 0, "lr", "must be > 0")
        need(self.patience > 0, "patience", "must be > 0")
        need(self.steps >= 1, "steps", "must be >= 1")
        need(self.max_episodes >= 1, "max_episodes", "must be >= 1")
        need(self.eval_period >= 1, "eval_period", "must be >= 1")
        need(self.val_episodes >= 1, "val_episodes", "must be >= 1")
        need(self.lr_period >= 1, "lr_period", "must be >= 1")
        need(0 < self.lr_decay <= 1, "lr_decay", "must lie in (0, 1]")
        need(self.lambda_init > 0, "lambda_init", "must be > 0")
        need(self.stop_metric in ("loss", "accuracy"), "stop_metric", "must be 'loss' or 'accuracy'")
        need(self.inner_lr >= 0, "inner_lr", "must be >= 0")
        need(len(self.widths) >= 1 and min(self.widths) >= 1, "widths", "must be positive")
        need(self.dropout is None or len(self.dropout) == len(self.widths), "dropout",
             "needs one rate per layer")
        need(not self.diag_lambda or self.head == "r2d2", "diag_lambda", "only applies to head r2d2")
        need(self.grad_clip is None or self.grad_clip > 0, "grad_clip", "must be > 0")
        if self.head == "lr-d2":
            need(self.ways == 2, "ways", "lr-d2 is a binary head; use ova for more than 2 ways")
            need(self.train_ways in (None, 2), "train_ways",
                 "lr-d2 is a binary head; use ova for more than 2 ways")
        try:
            self.train_spec()
            self.eval_spec()
        except ValidationError as exc:
            raise ValidationError(f"config episode spec: {exc}") from None
        return self

    # -- derived specs -------------------------------------------------------

    def eval_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.ways, self.shots, self.queries)

    def resolved_train_ways(self) -> int:
        if self.train_ways is not None:
            return self.train_ways
        if self.head == "lr-d2":
            return self.ways
        if self.head == "lr-d2-ova":
            return min(2 * self.ways, 10)
        return 2 * self.ways

    def train_spec(self) -> EpisodeSpec:
        ways = self.resolved_train_ways()
        shots = self.train_shots if self.train_shots is not None else self.shots
        queries = self.train_queries if self.train_queries is not None else self.queries
        if isinstance(shots, list):
            if len(shots) != 2:
                raise ValidationError("train_shots range must be [low, high]")
            return EpisodeSpec(ways, (int(shots[0]), int(shots[1])), queries, self.train_batch)
        return EpisodeSpec(ways, int(shots), queries, self.train_batch)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown config field {unknown[0]!r}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"config: {exc}") from None


def config_hash(config: TrainConfig) -> int:
    """64-bit hash over the canonical JSON of the model-defining fields."""
    body = {k: v for k, v in config.to_dict().items() if k not in HASH_EXCLUDE}
    digest = hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).digest()
    return int.from_bytes(digest[:8], "little")


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _check_types(data: dict) -> None:
    for key, value in data.items():
        if key not in _TYPES:
            raise ValidationError(f"unknown config field {key!r}")
        kind = _TYPES[key]
        if kind == "bool" and not isinstance(value, bool):
            raise ValidationError(f"config field {key!r} must be a boolean")
        if kind == "int" and (isinstance(value, bool) or not isinstance(value, int)):
            raise ValidationError(f"config field {key!r} must be an integer")
        if kind == "float" and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ValidationError(f"config field {key!r} must be a number")
        if kind == "str" and not isinstance(value, str):
            raise ValidationError(f"config field {key!r} must be a string")


def load_config(path) -> TrainConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from None
    for key, value in list(data.items()):
        if isinstance(value, dict):
            raise ValidationError(f"config field {key!r}: tables are not supported, use flat keys")
    _check_types(data)
    return TrainConfig.from_dict(data)


def write_config(config: TrainConfig, path) -> None:
    lines = []
    for key, value in config.to_dict().items():
        if value is None:
            continue
        lines.append(f"{key} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines) + "\n")
