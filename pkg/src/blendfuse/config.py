"""Flat run configuration: built-in defaults < JSON file < command-line flags."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

from .data.synthetic import SyntheticConfig
from .decoding import AlignmentConfig
from .errors import ParameterError
from .model import ModelConfig
from .training.losses import LossWeights
from .training.loop import TrainConfig

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    # model
    top_n: int = 22
    proj_dim: int = 256
    shared_dim: int = 512
    gate_hidden: int = 128
    head_hidden: int = 256
    domain_hidden: int = 128
    dropout: float = 0.33
    temperature: float = 0.7
    gating: str = "attention"
    uda: bool = False
    grl_weight: float = 0.3
    # losses
    lambda_p: float = 0.68
    lambda_s: float = 0.32
    lambda_d: float = 0.15
    presence_loss: str = "soft_ce"
    # optimization
    lr: float = 3e-4
    weight_decay: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    scheduler_factor: float = 0.5
    scheduler_patience: int = 3
    min_lr: float = 1e-6
    early_stop_patience: int = 7
    early_stop_delta: float = 0.001
    # decoding; neutral_index None means "use the pack's metadata"
    alpha: float = 1.0
    epsilon: float = 1e-8
    tau_p: float = 0.15
    neutral_index: int | None = None
    # protocol
    seed: int = 0
    folds: int = 5
    val_fold: int = 0
    jobs: int = 1
    # synthetic data
    num_encoders: int = 12
    informative: tuple[int, ...] = (2, 5, 7, 10)
    informative_rank: int | None = None
    num_classes: int = 5
    frame_dim: int = 4
    n_source: int = 240
    n_target: int = 120
    n_groups: int = 12
    noise: float = 0.5
    distractor_scale: float = 1.0
    domain_shift: float = 0.0
    blend_prob: float = 0.5

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["informative"] = list(self.informative)
        return d

    def synthetic(self) -> SyntheticConfig:
        keys = {f.name for f in fields(SyntheticConfig)} & {f.name for f in fields(self)}
        kw = {k: getattr(self, k) for k in keys}
        if kw.get("neutral_index") is None:
            kw.pop("neutral_index", None)  # None defers to the generator's own neutral class
        return SyntheticConfig(**kw)

    def model(self, input_dims, num_classes: int) -> ModelConfig:
        top_n = self.top_n
        if top_n > len(input_dims):
            log.warning("top_n=%d exceeds the %d available encoders; using %d", top_n, len(input_dims), len(input_dims))
            top_n = len(input_dims)
        return ModelConfig(
            input_dims=tuple(input_dims),
            num_classes=num_classes,
            top_n=top_n,
            proj_dim=self.proj_dim,
            shared_dim=self.shared_dim,
            gate_hidden=self.gate_hidden,
            head_hidden=self.head_hidden,
            domain_hidden=self.domain_hidden,
            dropout=self.dropout,
            temperature=self.temperature,
            uda=self.uda,
            grl_weight=self.grl_weight,
            gating=self.gating,
        )

    def alignment(self, neutral_index: int | None = None) -> AlignmentConfig:
        neutral = self.neutral_index if self.neutral_index is not None else neutral_index
        return AlignmentConfig(self.alpha, self.epsilon, self.tau_p, neutral)

    def train(self, neutral_index: int | None = None) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            scheduler_factor=self.scheduler_factor,
            scheduler_patience=self.scheduler_patience,
            min_lr=self.min_lr,
            early_stop_patience=self.early_stop_patience,
            early_stop_delta=self.early_stop_delta,
            seed=self.seed,
            presence_loss=self.presence_loss,
            weights=LossWeights(self.lambda_p, self.lambda_s, self.lambda_d),
            alignment=self.alignment(neutral_index),
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    default = _FIELDS[key].default
    if value is None:
        return None
    try:
        if key == "informative":
            if isinstance(value, str):
                value = [v for v in value.split(",") if v.strip()]
            return tuple(int(v) for v in value)
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int) or key in ("neutral_index", "informative_rank"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"bad value for {key!r}: {value!r}") from exc


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    unknown = sorted(set(overrides) - set(_FIELDS))
    if unknown:
        raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
    return dataclasses.replace(cfg, **{k: _coerce(k, v) for k, v in overrides.items()})


def parse_set(items) -> dict:
    """``key=value`` strings; values are read as JSON when possible, else as text."""
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ParameterError(f"expected key=value, got {item!r}")
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ParameterError(f"{path}: cannot read config ({exc})") from exc
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ParameterError(f"{path}: config must be a JSON object")
        cfg = apply_overrides(cfg, data)
    return apply_overrides(cfg, overrides or {})
