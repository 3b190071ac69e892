from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError, ParameterError

MODALITIES = ("video", "audio", "multimodal")
DOMAINS = ("source", "target")
NUM_STATS = 7

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.+-]*$")


@dataclass(frozen=True)
class EncoderSpec:
    """One encoder stream. ``dim`` is the per-frame width D; summaries are 7*D wide."""

    name: str
    modality: str
    dim: int

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ParameterError(f"encoder name {self.name!r} is not filesystem-safe")
        if self.modality not in MODALITIES:
            raise ParameterError(f"unknown modality {self.modality!r}")
        if int(self.dim) < 1:
            raise ParameterError(f"encoder {self.name}: dim must be >= 1")

    @property
    def width(self) -> int:
        return NUM_STATS * self.dim


@dataclass
class SampleRecord:
    sample_id: str
    group_id: str
    domain: str
    features: dict[str, np.ndarray]
    target: np.ndarray | None = None
    # ground truth for unlabeled target-domain samples; never read by training
    hidden_target: np.ndarray | None = field(default=None, repr=False)

    @property
    def domain_label(self) -> int:
        return DOMAINS.index(self.domain)

    def validate(self, specs: list[EncoderSpec] | None = None) -> None:
        if self.domain not in DOMAINS:
            raise InputError(f"{self.sample_id}: unknown domain {self.domain!r}")
        if self.domain == "source" and self.target is None:
            raise InputError(f"{self.sample_id}: source samples must carry a target")
        for t in (self.target, self.hidden_target):
            if t is not None and (np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t))):
                raise InputError(f"{self.sample_id}: target entries must lie in [0, 1]")
        for spec in specs or ():
            x = self.features.get(spec.name)
            if x is None:
                raise InputError(f"{self.sample_id}: missing encoder {spec.name!r}")
            if x.shape != (spec.width,):
                raise InputError(
                    f"{self.sample_id}: encoder {spec.name!r} has shape {x.shape}, expected ({spec.width},)"
                )
            if not np.all(np.isfinite(x)):
                raise InputError(f"{self.sample_id}: encoder {spec.name!r} has non-finite values")


def stack_features(samples: list[SampleRecord], specs: list[EncoderSpec]) -> list[np.ndarray]:
    """One (N x 7D) float64 matrix per encoder, rows in sample order."""
    out = []
    for spec in specs:
        try:
            rows = [s.features[spec.name] for s in samples]
        except KeyError as exc:
            raise InputError(f"missing encoder {spec.name!r} in a sample") from exc
        out.append(np.asarray(rows, dtype=np.float64).reshape(len(samples), spec.width))
    return out


def stack_targets(samples: list[SampleRecord], hidden: bool = False) -> np.ndarray:
    rows = []
    for s in samples:
        t = s.hidden_target if (hidden and s.target is None) else s.target
        if t is None:
            raise InputError(f"{s.sample_id}: no target available")
        rows.append(t)
    return np.asarray(rows, dtype=np.float64)
