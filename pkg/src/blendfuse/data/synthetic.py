"""Synthetic blended-emotion data with a pool of informative and distractor encoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ParameterError
from ..numerics import make_rng
from .records import EncoderSpec, SampleRecord

STREAM_SYNTH = 21

# blend salience patterns, first emotion's share then second's
BLEND_PATTERNS = ((70, 30), (50, 50), (30, 70))


@dataclass
class SyntheticConfig:
    num_encoders: int = 12
    # spread over the pool: selected encoders are concatenated in index
    # order, so a low-index informative block would get a fixed fusion slot
    informative: tuple[int, ...] = (2, 5, 7, 10)
    # rank of each informative encoder's view of t; None means full rank
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
    blend_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    neutral_index: int | None = 0
    seed: int = 0

    def validate(self) -> None:
        M, C = self.num_encoders, self.num_classes
        if M < 1 or C < 2 or self.frame_dim < 1:
            raise ParameterError("need num_encoders >= 1, num_classes >= 2, frame_dim >= 1")
        if not self.informative or any(not 0 <= i < M for i in self.informative):
            raise ParameterError(f"informative set {self.informative} not within 0..{M - 1}")
        if len(set(self.informative)) != len(self.informative):
            raise ParameterError("informative set has duplicates")
        if self.informative_rank is not None and not 1 <= self.informative_rank <= C:
            raise ParameterError(f"informative_rank must lie in [1, {C}]")
        if not 0.0 <= self.blend_prob <= 1.0:
            raise ParameterError("blend_prob must lie in [0, 1]")
        w = np.asarray(self.blend_weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or w.sum() <= 0:
            raise ParameterError("blend_weights must be 3 non-negative numbers with positive sum")
        if self.noise < 0 or self.distractor_scale < 0 or self.domain_shift < 0:
            raise ParameterError("noise, distractor_scale and domain_shift must be >= 0")
        if self.n_source < 0 or self.n_target < 0 or self.n_groups < 1:
            raise ParameterError("sample and group counts must be non-negative (groups >= 1)")
        if self.neutral_index is not None and not 0 <= self.neutral_index < C:
            raise ParameterError("neutral_index out of range")
        affective = C - (self.neutral_index is not None)
        if self.blend_prob > 0 and affective < 2:
            raise ParameterError("blends need at least two non-neutral classes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["informative"] = list(self.informative)
        d["blend_weights"] = list(self.blend_weights)
        return d

    def encoder_specs(self) -> list[EncoderSpec]:
        modality = ("video", "audio")
        return [
            EncoderSpec(f"enc{i:02d}", modality[i % 2], self.frame_dim)
            for i in range(self.num_encoders)
        ]


def _draw_target(rng: np.random.Generator, cfg: SyntheticConfig) -> np.ndarray:
    C = cfg.num_classes
    t = np.zeros(C)
    if cfg.blend_prob > 0 and rng.random() < cfg.blend_prob:
        affective = [c for c in range(C) if c != cfg.neutral_index]
        a, b = rng.choice(affective, size=2, replace=False)
        w = np.asarray(cfg.blend_weights, dtype=float)
        s1, s2 = BLEND_PATTERNS[rng.choice(3, p=w / w.sum())]
        t[a], t[b] = s1 / 100, s2 / 100
    else:
        t[rng.integers(C)] = 1.0
    return t


def generate_synthetic(cfg: SyntheticConfig) -> list[SampleRecord]:
    """Draw a labeled source set and an unlabeled, feature-shifted target set.

    Informative encoder ``i`` emits ``t @ A_i + noise * N(0, 1)`` with a fixed
    random ``A_i`` (of rank ``informative_rank`` when set, so each encoder sees
    only part of the label); the others emit ``distractor_scale * N(0, 1)``.
    Target-domain features get a fixed per-feature affine shift
    ``x * scale + offset``; their labels go to ``hidden_target`` only.
    """
    cfg.validate()
    rng = make_rng(cfg.seed, STREAM_SYNTH)
    specs = cfg.encoder_specs()
    C = cfg.num_classes
    informative = set(cfg.informative)
    rank = cfg.informative_rank or C
    maps = {}
    for i in sorted(informative):
        if rank == C:
            maps[i] = rng.normal(size=(C, specs[i].width))
        else:
            maps[i] = rng.normal(size=(C, rank)) @ rng.normal(size=(rank, specs[i].width)) / np.sqrt(rank)
    shift_scale = [np.exp(0.25 * cfg.domain_shift * rng.normal(size=s.width)) for s in specs]
    shift_offset = [cfg.domain_shift * rng.normal(size=s.width) for s in specs]

    samples = []
    for domain, count, prefix in (("source", cfg.n_source, "src"), ("target", cfg.n_target, "tgt")):
        for k in range(count):
            t = _draw_target(rng, cfg)
            feats = {}
            for i, spec in enumerate(specs):
                if i in informative:
                    x = t @ maps[i] + cfg.noise * rng.normal(size=spec.width)
                else:
                    x = cfg.distractor_scale * rng.normal(size=spec.width)
                if domain == "target":
                    x = x * shift_scale[i] + shift_offset[i]
                feats[spec.name] = x
            samples.append(
                SampleRecord(
                    sample_id=f"{prefix}{k:05d}",
                    group_id=f"{prefix[0]}{k % cfg.n_groups:03d}",
                    domain=domain,
                    features=feats,
                    target=t if domain == "source" else None,
                    hidden_target=t if domain == "target" else None,
                )
            )
    return samples
