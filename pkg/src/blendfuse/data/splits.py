from __future__ import annotations

import numpy as np

from ..errors import SplitError
from ..numerics import make_rng
from .records import SampleRecord

STREAM_SPLIT = 11


def kfold_split(
    samples: list[SampleRecord], k: int, seed: int = 0, by: str = "group_id"
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Group k-fold: returns ``k`` pairs of (train, val) index arrays.

    Distinct groups are shuffled with the seed and dealt round-robin to folds,
    so no group ever appears on both sides of a split.
    """
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    keys = [getattr(s, by) for s in samples]
    groups = sorted(set(keys))
    if len(groups) < k:
        raise SplitError(f"{len(groups)} distinct groups cannot fill {k} folds")
    order = make_rng(seed, STREAM_SPLIT).permutation(len(groups))
    fold_of = {groups[g]: pos % k for pos, g in enumerate(order)}
    assign = np.array([fold_of[key] for key in keys])
    all_idx = np.arange(len(samples))
    return [(all_idx[assign != f], all_idx[assign == f]) for f in range(k)]
