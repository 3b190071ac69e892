"""Fixed-size temporal summaries of frame-level features."""

import math

import numpy as np

from ..errors import InputError

STAT_NAMES = ("mean", "std", "p10", "p25", "p50", "p75", "p90")
PERCENTILES = (10, 25, 50, 75, 90)


def aggregate_frames(frames) -> np.ndarray:
    """Summarize a (T x D) frame matrix into a 7*D vector.

    Blocks of D follow ``STAT_NAMES``: mean, population std, then the linearly
    interpolated 10/25/50/75/90th percentiles of every column. Sums are
    correctly rounded (fsum), so mean and std do not depend on memory layout.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise InputError(f"expected a non-empty (T, D) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("frame features contain non-finite values")
    T = x.shape[0]
    mean = np.array([math.fsum(c) for c in x.T]) / T
    dev = x - mean
    std = np.sqrt(np.array([math.fsum(c) for c in (dev * dev).T]) / T)
    pct = np.percentile(x, PERCENTILES, axis=0, method="linear")
    return np.concatenate([mean, std, pct.reshape(-1)])
