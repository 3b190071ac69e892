"""Soft-label and domain losses, per sample and batched on logits.

Batched variants return ``(mean loss, d loss / d logits)`` with the mean taken
over rows, ready to hand to ``FusionModel.backward``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, ParameterError
from ..numerics import log_sigmoid, log_softmax, sigmoid, softmax

LOG_CLAMP = 1e-12
PRESENCE_LOSSES = ("soft_ce", "bce")


@dataclass
class LossWeights:
    lambda_p: float = 0.68
    lambda_s: float = 0.32
    lambda_d: float = 0.15

    def __post_init__(self):
        if min(self.lambda_p, self.lambda_s, self.lambda_d) < 0:
            raise ParameterError("loss weights must be >= 0")


def soft_ce(p, t) -> float:
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return float(-(t * np.log(np.maximum(p, LOG_CLAMP))).sum())


def binary_ce(p, t) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), LOG_CLAMP, 1 - LOG_CLAMP)
    t = np.asarray(t, dtype=np.float64)
    return float(-(t * np.log(p) + (1 - t) * np.log1p(-p)).sum())


def task_loss(bundle, t, weights: LossWeights, presence_loss: str = "soft_ce") -> float:
    if t is None:
        raise ContractError("task loss needs a target vector (source-domain sample)")
    lp = soft_ce(bundle.p_p, t) if presence_loss == "soft_ce" else binary_ce(bundle.p_p, t)
    return weights.lambda_p * lp + weights.lambda_s * soft_ce(bundle.p_s, t)


def domain_loss(p_d, d: int) -> float:
    return float(-np.log(max(float(np.asarray(p_d)[d]), LOG_CLAMP)))


# -- batched, on logits ------------------------------------------------------


def presence_loss_grad(z: np.ndarray, t: np.ndarray, kind: str = "soft_ce"):
    B = z.shape[0]
    if kind == "soft_ce":
        loss = -(t * log_sigmoid(z)).sum() / B
        grad = -t * sigmoid(-z) / B
    elif kind == "bce":
        loss = -(t * log_sigmoid(z) + (1 - t) * log_sigmoid(-z)).sum() / B
        grad = (sigmoid(z) - t) / B
    else:
        raise ParameterError(f"presence loss must be one of {PRESENCE_LOSSES}")
    return float(loss), grad


def salience_loss_grad(z: np.ndarray, t: np.ndarray):
    B = z.shape[0]
    loss = -(t * log_softmax(z)).sum() / B
    grad = (t.sum(axis=1, keepdims=True) * softmax(z) - t) / B
    return float(loss), grad


def domain_loss_grad(z: np.ndarray, d: np.ndarray):
    B = z.shape[0]
    onehot = np.zeros_like(z)
    onehot[np.arange(B), d] = 1.0
    loss = -(onehot * log_softmax(z)).sum() / B
    return float(loss), (softmax(z) - onehot) / B
