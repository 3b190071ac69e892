"""Plateau LR reduction and early stopping on a maximized metric."""

from __future__ import annotations

import math

from ..errors import ParameterError


class PlateauScheduler:
    """Multiply the lr by ``factor`` after ``patience`` epochs without an improvement > ``delta``."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3, min_lr: float = 1e-6, delta: float = 0.001):
        if not 0 < factor < 1 or patience < 1 or min_lr < 0:
            raise ParameterError("need 0 < factor < 1, patience >= 1, min_lr >= 0")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.delta = delta
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric > self.best + self.delta:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = min(self.lr, max(self.lr * self.factor, self.min_lr))
                self.bad_epochs = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int = 7, delta: float = 0.001):
        if patience < 1:
            raise ParameterError("patience must be >= 1")
        self.patience = patience
        self.delta = delta
        self.best = -math.inf
        self.best_epoch = None
        self.bad_epochs = 0

    def step(self, metric: float, epoch: int) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if metric > self.best + self.delta:
            self.best = metric
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience
