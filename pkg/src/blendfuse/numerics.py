"""Small dense-layer kernel with hand-written backward passes.

Everything runs in float64 on 2-D numpy arrays (batch x features). Each layer
kernel comes as a ``*_forward`` / ``*_backward`` pair; the backward functions
accumulate into ``Parameter.grad`` and return the gradient w.r.t. the input.
Thin stateful wrappers (``Linear``, ``BatchNorm``, ...) cache what their
backward pass needs so that model code reads like an ordinary layer stack.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import DimensionError, NumericError, ParameterError

RNG_ALGORITHM = "philox"
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RngState:
    """Seed plus generator name; ``generator(*stream)`` derives independent streams.

    Streams are keyed by integers so that e.g. dropout and batch shuffling never
    share draws. The same ``(seed, stream)`` always yields the same sequence.
    """

    seed: int
    algorithm: str = RNG_ALGORITHM

    def generator(self, *stream: int) -> np.random.Generator:
        return make_rng(self.seed, *stream)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *map(int, stream)])
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


class Parameter:
    """A trainable array and its gradient buffer."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str = ""):
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be 2-D, got shape {value.shape}")
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def as_matrix(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")
    return x


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def sigmoid(x):
    return expit(x)


def log_sigmoid(x):
    return log_expit(x)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")


def softmax(x, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    _check_temperature(temperature)
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    _check_temperature(temperature)
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(dy: np.ndarray, y: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the logits given the softmax output ``y``."""
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True)) / temperature


# --------------------------------------------------------------------------
# linear
# --------------------------------------------------------------------------


def linear_forward(x, W: Parameter, b: Parameter) -> np.ndarray:
    x = as_matrix(x)
    n_in, n_out = W.shape
    if x.shape[1] != n_in or b.shape != (1, n_out):
        raise DimensionError(
            f"linear: x {x.shape}, W {W.shape}, b {b.shape} do not agree"
        )
    return x @ W.value + b.value


def linear_backward(dy: np.ndarray, x: np.ndarray, W: Parameter, b: Parameter) -> np.ndarray:
    W.grad += x.T @ dy
    b.grad += dy.sum(axis=0, keepdims=True)
    return dy @ W.value.T


# --------------------------------------------------------------------------
# batch norm
# --------------------------------------------------------------------------


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def zeros(cls, dim: int) -> "RunningStats":
        return cls(np.zeros((1, dim)), np.ones((1, dim)))


@dataclass
class _BNCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    n_stats: int
    train: bool


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def batchnorm_forward(
    x,
    gamma: Parameter,
    beta: Parameter,
    stats: RunningStats,
    mode: str,
    eps: float = BN_EPS,
    stats_rows: int | None = None,
) -> tuple[np.ndarray, _BNCache]:
    """Per-feature batch normalization.

    In train mode the first ``stats_rows`` rows (all rows when ``None``) define
    the batch mean and variance, which are then applied to every row. This lets
    unlabeled auxiliary rows ride along in the same batch without shifting the
    statistics seen by the labeled rows. Running stats follow the same rows;
    the running variance uses the unbiased estimate.
    """
    x = as_matrix(x)
    if gamma.shape != (1, x.shape[1]) or beta.shape != gamma.shape:
        raise DimensionError(f"batchnorm: x {x.shape} vs gamma {gamma.shape}")
    train = _check_mode(mode)
    if train:
        k = x.shape[0] if stats_rows is None else int(stats_rows)
        if k < 2:
            raise ParameterError(f"batch norm in train mode needs >= 2 rows, got {k}")
        ref = x[:k]
        mu = ref.mean(axis=0, keepdims=True)
        var = ref.var(axis=0, keepdims=True)
        m = stats.momentum
        stats.mean = (1 - m) * stats.mean + m * mu
        stats.var = (1 - m) * stats.var + m * var * (k / (k - 1))
    else:
        k = 0
        mu, var = stats.mean, stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mu) * inv_std
    return gamma.value * x_hat + beta.value, _BNCache(x_hat, inv_std, k, train)


def batchnorm_backward(
    dy: np.ndarray, cache: _BNCache, gamma: Parameter, beta: Parameter
) -> np.ndarray:
    gamma.grad += (dy * cache.x_hat).sum(axis=0, keepdims=True)
    beta.grad += dy.sum(axis=0, keepdims=True)
    g = dy * gamma.value
    dx = g * cache.inv_std
    if cache.train:
        k = cache.n_stats
        x_hat_ref = cache.x_hat[:k]
        dx[:k] -= (
            g.sum(axis=0, keepdims=True) + x_hat_ref * (g * cache.x_hat).sum(axis=0, keepdims=True)
        ) * (cache.inv_std / k)
    return dx


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------


def dropout_forward(
    x, rate: float, rng: np.random.Generator | None, mode: str
) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout. Returns the output and the scale mask (0 or 1/(1-rate))."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x, dtype=np.float64)
    train = _check_mode(mode)
    if not train or rate == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, param: Parameter, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), **hyper)


def adam_step(param: Parameter, state: AdamState) -> None:
    """Bias-corrected Adam with decoupled weight decay (applied first)."""
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient in {param.name or 'parameter'}; step aborted")
    lr = state.lr
    if state.weight_decay:
        param.value -= lr * state.weight_decay * param.value
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**t)
    v_hat = state.v / (1 - state.beta2**t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr < 0:
            raise ParameterError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.states = [
            AdamState.for_param(
                p, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay
            )
            for p in self.params
        ]

    @property
    def lr(self) -> float:
        return self.states[0].lr if self.states else 0.0

    @lr.setter
    def lr(self, value: float) -> None:
        for s in self.states:
            s.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        # validate everything first so a bad gradient never leaves a half-applied step
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {p.name or 'parameter'}; step aborted")
        for p, s in zip(self.params, self.states):
            adam_step(p, s)


# --------------------------------------------------------------------------
# layer wrappers
# --------------------------------------------------------------------------


def init_linear(n_in: int, n_out: int, rng: np.random.Generator, name: str) -> tuple[Parameter, Parameter]:
    bound = 1.0 / np.sqrt(n_in)
    W = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), f"{name}.weight")
    b = Parameter(np.zeros((1, n_out)), f"{name}.bias")
    return W, b


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear"):
        self.W, self.b = init_linear(n_in, n_out, rng, name)
        self._x = None

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]

    def forward(self, x):
        self._x = as_matrix(x)
        return linear_forward(self._x, self.W, self.b)

    def backward(self, dy):
        return linear_backward(dy, self._x, self.W, self.b)


class BatchNorm:
    def __init__(self, dim: int, name: str = "bn"):
        self.gamma = Parameter(np.ones((1, dim)), f"{name}.gamma")
        self.beta = Parameter(np.zeros((1, dim)), f"{name}.beta")
        self.stats = RunningStats.zeros(dim)
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x, mode: str, stats_rows: int | None = None):
        y, self._cache = batchnorm_forward(x, self.gamma, self.beta, self.stats, mode, stats_rows=stats_rows)
        return y

    def backward(self, dy):
        return batchnorm_backward(dy, self._cache, self.gamma, self.beta)


class ReLU:
    def __init__(self):
        self._x = None

    def forward(self, x):
        self._x = x
        return relu(x)

    def backward(self, dy):
        return relu_backward(dy, self._x)


class Dropout:
    """Dropout whose rows may draw their masks from separate generators.

    ``rngs`` pairs each generator with a row count; this keeps the masks of the
    leading rows independent of how many trailing rows are appended.
    """

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    def forward(self, x, mode: str, rngs: Iterable[tuple[np.random.Generator, int]] = ()):
        if mode != "train" or self.rate == 0.0:
            self._mask = None
            return dropout_forward(x, self.rate, None, mode)[0]
        parts, start = [], 0
        for rng, rows in rngs:
            parts.append(dropout_forward(x[start : start + rows], self.rate, rng, mode)[1])
            start += rows
        if start != x.shape[0]:
            raise DimensionError(f"dropout row split covers {start} of {x.shape[0]} rows")
        self._mask = np.concatenate(parts, axis=0)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)


def grad_check(
    scalar_fn: Callable[[], float],
    params: Sequence[Parameter],
    epsilon: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``scalar_fn`` must return the loss and populate ``param.grad`` for every
    parameter (zeroing first is done here). It is called again for each
    perturbed entry, so it must be deterministic, including any dropout rng.
    ``max_entries`` caps the number of probed entries per parameter (sampled
    with ``rng``); ``floor`` keeps the ratio finite where both gradients vanish.
    """
    for p in params:
        p.zero_grad()
    scalar_fn()
    analytic = [p.grad.copy() for p in params]
    rng = rng if rng is not None else make_rng(0)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = scalar_fn()
            flat[i] = orig - epsilon
            f_minus = scalar_fn()
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * epsilon)
            worst = max(worst, float(relative_error(a_flat[i], num, floor)))
    for p, a in zip(params, analytic):
        p.grad[...] = a
    return worst
