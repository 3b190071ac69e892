"""Rank-aware multi-encoder fusion network.

Data flow for a batch of B samples over M encoders::

    x_i --[linear -> batchnorm -> relu -> dropout]--> e_i          (B x P each)
    [e_1 .. e_M] --gate MLP--> logits --softmax(./tau)--> w        (B x M)
    top-n of w (ties: lower index) -> w_hat = w_T / sum(w_T)
    concat(w_hat_i * e_i for i in T, ascending i) --linear/relu/dropout--> h
    h --MLP--> z_p (sigmoid -> p_p),   h --MLP--> z_s (softmax -> p_s)
    h --gradient reversal--> MLP --> z_d (softmax -> p_d)          (UDA only)

Gradients reach ``w`` only through the renormalized weights of the selected
encoders; unselected embeddings get gradient from the gate input alone.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError, DimensionError, InputError, ParameterError, StateError
from .numerics import (
    BatchNorm,
    Dropout,
    Linear,
    Parameter,
    ReLU,
    make_rng,
    sigmoid,
    softmax,
    softmax_backward,
)

STREAM_INIT = 1
GATINGS = ("attention", "uniform")


@dataclass
class ModelConfig:
    input_dims: tuple[int, ...]
    num_classes: int
    top_n: int = 22
    proj_dim: int = 256
    shared_dim: int = 512
    gate_hidden: int = 128
    head_hidden: int = 256
    domain_hidden: int = 128
    dropout: float = 0.33
    temperature: float = 0.7
    temperature_min: float = 0.55
    temperature_max: float = 1.25
    uda: bool = False
    grl_weight: float = 0.3
    gating: str = "attention"

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.validate()

    @property
    def num_encoders(self) -> int:
        return len(self.input_dims)

    def validate(self) -> None:
        M = self.num_encoders
        if M < 1:
            raise ParameterError("need at least one encoder")
        if not 1 <= self.top_n <= M:
            raise ParameterError(f"top_n must lie in [1, {M}], got {self.top_n}")
        dims = (*self.input_dims, self.num_classes, self.proj_dim, self.shared_dim,
                self.gate_hidden, self.head_hidden, self.domain_hidden)
        if min(dims) < 1:
            raise ParameterError("all dimensions must be >= 1")
        if not self.temperature_min <= self.temperature <= self.temperature_max:
            raise ParameterError(
                f"temperature {self.temperature} outside [{self.temperature_min}, {self.temperature_max}]"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must lie in [0, 1)")
        if self.grl_weight < 0:
            raise ParameterError("grl_weight must be >= 0")
        if self.gating not in GATINGS:
            raise ParameterError(f"gating must be one of {GATINGS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d


@dataclass
class GateDecision:
    w: np.ndarray
    selected: np.ndarray
    w_hat: np.ndarray


@dataclass
class PredictionBundle:
    h: np.ndarray
    z_p: np.ndarray
    z_s: np.ndarray
    p_p: np.ndarray
    p_s: np.ndarray
    p_d: np.ndarray | None = None


@dataclass
class ForwardResult:
    """Batched outputs; ``decision(i)`` / ``bundle(i)`` give per-sample views."""

    embeddings: np.ndarray  # B x M x P
    w: np.ndarray
    selected: np.ndarray  # B x n, ascending within a row
    w_hat: np.ndarray
    h: np.ndarray
    z_p: np.ndarray
    z_s: np.ndarray
    p_p: np.ndarray
    p_s: np.ndarray
    z_d: np.ndarray | None = None
    p_d: np.ndarray | None = None

    def decision(self, i: int) -> GateDecision:
        return GateDecision(self.w[i], self.selected[i], self.w_hat[i])

    def bundle(self, i: int) -> PredictionBundle:
        p_d = None if self.p_d is None else self.p_d[i]
        return PredictionBundle(self.h[i], self.z_p[i], self.z_s[i], self.p_p[i], self.p_s[i], p_d)


# --------------------------------------------------------------------------
# selection
# --------------------------------------------------------------------------


def top_n_indices(w: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n largest entries per row, ascending. Ties go to the lower index."""
    w = np.atleast_2d(w)
    if not 1 <= n <= w.shape[1]:
        raise ParameterError(f"n must lie in [1, {w.shape[1]}], got {n}")
    order = np.argsort(-w, axis=1, kind="stable")[:, :n]
    return np.sort(order, axis=1)


def renormalize(w: np.ndarray, selected: np.ndarray) -> np.ndarray:
    w_sel = np.take_along_axis(np.atleast_2d(w), selected, axis=1)
    return w_sel / w_sel.sum(axis=1, keepdims=True)


def _gate_renormalize(w: np.ndarray, selected: np.ndarray) -> np.ndarray:
    # w is a softmax output: with every encoder selected the renormalization is
    # the identity, and skipping it keeps w_hat bit-identical to w
    w = np.atleast_2d(w)
    if selected.shape[1] == w.shape[1]:
        return w.copy()
    return renormalize(w, selected)


def select_top_n(w, n: int) -> GateDecision:
    """Top-n decision for one gate weight vector (assumed to sum to one)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise DimensionError("select_top_n expects a single weight vector")
    sel = top_n_indices(w, n)
    return GateDecision(w, sel[0], _gate_renormalize(w, sel)[0])


def grad_reverse(dy: np.ndarray, weight: float) -> np.ndarray:
    """Backward of the gradient reversal layer (its forward is the identity)."""
    return -weight * dy


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


class ProjectionBlock:
    def __init__(self, n_in: int, n_out: int, dropout: float, rng, name: str):
        self.linear = Linear(n_in, n_out, rng, f"{name}.linear")
        self.bn = BatchNorm(n_out, f"{name}.bn")
        self.relu = ReLU()
        self.drop = Dropout(dropout)

    def parameters(self):
        return self.linear.parameters() + self.bn.parameters()

    def forward(self, x, mode, rngs=(), stats_rows=None):
        y = self.bn.forward(self.linear.forward(x), mode, stats_rows)
        return self.drop.forward(self.relu.forward(y), mode, rngs)

    def backward(self, dy):
        dy = self.relu.backward(self.drop.backward(dy))
        return self.linear.backward(self.bn.backward(dy))


class MLP:
    """linear -> relu -> linear."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng, name: str):
        self.l1 = Linear(n_in, n_hidden, rng, f"{name}.0")
        self.act = ReLU()
        self.l2 = Linear(n_hidden, n_out, rng, f"{name}.1")

    def parameters(self):
        return self.l1.parameters() + self.l2.parameters()

    def forward(self, x):
        return self.l2.forward(self.act.forward(self.l1.forward(x)))

    def backward(self, dy):
        return self.l1.backward(self.act.backward(self.l2.backward(dy)))


class SharedFusion:
    def __init__(self, n_in: int, n_out: int, dropout: float, rng):
        self.linear = Linear(n_in, n_out, rng, "shared.linear")
        self.relu = ReLU()
        self.drop = Dropout(dropout)

    def parameters(self):
        return self.linear.parameters()

    def forward(self, x, mode, rngs=()):
        return self.drop.forward(self.relu.forward(self.linear.forward(x)), mode, rngs)

    def backward(self, dy):
        return self.linear.backward(self.relu.backward(self.drop.backward(dy)))


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


class FusionModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = make_rng(seed, STREAM_INIT)
        M, P = cfg.num_encoders, cfg.proj_dim
        self.projections = [
            ProjectionBlock(d, P, cfg.dropout, rng, f"proj.{i}") for i, d in enumerate(cfg.input_dims)
        ]
        self.gate = MLP(M * P, cfg.gate_hidden, M, rng, "gate") if cfg.gating == "attention" else None
        self.shared = SharedFusion(cfg.top_n * P, cfg.shared_dim, cfg.dropout, rng)
        self.presence_head = MLP(cfg.shared_dim, cfg.head_hidden, cfg.num_classes, rng, "presence")
        self.salience_head = MLP(cfg.shared_dim, cfg.head_hidden, cfg.num_classes, rng, "salience")
        self.domain_head = (
            MLP(cfg.shared_dim, cfg.domain_hidden, 2, rng, "domain") if cfg.uda else None
        )
        self._cache = None

    # -- parameters / state ------------------------------------------------

    def modules(self):
        mods = list(self.projections)
        if self.gate is not None:
            mods.append(self.gate)
        mods += [self.shared, self.presence_head, self.salience_head]
        if self.domain_head is not None:
            mods.append(self.domain_head)
        return mods

    def parameters(self) -> list[Parameter]:
        return [p for m in self.modules() for p in m.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((p.name, p.value.copy()) for p in self.parameters())
        for i, blk in enumerate(self.projections):
            state[f"proj.{i}.bn.running_mean"] = blk.bn.stats.mean.copy()
            state[f"proj.{i}.bn.running_var"] = blk.bn.stats.var.copy()
        return state

    def load_state_dict(self, state) -> None:
        params = {p.name: p for p in self.parameters()}
        expected = set(params) | {
            f"proj.{i}.bn.running_{k}" for i in range(len(self.projections)) for k in ("mean", "var")
        }
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise InputError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, value in state.items():
            if name in params:
                if params[name].value.shape != np.shape(value):
                    raise DimensionError(f"{name}: shape {np.shape(value)} != {params[name].value.shape}")
                params[name].value[...] = value
        for i, blk in enumerate(self.projections):
            blk.bn.stats.mean = np.array(state[f"proj.{i}.bn.running_mean"], dtype=np.float64)
            blk.bn.stats.var = np.array(state[f"proj.{i}.bn.running_var"], dtype=np.float64)

    # -- component passes --------------------------------------------------

    def _check_inputs(self, xs) -> int:
        if len(xs) != self.cfg.num_encoders:
            raise InputError(f"expected {self.cfg.num_encoders} encoder inputs, got {len(xs)}")
        B = None
        for i, (x, d) in enumerate(zip(xs, self.cfg.input_dims)):
            if x is None:
                raise InputError(f"missing input for encoder {i}")
            if x.ndim != 2 or x.shape[1] != d or (B is not None and x.shape[0] != B):
                raise DimensionError(f"encoder {i}: input shape {x.shape}, expected (B, {d})")
            B = x.shape[0]
        return B

    def project_all(self, xs, mode="eval", rngs=(), stats_rows=None) -> np.ndarray:
        """Embeddings stacked as B x M x P."""
        self._check_inputs(xs)
        return np.stack(
            [blk.forward(np.asarray(x, dtype=np.float64), mode, rngs, stats_rows)
             for blk, x in zip(self.projections, xs)],
            axis=1,
        )

    def gate_logits(self, E: np.ndarray) -> np.ndarray:
        if self.gate is None:
            return np.zeros(E.shape[:2])
        return self.gate.forward(E.reshape(E.shape[0], -1))

    def gate_weights(self, E: np.ndarray) -> np.ndarray:
        if self.gate is None:
            return np.full(E.shape[:2], 1.0 / E.shape[1])
        return softmax(self.gate_logits(E), self.cfg.temperature)

    def fuse(self, E, selected, w_hat, mode="eval", rngs=()) -> np.ndarray:
        sel_e = np.take_along_axis(E, selected[:, :, None], axis=1)
        weighted = w_hat[:, :, None] * sel_e
        return self.shared.forward(weighted.reshape(E.shape[0], -1), mode, rngs)

    def predict_heads(self, h):
        z_p = self.presence_head.forward(h)
        z_s = self.salience_head.forward(h)
        return z_p, z_s, sigmoid(z_p), softmax(z_s)

    def domain_forward(self, h):
        """Domain logits and probabilities; the reversal layer is an identity here."""
        if self.domain_head is None:
            raise StateError("domain branch requested but UDA is disabled for this model")
        z_d = self.domain_head.forward(h)
        return z_d, softmax(z_d)

    def domain_backward(self, d_zd, grl_weight: float | None = None) -> np.ndarray:
        lam = self.cfg.grl_weight if grl_weight is None else grl_weight
        return grad_reverse(self.domain_head.backward(d_zd), lam)

    # -- full passes -------------------------------------------------------

    def forward(
        self,
        xs,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        n_labeled: int | None = None,
        aux_rng: np.random.Generator | None = None,
        with_domain: bool | None = None,
    ) -> ForwardResult:
        """Run the network on a batch.

        ``n_labeled`` marks the first rows as the labeled part of the batch: they
        alone define batch-norm statistics in train mode and draw dropout masks
        from ``rng``; the remaining rows draw theirs from ``aux_rng``.
        """
        B = self._check_inputs(xs)
        cfg = self.cfg
        k = B if n_labeled is None else int(n_labeled)
        if not 0 < k <= B:
            raise ContractError(f"n_labeled must lie in [1, {B}]")
        rngs = [(rng, k)] + ([(aux_rng, B - k)] if k < B else [])
        E = self.project_all(xs, mode, rngs, stats_rows=k)
        w = self.gate_weights(E)
        selected = top_n_indices(w, cfg.top_n)
        w_hat = _gate_renormalize(w, selected)
        h = self.fuse(E, selected, w_hat, mode, rngs)
        z_p, z_s, p_p, p_s = self.predict_heads(h)
        res = ForwardResult(E, w, selected, w_hat, h, z_p, z_s, p_p, p_s)
        if with_domain is None:
            with_domain = self.domain_head is not None
        if with_domain:
            res.z_d, res.p_d = self.domain_forward(h)
        self._cache = res
        return res

    def backward(self, d_zp, d_zs, d_zd=None, grl_weight: float | None = None) -> np.ndarray:
        """Backpropagate logit gradients of the last ``forward``; overwrites all grads.

        Returns the gradient w.r.t. the embeddings (B x M x P).
        """
        res = self._cache
        if res is None:
            raise StateError("backward called before forward")
        self.zero_grad()
        cfg = self.cfg
        B, M, P = res.embeddings.shape
        dh = self.presence_head.backward(d_zp) + self.salience_head.backward(d_zs)
        if d_zd is not None:
            if res.z_d is None:
                raise StateError("domain gradient given but the domain branch did not run")
            dh = dh + self.domain_backward(d_zd, grl_weight)
        d_weighted = self.shared.backward(dh).reshape(B, cfg.top_n, P)

        sel = res.selected
        sel_e = np.take_along_axis(res.embeddings, sel[:, :, None], axis=1)
        dE = np.zeros_like(res.embeddings)
        dE[np.arange(B)[:, None], sel] = res.w_hat[:, :, None] * d_weighted

        if self.gate is not None:
            d_what = (d_weighted * sel_e).sum(axis=2)
            if cfg.top_n == M:
                d_wsel = d_what
            else:
                w_sel = np.take_along_axis(res.w, sel, axis=1)
                total = w_sel.sum(axis=1, keepdims=True)
                d_wsel = (d_what - (d_what * res.w_hat).sum(axis=1, keepdims=True)) / total
            dw = np.zeros_like(res.w)
            np.put_along_axis(dw, sel, d_wsel, axis=1)
            d_logits = softmax_backward(dw, res.w, cfg.temperature)
            dE += self.gate.backward(d_logits).reshape(B, M, P)

        for i, blk in enumerate(self.projections):
            blk.backward(dE[:, i, :])
        return dE

    # -- conveniences ------------------------------------------------------

    def forward_sample(self, features: dict[str, np.ndarray], encoder_names, mode: str = "eval"):
        """Single-sample eval pass returning (GateDecision, PredictionBundle)."""
        missing = [n for n in encoder_names if n not in features]
        if missing:
            raise InputError(f"missing encoder features: {missing}")
        xs = [np.asarray(features[n], dtype=np.float64)[None, :] for n in encoder_names]
        res = self.forward(xs, mode=mode)
        return res.decision(0), res.bundle(0)
