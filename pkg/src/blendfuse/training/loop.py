"""Training loop: Adam steps over source batches, optional domain-adversarial target batches."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..data.records import EncoderSpec, SampleRecord, stack_features, stack_targets
from ..decoding import AlignmentConfig, MetricsReport, decode_batch, metrics, truth_from_target
from ..errors import InputError, NumericError, ParameterError
from ..model import FusionModel
from ..numerics import Adam, make_rng
from .losses import LossWeights, domain_loss_grad, presence_loss_grad, salience_loss_grad
from .schedule import EarlyStopping, PlateauScheduler

log = logging.getLogger(__name__)

# sub-streams of the training seed
STREAM_SHUFFLE = 31
STREAM_DROPOUT = 32
STREAM_TARGET = 33
STREAM_TARGET_DROPOUT = 34

EVAL_CHUNK = 512


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    scheduler_factor: float = 0.5
    scheduler_patience: int = 3
    min_lr: float = 1e-6
    early_stop_patience: int = 7
    early_stop_delta: float = 0.001
    seed: int = 0
    presence_loss: str = "soft_ce"
    weights: LossWeights = field(default_factory=LossWeights)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 2 or self.max_epochs < 1:
            raise ParameterError("need lr >= 0, batch_size >= 2, max_epochs >= 1")
        if self.early_stop_patience < 1 or self.scheduler_patience < 1:
            raise ParameterError("patience values must be >= 1")


@dataclass
class EpochReport:
    epoch: int
    train_task_loss: float
    train_domain_loss: float | None
    val_acc_presence: float
    val_acc_salience: float
    val_acc_average: float
    lr: float
    stopped: bool = False


@dataclass
class Arrays:
    """Encoder matrices (one per encoder, rows = samples) plus optional targets."""

    xs: list[np.ndarray]
    t: np.ndarray | None = None

    @classmethod
    def from_samples(cls, samples: list[SampleRecord], specs: list[EncoderSpec], hidden: bool = False) -> "Arrays":
        xs = stack_features(samples, specs)
        has_t = all(s.target is not None or (hidden and s.hidden_target is not None) for s in samples)
        return cls(xs, stack_targets(samples, hidden=hidden) if has_t and samples else None)

    def __len__(self) -> int:
        return self.xs[0].shape[0]

    def rows(self, idx) -> "Arrays":
        return Arrays([x[idx] for x in self.xs], None if self.t is None else self.t[idx])


@dataclass
class FitResult:
    best_state: dict
    best_epoch: int
    reports: list[EpochReport]
    best_metric: float


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        # batch norm needs two rows
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _cycled(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    reps = -(-count // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:count]


def train_step(model: FusionModel, opt: Adam, src: Arrays, tgt: Arrays | None, cfg: TrainConfig, rngs) -> tuple[float, float | None]:
    """One forward/backward/Adam step. ``tgt`` rows are appended after the source rows."""
    drop_rng, tgt_drop_rng = rngs
    k = len(src)
    uda = model.cfg.uda and tgt is not None
    xs = [np.concatenate([a, b]) for a, b in zip(src.xs, tgt.xs)] if uda else src.xs
    res = model.forward(xs, "train", drop_rng, n_labeled=k, aux_rng=tgt_drop_rng, with_domain=uda)
    W = cfg.weights
    lp, gp = presence_loss_grad(res.z_p[:k], src.t, cfg.presence_loss)
    ls, gs = salience_loss_grad(res.z_s[:k], src.t)
    B = res.z_p.shape[0]
    d_zp = np.zeros_like(res.z_p)
    d_zs = np.zeros_like(res.z_s)
    d_zp[:k] = W.lambda_p * gp
    d_zs[:k] = W.lambda_s * gs
    task = W.lambda_p * lp + W.lambda_s * ls
    d_zd, dom = None, None
    if uda:
        d = np.r_[np.zeros(k, dtype=int), np.ones(B - k, dtype=int)]
        dom, gd = domain_loss_grad(res.z_d, d)
        d_zd = W.lambda_d * gd
    total = task + (W.lambda_d * dom if uda else 0.0)
    if not math.isfinite(total):
        raise NumericError(f"non-finite loss (task={task}, domain={dom}) at lr={opt.lr}")
    model.backward(d_zp, d_zs, d_zd)
    opt.step()
    return task, dom


def train_epoch(model: FusionModel, opt: Adam, src: Arrays, tgt: Arrays | None, cfg: TrainConfig, epoch: int):
    """Run one pass over the source set; returns mean (task loss, domain loss or None)."""
    seed = cfg.seed
    shuffle = make_rng(seed, STREAM_SHUFFLE, epoch)
    drop_rng = make_rng(seed, STREAM_DROPOUT, epoch)
    tgt_rng = make_rng(seed, STREAM_TARGET, epoch)
    tgt_drop_rng = make_rng(seed, STREAM_TARGET_DROPOUT, epoch)
    uda = model.cfg.uda and tgt is not None and len(tgt) > 0
    batches = _batches(len(src), cfg.batch_size, shuffle)
    tgt_idx = _cycled(len(tgt), sum(map(len, batches)), tgt_rng) if uda else None
    task_sum = dom_sum = 0.0
    pos = 0
    for b in batches:
        tb = None
        if uda:
            tb = tgt.rows(tgt_idx[pos : pos + len(b)])
            pos += len(b)
        task, dom = train_step(model, opt, src.rows(b), tb, cfg, (drop_rng, tgt_drop_rng))
        task_sum += task * len(b)
        if dom is not None:
            dom_sum += dom * len(b)
    n = len(src)
    return task_sum / n, (dom_sum / n if uda else None)


def predict_arrays(model: FusionModel, data: Arrays, with_domain: bool = False):
    """Eval-mode forward in chunks; returns dict of stacked outputs."""
    keys = ("w", "selected", "w_hat", "p_p", "p_s") + (("p_d",) if with_domain else ())
    out = {k: [] for k in keys}
    for lo in range(0, len(data), EVAL_CHUNK):
        res = model.forward([x[lo : lo + EVAL_CHUNK] for x in data.xs], "eval", with_domain=with_domain)
        for k in keys:
            out[k].append(getattr(res, k))
    return {k: np.concatenate(v) for k, v in out.items()}


def evaluate(model: FusionModel, data: Arrays, alignment: AlignmentConfig) -> MetricsReport:
    if data.t is None:
        raise InputError("evaluation needs targets")
    out = predict_arrays(model, data)
    preds = decode_batch(out["p_p"], out["p_s"], alignment)
    truths = [truth_from_target(t) for t in data.t]
    return metrics(preds, truths, num_classes=model.cfg.num_classes)


def fit(
    model: FusionModel,
    train: Arrays,
    val: Arrays,
    cfg: TrainConfig,
    target: Arrays | None = None,
) -> FitResult:
    """Train until ``max_epochs`` or early stop; the model ends at its best epoch.

    Validation average accuracy drives both the plateau scheduler and early
    stopping. ``target`` supplies unlabeled rows for the domain branch.
    """
    if len(train) == 0 or len(val) == 0:
        raise InputError("training and validation sets must be non-empty")
    if train.t is None or val.t is None:
        raise InputError("training and validation sets need targets")
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr, cfg.scheduler_factor, cfg.scheduler_patience, cfg.min_lr, cfg.early_stop_delta)
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.early_stop_delta)
    reports: list[EpochReport] = []
    best_state = model.state_dict()
    uda = model.cfg.uda and target is not None
    for epoch in range(1, cfg.max_epochs + 1):
        lr_used = opt.lr
        task, dom = train_epoch(model, opt, train, target if uda else None, cfg, epoch)
        rep = evaluate(model, val, cfg.alignment)
        improved, stop = stopper.step(rep.acc_average, epoch)
        if improved:
            best_state = model.state_dict()
        opt.lr = sched.step(rep.acc_average)
        reports.append(
            EpochReport(epoch, task, dom, rep.acc_presence, rep.acc_salience, rep.acc_average, lr_used, stop)
        )
        log.debug("epoch %d task %.4f val avg %.4f lr %.2e", epoch, task, rep.acc_average, lr_used)
        if stop:
            break
    model.load_state_dict(best_state)
    return FitResult(best_state, stopper.best_epoch, reports, stopper.best)


def write_epoch_csv(path, reports: list[EpochReport], uda: bool) -> None:
    cols = ["epoch", "train_task_loss"] + (["train_domain_loss"] if uda else [])
    cols += ["val_acc_presence", "val_acc_salience", "val_acc_average", "lr", "stopped"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in reports:
            row = [r.epoch, repr(r.train_task_loss)]
            if uda:
                row.append(repr(r.train_domain_loss))
            row += [repr(r.val_acc_presence), repr(r.val_acc_salience), repr(r.val_acc_average), repr(r.lr), int(r.stopped)]
            w.writerow(row)
