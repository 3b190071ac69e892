"""Group k-fold cross-validation with a top-n sweep."""

from __future__ import annotations

import csv
import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..data.records import EncoderSpec, SampleRecord
from ..data.splits import kfold_split
from ..errors import ParameterError
from ..model import FusionModel, ModelConfig
from .loop import Arrays, TrainConfig, evaluate, fit

METRICS = ("acc_presence", "acc_salience", "acc_average")


@dataclass
class CVCell:
    top_n: int
    fold: int
    seed: int
    acc_presence: float
    acc_salience: float
    acc_average: float
    best_epoch: int
    epochs: int


@dataclass
class CVRow:
    top_n: int
    folds: int
    mean: dict
    std: dict


@dataclass
class CVResult:
    cells: list[CVCell]
    grid: list[CVRow]

    def best_top_n(self, metric: str = "acc_average") -> int:
        # first row wins ties, rows are in sweep order
        return max(self.grid, key=lambda r: r.mean[metric]).top_n


def cell_seed(seed: int, fold: int) -> int:
    """Model and training seed of one fold, shared by every top-n in the sweep."""
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_cell(args) -> CVCell:
    model_cfg, train_cfg, top_n, fold, s, train, val, target = args
    mc = dataclasses.replace(model_cfg, top_n=top_n)
    tc = dataclasses.replace(train_cfg, seed=s)
    model = FusionModel(mc, seed=s)
    res = fit(model, train, val, tc, target=target)
    rep = evaluate(model, val, tc.alignment)
    return CVCell(top_n, fold, s, rep.acc_presence, rep.acc_salience, rep.acc_average, res.best_epoch, len(res.reports))


def summarize(cells: list[CVCell], top_n_list) -> list[CVRow]:
    rows = []
    for n in top_n_list:
        cs = [c for c in cells if c.top_n == n]
        mean, std = {}, {}
        for m in METRICS:
            v = np.array([getattr(c, m) for c in cs])
            mean[m] = float(v.mean())
            std[m] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        rows.append(CVRow(n, len(cs), mean, std))
    return rows


def cross_validate(
    samples: list[SampleRecord],
    specs: list[EncoderSpec],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    top_n_list,
    k: int = 5,
    seed: int = 0,
    jobs: int = 1,
) -> CVResult:
    """Train a fresh model per (top_n, fold) and report fold mean and sample std.

    Folds come from labeled source samples grouped by ``group_id``. Target-domain
    samples, if any, feed the domain branch of every cell when UDA is enabled.
    """
    top_n_list = [int(n) for n in top_n_list]
    if not top_n_list:
        raise ParameterError("empty top-n list")
    for n in top_n_list:
        dataclasses.replace(model_cfg, top_n=n).validate()
    source = [s for s in samples if s.domain == "source"]
    target = [s for s in samples if s.domain == "target"]
    tgt = Arrays.from_samples(target, specs) if model_cfg.uda and target else None
    folds = kfold_split(source, k, seed=seed)

    tasks = []
    for fold, (tr, va) in enumerate(folds):
        train = Arrays.from_samples([source[i] for i in tr], specs)
        val = Arrays.from_samples([source[i] for i in va], specs)
        s = cell_seed(seed, fold)
        for n in top_n_list:
            tasks.append((model_cfg, train_cfg, n, fold, s, train, val, tgt))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            cells = list(ex.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    cells.sort(key=lambda c: (top_n_list.index(c.top_n), c.fold))
    return CVResult(cells, summarize(cells, top_n_list))


def write_grid_csv(path, result: CVResult) -> None:
    cols = ["top_n", "folds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in result.grid:
            w.writerow([r.top_n, r.folds] + [repr(v) for m in METRICS for v in (r.mean[m], r.std[m])])


def write_cells_csv(path, result: CVResult) -> None:
    cols = [f.name for f in dataclasses.fields(CVCell)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for c in result.cells:
            w.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(c)])
