from .cv import CVCell, CVResult, CVRow, cell_seed, cross_validate, write_cells_csv, write_grid_csv
from .losses import (
    LossWeights,
    binary_ce,
    domain_loss,
    domain_loss_grad,
    presence_loss_grad,
    salience_loss_grad,
    soft_ce,
    task_loss,
)
from .loop import Arrays, EpochReport, FitResult, TrainConfig, evaluate, fit, predict_arrays, train_epoch, train_step, write_epoch_csv
from .schedule import EarlyStopping, PlateauScheduler

__all__ = [
    "Arrays",
    "CVCell",
    "CVResult",
    "CVRow",
    "EarlyStopping",
    "EpochReport",
    "FitResult",
    "LossWeights",
    "PlateauScheduler",
    "TrainConfig",
    "binary_ce",
    "cell_seed",
    "cross_validate",
    "domain_loss",
    "domain_loss_grad",
    "evaluate",
    "fit",
    "predict_arrays",
    "presence_loss_grad",
    "salience_loss_grad",
    "soft_ce",
    "task_loss",
    "train_epoch",
    "train_step",
    "write_cells_csv",
    "write_epoch_csv",
    "write_grid_csv",
]
