"""Encoder analyses: selection frequency, importance by fold, Linear CKA, co-selection."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, InputError

EXPORT_FILES = (
    "selection_freq.csv",
    "importance_by_fold.csv",
    "importance_raw.csv",
    "cka_matrix.csv",
    "coselection.csv",
    "cka_vs_cosel.csv",
)


@dataclass
class ImportanceLog:
    """Gate output of one model over a sample set: w is N x M, selected is N x n."""

    sample_ids: list[str]
    w: np.ndarray
    selected: np.ndarray

    def __post_init__(self):
        self.w = np.atleast_2d(np.asarray(self.w, dtype=np.float64))
        self.selected = np.atleast_2d(np.asarray(self.selected, dtype=np.int64))
        N, M = self.w.shape
        if len(self.sample_ids) != N or self.selected.shape[0] != N:
            raise DimensionError("sample ids, w and selected disagree on the sample count")
        if self.selected.size and (self.selected.min() < 0 or self.selected.max() >= M):
            raise InputError("selected index out of range")

    def __len__(self) -> int:
        return self.w.shape[0]

    @property
    def num_encoders(self) -> int:
        return self.w.shape[1]

    def mask(self) -> np.ndarray:
        """N x M boolean membership of each encoder in the selected set."""
        m = np.zeros(self.w.shape, dtype=bool)
        np.put_along_axis(m, self.selected, True, axis=1)
        return m


def collect_log(model, data, sample_ids, chunk: int = 512) -> ImportanceLog:
    """Eval-mode gate weights and selections of ``model`` over ``data`` (an Arrays)."""
    ws, sels = [], []
    for lo in range(0, len(data), chunk):
        res = model.forward([x[lo : lo + chunk] for x in data.xs], "eval")
        ws.append(res.w)
        sels.append(res.selected)
    return ImportanceLog(list(sample_ids), np.concatenate(ws), np.concatenate(sels))


def collect_embeddings(model, data, chunk: int = 512) -> list[np.ndarray]:
    """Eval-mode projected embeddings, one N x P matrix per encoder."""
    parts = [model.project_all([x[lo : lo + chunk] for x in data.xs], "eval") for lo in range(0, len(data), chunk)]
    E = np.concatenate(parts)
    return [E[:, i, :] for i in range(E.shape[1])]


def selection_frequency(log: ImportanceLog) -> np.ndarray:
    if len(log) == 0:
        raise InputError("empty importance log")
    return log.mask().mean(axis=0)


def coselection_matrix(log: ImportanceLog) -> np.ndarray:
    """Fraction of samples in which both encoders were selected."""
    if len(log) == 0:
        raise InputError("empty importance log")
    m = log.mask().astype(np.float64)
    return (m.T @ m) / len(log)


def group_importance(w: np.ndarray, groups: dict[str, list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample sum and mean of w over each group's encoders (columns in dict order)."""
    w = np.atleast_2d(w)
    sums = np.stack([w[:, idx].sum(axis=1) for idx in groups.values()], axis=1)
    means = np.stack([w[:, idx].mean(axis=1) for idx in groups.values()], axis=1)
    return sums, means


@dataclass
class ImportanceSummary:
    fold_means: np.ndarray  # F x M
    raw: list[tuple[int, str, np.ndarray]]  # (fold, sample id, w)
    group_names: list[str]
    group_sums: np.ndarray  # N_total x G
    group_means: np.ndarray


def importance_summary(logs: list[ImportanceLog], groups: dict[str, list[int]] | None = None) -> ImportanceSummary:
    """Per-fold mean importance plus raw per-sample weights for distribution plots."""
    if not logs or any(len(g) == 0 for g in logs):
        raise InputError("need a non-empty importance log per fold")
    M = logs[0].num_encoders
    if any(g.num_encoders != M for g in logs):
        raise DimensionError("folds disagree on the number of encoders")
    groups = groups or {}
    fold_means = np.stack([g.w.mean(axis=0) for g in logs])
    raw = [(f, sid, g.w[i]) for f, g in enumerate(logs) for i, sid in enumerate(g.sample_ids)]
    W = np.concatenate([g.w for g in logs])
    if groups:
        sums, means = group_importance(W, groups)
    else:
        sums = means = np.zeros((W.shape[0], 0))
    return ImportanceSummary(fold_means, raw, list(groups), sums, means)


def linear_cka(X, Y) -> float:
    """Linear CKA of two representations of the same N samples; NaN if either is constant."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise DimensionError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise InputError("linear CKA needs at least two samples")
    if np.all(X == X[0]) or np.all(Y == Y[0]):
        return float("nan")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    cross = np.linalg.norm(Y.T @ X) ** 2
    denom = np.linalg.norm(X.T @ X) * np.linalg.norm(Y.T @ Y)
    if not denom > 0:
        return float("nan")
    return float(min(max(cross / denom, 0.0), 1.0))


def cka_matrix(embeddings: list[np.ndarray]) -> np.ndarray:
    M = len(embeddings)
    out = np.eye(M)
    for i in range(M):
        if np.all(embeddings[i] == embeddings[i][0]):
            out[i, i] = np.nan
        for j in range(i + 1, M):
            out[i, j] = out[j, i] = linear_cka(embeddings[i], embeddings[j])
    return out


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return float("nan")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    if not denom > 0:
        return float("nan")
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def cka_vs_coselection(cka: np.ndarray, co: np.ndarray) -> tuple[list[tuple[int, int, float, float]], float]:
    """Upper-triangle pairs (i, j, cka, co-selection) and their Pearson correlation."""
    cka = np.asarray(cka, dtype=np.float64)
    co = np.asarray(co, dtype=np.float64)
    if cka.shape != co.shape or cka.ndim != 2 or cka.shape[0] != cka.shape[1]:
        raise DimensionError(f"matrices must be matching squares, got {cka.shape} and {co.shape}")
    iu, ju = np.triu_indices(cka.shape[0], k=1)
    pairs = [(int(i), int(j), float(cka[i, j]), float(co[i, j])) for i, j in zip(iu, ju)]
    return pairs, pearson(cka[iu, ju], co[iu, ju])


# -- export ------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def _write(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def modality_groups(modalities: list[str]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, m in enumerate(modalities):
        groups.setdefault(m, []).append(i)
    return dict(sorted(groups.items()))


def export_analysis(
    out_dir,
    logs: list[ImportanceLog],
    embeddings: list[np.ndarray],
    encoder_names: list[str],
    modalities: list[str],
) -> dict:
    """Write the six analysis CSVs and ``analysis_summary.json``; returns the summary.

    Selection frequency, co-selection and CKA pool all folds' samples.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    M = len(encoder_names)
    if len(embeddings) != M or any(g.num_encoders != M for g in logs):
        raise DimensionError("encoder count mismatch between names, logs and embeddings")
    pooled = ImportanceLog(
        [sid for g in logs for sid in g.sample_ids],
        np.concatenate([g.w for g in logs]),
        np.concatenate([g.selected for g in logs]),
    )
    groups = modality_groups(modalities)
    freq = selection_frequency(pooled)
    summary = importance_summary(logs, groups)
    co = coselection_matrix(pooled)
    cka = cka_matrix(embeddings)
    pairs, r = cka_vs_coselection(cka, co)

    _write(out / "selection_freq.csv", ["encoder", "modality", "frequency"],
           [[n, m, _fmt(f)] for n, m, f in zip(encoder_names, modalities, freq)])
    _write(out / "importance_by_fold.csv", ["fold"] + encoder_names,
           [[f] + [_fmt(v) for v in row] for f, row in enumerate(summary.fold_means)])
    gcols = [f"group_sum_{g}" for g in summary.group_names] + [f"group_mean_{g}" for g in summary.group_names]
    _write(out / "importance_raw.csv", ["fold", "sample_id"] + encoder_names + gcols,
           [[f, sid] + [_fmt(v) for v in w] + [_fmt(v) for v in (*summary.group_sums[k], *summary.group_means[k])]
            for k, (f, sid, w) in enumerate(summary.raw)])
    _write(out / "cka_matrix.csv", ["encoder"] + encoder_names,
           [[n] + [_fmt(v) for v in row] for n, row in zip(encoder_names, cka)])
    _write(out / "coselection.csv", ["encoder"] + encoder_names,
           [[n] + [_fmt(v) for v in row] for n, row in zip(encoder_names, co)])
    _write(out / "cka_vs_cosel.csv", ["encoder_a", "encoder_b", "cka", "coselection"],
           [[encoder_names[i], encoder_names[j], _fmt(c), _fmt(s)] for i, j, c, s in pairs])

    result = {
        "num_samples": len(pooled),
        "num_folds": len(logs),
        "top_n": int(pooled.selected.shape[1]),
        "pearson_cka_vs_coselection": None if np.isnan(r) else r,
        "mean_importance": dict(zip(encoder_names, map(float, summary.fold_means.mean(axis=0)))),
        "selection_frequency": dict(zip(encoder_names, map(float, freq))),
    }
    with open(out / "analysis_summary.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result
