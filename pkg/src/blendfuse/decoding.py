"""Turn head probabilities into challenge-style predictions and score them."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, NumericError, ParameterError

SALIENCE_HIGH = 0.61
SALIENCE_LOW = 0.39


@dataclass
class AlignmentConfig:
    alpha: float = 1.0
    epsilon: float = 1e-8
    tau_p: float = 0.15
    neutral_index: int | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError("alpha must be >= 0")
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be > 0")
        if not 0 < self.tau_p < 1:
            raise ParameterError("tau_p must lie in (0, 1)")


@dataclass(frozen=True)
class DecodedPrediction:
    """Emotions as (class index, salience percent), highest score first."""

    emotions: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.emotions) not in (1, 2):
            raise InputError(f"a prediction holds one or two emotions, got {len(self.emotions)}")
        if sum(p for _, p in self.emotions) != 100:
            raise InputError(f"salience percents must sum to 100: {self.emotions}")

    @property
    def classes(self) -> frozenset[int]:
        return frozenset(c for c, _ in self.emotions)

    @property
    def mapping(self) -> dict[int, int]:
        return dict(self.emotions)


def align(p_p, p_s, cfg: AlignmentConfig) -> np.ndarray:
    """Presence probabilities reweighted by salience**alpha, normalized to a distribution."""
    p_p = np.asarray(p_p, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    score = p_p * p_s**cfg.alpha
    return score / (score.sum(axis=-1, keepdims=True) + cfg.epsilon)


def _rank(y: np.ndarray, classes) -> list[int]:
    # highest score first, ties to the lower class index
    return sorted(classes, key=lambda c: (-y[c], c))


def postprocess(y_tilde, cfg: AlignmentConfig) -> list[int]:
    """Surviving classes, highest score first (at most two).

    Classes below ``tau_p`` are dropped; with no survivor the top class is kept
    alone. If neutral survives next to affective classes, only the better of
    neutral and the best affective class is kept.
    """
    y = np.asarray(y_tilde, dtype=np.float64)
    survivors = [c for c in range(len(y)) if not y[c] < cfg.tau_p]
    if not survivors:
        return [_rank(y, range(len(y)))[0]]
    neutral = cfg.neutral_index
    if neutral is not None and neutral in survivors and len(survivors) > 1:
        best_affective = _rank(y, [c for c in survivors if c != neutral])[0]
        return [_rank(y, [neutral, best_affective])[0]]
    return _rank(y, survivors)[:2]


def quantize_salience(y1: float, y2: float) -> tuple[int, int]:
    total = y1 + y2
    if not total > 0:
        raise NumericError(f"cannot quantize salience of a zero-score pair ({y1}, {y2})")
    r = y1 / total
    if r > SALIENCE_HIGH:
        return 70, 30
    if r < SALIENCE_LOW:
        return 30, 70
    return 50, 50


def decode_scores(y_tilde, cfg: AlignmentConfig) -> DecodedPrediction:
    y = np.asarray(y_tilde, dtype=np.float64)
    keep = postprocess(y, cfg)
    if len(keep) == 1:
        return DecodedPrediction(((keep[0], 100),))
    e1, e2 = keep
    s1, s2 = quantize_salience(y[e1], y[e2])
    return DecodedPrediction(((e1, s1), (e2, s2)))


def decode(bundle, cfg: AlignmentConfig) -> DecodedPrediction:
    """align -> postprocess -> quantize for one ``PredictionBundle``."""
    return decode_scores(align(bundle.p_p, bundle.p_s, cfg), cfg)


def decode_batch(p_p: np.ndarray, p_s: np.ndarray, cfg: AlignmentConfig) -> list[DecodedPrediction]:
    return [decode_scores(y, cfg) for y in align(p_p, p_s, cfg)]


def truth_from_target(t, tol: float = 1e-9) -> DecodedPrediction:
    """Ground-truth prediction from a soft target: non-zero classes, percents from shares."""
    t = np.asarray(t, dtype=np.float64)
    classes = [c for c in np.argsort(-t, kind="stable") if t[c] > tol][:2]
    if not classes:
        raise InputError("target vector has no positive entry")
    if len(classes) == 1:
        return DecodedPrediction(((int(classes[0]), 100),))
    share = t[classes[0]] / (t[classes[0]] + t[classes[1]])
    p1 = int(round(100 * share))
    return DecodedPrediction(((int(classes[0]), p1), (int(classes[1]), 100 - p1)))


@dataclass
class MetricsReport:
    acc_presence: float
    acc_salience: float
    acc_average: float
    n: int
    # per class: true positive, false positive, false negative, true negative
    confusion: dict[int, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc_presence": self.acc_presence,
            "acc_salience": self.acc_salience,
            "acc_average": self.acc_average,
            "n": self.n,
            "confusion": {str(k): v for k, v in sorted(self.confusion.items())},
        }


def metrics(
    predictions: list[DecodedPrediction],
    truths: list[DecodedPrediction],
    num_classes: int | None = None,
) -> MetricsReport:
    """Exact-match accuracies: class sets for presence, class->percent maps for salience."""
    if len(predictions) != len(truths):
        raise InputError(f"{len(predictions)} predictions vs {len(truths)} ground truths")
    if not predictions:
        raise InputError("no predictions to score")
    pres = sum(p.classes == t.classes for p, t in zip(predictions, truths))
    sal = sum(p.mapping == t.mapping for p, t in zip(predictions, truths))
    n = len(predictions)
    if num_classes is None:
        num_classes = 1 + max(c for x in (*predictions, *truths) for c in x.classes)
    confusion = {c: {"tp": 0, "fp": 0, "fn": 0, "tn": 0} for c in range(num_classes)}
    for p, t in zip(predictions, truths):
        for c in range(num_classes):
            key = {(True, True): "tp", (True, False): "fp", (False, True): "fn", (False, False): "tn"}[
                (c in p.classes, c in t.classes)
            ]
            confusion[c][key] += 1
    acc_p, acc_s = pres / n, sal / n
    return MetricsReport(acc_p, acc_s, (acc_p + acc_s) / 2, n, confusion)


# -- CSV ---------------------------------------------------------------------

PRED_HEADER = ["sample_id", "emotion_1", "salience_1", "emotion_2", "salience_2"]


def write_predictions_csv(path, sample_ids, predictions: list[DecodedPrediction], class_names=None) -> None:
    name = (lambda c: class_names[c]) if class_names else str
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for sid, p in zip(sample_ids, predictions):
            row = [sid]
            for c, s in p.emotions:
                row += [name(c), s]
            row += [""] * (len(PRED_HEADER) - len(row))
            w.writerow(row)


def read_predictions_csv(path, class_names=None) -> dict[str, DecodedPrediction]:
    index = (lambda v: class_names.index(v)) if class_names else int
    out = {}
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc})") from exc
    if not rows or rows[0] != PRED_HEADER:
        raise FormatError(f"{path}: expected header {','.join(PRED_HEADER)}")
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            emotions = [(index(row[1]), int(row[2]))]
            if len(row) > 3 and row[3] != "":
                emotions.append((index(row[3]), int(row[4])))
            out[row[0]] = DecodedPrediction(tuple(emotions))
        except (ValueError, IndexError, InputError) as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return out
