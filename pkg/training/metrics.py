"""
Metrics
=======
Loss and evaluation metrics shared by the encoder, decoder and label-mining
harnesses.

    bce_loss                 mean binary cross-entropy, probabilities clamped by 1e-12
    ConfusionMatrix          TP / FP / FN / TN counts
    classification_metrics   precision, recall (sensitivity), specificity, accuracy
    pr_auc                   precision-recall curve + step-rule area
    multilabel_accuracy      strict all-bits and per-bit accuracy at threshold 0.5
    wilson_interval          95 % Wilson score interval (statsmodels)

Undefined ratios (zero denominators) come back as ``None``, never NaN.
"""

import math
import logging
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np
from sklearn.metrics import precision_recall_curve
from statsmodels.stats.proportion import proportion_confint

from common.errors import InvalidInputError, UndefinedMetricError

logger = logging.getLogger(__name__)

EPS = 1e-12
THRESHOLD = 0.5


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def bce_loss(p, y) -> float:
    """-(1/N) Σ [y log p + (1 - y) log(1 - p)] with p clamped to [ε, 1 - ε]."""
    p = np.asarray(p, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise InvalidInputError(f"bce_loss length mismatch: {p.size} vs {y.size}")
    if p.size == 0:
        raise InvalidInputError("bce_loss needs at least one element")
    p = np.clip(p, EPS, 1.0 - EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


# ---------------------------------------------------------------------------
# Confusion matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            value = getattr(self, name)
            if int(value) != value or value < 0:
                raise InvalidInputError(f"Confusion count {name} must be a non-negative integer")
            object.__setattr__(self, name, int(value))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_predictions(cls, predicted: Sequence, truth: Sequence) -> "ConfusionMatrix":
        pred = np.asarray(predicted).astype(bool).ravel()
        true = np.asarray(truth).astype(bool).ravel()
        if pred.shape != true.shape:
            raise InvalidInputError(f"Prediction/truth length mismatch: {pred.size} vs {true.size}")
        return cls(
            tp=int(np.sum(pred & true)),
            fp=int(np.sum(pred & ~true)),
            fn=int(np.sum(~pred & true)),
            tn=int(np.sum(~pred & ~true)),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def classification_metrics(cm: ConfusionMatrix) -> dict[str, Optional[float]]:
    return {
        "precision": _ratio(cm.tp, cm.tp + cm.fp),
        "recall": _ratio(cm.tp, cm.tp + cm.fn),
        "specificity": _ratio(cm.tn, cm.tn + cm.fp),
        "accuracy": _ratio(cm.tp + cm.tn, cm.total),
    }


# ---------------------------------------------------------------------------
# Precision-recall
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PRCurve:
    """Points ordered by non-decreasing recall; ``area`` by the step rule."""

    recall: tuple[float, ...]
    precision: tuple[float, ...]
    thresholds: tuple[float, ...]
    area: float


def pr_auc(scores, truth) -> PRCurve:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).astype(int).ravel()
    if scores.shape != truth.shape or scores.size == 0:
        raise InvalidInputError("pr_auc needs equal-length, non-empty scores and truth")
    if truth.sum() == 0:
        raise UndefinedMetricError("PR-AUC is undefined without positive samples")
    precision, recall, thresholds = precision_recall_curve(truth, scores)
    # sklearn orders by decreasing recall; area = Σ (R_k - R_{k-1}) · P_k
    area = float(-np.sum(np.diff(recall) * precision[:-1]))
    return PRCurve(
        recall=tuple(float(r) for r in recall[::-1]),
        precision=tuple(float(p) for p in precision[::-1]),
        thresholds=tuple(float(t) for t in thresholds[::-1]),
        area=min(max(area, 0.0), 1.0),
    )


def per_label_pr_auc(scores: np.ndarray, truth: np.ndarray, names: Sequence[str]) -> dict[str, Optional[float]]:
    """Area per label column (``None`` without positives) plus ``macro`` over defined labels."""
    scores, truth = np.atleast_2d(scores), np.atleast_2d(truth)
    out: dict[str, Optional[float]] = {}
    for j, name in enumerate(names):
        try:
            out[name] = pr_auc(scores[:, j], truth[:, j]).area
        except UndefinedMetricError:
            out[name] = None
    defined = [v for v in out.values() if v is not None]
    out["macro"] = float(np.mean(defined)) if defined else None
    return out


# ---------------------------------------------------------------------------
# Multi-label accuracy + intervals
# ---------------------------------------------------------------------------

def multilabel_accuracy(probs, labels, threshold: float = THRESHOLD) -> dict:
    """Strict accuracy (every bit right) and per-bit accuracy."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels)).astype(bool)
    if probs.shape != labels.shape or probs.shape[0] == 0:
        raise InvalidInputError(f"Accuracy shapes differ or are empty: {probs.shape} vs {labels.shape}")
    correct = (probs >= threshold) == labels
    return {
        "accuracy": float(np.mean(correct.all(axis=1))),
        "per_bit": [float(v) for v in correct.mean(axis=0)],
        "n_correct": int(correct.all(axis=1).sum()),
        "n": int(probs.shape[0]),
    }


def wilson_interval(successes: int, n: int, alpha: float = 0.05) -> Optional[tuple[float, float]]:
    if n == 0:
        return None
    low, high = proportion_confint(successes, n, alpha=alpha, method="wilson")
    return float(low), float(high)


# ---------------------------------------------------------------------------
# History records
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = ["step", "split", "metric", "value"]


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    split: str
    loss: Optional[float] = None
    accuracy: Optional[float] = None
    pr_auc: Optional[float] = None
    next_word_accuracy: Optional[float] = None
    factual_accuracy: Optional[float] = None

    def __post_init__(self):
        for name, value in self.values().items():
            if not math.isfinite(value):
                raise InvalidInputError(f"Metric {name} at step {self.step} is not finite")

    def values(self) -> dict[str, float]:
        d = asdict(self)
        return {k: v for k, v in d.items() if k not in ("step", "split") and v is not None}

    def rows(self) -> list[dict]:
        return [
            {"step": self.step, "split": self.split, "metric": k, "value": v}
            for k, v in self.values().items()
        ]
