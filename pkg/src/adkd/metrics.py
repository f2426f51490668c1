"""Evaluation metrics used for the GLUE-style tasks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

METRICS = ("accuracy", "f1", "matthews", "spearman")
CLASSIFICATION_METRICS = ("accuracy", "f1", "matthews")


@dataclass(frozen=True)
class MetricResult:
    name: str
    value: float


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    return float(np.mean(preds == labels)) if len(labels) else 0.0


def _confusion(preds, labels):
    preds, labels = np.asarray(preds).astype(int), np.asarray(labels).astype(int)
    if np.any((preds < 0) | (preds > 1)) or np.any((labels < 0) | (labels > 1)):
        raise ValueError("f1/matthews are defined here for binary labels only")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return tp, tn, fp, fn


def f1(preds, labels) -> float:
    """Binary F1 of the positive class (label 1)."""
    tp, _, fp, fn = _confusion(preds, labels)
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def matthews(preds, labels) -> float:
    tp, tn, fp, fn = _confusion(preds, labels)
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    return (tp * tn - fp * fn) / denom if denom else 0.0


def spearman(preds, labels) -> float:
    preds, labels = np.asarray(preds, float), np.asarray(labels, float)
    if len(preds) < 2 or np.all(preds == preds[0]) or np.all(labels == labels[0]):
        return 0.0
    return float(stats.spearmanr(preds, labels).statistic)


def compute(name: str, preds, labels) -> MetricResult:
    fns = {"accuracy": accuracy, "f1": f1, "matthews": matthews, "spearman": spearman}
    if name not in fns:
        raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}")
    return MetricResult(name, float(fns[name](preds, labels)))
