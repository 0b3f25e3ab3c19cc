"""Scene accuracy (macro by default) and log loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..branches import PROB_EPS


@dataclass
class Metrics:
    acc: float
    logloss: float
    history: list[dict] = field(default_factory=list)


def accuracy(pred: np.ndarray, target: np.ndarray, n_classes: int, average: str = "macro") -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if average == "micro":
        return float(np.mean(pred == target))
    per_class = [np.mean(pred[target == c] == c) for c in range(n_classes) if np.any(target == c)]
    return float(np.mean(per_class))


def logloss(probs: np.ndarray, target: np.ndarray) -> float:
    p_true = probs[np.arange(len(target)), target]
    return float(np.mean(-np.log(np.clip(p_true, PROB_EPS, 1.0))))


def scene_metrics(probs: np.ndarray, target: np.ndarray, average: str = "macro") -> Metrics:
    """Metrics from ``[n, C_s]`` scene probabilities and integer scene labels."""
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.intp)
    pred = np.argmax(probs, axis=1)
    return Metrics(acc=accuracy(pred, target, probs.shape[1], average), logloss=logloss(probs, target))
