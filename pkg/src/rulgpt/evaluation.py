"""RMSE and the asymmetric prognostic Score, in cycles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import TrajectorySet
from .model import ModelConfig, ParameterStore, predict
from .preprocess import FittedPipeline, stack_windows

EARLY_DENOM = 13.0
LATE_DENOM = 10.0


@dataclass
class Metrics:
    rmse: float
    score: float
    n: int
    residuals: np.ndarray  # predicted - true, cycles
    predictions: np.ndarray
    truths: np.ndarray


def _pair(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty prediction set")
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions vs {t.size} truths")
    return p, t


def rmse(preds, truths) -> float:
    p, t = _pair(preds, truths)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def score_terms(residuals) -> np.ndarray:
    d = np.asarray(residuals, dtype=np.float64)
    return np.where(d < 0, np.exp(-d / EARLY_DENOM) - 1.0, np.exp(d / LATE_DENOM) - 1.0)


def score(preds, truths) -> float:
    """Sum of exp(-d/13)-1 for early (d<0) and exp(d/10)-1 for late residuals."""
    p, t = _pair(preds, truths)
    return float(np.sum(score_terms(p - t)))


def evaluate_predictions(pred_cycles, truth_cycles) -> Metrics:
    p, t = _pair(pred_cycles, truth_cycles)
    d = p - t
    return Metrics(rmse(p, t), score(p, t), p.size, d, p, t)


def evaluate_checkpoint(params: ParameterStore, model_cfg: ModelConfig, test_set: TrajectorySet,
                        truth, pipeline: FittedPipeline | None, cap_truth: bool = True) -> Metrics:
    """Predict from each test unit's last window, using the training-fit
    normalization; predictions are clamped to [0, 1] before rescaling."""
    if pipeline is None:
        raise ValueError("evaluation needs the training-fit normalization statistics")
    truth = np.asarray(truth, dtype=np.float64)
    if len(truth) != len(test_set):
        raise ValueError(f"{len(truth)} truth values for {len(test_set)} test units")
    cap = pipeline.config.rul_cap
    X, _ = stack_windows(pipeline.test_windows(test_set))
    yhat = np.clip(predict(params, model_cfg, X).astype(np.float64), 0.0, 1.0)
    t = np.minimum(truth, cap) if cap_truth else truth
    return evaluate_predictions(yhat * cap, t)


def constant_baseline(train_labels: np.ndarray, truth, cap: int = 120, cap_truth: bool = True) -> Metrics:
    """Predict the mean training RUL (cycles) for every test unit."""
    truth = np.asarray(truth, dtype=np.float64)
    t = np.minimum(truth, cap) if cap_truth else truth
    c = float(np.mean(train_labels)) * cap
    return evaluate_predictions(np.full(t.shape, c), t)
