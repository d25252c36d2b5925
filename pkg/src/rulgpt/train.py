"""Training loop and the two loss-stability stopping rules.

Criterion A (initial training): after ``min_epochs`` (120), track the
population variance of the last five epoch losses; the terminal epoch is the
first epoch k > min_epochs whose variance is not undercut during the next
``patience`` (10) epochs.

Criterion B (fine-tuning): from epoch ``min_epochs`` (20), the terminal epoch
is the first whose loss is not undercut during the next ``patience`` epochs.

Epochs are 1-indexed throughout, matching the loss log.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .model import ModelConfig, ParameterStore, model_forward
from .numerics import AdamState, Tensor

log = logging.getLogger(__name__)

VARIANCE_WINDOW = 5
DEFAULT_MIN_EPOCHS = {"A": 120, "B": 20}


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 1e-4  # implementer default
    lam: float = 1e-5  # implementer default
    batch_size: int = 64  # implementer default
    criterion: str = "A"
    min_epochs: int | None = None  # None -> 120 for A, 20 for B
    patience: int = 10
    seed: int = 0
    max_epochs: int = 400

    def __post_init__(self):
        if self.criterion not in DEFAULT_MIN_EPOCHS:
            raise ValueError(f"criterion must be 'A' or 'B', got {self.criterion!r}")
        if self.min_epochs is None:
            object.__setattr__(self, "min_epochs", DEFAULT_MIN_EPOCHS[self.criterion])
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.patience < 1 or self.min_epochs < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, min_epochs, batch_size and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- loss


def mse_wd_loss(preds: Tensor, targets, trainable: Sequence[Tensor], lam: float) -> Tensor:
    """mean((y - yhat)^2) + lam * sum of squared trainable parameters."""
    if preds.size == 0:
        raise ValueError("empty batch")
    t = nx.as_tensor(targets, dtype=preds.dtype)
    if t.shape != preds.shape:
        raise nx.ShapeError(f"predictions {preds.shape} vs targets {t.shape}")
    d = nx.sub(preds, t)
    loss = nx.mean(nx.mul(d, d))
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam and trainable:
        for p in trainable:
            sq = nx.scale(nx.mean(nx.mul(p, p)), lam * p.size)
            loss = nx.add(loss, sq)
    return loss


# ---------------------------------------------------------------- stopping rules


def rolling_variance(history: Sequence[float], k: int) -> float:
    """Population variance of the losses at epochs k-4..k (1-indexed)."""
    if k < VARIANCE_WINDOW:
        raise ValueError(f"rolling variance needs epoch k >= {VARIANCE_WINDOW}, got {k}")
    if k > len(history):
        raise ValueError(f"epoch {k} beyond history of {len(history)}")
    w = np.asarray(history[k - VARIANCE_WINDOW:k], dtype=np.float64)
    return float(((w - w.mean()) ** 2).mean())


def _first_persistent_minimum(values: dict[int, float], first: int, last: int, patience: int) -> int | None:
    for k in range(first, last - patience + 1):
        if all(values[k] <= values[j] for j in range(k + 1, k + patience + 1)):
            return k
    return None


def stopping_criterion_a(history: Sequence[float], min_epochs: int = 120, patience: int = 10) -> int | None:
    first = max(min_epochs + 1, VARIANCE_WINDOW)
    n = len(history)
    if n < first + patience:
        return None
    var = {k: rolling_variance(history, k) for k in range(first, n + 1)}
    return _first_persistent_minimum(var, first, n, patience)


def stopping_criterion_b(history: Sequence[float], min_epochs: int = 20, patience: int = 10) -> int | None:
    n = len(history)
    if n < min_epochs + patience:
        return None
    vals = {k: float(history[k - 1]) for k in range(min_epochs, n + 1)}
    return _first_persistent_minimum(vals, min_epochs, n, patience)


class StopTracker:
    """Incremental form of the stopping rules, so fit keeps one snapshot.

    The candidate is the earliest epoch whose statistic has not been undercut
    since; a strictly smaller value replaces it (every epoch in between was
    undercut as well). It becomes terminal once ``patience`` epochs pass.
    """

    def __init__(self, criterion: str, min_epochs: int, patience: int):
        self.criterion = criterion
        self.first = max(min_epochs + 1, VARIANCE_WINDOW) if criterion == "A" else min_epochs
        self.patience = patience
        self.candidate: int | None = None
        self.best: float = np.inf
        self.terminal: int | None = None

    def statistic(self, history: Sequence[float]) -> float | None:
        k = len(history)
        if k < self.first:
            return None
        return rolling_variance(history, k) if self.criterion == "A" else float(history[-1])

    def update(self, history: Sequence[float]) -> bool:
        """Feed the history after a new epoch; True when that epoch is the new candidate."""
        stat = self.statistic(history)
        if stat is None or self.terminal is not None:
            return False
        k = len(history)
        new = self.candidate is None or stat < self.best
        if new:
            self.candidate, self.best = k, stat
        if k - self.candidate >= self.patience:
            self.terminal = self.candidate
        return new


# ---------------------------------------------------------------- loop


def trainable_view(params: ParameterStore, frozen: dict[str, bool] | None) -> ParameterStore:
    """Same tensors, with requires_grad set from the freeze mask."""
    out = {}
    for name, p in params.items():
        want = not (frozen or {}).get(name, False)
        out[name] = p if p.requires_grad == want else Tensor(p.data, requires_grad=want)
    return out


def train_epoch(params: ParameterStore, X: np.ndarray, y: np.ndarray, model_cfg: ModelConfig,
                cfg: TrainConfig, rng: np.random.Generator, state: AdamState
                ) -> tuple[ParameterStore, AdamState, float]:
    """One shuffled pass of minibatch Adam. Parameters with requires_grad=False
    are neither differentiated nor updated. Returns the mean of batch losses."""
    n = len(X)
    if n == 0:
        raise ValueError("no training windows")
    order = rng.permutation(n)
    trainable = [k for k, p in params.items() if p.requires_grad]
    losses = []
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        with nx.Tape() as tape:
            preds = model_forward(X[idx], params, model_cfg)
            loss = mse_wd_loss(preds, y[idx], [], 0.0)
        grads_by_tensor = tape.backward(loss)
        grads = {k: grads_by_tensor[params[k]] for k in trainable if params[k] in grads_by_tensor}
        decay = cfg.lam * sum(float(np.sum(params[k].data.astype(np.float64) ** 2)) for k in trainable)
        losses.append(float(loss.data) + decay)
        # weight decay enters through adam_step as 2*lam*theta
        params, state = nx.adam_step(params, grads, state, cfg.eta, cfg.lam)
    return params, state, float(np.mean(losses))


@dataclass
class FitResult:
    params: ParameterStore  # snapshot at the terminal (or best-so-far) epoch
    history: list[float]
    terminal_epoch: int | None
    snapshot_epoch: int
    final_params: ParameterStore
    state: AdamState = field(repr=False, default=None)

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def fit(X: np.ndarray, y: np.ndarray, model_cfg: ModelConfig, params: ParameterStore, cfg: TrainConfig,
        frozen: dict[str, bool] | None = None,
        on_epoch: Callable[[int, float, float | None], None] | None = None) -> FitResult:
    """Train until the configured stopping criterion confirms a terminal epoch
    or ``max_epochs`` runs out; returns the parameters of the terminal epoch
    (best candidate so far when stopped by the cap)."""
    params = trainable_view(params, frozen)
    dt = nx.resolve_dtype(model_cfg.dtype)
    X = np.asarray(X, dtype=dt)
    y = np.asarray(y, dtype=dt)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(params)
    tracker = StopTracker(cfg.criterion, cfg.min_epochs, cfg.patience)
    history: list[float] = []
    snapshot, snap_epoch = params, 0
    for epoch in range(1, cfg.max_epochs + 1):
        params, state, loss = train_epoch(params, X, y, model_cfg, cfg, rng, state)
        history.append(loss)
        var = rolling_variance(history, epoch) if epoch >= VARIANCE_WINDOW else None
        if on_epoch is not None:
            on_epoch(epoch, loss, var)
        if tracker.update(history):
            snapshot, snap_epoch = dict(params), epoch
        if tracker.terminal is not None:
            break
    if tracker.candidate is None:
        snapshot, snap_epoch = dict(params), len(history)
    log.info("fit stopped after %d epochs, terminal=%s", len(history), tracker.terminal)
    return FitResult(snapshot, history, tracker.terminal, snap_epoch, params, state)


def format_loss_line(epoch: int, loss: float, var: float | None) -> str:
    return f"{epoch}\t{loss:.10g}\t" + ("" if var is None else f"{var:.10g}")
