"""Freeze-and-fine-tune transfer between subsets."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .ingest import TrajectorySet
from .model import HEAD_TENSORS, ModelConfig, ParameterStore, check_params, layer_of, param_shapes
from .train import FitResult, TrainConfig, fit

FreezeMask = dict[str, bool]  # name -> frozen

OUTPUT_TENSORS = ("pool.w",) + HEAD_TENSORS


class TransferError(Exception):
    pass


def build_freeze_mask(cfg: ModelConfig, n_frozen: int, freeze_pool: bool = False) -> FreezeMask:
    """Freeze backbone layers 1..n_frozen plus the input embedding and
    positions. Later layers, the pooling vector and the head stay trainable
    (pass ``freeze_pool`` to exclude pool.w from the trainable set)."""
    if not 0 <= n_frozen <= cfg.n_layers:
        raise ValueError(f"n_frozen must lie in [0, {cfg.n_layers}], got {n_frozen}")
    mask = {}
    for name in param_shapes(cfg):
        layer = layer_of(name)
        if layer is not None:
            mask[name] = layer <= n_frozen
        elif name.startswith(("embed.", "pos.")):
            mask[name] = True
        elif name == "pool.w":
            mask[name] = freeze_pool
        else:
            mask[name] = False
    return mask


def trainable_names(mask: FreezeMask) -> list[str]:
    return [k for k, frozen in mask.items() if not frozen]


def select_fraction(ts: TrajectorySet, p: float) -> TrajectorySet:
    """First ceil(p * units) trajectories in file order."""
    if not 0.0 < p <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {p}")
    # round away float noise such as 0.1 * 260 = 26.000000000000004
    n = math.ceil(round(p * len(ts), 9))
    return TrajectorySet(ts.subset_name, ts.trajectories[:n])


def finetune(source_params: ParameterStore, source_cfg: ModelConfig, X: np.ndarray, y: np.ndarray,
             mask: FreezeMask, cfg: TrainConfig, mask_cfg: ModelConfig | None = None,
             on_epoch=None) -> FitResult:
    """Criterion-B fit of the unfrozen tensors, starting from the source weights."""
    if mask_cfg is not None and mask_cfg != source_cfg:
        raise TransferError("freeze mask was built for a different model config")
    if set(mask) != set(param_shapes(source_cfg)):
        raise TransferError("freeze mask does not cover the checkpoint's parameters")
    check_params(source_params, source_cfg)
    if cfg.criterion != "B":
        cfg = replace(cfg, criterion="B", min_epochs=None)
    return fit(X, y, source_cfg, source_params, cfg, frozen=mask, on_epoch=on_epoch)
