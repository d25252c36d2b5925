"""Trajectories -> model windows.

Order of operations, identical for every subset: RUL labels, operating
condition grouping, per-group min-max (fit on training data only, applied to
train and test), exponential smoothing per unit and sensor, sliding windows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import N_SENSORS, Trajectory, TrajectorySet

SETTING_DECIMALS = 1
_QUANTUM = 10.0 ** -SETTING_DECIMALS


class PreprocessError(Exception):
    pass


class ConditionMismatchError(PreprocessError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    rul_cap: int = 120
    alpha: float = 0.3  # implementer default
    window_len: int = 30  # implementer default
    stride: int = 1
    expected_conditions: int = 1

    def __post_init__(self):
        if self.rul_cap <= 0:
            raise ValueError("rul_cap must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.window_len < 1 or self.stride < 1:
            raise ValueError("window_len and stride must be >= 1")
        if self.expected_conditions < 1:
            raise ValueError("expected_conditions must be >= 1")


def assign_rul_labels(traj: Trajectory, cap: int = 120) -> np.ndarray:
    """min(max(T - t, 0), cap) / cap for every cycle t of the trajectory."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    rul = np.maximum(traj.max_cycle - traj.cycles, 0)
    return np.minimum(rul, cap).astype(np.float64) / cap


# ---------------------------------------------------------------- conditions


@dataclass(frozen=True)
class ConditionGrouping:
    """Operating regimes as quantized setting triples.

    ``centers[g]`` is the rounded setting triple representing group ``g``;
    group ids follow the lexicographic order of the centers.
    """

    centers: np.ndarray

    @property
    def k(self) -> int:
        return len(self.centers)

    def assign(self, settings: np.ndarray) -> np.ndarray:
        q = np.round(settings, SETTING_DECIMALS)
        d = np.abs(q[:, None, :] - self.centers[None, :, :]).max(axis=-1)
        return d.argmin(axis=1).astype(np.int64)


def _group_triples(triples: np.ndarray) -> list[list[int]]:
    # Triples within one quantum in every coordinate belong to the same regime,
    # so readings that straddle a rounding boundary are not split in two.
    n = len(triples)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        close = np.flatnonzero(np.abs(triples[i + 1:] - triples[i]).max(axis=1) <= _QUANTUM * 1.001)
        for j in close + i + 1:
            ri, rj = find(i), find(int(j))
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def fit_conditions(ts: TrajectorySet) -> ConditionGrouping:
    if not len(ts):
        raise PreprocessError("cannot detect conditions on an empty set")
    allset = np.concatenate([t.settings for t in ts.trajectories])
    q = np.round(allset, SETTING_DECIMALS)
    triples, counts = np.unique(q, axis=0, return_counts=True)
    centers = []
    for members in _group_triples(triples):
        # most populated quantized triple stands for the group
        best = max(members, key=lambda i: (counts[i], -i))
        centers.append(triples[best])
    centers = np.array(sorted(centers, key=tuple))
    return ConditionGrouping(centers)


def count_condition_groups(ts: TrajectorySet) -> int:
    return fit_conditions(ts).k


def detect_conditions(ts: TrajectorySet, expected_k: int) -> tuple[list[np.ndarray], ConditionGrouping]:
    """Condition id per record (one int array per trajectory) and the grouping."""
    if expected_k < 1:
        raise ValueError("expected_k must be >= 1")
    grouping = fit_conditions(ts)
    if grouping.k != expected_k:
        raise ConditionMismatchError(f"{ts.subset_name}: detected {grouping.k} condition groups, expected {expected_k}")
    return [grouping.assign(t.settings) for t in ts.trajectories], grouping


# ---------------------------------------------------------------- min-max


@dataclass(frozen=True)
class GroupStats:
    mins: np.ndarray  # (k, 21)
    maxs: np.ndarray

    @property
    def k(self) -> int:
        return len(self.mins)


def fit_group_minmax(train_set: TrajectorySet, ids: Sequence[np.ndarray], k: int | None = None) -> GroupStats:
    sensors = np.concatenate([t.sensors for t in train_set.trajectories])
    gid = np.concatenate(list(ids))
    if k is None:
        k = int(gid.max()) + 1
    mins = np.empty((k, sensors.shape[1]))
    maxs = np.empty_like(mins)
    for g in range(k):
        rows = sensors[gid == g]
        if not len(rows):
            raise PreprocessError(f"condition group {g} has no training values")
        mins[g] = rows.min(axis=0)
        maxs[g] = rows.max(axis=0)
    return GroupStats(mins, maxs)


def apply_minmax(value, lo, hi):
    """(value - lo) / (hi - lo); 0.0 where hi == lo. No clipping."""
    value, lo, hi = np.asarray(value, float), np.asarray(lo, float), np.asarray(hi, float)
    span = hi - lo
    safe = np.where(span == 0, 1.0, span)
    out = np.where(span == 0, 0.0, (value - lo) / safe)
    return float(out) if out.ndim == 0 else out


def exp_smooth(series, alpha: float) -> np.ndarray:
    """s[0] = x[0]; s[i] = alpha*x[i] + (1-alpha)*s[i-1]. Axis 0 is time."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    x = np.asarray(series, dtype=np.float64)
    if not len(x):
        raise ValueError("cannot smooth an empty series")
    out = np.empty_like(x)
    out[0] = x[0]
    keep = 1.0 - alpha
    for i in range(1, len(x)):
        out[i] = alpha * x[i] + keep * out[i - 1]
    return out


# ---------------------------------------------------------------- windows


@dataclass(frozen=True, eq=False)
class WindowSample:
    matrix: np.ndarray  # (L, 21)
    target: float | None  # normalized RUL at the window's last cycle; None if unlabeled
    unit_id: int
    end_cycle: int


def _pad_front(features: np.ndarray, L: int) -> np.ndarray:
    n = len(features)
    if n >= L:
        return features
    return np.concatenate([np.repeat(features[:1], L - n, axis=0), features])


def make_windows(features: np.ndarray, labels: np.ndarray | None, unit_id: int,
                 L: int, stride: int = 1) -> list[WindowSample]:
    """Windows ending at cycles L, L+stride, ... ; a trajectory shorter than L
    yields one window left-padded with copies of its first row."""
    if L < 1 or stride < 1:
        raise ValueError("L and stride must be >= 1")
    n = len(features)
    if n < L:
        tgt = None if labels is None else float(labels[-1])
        return [WindowSample(_pad_front(features, L), tgt, unit_id, n)]
    out = []
    for end in range(L, n + 1, stride):
        tgt = None if labels is None else float(labels[end - 1])
        out.append(WindowSample(features[end - L:end], tgt, unit_id, end))
    return out


def last_window(features: np.ndarray, unit_id: int, L: int, target: float | None = None) -> WindowSample:
    n = len(features)
    return WindowSample(_pad_front(features[max(0, n - L):], L), target, unit_id, n)


def stack_windows(samples: Sequence[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.matrix for s in samples])
    y = np.array([np.nan if s.target is None else s.target for s in samples])
    return X, y


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class FittedPipeline:
    config: PipelineConfig
    grouping: ConditionGrouping
    stats: GroupStats

    def features(self, traj: Trajectory) -> np.ndarray:
        gid = self.grouping.assign(traj.settings)
        norm = apply_minmax(traj.sensors, self.stats.mins[gid], self.stats.maxs[gid])
        return exp_smooth(norm, self.config.alpha)

    def train_windows(self, ts: TrajectorySet) -> list[WindowSample]:
        cfg = self.config
        out: list[WindowSample] = []
        for t in ts.trajectories:
            labels = assign_rul_labels(t, cfg.rul_cap)
            out.extend(make_windows(self.features(t), labels, t.unit_id, cfg.window_len, cfg.stride))
        return out

    def test_windows(self, ts: TrajectorySet, truth: Sequence[int] | None = None) -> list[WindowSample]:
        cfg = self.config
        out = []
        for i, t in enumerate(ts.trajectories):
            tgt = None if truth is None else min(truth[i], cfg.rul_cap) / cfg.rul_cap
            out.append(last_window(self.features(t), t.unit_id, cfg.window_len, tgt))
        return out


def fit_pipeline(train_set: TrajectorySet, config: PipelineConfig) -> FittedPipeline:
    ids, grouping = detect_conditions(train_set, config.expected_conditions)
    stats = fit_group_minmax(train_set, ids, grouping.k)
    return FittedPipeline(config, grouping, stats)


def save_windows(samples: Sequence[WindowSample], path, fmt: str = "text") -> None:
    """Dump windows. ``text``: L lines of 22 columns (21 features + window target)
    per window, windows back to back. ``binary``: tensor container with X and y."""
    X, y = stack_windows(samples)
    if fmt == "text":
        L = X.shape[1]
        rows = np.concatenate([X.reshape(-1, N_SENSORS), np.repeat(y, L)[:, None]], axis=1)
        np.savetxt(path, rows, fmt="%.17g")
    elif fmt == "binary":
        from .checkpoint import write_container

        write_container(Path(path), {"X": X, "y": y}, meta={"kind": "windows"})
    else:
        raise ValueError(f"unknown window dump format {fmt!r}")
