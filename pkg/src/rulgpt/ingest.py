"""CMAPSS-format trajectory and RUL-truth files.

A trajectory file has 26 whitespace-separated numeric columns per line:
unit id, cycle, 3 operational settings, 21 sensors. Records of one unit are
contiguous in practice but grouping only relies on first appearance.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

N_SETTINGS = 3
N_SENSORS = 21
N_COLUMNS = 2 + N_SETTINGS + N_SENSORS


class IngestError(Exception):
    pass


class FormatError(IngestError, ValueError):
    pass


class IntegrityError(IngestError):
    pass


@dataclass(frozen=True)
class CycleRecord:
    cycle: int
    settings: tuple[float, float, float]
    sensors: tuple[float, ...]

    def __post_init__(self):
        if len(self.settings) != N_SETTINGS or len(self.sensors) != N_SENSORS:
            raise FormatError("a cycle record needs 3 settings and 21 sensors")
        if not np.isfinite(np.r_[self.settings, self.sensors]).all():
            raise FormatError(f"non-finite value at cycle {self.cycle}")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One engine run. Arrays are row-aligned: ``cycles[i]`` is the cycle of
    ``settings[i]`` and ``sensors[i]``."""

    unit_id: int
    cycles: np.ndarray
    settings: np.ndarray
    sensors: np.ndarray

    def __post_init__(self):
        n = len(self.cycles)
        if n == 0:
            raise IntegrityError(f"unit {self.unit_id}: empty trajectory")
        if self.settings.shape != (n, N_SETTINGS) or self.sensors.shape != (n, N_SENSORS):
            raise FormatError(f"unit {self.unit_id}: bad array shapes")
        expected = np.arange(1, n + 1)
        if not np.array_equal(self.cycles, expected):
            bad = int(np.flatnonzero(self.cycles != expected)[0])
            raise IntegrityError(
                f"unit {self.unit_id}: cycle continuity broken at record {bad + 1} "
                f"(got cycle {self.cycles[bad]}, expected {bad + 1})"
            )

    def __len__(self) -> int:
        return len(self.cycles)

    @property
    def max_cycle(self) -> int:
        return int(self.cycles[-1])

    @property
    def records(self) -> list[CycleRecord]:
        return [
            CycleRecord(int(c), tuple(map(float, s)), tuple(map(float, x)))
            for c, s, x in zip(self.cycles, self.settings, self.sensors)
        ]

    def head(self, n: int) -> "Trajectory":
        return Trajectory(self.unit_id, self.cycles[:n], self.settings[:n], self.sensors[:n])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.unit_id == other.unit_id
            and np.array_equal(self.cycles, other.cycles)
            and np.array_equal(self.settings, other.settings)
            and np.array_equal(self.sensors, other.sensors)
        )


@dataclass(frozen=True)
class TrajectorySet:
    subset_name: str
    trajectories: tuple[Trajectory, ...] = ()

    def __post_init__(self):
        ids = [t.unit_id for t in self.trajectories]
        if len(set(ids)) != len(ids):
            raise IntegrityError(f"{self.subset_name}: duplicate unit ids")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def n_records(self) -> int:
        return sum(len(t) for t in self.trajectories)


@dataclass(frozen=True)
class SubsetSpec:
    name: str
    train_units: int
    test_units: int
    conditions: int
    fault_modes: int

    def __post_init__(self):
        if min(self.train_units, self.test_units, self.conditions, self.fault_modes) < 1:
            raise ValueError("subset counts must be positive")


CMAPSS_SUBSETS = {
    "FD001": SubsetSpec("FD001", 100, 100, 1, 1),
    "FD002": SubsetSpec("FD002", 260, 259, 6, 1),
    "FD003": SubsetSpec("FD003", 100, 100, 1, 2),
    "FD004": SubsetSpec("FD004", 249, 248, 6, 2),
}


def _open_text(source) -> TextIO:
    if isinstance(source, (str, Path)):
        return open(source, "r")
    return source


def parse_trajectory_file(source, subset_name: str = "") -> TrajectorySet:
    """Parse a 26-column trajectory stream (or path) into a TrajectorySet."""
    if isinstance(source, (str, Path)) and not subset_name:
        subset_name = Path(source).stem
    rows: dict[int, list[list[float]]] = {}
    order: list[int] = []
    fh = _open_text(source)
    try:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != N_COLUMNS:
                raise FormatError(f"line {lineno}: expected {N_COLUMNS} fields, got {len(fields)}")
            try:
                vals = [float(f) for f in fields]
            except ValueError:
                raise FormatError(f"line {lineno}: non-numeric field") from None
            if not all(np.isfinite(vals)):
                raise FormatError(f"line {lineno}: non-finite value")
            unit, cycle = vals[0], vals[1]
            if unit != int(unit) or cycle != int(cycle) or unit < 1:
                raise FormatError(f"line {lineno}: unit id and cycle must be positive integers")
            uid = int(unit)
            if uid not in rows:
                rows[uid] = []
                order.append(uid)
            rows[uid].append(vals[1:])
    finally:
        if fh is not source:
            fh.close()

    trajs = []
    for uid in order:
        arr = np.asarray(rows[uid], dtype=np.float64)
        trajs.append(Trajectory(uid, arr[:, 0].astype(np.int64), arr[:, 1:4].copy(), arr[:, 4:].copy()))
    return TrajectorySet(subset_name, tuple(trajs))


def parse_rul_truth(source, expected_units: int) -> list[int]:
    """One non-negative integer per nonblank line, in test-unit order."""
    out: list[int] = []
    fh = _open_text(source)
    try:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 1:
                raise FormatError(f"line {lineno}: expected one value, got {len(fields)}")
            try:
                val = float(fields[0])
            except ValueError:
                raise FormatError(f"line {lineno}: non-numeric RUL") from None
            if val != int(val):
                raise FormatError(f"line {lineno}: RUL must be an integer")
            if val < 0:
                raise FormatError(f"line {lineno}: negative RUL {int(val)}")
            out.append(int(val))
    finally:
        if fh is not source:
            fh.close()
    if len(out) != expected_units:
        raise IntegrityError(f"truth file has {len(out)} values, expected {expected_units}")
    return out


def format_trajectory_set(ts: TrajectorySet) -> str:
    """Serialize back to 26-column text; ``repr`` floats round-trip exactly."""
    buf = io.StringIO()
    for t in ts.trajectories:
        for c, s, x in zip(t.cycles, t.settings, t.sensors):
            vals = [repr(float(v)) for v in np.r_[s, x]]
            buf.write(f"{t.unit_id} {int(c)} " + " ".join(vals) + "\n")
    return buf.getvalue()


def format_rul_truth(truth: Iterable[int]) -> str:
    return "".join(f"{int(v)}\n" for v in truth)


def write_trajectory_file(ts: TrajectorySet, path) -> None:
    Path(path).write_text(format_trajectory_set(ts))


@dataclass
class ValidationReport:
    subset: str
    expected_units: int
    actual_units: int
    units_ok: bool
    finite_ok: bool
    nonfinite_channels: list[int] = field(default_factory=list)
    expected_conditions: int = 0
    detected_conditions: int | None = None
    conditions_ok: bool = False

    @property
    def passed(self) -> bool:
        return self.units_ok and self.finite_ok and self.conditions_ok

    def lines(self) -> list[str]:
        flag = lambda ok: "pass" if ok else "FAIL"
        return [
            f"subset\t{self.subset}",
            f"units\t{self.actual_units}/{self.expected_units}\t{flag(self.units_ok)}",
            f"finite\t{flag(self.finite_ok)}"
            + (f"\tbad channels {self.nonfinite_channels}" if self.nonfinite_channels else ""),
            f"conditions\t{self.detected_conditions}/{self.expected_conditions}\t{flag(self.conditions_ok)}",
        ]


def validate_subset(ts: TrajectorySet, spec: SubsetSpec, split: str = "train") -> ValidationReport:
    """Check unit count, per-channel finiteness and detected condition groups."""
    from .preprocess import count_condition_groups

    expected = spec.train_units if split == "train" else spec.test_units
    bad: list[int] = []
    for t in ts.trajectories:
        cols = np.c_[t.settings, t.sensors]
        bad.extend(int(j) for j in np.flatnonzero(~np.isfinite(cols).all(axis=0)))
    detected = count_condition_groups(ts) if len(ts) else None
    return ValidationReport(
        subset=spec.name,
        expected_units=expected,
        actual_units=len(ts),
        units_ok=len(ts) == expected,
        finite_ok=not bad,
        nonfinite_channels=sorted(set(bad)),
        expected_conditions=spec.conditions,
        detected_conditions=detected,
        conditions_ok=detected == spec.conditions,
    )
