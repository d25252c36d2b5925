"""Seeded CMAPSS-format synthetic degradation data.

Each unit has a life T drawn uniformly from mean_life +- life_jitter. Every
cycle runs in one of ``n_conditions`` operating regimes (fixed setting triples
spread far apart relative to the 0.1 quantization step, plus small jitter).
Sensor j reads

    base_j + offset[regime, j] + amp_j * dir_j * h(t) + noise

where h is a degradation curve driven by cycles-to-failure (T - t): linear
or exponential. Six channels carry no trend, like the flat CMAPSS sensors.
Noise is ``noise_std * amp_j`` Gaussian. The sensor "plant" (bases,
amplitudes, directions, regime offsets) comes from ``plant_seed`` so that
datasets with different ``seed`` share the same physics, as the CMAPSS
subsets do.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ingest import (N_SENSORS, SubsetSpec, Trajectory, TrajectorySet, format_rul_truth,
                     format_trajectory_set)

# well separated regimes; setting3 of 60 mirrors the CMAPSS low-throttle regime
REGIMES = np.array([
    [0.0, 0.0, 100.0],
    [10.0, 0.3, 100.0],
    [20.0, 0.7, 100.0],
    [25.0, 0.6, 60.0],
    [35.0, 0.8, 100.0],
    [42.0, 0.8, 100.0],
])
SETTING_JITTER = np.array([0.04, 0.004, 0.0])
FLAT_CHANNELS = (0, 4, 9, 15, 17, 18)


@dataclass(frozen=True)
class SynthSpec:
    name: str = "SYNTH"
    seed: int = 0
    n_units: int = 30
    n_test_units: int | None = None  # None -> n_units
    n_conditions: int = 1
    mean_life: int = 150
    life_jitter: int = 40
    noise_std: float | tuple[float, ...] = 0.05
    condition_offsets: tuple[tuple[float, ...], ...] | None = None  # (n_conditions, 21) sensor shifts
    degradation_shape: str = "linear"
    fault_modes: int = 1
    plant_seed: int = 0  # sensor bases, amplitudes, trend directions and regime offsets

    def __post_init__(self):
        if self.n_units < 1:
            raise ValueError("n_units must be >= 1")
        if not 1 <= self.n_conditions <= len(REGIMES):
            raise ValueError(f"n_conditions must lie in [1, {len(REGIMES)}]")
        if self.degradation_shape not in ("linear", "exponential"):
            raise ValueError(f"unknown degradation shape {self.degradation_shape!r}")
        if self.mean_life - self.life_jitter < 10:
            raise ValueError("shortest possible life must be at least 10 cycles")

    @property
    def test_units(self) -> int:
        return self.n_units if self.n_test_units is None else self.n_test_units

    def subset_spec(self) -> SubsetSpec:
        return SubsetSpec(self.name, self.n_units, self.test_units, self.n_conditions, self.fault_modes)


PRESETS = {
    "source": SynthSpec(name="SYNSRC", seed=11, n_units=30, n_conditions=1, degradation_shape="linear",
                        noise_std=0.3),
    # data-scarce target: half of its 8 training units is the transfer set
    "target": SynthSpec(name="SYNTGT", seed=23, n_units=8, n_test_units=30, n_conditions=6,
                        degradation_shape="exponential", mean_life=170, noise_std=0.3),
}


def _curve(shape: str, to_failure: np.ndarray, mean_life: float) -> np.ndarray:
    if shape == "linear":
        return 1.0 - to_failure / mean_life
    return np.exp(-to_failure / (mean_life / 3.0))


def _sensor_profile(rng: np.random.Generator, n_conditions: int, offsets):
    base = rng.uniform(10.0, 1000.0, N_SENSORS)
    amp = base * rng.uniform(0.01, 0.05, N_SENSORS)
    direction = rng.choice([-1.0, 1.0], N_SENSORS)
    direction[list(FLAT_CHANNELS)] = 0.0
    if offsets is None:
        offsets = base * rng.uniform(-0.3, 0.3, (len(REGIMES), N_SENSORS))
        offsets[0] = 0.0
        offsets = offsets[:n_conditions]
    else:
        offsets = np.asarray(offsets, dtype=np.float64)
        if offsets.shape != (n_conditions, N_SENSORS):
            raise ValueError(f"condition_offsets must have shape ({n_conditions}, {N_SENSORS})")
    return base, amp, direction, offsets


def _unit(rng, uid, life, n_keep, spec, profile) -> Trajectory:
    base, amp, direction, offsets = profile
    noise = np.broadcast_to(np.asarray(spec.noise_std, dtype=np.float64), (N_SENSORS,))
    t = np.arange(1, n_keep + 1)
    regime = rng.integers(0, spec.n_conditions, n_keep)
    settings = REGIMES[regime] + rng.uniform(-1.0, 1.0, (n_keep, 3)) * SETTING_JITTER
    h = _curve(spec.degradation_shape, (life - t).astype(np.float64), spec.mean_life)
    sensors = base + offsets[regime] + (amp * direction) * h[:, None]
    sensors = sensors + rng.normal(0.0, 1.0, (n_keep, N_SENSORS)) * (noise * amp)
    return Trajectory(uid, t.astype(np.int64), settings, sensors)


def generate(spec: SynthSpec) -> tuple[TrajectorySet, TrajectorySet, list[int]]:
    """Train set (run to failure), test set (truncated) and test truth RUL."""
    profile = _sensor_profile(np.random.default_rng(spec.plant_seed), spec.n_conditions, spec.condition_offsets)
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.mean_life - spec.life_jitter, spec.mean_life + spec.life_jitter
    train = []
    for uid in range(1, spec.n_units + 1):
        life = int(rng.integers(lo, hi + 1))
        train.append(_unit(rng, uid, life, life, spec, profile))
    test, truth = [], []
    for uid in range(1, spec.test_units + 1):
        life = int(rng.integers(lo, hi + 1))
        cut = int(rng.integers(max(1, life // 4), life - 5 + 1))
        test.append(_unit(rng, uid, life, cut, spec, profile))
        truth.append(life - cut)
    return TrajectorySet(spec.name, tuple(train)), TrajectorySet(spec.name, tuple(test)), truth


def write_spec_file(spec: SynthSpec, path) -> None:
    s = spec.subset_spec()
    Path(path).write_text(
        f"name={s.name}\ntrain_units={s.train_units}\ntest_units={s.test_units}\n"
        f"conditions={s.conditions}\nfault_modes={s.fault_modes}\n"
    )


def read_spec_file(path) -> SubsetSpec:
    kv = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    return SubsetSpec(kv["name"], int(kv["train_units"]), int(kv["test_units"]),
                      int(kv["conditions"]), int(kv["fault_modes"]))


def write_files(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """train_<name>.txt, test_<name>.txt, RUL_<name>.txt and spec_<name>.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, truth = generate(spec)
    paths = {
        "train": out / f"train_{spec.name}.txt",
        "test": out / f"test_{spec.name}.txt",
        "truth": out / f"RUL_{spec.name}.txt",
        "spec": out / f"spec_{spec.name}.txt",
    }
    paths["train"].write_text(format_trajectory_set(train))
    paths["test"].write_text(format_trajectory_set(test))
    paths["truth"].write_text(format_rul_truth(truth))
    write_spec_file(spec, paths["spec"])
    return paths
