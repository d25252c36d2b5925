import numpy as np
import pytest

from rulgpt.ingest import Trajectory, TrajectorySet


def make_traj(uid, sensors, settings=None):
    sensors = np.asarray(sensors, dtype=np.float64)
    if sensors.ndim == 1:
        sensors = np.repeat(sensors[:, None], 21, axis=1)
    n = len(sensors)
    if settings is None:
        settings = np.tile([0.0, 0.0, 100.0], (n, 1))
    return Trajectory(uid, np.arange(1, n + 1), np.asarray(settings, dtype=np.float64), sensors)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_set(rng):
    trajs = tuple(make_traj(u, rng.normal(size=(rng.integers(8, 20), 21))) for u in (1, 2, 3))
    return TrajectorySet("SMALL", trajs)


# acceptance criteria append (number, passed, detail) here; printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0])):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        terminalreporter.write_line(f"criterion {num}: {status}  {detail}")
