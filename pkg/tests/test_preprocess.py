import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from rulgpt import synth
from rulgpt.ingest import TrajectorySet
from rulgpt.preprocess import (ConditionMismatchError, PipelineConfig, PreprocessError, apply_minmax,
                               assign_rul_labels, detect_conditions, exp_smooth, fit_group_minmax,
                               fit_pipeline, last_window, make_windows, save_windows, stack_windows)

from conftest import make_traj
from reference_pipeline import ref_pipeline


# ------------------------------------------------------------ labels

def test_label_end_of_life():
    t = make_traj(1, np.zeros(5))
    assert assign_rul_labels(t, 120)[-1] == 0.0


def test_label_examples():
    lab = assign_rul_labels(make_traj(1, np.zeros(200)), 120)
    assert lab[149] == pytest.approx(50 / 120, abs=0)  # cycle 150
    assert lab[9] == 1.0  # cycle 10: 190 capped at 120


@given(st.integers(1, 300), st.integers(1, 200))
def test_labels_bounded_and_zero_at_end(n, cap):
    lab = assign_rul_labels(make_traj(1, np.zeros(n)), cap)
    assert len(lab) == n
    assert lab.min() >= 0 and lab.max() <= 1 and lab[-1] == 0


def test_label_cap_must_be_positive():
    with pytest.raises(ValueError):
        assign_rul_labels(make_traj(1, np.zeros(3)), 0)


# ------------------------------------------------------------ conditions

def test_single_regime_all_zero():
    ts = TrajectorySet("A", (make_traj(1, np.zeros(4)), make_traj(2, np.ones(3))))
    ids, grouping = detect_conditions(ts, 1)
    assert grouping.k == 1
    assert all((i == 0).all() for i in ids)


def test_six_regimes_from_generator():
    train, _, _ = synth.generate(synth.SynthSpec(seed=5, n_units=5, n_conditions=6))
    ids, grouping = detect_conditions(train, 6)
    allset = np.concatenate([t.settings for t in train.trajectories])
    brute = {tuple(synth.REGIMES[np.abs(synth.REGIMES - s).sum(axis=1).argmin()]) for s in allset}
    assert grouping.k == len(brute) == 6
    # ids follow lexicographic order of the triples
    assert [tuple(c) for c in grouping.centers] == sorted(tuple(c) for c in grouping.centers)
    for t, gid in zip(train.trajectories, ids):
        np.testing.assert_allclose(grouping.centers[gid], t.settings, atol=0.1)


def test_ids_stable_across_calls():
    train, _, _ = synth.generate(synth.SynthSpec(seed=8, n_units=4, n_conditions=6))
    a, _ = detect_conditions(train, 6)
    b, _ = detect_conditions(train, 6)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_rounding_boundary_not_split():
    # 0.249 and 0.251 round to different decimals but belong to one regime
    s = np.array([[0.249, 0.0, 100.0], [0.251, 0.0, 100.0], [0.25, 0.0, 100.0]])
    ts = TrajectorySet("B", (make_traj(1, np.zeros(3), s),))
    _, grouping = detect_conditions(ts, 1)
    assert grouping.k == 1


def test_condition_mismatch():
    ts = TrajectorySet("A", (make_traj(1, np.zeros(4)),))
    with pytest.raises(ConditionMismatchError):
        detect_conditions(ts, 6)


# ------------------------------------------------------------ min-max

def _channel_set(values, settings_rows=None):
    x = np.zeros((len(values), 21))
    x[:, 0] = values
    return TrajectorySet("M", (make_traj(1, x, settings_rows),))


def test_minmax_fit_simple_and_constant():
    ts = _channel_set([2.0, 4.0, 6.0])
    st_ = fit_group_minmax(ts, [np.zeros(3, dtype=int)])
    assert st_.mins[0, 0] == 2 and st_.maxs[0, 0] == 6
    assert st_.mins[0, 1] == st_.maxs[0, 1] == 0  # constant channel


def test_minmax_two_groups_independent():
    values = [1.0, 3.0, 100.0, 200.0]
    ts = _channel_set(values)
    st_ = fit_group_minmax(ts, [np.array([0, 0, 1, 1])])
    np.testing.assert_array_equal(st_.mins[:, 0], [1, 100])
    np.testing.assert_array_equal(st_.maxs[:, 0], [3, 200])


def test_minmax_empty_group():
    with pytest.raises(PreprocessError):
        fit_group_minmax(_channel_set([1.0, 2.0]), [np.array([0, 0])], k=2)


def test_apply_minmax_examples():
    assert apply_minmax(4, 2, 6) == 0.5
    assert apply_minmax(17.0, 5, 5) == 0.0
    assert apply_minmax(8, 2, 6) == 1.5  # no clipping


# ------------------------------------------------------------ smoothing

def test_smooth_examples():
    np.testing.assert_array_equal(exp_smooth([0, 2], 0.5), [0, 1])
    np.testing.assert_array_equal(exp_smooth([0, 2, 2], 0.5), [0, 1, 1.5])


@given(hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e6, 1e6)))
def test_smooth_alpha_one_identity(x):
    np.testing.assert_array_equal(exp_smooth(x, 1.0), x)


@given(st.floats(-1e3, 1e3), st.integers(1, 40), st.floats(0, 1))
def test_smooth_constant_is_fixed_point(c, n, alpha):
    np.testing.assert_allclose(exp_smooth(np.full(n, c), alpha), c, rtol=1e-12, atol=1e-12)


def test_smooth_rejects_bad_alpha_and_empty():
    with pytest.raises(ValueError):
        exp_smooth([1.0], 1.5)
    with pytest.raises(ValueError):
        exp_smooth([], 0.5)


# ------------------------------------------------------------ windows

def _rows(n):
    return np.arange(n * 21, dtype=np.float64).reshape(n, 21)


def test_windows_count_and_ends():
    w = make_windows(_rows(5), np.linspace(1, 0, 5), 1, L=3)
    assert [s.end_cycle for s in w] == [3, 4, 5]
    assert w[-1].target == 0.0


def test_window_exact_length():
    assert len(make_windows(_rows(4), None, 1, L=4)) == 1


def test_window_padding():
    f = _rows(2)
    (w,) = make_windows(f, np.array([0.5, 0.25]), 1, L=4)
    np.testing.assert_array_equal(w.matrix, f[[0, 0, 0, 1]])
    assert w.target == 0.25


def test_window_stride():
    w = make_windows(_rows(10), None, 1, L=3, stride=3)
    assert [s.end_cycle for s in w] == [3, 6, 9]


@given(st.integers(1, 60), st.integers(1, 60))
def test_window_count_formula(n, L):
    w = make_windows(_rows(n), None, 1, L=L)
    assert len(w) == (n - L + 1 if n >= L else 1)
    assert all(s.matrix.shape == (L, 21) for s in w)


def test_last_window_cases():
    f = _rows(30)
    np.testing.assert_array_equal(last_window(f, 1, 30).matrix, f)
    f = _rows(45)
    np.testing.assert_array_equal(last_window(f, 1, 30).matrix, f[15:45])  # cycles 16..45
    f = _rows(10)
    m = last_window(f, 1, 30).matrix
    np.testing.assert_array_equal(m[:21], np.repeat(f[:1], 21, axis=0))
    np.testing.assert_array_equal(m[20:], f)


# ------------------------------------------------------------ pipeline

def test_pipeline_config_validation():
    for bad in (dict(rul_cap=0), dict(alpha=-0.1), dict(window_len=0), dict(stride=0)):
        with pytest.raises(ValueError):
            PipelineConfig(**bad)


def test_train_values_in_unit_range_test_may_exceed():
    spec = synth.SynthSpec(seed=2, n_units=6, n_conditions=6, noise_std=0.3)
    train, test, truth = synth.generate(spec)
    fp = fit_pipeline(train, PipelineConfig(alpha=1.0, window_len=5, expected_conditions=6))
    for t in train.trajectories:
        f = fp.features(t)
        assert f.min() >= 0 and f.max() <= 1
    tw = fp.test_windows(test, truth)
    assert len(tw) == len(test)
    assert all(0 <= s.target <= 1 for s in tw)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.floats(0.05, 1.0), st.integers(1, 3))
def test_pipeline_matches_reference(seed, L, alpha, stride):
    rng = np.random.default_rng(seed)
    trajs = []
    for uid in range(1, 4):
        n = int(rng.integers(1, 51))
        sensors = rng.normal(size=(n, 21)) * 50 + 500
        sensors[:, 5] = 7.0  # constant channel
        trajs.append(make_traj(uid, sensors))
    ts = TrajectorySet("R", tuple(trajs))
    fp = fit_pipeline(ts, PipelineConfig(alpha=alpha, window_len=L, stride=stride))
    got = fp.train_windows(ts)
    ref = ref_pipeline([(t.unit_id, t.settings.tolist(), t.sensors.tolist()) for t in trajs], L, alpha, 120, stride)
    assert len(got) == len(ref)
    for g, (uid, end, rows, target) in zip(got, ref):
        assert (g.unit_id, g.end_cycle) == (uid, end)
        assert abs(g.target - target) <= 1e-12
        np.testing.assert_allclose(g.matrix, np.array(rows), rtol=0, atol=1e-12)


def test_save_windows_text_and_binary(tmp_path):
    from rulgpt.checkpoint import read_container

    samples = make_windows(_rows(6) / 100, np.linspace(1, 0, 6), 1, L=4)
    save_windows(samples, tmp_path / "w.txt")
    rows = np.loadtxt(tmp_path / "w.txt")
    assert rows.shape == (3 * 4, 22)
    np.testing.assert_array_equal(rows[:4, :21], samples[0].matrix)
    assert (rows[:4, 21] == samples[0].target).all()
    save_windows(samples, tmp_path / "w.bin", fmt="binary")
    tensors, meta, _ = read_container(tmp_path / "w.bin")
    X, y = stack_windows(samples)
    np.testing.assert_array_equal(tensors["X"], X)
    np.testing.assert_array_equal(tensors["y"], y)
