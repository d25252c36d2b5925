"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary
(``pytest -v tests/test_acceptance.py``). Criteria that need the NASA CMAPSS
files look in ``$RULGPT_DATA_DIR`` and report SKIP when the files are absent.
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from rulgpt import checkpoint as C
from rulgpt import evaluation as E
from rulgpt import model as M
from rulgpt import numerics as nx
from rulgpt import synth
from rulgpt import train as T
from rulgpt import transfer as TR
from rulgpt.ingest import CMAPSS_SUBSETS, parse_rul_truth, parse_trajectory_file
from rulgpt.numerics import Tensor
from rulgpt.preprocess import PipelineConfig, detect_conditions, fit_pipeline, stack_windows

from conftest import ACCEPTANCE
from reference_pipeline import ref_pipeline
from test_model import perturbed_params

# desk-scale transfer experiment (criterion 7); see README for the rationale
DESK_STRIDE = 4
DESK_ETA = 1e-3
DESK_N_FROZEN = 3

# published reference numbers (RMSE, Score); targets only, not reproduced here
REFERENCE = {
    "FD001": (10.95, 203.07), "FD002": (12.39, 630.59), "FD003": (12.80, 349.75), "FD004": (12.96, 706.52),
    "FD004->FD002": (12.38, 632.88),
}


def record(num, ok, detail):
    ACCEPTANCE.append((str(num), ok, detail))
    print(f"criterion {num}: {'PASS' if ok else 'FAIL' if ok is not None else 'SKIP'}  {detail}")


def cmapss_dir():
    d = os.environ.get("RULGPT_DATA_DIR")
    if d and all((Path(d) / f"{s}_FD00{i}.txt").exists() for s in ("train", "test", "RUL") for i in range(1, 5)):
        return Path(d)
    return None


def test_criterion_1_pipeline_matches_reference():
    t0 = time.perf_counter()
    spec = synth.SynthSpec(name="ORACLE", seed=101, n_units=100, n_conditions=6, mean_life=30, life_jitter=20,
                           noise_std=0.2)
    train, _, _ = synth.generate(spec)
    assert max(len(t) for t in train.trajectories) <= 50
    cfg = PipelineConfig(window_len=12, alpha=0.3, expected_conditions=6)
    got = fit_pipeline(train, cfg).train_windows(train)
    ref = ref_pipeline([(t.unit_id, t.settings.tolist(), t.sensors.tolist()) for t in train.trajectories],
                       cfg.window_len, cfg.alpha, cfg.rul_cap)
    worst = 0.0
    same_layout = len(got) == len(ref)
    for g, (uid, end, rows, target) in zip(got, ref):
        same_layout &= (g.unit_id, g.end_cycle) == (uid, end)
        worst = max(worst, float(np.abs(g.matrix - np.array(rows)).max()), abs(g.target - target))
    elapsed = time.perf_counter() - t0
    ok = same_layout and worst <= 1e-12 and elapsed < 10
    record(1, ok, f"{len(got)} windows from 100 trajectories, max abs diff {worst:.1e} (<= 1e-12), {elapsed:.1f}s (< 10s)")
    assert ok


def test_criterion_2_gradient_check():
    t0 = time.perf_counter()
    cfg = M.ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16, window_len=4, dtype="float64")
    params = perturbed_params(cfg, seed=1, std=0.3)
    rng = np.random.default_rng(0)
    X, y, lam = rng.random((6, 4, 21)), rng.random(6), 1e-3

    def loss_of(theta):
        ps = {k: Tensor(v) for k, v in theta.items()}
        return float(T.mse_wd_loss(M.model_forward(X, ps, cfg), y, list(ps.values()), lam).data)

    with nx.Tape() as tape:
        loss = T.mse_wd_loss(M.model_forward(X, params, cfg), y, list(params.values()), lam)
    analytic = tape.backward(loss)
    numeric = nx.finite_diff(loss_of, {k: v.data for k, v in params.items()}, epsilon=1e-5)
    worst, where = 0.0, ""
    for name, p in params.items():
        a, n = analytic[p], numeric[name]
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        if rel.max() > worst:
            worst, where = float(rel.max()), name
    covered = {"pool.w", *M.HEAD_TENSORS} <= set(params) and all(params[k] in analytic for k in params)
    elapsed = time.perf_counter() - t0
    ok = covered and worst < 1e-4 and elapsed < 120
    record(2, ok, f"{len(params)} tensors / {M.count_params(cfg)} values, max rel err {worst:.2e} at {where} "
                  f"(< 1e-4), {elapsed:.0f}s (< 120s)")
    assert ok


def test_criterion_3_metric_closed_forms():
    checks = [
        E.score([0], [0]) == 0,
        abs(E.score([0], [13]) - (math.e - 1)) <= 1e-9,
        abs(E.score([13], [0]) - (math.exp(1.3) - 1)) <= 1e-9,
        all(E.score([x], [0]) > E.score([-x], [0]) for x in (1, 5, 10, 20, 50)),
        E.rmse([3], [1]) == 2,
        abs(E.rmse([0, 4], [0, 0]) - math.sqrt(8)) <= 1e-12,
        E.rmse([7, 8, 9], [7, 8, 9]) == 0,
    ]
    ok = all(checks)
    record(3, ok, f"{sum(checks)}/{len(checks)} closed-form metric checks")
    assert ok


def test_criterion_4_stopping_rules():
    cases = []
    # A: variance constant (zero) from epoch 121, history through 131
    h = [float(k % 3) for k in range(1, 117)] + [0.5] * 15
    cases.append(("A plateau", T.stopping_criterion_a(h), 121))
    cases.append(("A one short", T.stopping_criterion_a(h[:130]), None))
    # A: variance of a damped oscillation shrinks every epoch
    h = [1.0 + 0.95 ** k * (-1) ** k for k in range(1, 200)]
    cases.append(("A undercut", T.stopping_criterion_a(h), None))
    # A: shrinking oscillation, flat from epoch 146, so the first zero variance is at 150
    h = [1.0 + 0.95 ** k * (-1) ** k for k in range(1, 146)] + [5.0] * 20
    cases.append(("A late plateau", T.stopping_criterion_a(h), 150))
    cases.append(("A below minimum", T.stopping_criterion_a([1.0] * 100), None))
    # B: loss plateaus at epoch 20, history through 30
    h = [100.0 - k for k in range(1, 20)] + [80.0] * 11
    cases.append(("B plateau", T.stopping_criterion_b(h), 20))
    cases.append(("B decreasing", T.stopping_criterion_b([1.0 / k for k in range(1, 80)]), None))
    h = [10.0] * 19 + [5.0, 6, 6, 6, 4.0] + [6.0] * 10
    cases.append(("B undercut at 24", T.stopping_criterion_b(h), 24))
    cases.append(("B below minimum", T.stopping_criterion_b([1.0] * 19), None))
    # the incremental tracker used by fit agrees with the pure rules
    for crit, seq in (("A", [float(k % 3) for k in range(1, 117)] + [0.5] * 15),
                      ("B", [100.0 - k for k in range(1, 20)] + [80.0] * 11)):
        tr = T.StopTracker(crit, T.DEFAULT_MIN_EPOCHS[crit], 10)
        for k in range(1, len(seq) + 1):
            tr.update(seq[:k])
        cases.append((f"tracker {crit}", tr.terminal, 121 if crit == "A" else 20))
    bad = [(n, got, want) for n, got, want in cases if got != want]
    ok = not bad
    record(4, ok, f"{len(cases) - len(bad)}/{len(cases)} constructed sequences give the declared terminal epochs"
                  + (f"; mismatches {bad}" if bad else ""))
    assert ok


def test_criterion_5_freezing_contract():
    cfg = M.ModelConfig(d_model=8, n_layers=24, n_heads=2, d_ff=8, window_len=4)
    src = M.init_params(cfg, seed=2)
    mask = TR.build_freeze_mask(cfg, 20)
    rng = np.random.default_rng(0)
    X = rng.random((16, 4, 21)).astype(np.float32)
    y = rng.random(16).astype(np.float32)
    res = TR.finetune(src, cfg, X, y, mask, T.TrainConfig(eta=1e-3, batch_size=8, criterion="B",
                                                          min_epochs=10**6, max_epochs=50))
    frozen = [k for k, f in mask.items() if f]
    trainable = TR.trainable_names(mask)
    bitwise = all(res.final_params[k].data.tobytes() == src[k].data.tobytes() for k in frozen)
    moved = all(res.final_params[k].data.tobytes() != src[k].data.tobytes() for k in trainable)
    # closed form: 4 layers x 16 tensors + pool.w + 3 (W, b) head pairs
    closed = (cfg.n_layers - 20) * 16 + 1 + 2 * len(cfg.head_dims)
    ok = res.epochs_run == 50 and bitwise and moved and len(trainable) == closed
    record(5, ok, f"{res.epochs_run} epochs; {len(frozen)} frozen tensors bitwise identical={bitwise}; "
                  f"{len(trainable)} trainable tensors (closed form {closed}), all updated={moved}")
    assert ok


def test_criterion_6_checkpoint_round_trip(tmp_path):
    cfg = M.ModelConfig(d_model=64, n_layers=2, n_heads=4, d_ff=32, window_len=10)
    pcfg = PipelineConfig(window_len=10)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    C.save_checkpoint(M.init_params(cfg, 7), cfg, pcfg, a)
    params, mcfg, pc = C.load_checkpoint(a)
    C.save_checkpoint(params, mcfg, pc, b)
    identical = a.read_bytes() == b.read_bytes()
    try:
        C.load_checkpoint(a, expect_model=replace(cfg, d_model=32))
        rejected = False
    except C.CheckpointError:
        rejected = True
    ok = identical and rejected
    record(6, ok, f"save-load-save byte identical={identical}; d_model=64 checkpoint rejected for d_model=32={rejected}")
    assert ok


@pytest.fixture(scope="module")
def desk_source():
    """Toy model trained on the source preset under criterion A (min 120, patience 10)."""
    cfg = M.DESK_CONFIG
    train, test, truth = synth.generate(synth.PRESETS["source"])
    pipe = fit_pipeline(train, PipelineConfig(stride=DESK_STRIDE))
    X, y = stack_windows(pipe.train_windows(train))
    t0 = time.perf_counter()
    res = T.fit(X, y, cfg, M.init_params(cfg, 0), T.TrainConfig(eta=DESK_ETA, criterion="A"))
    return {"cfg": cfg, "res": res, "pipe": pipe, "test": test, "truth": truth, "y": y,
            "seconds": time.perf_counter() - t0}


def test_criterion_7_desk_learning_and_transfer(desk_source):
    t0 = time.perf_counter()
    cfg, src = desk_source["cfg"], desk_source["res"]
    m_src = E.evaluate_checkpoint(src.params, cfg, desk_source["test"], desk_source["truth"], desk_source["pipe"])
    base_src = E.constant_baseline(desk_source["y"], desk_source["truth"])

    train, test, truth = synth.generate(synth.PRESETS["target"])
    half = TR.select_fraction(train, 0.5)
    pipe = fit_pipeline(half, PipelineConfig(stride=DESK_STRIDE, expected_conditions=6))
    X, y = stack_windows(pipe.train_windows(half))
    unadapted = E.evaluate_checkpoint(src.params, cfg, test, truth, pipe)
    ft = TR.finetune(src.params, cfg, X, y, TR.build_freeze_mask(cfg, DESK_N_FROZEN),
                     T.TrainConfig(eta=DESK_ETA, criterion="B"))
    tuned = E.evaluate_checkpoint(ft.params, cfg, test, truth, pipe)
    # same budget: as many epochs as the fine-tune ran, snapshot at its last epoch
    scratch_fit = T.fit(X, y, cfg, M.init_params(cfg, 0), T.TrainConfig(eta=DESK_ETA, criterion="B",
                                                                        min_epochs=10**6, max_epochs=ft.epochs_run))
    scratch = E.evaluate_checkpoint(scratch_fit.final_params, cfg, test, truth, pipe)
    elapsed = desk_source["seconds"] + time.perf_counter() - t0

    learn = m_src.rmse < base_src.rmse
    beats_unadapted = tuned.rmse < unadapted.rmse
    beats_scratch = tuned.rmse < scratch.rmse
    ok = learn and beats_unadapted and beats_scratch and elapsed < 1800
    record(7, ok,
           f"source rmse {m_src.rmse:.2f} vs constant {base_src.rmse:.2f} (terminal epoch {src.terminal_epoch}); "
           f"target rmse fine-tuned {tuned.rmse:.2f} vs unadapted {unadapted.rmse:.2f} vs scratch {scratch.rmse:.2f} "
           f"({ft.epochs_run} epochs each); {elapsed:.0f}s (< 1800s)")
    assert ok


def test_criterion_8_reference_numbers_and_smoke():
    readme = Path(__file__).resolve().parents[1] / "README.md"
    text = readme.read_text() if readme.exists() else ""
    documented = all(f"{r:.2f}" in text and f"{s:.2f}" in text for r, s in REFERENCE.values())
    root = cmapss_dir()
    if root is None:
        record(8, documented if documented else False,
               f"reference numbers documented in README={documented}; real-data smoke SKIP (no CMAPSS files)")
        assert documented
        return
    cfg = M.DESK_CONFIG
    train = parse_trajectory_file(root / "train_FD001.txt")
    test = parse_trajectory_file(root / "test_FD001.txt")
    truth = parse_rul_truth(root / "RUL_FD001.txt", len(test))
    pipe = fit_pipeline(train, PipelineConfig(stride=DESK_STRIDE))
    X, y = stack_windows(pipe.train_windows(train))
    res = T.fit(X, y, cfg, M.init_params(cfg, 0), T.TrainConfig(eta=DESK_ETA, criterion="A"))
    m = E.evaluate_checkpoint(res.params, cfg, test, truth, pipe)
    base = E.constant_baseline(y, truth)
    bookkeeping = res.terminal_epoch is None or (res.terminal_epoch >= 121 and res.snapshot_epoch == res.terminal_epoch)
    ok = documented and m.rmse < base.rmse and bookkeeping
    record(8, ok, f"documented={documented}; FD001 toy rmse {m.rmse:.2f} vs constant {base.rmse:.2f}, "
                  f"terminal epoch {res.terminal_epoch}")
    assert ok


def test_criterion_9_cmapss_ingest():
    root = cmapss_dir()
    if root is None:
        record(9, None, "no CMAPSS files in $RULGPT_DATA_DIR; unit and condition counts not checked")
        pytest.skip("CMAPSS data not available")
    found = {}
    for name, spec in CMAPSS_SUBSETS.items():
        train = parse_trajectory_file(root / f"train_{name}.txt")
        test = parse_trajectory_file(root / f"test_{name}.txt")
        _, grouping = detect_conditions(train, spec.conditions)
        found[name] = (len(train), len(test), grouping.k)
    want = {k: (s.train_units, s.test_units, s.conditions) for k, s in CMAPSS_SUBSETS.items()}
    ok = found == want
    record(9, ok, f"(train, test, conditions) per subset {found}")
    assert ok
