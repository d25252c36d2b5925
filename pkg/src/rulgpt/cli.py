"""Command line: validate, synth, train, finetune, evaluate.

Data directories hold CMAPSS-named files: ``train_<S>.txt``, ``test_<S>.txt``
and ``RUL_<S>.txt``. Synthetic subsets additionally carry ``spec_<S>.txt``.
``RULGPT_DATA_DIR`` overrides the data directory of every command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import synth
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .evaluation import Metrics, constant_baseline, evaluate_checkpoint
from .ingest import CMAPSS_SUBSETS, IngestError, SubsetSpec, parse_rul_truth, parse_trajectory_file, validate_subset
from .model import ModelConfig, init_params
from .preprocess import FittedPipeline, PipelineConfig, PreprocessError, fit_pipeline, stack_windows
from .train import FitResult, TrainConfig, fit, format_loss_line
from .transfer import TransferError, build_freeze_mask, finetune, select_fraction

log = logging.getLogger("rulgpt")

DATA_ENV = "RULGPT_DATA_DIR"
METRICS_FIELDS = ("subset", "seed", "L", "alpha", "eta", "lambda", "p", "n_frozen",
                  "terminal_epoch", "rmse", "score")


class CommandError(Exception):
    pass


# ---------------------------------------------------------------- data access


def data_dir(arg: str | None) -> Path:
    d = os.environ.get(DATA_ENV) or arg
    if not d:
        raise CommandError(f"no data directory (pass --data-dir or set {DATA_ENV})")
    return Path(d)


def subset_paths(root: Path, subset: str) -> dict[str, Path]:
    return {
        "train": root / f"train_{subset}.txt",
        "test": root / f"test_{subset}.txt",
        "truth": root / f"RUL_{subset}.txt",
        "spec": root / f"spec_{subset}.txt",
    }


def subset_spec(root: Path, subset: str) -> SubsetSpec:
    if subset in CMAPSS_SUBSETS:
        return CMAPSS_SUBSETS[subset]
    path = subset_paths(root, subset)["spec"]
    if not path.exists():
        raise CommandError(f"unknown subset {subset!r} and no {path.name} in {root}")
    return synth.read_spec_file(path)


def load_subset(root: Path, subset: str):
    paths = subset_paths(root, subset)
    for key in ("train", "test", "truth"):
        if not paths[key].exists():
            raise CommandError(f"missing {key} file {paths[key]}")
    spec = subset_spec(root, subset)
    train = parse_trajectory_file(paths["train"], subset)
    test = parse_trajectory_file(paths["test"], subset)
    truth = parse_rul_truth(paths["truth"], len(test))
    return spec, train, test, truth


# ---------------------------------------------------------------- outputs


def append_metrics(path: Path, row: dict) -> None:
    """One row per run under a fixed header; creates the file on first use."""
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a") as fh:
        if new:
            fh.write("\t".join(METRICS_FIELDS) + "\n")
        fh.write("\t".join(str(row[k]) for k in METRICS_FIELDS) + "\n")


def metrics_row(subset: str, cfg: ExperimentConfig, m: Metrics, terminal, p="", n_frozen="") -> dict:
    return {
        "subset": subset, "seed": cfg.train.seed, "L": cfg.pipeline.window_len, "alpha": cfg.pipeline.alpha,
        "eta": cfg.train.eta, "lambda": cfg.train.lam, "p": p, "n_frozen": n_frozen,
        "terminal_epoch": "" if terminal is None else terminal,
        "rmse": f"{m.rmse:.6f}", "score": f"{m.score:.6f}",
    }


class LossLog:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w")
        self.fh.write("epoch\tloss\trolling_variance\n")

    def __call__(self, epoch, loss, var):
        self.fh.write(format_loss_line(epoch, loss, var) + "\n")
        self.fh.flush()
        log.info("epoch %d loss %.6g", epoch, loss)

    def close(self):
        self.fh.close()


def write_plots(out: Path, history, m: Metrics) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(history) + 1), history)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(out / "loss_curve.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(m.truths, m.predictions, s=8)
    hi = max(m.truths.max(), m.predictions.max(), 1.0)
    ax.plot([0, hi], [0, hi], "k--", lw=0.8)
    ax.set_xlabel("true RUL (cycles)")
    ax.set_ylabel("predicted RUL (cycles)")
    fig.tight_layout()
    fig.savefig(out / "pred_vs_true.png", dpi=120)
    plt.close(fig)


def _pipeline_cfg(cfg: ExperimentConfig, spec: SubsetSpec) -> PipelineConfig:
    if "pipeline.expected_conditions" in cfg.explicit:
        return cfg.pipeline
    return replace(cfg.pipeline, expected_conditions=spec.conditions)


def _windows(pipe: FittedPipeline, train):
    return stack_windows(pipe.train_windows(train))


# ---------------------------------------------------------------- commands


def cmd_validate(args) -> int:
    root = data_dir(args.data_dir)
    spec, train, test, truth = load_subset(root, args.subset)
    ok = True
    for split, ts in (("train", train), ("test", test)):
        rep = validate_subset(ts, spec, split)
        print(f"[{split}]")
        for line in rep.lines():
            print(line)
        ok &= rep.passed
    print(f"truth\t{len(truth)} values")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    spec = synth.PRESETS[args.preset]
    overrides = {k: getattr(args, k) for k in ("seed", "n_units", "n_conditions", "mean_life", "noise_std", "name")
                 if getattr(args, k) is not None}
    if args.shape:
        overrides["degradation_shape"] = args.shape
    spec = replace(spec, **overrides)
    paths = synth.write_files(spec, args.out)
    for p in paths.values():
        print(p)
    return 0


def run_train(cfg: ExperimentConfig, root: Path, out: Path, init_checkpoint: str | None = None
              ) -> tuple[FitResult, Metrics]:
    """Fit from scratch, or from ``init_checkpoint`` (e.g. externally converted
    pretrained weights in this package's checkpoint format)."""
    spec, train, test, truth = load_subset(root, cfg.subset)
    pcfg = _pipeline_cfg(cfg, spec)
    pipe = fit_pipeline(train, pcfg)
    X, y = _windows(pipe, train)
    mcfg = replace(cfg.model, n_channels=X.shape[2])
    if init_checkpoint:
        params, _, _ = load_checkpoint(init_checkpoint, expect_model=mcfg)
    else:
        params = init_params(mcfg, seed=cfg.train.seed)
    out.mkdir(parents=True, exist_ok=True)
    loss_log = LossLog(out / "loss_log.tsv")
    try:
        res = fit(X, y, mcfg, params, replace(cfg.train, criterion="A") if "train.criterion" not in cfg.explicit
                  else cfg.train, on_epoch=loss_log)
    finally:
        loss_log.close()
    save_checkpoint(res.params, mcfg, pcfg, out / "checkpoint.bin")
    m = evaluate_checkpoint(res.params, mcfg, test, truth, pipe)
    base = constant_baseline(y, truth, pcfg.rul_cap)
    append_metrics(out / "metrics.tsv", metrics_row(cfg.subset, cfg, m, res.terminal_epoch))
    print(f"{cfg.subset}: rmse {m.rmse:.4f} score {m.score:.4f} (constant baseline rmse {base.rmse:.4f}) "
          f"terminal epoch {res.terminal_epoch} after {res.epochs_run} epochs")
    if cfg.plot:
        write_plots(out, res.history, m)
    return res, m


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    run_train(cfg, data_dir(args.data_dir or cfg.data_dir), Path(cfg.out_dir), args.init_ckpt)
    return 0


def _fractions(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def run_finetune(cfg: ExperimentConfig, root: Path, out: Path, fractions: list[float]) -> list[Metrics]:
    tcfg = cfg.transfer
    if not tcfg.source_checkpoint:
        raise CommandError("finetune needs transfer.source_checkpoint (or --source-ckpt)")
    for p in fractions:
        if not 0.0 < p <= 1.0:
            raise CommandError(f"fraction {p} outside (0, 1]")
    expect = None
    if any(k.startswith("model.") for k in cfg.explicit):
        expect = replace(cfg.model, n_channels=21)
    src_params, mcfg, src_pcfg = load_checkpoint(tcfg.source_checkpoint, expect_model=expect)
    spec, train, test, truth = load_subset(root, cfg.subset)
    pcfg = replace(src_pcfg, expected_conditions=spec.conditions)
    mask = build_freeze_mask(mcfg, tcfg.n_frozen, freeze_pool=tcfg.freeze_pool)
    train_cfg = replace(cfg.train, criterion="B", min_epochs=None) if "train.min_epochs" not in cfg.explicit \
        else replace(cfg.train, criterion="B")
    results = []
    for p in fractions:
        part = select_fraction(train, p)
        pipe = fit_pipeline(part, pcfg)
        X, y = _windows(pipe, part)
        run_dir = out / f"finetune_p{p:g}"
        loss_log = LossLog(run_dir / "loss_log.tsv")
        try:
            res = finetune(src_params, mcfg, X, y, mask, train_cfg, mask_cfg=mcfg, on_epoch=loss_log)
        finally:
            loss_log.close()
        save_checkpoint(res.params, mcfg, pcfg, run_dir / "checkpoint.bin")
        m = evaluate_checkpoint(res.params, mcfg, test, truth, pipe)
        row_cfg = replace(cfg, pipeline=pcfg)
        append_metrics(out / "metrics.tsv", metrics_row(cfg.subset, row_cfg, m, res.terminal_epoch, p, tcfg.n_frozen))
        print(f"{cfg.subset} p={p:g}: rmse {m.rmse:.4f} score {m.score:.4f} terminal epoch {res.terminal_epoch}")
        if cfg.plot:
            write_plots(run_dir, res.history, m)
        results.append(m)
    return results


def cmd_finetune(args) -> int:
    cfg = _config_from_args(args)
    fractions = _fractions(args.fraction) if args.fraction else [cfg.transfer.fraction]
    run_finetune(cfg, data_dir(args.data_dir or cfg.data_dir), Path(cfg.out_dir), fractions)
    return 0


def run_evaluate(checkpoint: Path, root: Path, subset: str, out: Path | None) -> Metrics:
    params, mcfg, pcfg = load_checkpoint(checkpoint)
    spec, train, test, truth = load_subset(root, subset)
    pcfg = replace(pcfg, expected_conditions=spec.conditions)
    pipe = fit_pipeline(train, pcfg)
    m = evaluate_checkpoint(params, mcfg, test, truth, pipe)
    if out is not None:
        row = {"subset": subset, "seed": "", "L": pcfg.window_len, "alpha": pcfg.alpha, "eta": "", "lambda": "",
               "p": "", "n_frozen": "", "terminal_epoch": "", "rmse": f"{m.rmse:.6f}", "score": f"{m.score:.6f}"}
        append_metrics(out, row)
    print(f"{subset}: rmse {m.rmse:.4f} score {m.score:.4f} over {m.n} units")
    return m


def cmd_evaluate(args) -> int:
    run_evaluate(Path(args.checkpoint), data_dir(args.data_dir), args.subset,
                 Path(args.out) if args.out else None)
    return 0


def _config_from_args(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    for flag, key in (("subset", "data.subset"), ("out", "output.dir"), ("source_ckpt", "transfer.source_checkpoint"),
                      ("n_frozen", "transfer.n_frozen"), ("seed", "train.seed")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    if getattr(args, "plot", False):
        overrides.append("output.plot=true")
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rulgpt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse a subset and check it against its dataset table entry")
    p.add_argument("--data-dir")
    p.add_argument("--subset", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth", help="write a synthetic CMAPSS-format subset")
    p.add_argument("--preset", choices=sorted(synth.PRESETS), default="source")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-units", type=int)
    p.add_argument("--n-conditions", type=int)
    p.add_argument("--mean-life", type=int)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--shape", choices=["linear", "exponential"])
    p.add_argument("--name")
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "train from scratch (criterion A) and evaluate"),
                                 ("finetune", cmd_finetune, "fine-tune a source checkpoint (criterion B)")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--data-dir")
        p.add_argument("--subset")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--plot", action="store_true", help="write loss and prediction plots")
        if name == "train":
            p.add_argument("--init-ckpt", help="start from this checkpoint instead of a fresh init")
        if name == "finetune":
            p.add_argument("--source-ckpt")
            p.add_argument("--fraction", help="target data fraction, or a comma list for a sweep")
            p.add_argument("--n-frozen", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a subset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--subset", required=True)
    p.add_argument("--out", help="metrics file to append to")
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, CheckpointError, IngestError, PreprocessError, TransferError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
