"""Train on the synthetic source preset, then fine-tune on half the target.

Writes both presets to <out>/data, runs ``train`` and ``finetune`` through the
CLI entry points, and trains a from-scratch baseline on the same target half
for the same number of epochs.

    python3 scripts/desk_transfer_demo.py --out runs/demo
"""

import argparse
from dataclasses import replace
from pathlib import Path

from rulgpt import cli, synth
from rulgpt import evaluation as E
from rulgpt import model as M
from rulgpt import train as T
from rulgpt.config import load_config
from rulgpt.preprocess import fit_pipeline, stack_windows
from rulgpt.transfer import select_fraction

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--plot", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    data = out / "data"
    src_spec, tgt_spec = synth.PRESETS["source"], synth.PRESETS["target"]
    synth.write_files(src_spec, data)
    synth.write_files(tgt_spec, data)

    plot = ["output.plot=true"] if args.plot else []
    cfg = load_config(args.config, [f"data.subset={src_spec.name}", *plot])
    cli.run_train(cfg, data, out / "source")

    ft_cfg = load_config(args.config, [f"data.subset={tgt_spec.name}", "train.criterion=B",
                                       f"transfer.source_checkpoint={out / 'source' / 'checkpoint.bin'}", *plot])
    cli.run_finetune(ft_cfg, data, out / "target", [ft_cfg.transfer.fraction])

    # from-scratch comparison with the fine-tune's epoch budget
    log = (out / "target" / f"finetune_p{ft_cfg.transfer.fraction:g}" / "loss_log.tsv").read_text().splitlines()
    budget = len(log) - 1
    _, train, test, truth = cli.load_subset(data, tgt_spec.name)
    half = select_fraction(train, ft_cfg.transfer.fraction)
    pipe = fit_pipeline(half, replace(cfg.pipeline, expected_conditions=tgt_spec.n_conditions))
    X, y = stack_windows(pipe.train_windows(half))
    res = T.fit(X, y, cfg.model, M.init_params(cfg.model, cfg.train.seed),
                replace(cfg.train, criterion="B", min_epochs=10**6, max_epochs=budget))
    m = E.evaluate_checkpoint(res.final_params, cfg.model, test, truth, pipe)
    print(f"{tgt_spec.name} from scratch ({budget} epochs): rmse {m.rmse:.4f} score {m.score:.4f}")


if __name__ == "__main__":
    main()
