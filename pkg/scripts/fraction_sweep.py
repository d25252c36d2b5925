"""Fine-tune one source checkpoint on growing fractions of a target subset.

    python3 scripts/fraction_sweep.py --source-ckpt runs/demo/source/checkpoint.bin \
        --data-dir runs/demo/data --subset SYNTGT --out runs/sweep

Appends one metrics row per fraction to <out>/metrics.tsv.
"""

import argparse
from pathlib import Path

from rulgpt import cli
from rulgpt.config import load_config

ROOT = Path(__file__).resolve().parents[1]
FRACTIONS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--source-ckpt", required=True)
    ap.add_argument("--data-dir", required=True)
    ap.add_argument("--subset", required=True)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    ap.add_argument("--fractions", default=",".join(map(str, FRACTIONS)))
    args = ap.parse_args()
    cfg = load_config(args.config, [f"data.subset={args.subset}", "train.criterion=B",
                                    f"transfer.source_checkpoint={args.source_ckpt}"])
    cli.run_finetune(cfg, cli.data_dir(args.data_dir), Path(args.out), [float(p) for p in args.fractions.split(",")])


if __name__ == "__main__":
    main()
