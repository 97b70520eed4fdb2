"""Train every loss mode on the synthetic corpus and tabulate test metrics.

    python scripts/compare_modes.py [--seeds 0 1 2] [--modes ua-smooth variational] [--out runs/compare]
"""
import argparse
import statistics
import time
from pathlib import Path

from uasmooth.config import load_config, miniature_experiment
from uasmooth.losses import LossMode
from uasmooth.synthetic import synthetic_corpus
from uasmooth.train import train

KEYS = ("au_pr", "au_roc", "f1", "ece")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="defaults to the miniature experiment")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--modes", nargs="+", default=[m.value for m in LossMode])
    p.add_argument("--out", default="runs/compare")
    args = p.parse_args()

    rows = []
    for mode in args.modes:
        cfg = load_config(args.config) if args.config else miniature_experiment()
        cfg.loss.mode = mode
        data = synthetic_corpus(cfg.data.synthetic)
        scores = {k: [] for k in KEYS}
        for seed in args.seeds:
            t0 = time.perf_counter()
            _, record = train(cfg, data, Path(args.out) / f"{mode}-{seed}", seed=seed)
            for k in KEYS:
                scores[k].append(record.test.aggregates[k])
            print(f"{mode} seed {seed}: best epoch {record.best_epoch}, {time.perf_counter() - t0:.0f}s")
        rows.append((mode, scores))

    print(f"\n{'mode':<14}" + "".join(f"{k:>18}" for k in KEYS))
    for mode, scores in rows:
        cells = []
        for k in KEYS:
            vals = [v for v in scores[k] if v is not None]
            sd = statistics.pstdev(vals) if len(vals) > 1 else 0.0
            cells.append(f"{statistics.fmean(vals):.4f} +- {sd:.4f}" if vals else "n/a")
        print(f"{mode:<14}" + "".join(f"{c:>18}" for c in cells))


if __name__ == "__main__":
    main()
