"""Held-out AUC of every model on zero-effect cohorts; all should sit near 0.5.

    python scripts/null_calibration.py --config configs/null.yaml --seeds 10 --work /tmp/null
"""
import argparse
import time

from dlebm.experiments import run_seeds
from dlebm.pipeline import PipelineConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/null.yaml")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--work", default="runs/null")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()
    cfg = PipelineConfig.load(args.config, args.overrides)
    t0 = time.perf_counter()
    inside = 0
    for s in range(args.seeds):
        h = run_seeds(cfg, [s], args.work)[0]
        a = h.auc("EBM-DL")
        inside += 0.3 <= a <= 0.7
        others = "  ".join(f"{m} {h.auc(m):.2f}" for m in h.scores)
        print(f"seed {s}: {others}  ({time.perf_counter() - t0:.0f}s)", flush=True)
    print(f"{inside}/{args.seeds} EBM-DL AUCs in [0.3, 0.7]")


if __name__ == "__main__":
    main()
