"""EBM-DL vs EBM-V held-out AUC on interaction-only cohorts, pooled over seeds.

    python scripts/dl_vs_v.py --config configs/interaction.yaml --seeds 10 --work /tmp/dlv
"""
import argparse
import time

from dlebm.experiments import pooled_comparison, run_seeds
from dlebm.pipeline import PipelineConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/interaction.yaml")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--work", default="runs/dl_vs_v")
    ap.add_argument("--reps", type=int, default=2000)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()
    cfg = PipelineConfig.load(args.config, args.overrides)
    t0 = time.perf_counter()
    results = []
    for s in range(args.seeds):
        h = run_seeds(cfg, [s], args.work)[0]
        results.append(h)
        print(f"seed {s}: EBM-DL {h.auc('EBM-DL'):.3f}  EBM-V {h.auc('EBM-V'):.3f}  "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)
    pc = pooled_comparison(results, reps=args.reps)
    print(f"EBM-DL wins {pc.wins}/{args.seeds}; pooled dAUC {pc.diff:+.3f}, paired bootstrap p={pc.p:.3g}")


if __name__ == "__main__":
    main()
