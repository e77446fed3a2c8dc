"""ROI recovery over seeds: do the top-3 ROIs touch a planted effect region?

    python scripts/roi_recovery.py --config configs/roi_recovery.yaml --seeds 10 --work /tmp/roi
"""
import argparse
import time

from dlebm.experiments import roi_recovery
from dlebm.pipeline import PipelineConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/roi_recovery.yaml")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--work", default="runs/roi_recovery")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()
    cfg = PipelineConfig.load(args.config, args.overrides)
    t0 = time.perf_counter()
    hits = 0
    for s in range(args.seeds):
        r = roi_recovery(cfg, [s], args.work)[0]
        hits += r.hit
        print(f"seed {s}: hit={r.hit} planted regions under top-3 ROIs={r.top_regions} "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)
    print(f"{hits}/{args.seeds} runs recovered a planted region")


if __name__ == "__main__":
    main()
