"""Train the four ablation variants on the fixed benchmark and print the table.

    python scripts/run_ablation.py [--config configs/ablation.cfg] [--out runs/ablation] [--threads N]

Exits 1 when the full model does not have the highest mDice.
"""
import argparse
import logging
import os
import sys
import time

from threadpoolctl import threadpool_limits

from spineseg import tensor_core as tc
from spineseg.config import load_config
from spineseg.training import format_ablation_text, run_ablation

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(HERE, os.pardir, "configs", "ablation.cfg"))
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.seed)
    tc.set_threads(args.threads)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        rows = run_ablation(cfg, out_dir=args.out)
    print(format_ablation_text(rows), end="")
    print(f"{(time.perf_counter() - t0) / 60:.1f} min, tables in {args.out}")
    best = max(rows, key=lambda r: r.mDice)
    return 0 if best.name == rows[0].name else 1


if __name__ == "__main__":
    sys.exit(main())
