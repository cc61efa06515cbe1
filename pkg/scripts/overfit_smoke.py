"""Overfit the default model on one synthetic phantom and report foreground mDice.

    python scripts/overfit_smoke.py [--config configs/smoke.cfg] [--out runs/smoke]
"""
import argparse
import os
import sys
import time

from threadpoolctl import threadpool_limits

from spineseg.config import load_config
from spineseg.training import Trainer, datasets_for, evaluate, mean_metrics

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(HERE, os.pardir, "configs", "smoke.cfg"))
    ap.add_argument("--out", default=None)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()

    cfg = load_config(args.config, args.seed)
    train, _ = datasets_for(cfg)
    trainer = Trainer(cfg, train)
    t0 = time.perf_counter()

    def show(t, step, losses):
        if step % 25 == 0 or step == cfg.steps:
            fg = mean_metrics(evaluate(t.model, train, include_background=False))[1]
            print(f"step {step:4d}  loss {losses[0]:.5f}  ce {losses[1]:.5f}  dice {losses[2]:.5f}  "
                  f"fg mDice {fg:.4f}  ({time.perf_counter() - t0:.0f}s)", flush=True)

    with threadpool_limits(limits=1):
        trainer.run(cfg.steps, out_dir=args.out, callback=show)
        fg = mean_metrics(evaluate(trainer.model, train, include_background=False))[1]
    if args.out:
        trainer.save(os.path.join(args.out, "model.ssck"))
    print(f"final foreground mDice {fg:.4f}")
    return 0 if fg >= 0.90 else 1


if __name__ == "__main__":
    sys.exit(main())
