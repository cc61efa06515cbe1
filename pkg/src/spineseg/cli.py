"""``spineseg`` command line: synth, train, eval, ablation, gradcheck, infer.

Exit codes: 0 ok, 1 config/usage, 2 IO, 3 divergence, 4 gradcheck failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor_core as tc
from .config import RunConfig, load_config
from .data import PhantomSpec, export_slices, generate_phantom, read_volume, write_volume
from .errors import ConfigError, FormatError, GeometryError, ShapeError, SpinesegError
from .losses import combined_loss_from_logits, segmentation_metrics
from .network import init_model
from .training import (
    MANIFEST,
    DivergenceError,
    Trainer,
    datasets_for,
    load_dataset,
    load_model,
    mean_metrics,
    run_ablation,
    sample_name,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4

log = logging.getLogger("spineseg")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _dims(text: str):
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must be N or H,W,D")
    return tuple(parts)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(n: int, dims, seed: int, out_dir: str, noise_sigma: float = 0.1, n_vertebrae: int = 3) -> List[str]:
    try:
        os.makedirs(out_dir, exist_ok=True)
        rows = []
        for i in range(n):
            vol, lab = generate_phantom(PhantomSpec(dims, n_vertebrae, noise_sigma), seed=[seed, i])
            name = sample_name(i)
            write_volume(os.path.join(out_dir, f"{name}.vol.ssv"), vol)
            write_volume(os.path.join(out_dir, f"{name}.lab.ssv"), lab)
            rows.append(f"{name}\t{name}.vol.ssv\t{name}.lab.ssv\n")
        with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as fh:
            fh.write(f"# spineseg synth n={n} dims={','.join(map(str, dims))} seed={seed} "
                     f"noise_sigma={noise_sigma!r} n_vertebrae={n_vertebrae}\n")
            fh.writelines(rows)
    except OSError as exc:
        raise CommandError(f"synth: {exc}", EXIT_IO) from exc
    return [r.split("\t")[0] for r in rows]


def cmd_train(cfg: RunConfig, out_dir: str, resume: Optional[str] = None) -> Trainer:
    train, held_out = datasets_for(cfg)
    if not train:
        raise CommandError("train: no samples (set data.train_dir or data.synth_train)", EXIT_USAGE)
    if resume:
        trainer = Trainer.from_checkpoint(resume, train, held_out)
        remaining = max(cfg.steps - trainer.state.step, 0)
    else:
        trainer = Trainer(cfg, train, held_out)
        remaining = cfg.steps
    try:
        trainer.run(remaining, out_dir=out_dir)
    except DivergenceError as exc:
        raise CommandError(f"train: diverged: {exc}", EXIT_DIVERGED) from exc
    trainer.save(os.path.join(out_dir, "model.ssck"))
    return trainer


def cmd_eval(checkpoint: str, dataset: str, out_dir: str, include_background: bool = True):
    model, _ = _load_model(checkpoint)
    try:
        samples = load_dataset(dataset)
    except FileNotFoundError as exc:
        raise CommandError(f"eval: {exc}", EXIT_IO) from exc
    if not samples:
        raise CommandError("eval: no samples", EXIT_USAGE)
    k = model.config.num_classes
    reports = []
    for name, vol, lab in samples:
        try:
            pred = model.predict(vol)
        except (GeometryError, ShapeError) as exc:
            raise CommandError(f"eval: {name}: {exc}", EXIT_USAGE) from exc
        reports.append((name, segmentation_metrics(pred, lab, k, include_background)))
    miou, mdice, macc = mean_metrics([r for _, r in reports])
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.tsv"), "w", encoding="utf-8") as fh:
        fh.write("sample\tmIoU\tmDice\tmAcc\n")
        for name, r in reports:
            fh.write(f"{name}\t{r.mIoU!r}\t{r.mDice!r}\t{r.mAcc!r}\n")
        fh.write(f"mean\t{miou!r}\t{mdice!r}\t{macc!r}\n")
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as fh:
        for name, r in reports:
            fh.write(r.to_text(f"== {name}"))
            fh.write("\n")
        fh.write(f"== aggregate over {len(reports)} samples\n")
        fh.write(f"mIoU  {miou:.6f}\nmDice {mdice:.6f}\nmAcc  {macc:.6f}\n")
    return reports, (miou, mdice, macc)


def cmd_gradcheck(cfg: RunConfig, probes: int, h: float, corrupt: bool = False):
    """Worst relative error per parameter tensor for ``combined_loss(forward(x))``."""
    if probes < 1:
        raise CommandError("gradcheck: no probes", EXIT_USAGE)
    model = init_model(cfg.model)
    rng = np.random.default_rng(cfg.model.seed)
    dims = tuple(cfg.gradcheck_dims)
    x = rng.normal(size=(cfg.model.in_channels,) + dims)
    labels = rng.integers(0, cfg.model.num_classes, size=dims)
    first = model.params.names()[0]

    def f():
        model.params.zero_grad()
        logits = model.forward(x)
        loss, _, _, dlogits = combined_loss_from_logits(logits, labels, cfg.model.lam, cfg.binary_dice)
        model.backward(dlogits)
        if corrupt:
            model.params.grad(first)[...] *= 1.5
        return loss

    return tc.gradcheck_report(f, model.params, probes=probes, h=h, seed=cfg.model.seed)


def cmd_infer(checkpoint: str, volume_path: str, out_dir: str, export: bool = False,
              labels_path: Optional[str] = None, axis: int = 2) -> np.ndarray:
    model, _ = _load_model(checkpoint)
    try:
        vol = read_volume(volume_path)
    except FileNotFoundError as exc:
        raise CommandError(f"infer: {exc}", EXIT_IO) from exc
    batch = vol[None] if vol.ndim == 3 else vol
    try:
        pred = model.predict(batch)
    except GeometryError as exc:
        c = model.config
        raise CommandError(
            f"infer: {exc}; every extent must be divisible by {c.patch_size * 2 ** (c.num_stages - 1)} "
            f"with each stage's token grid divisible by window {c.window}", EXIT_USAGE) from exc
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.basename(volume_path)
    stem = base[: -len(".vol.ssv")] if base.endswith(".vol.ssv") else os.path.splitext(base)[0]
    write_volume(os.path.join(out_dir, f"{stem}.pred.ssv"), pred.astype(np.uint8))
    if export:
        if labels_path is None and volume_path.endswith(".vol.ssv"):
            sibling = volume_path[: -len(".vol.ssv")] + ".lab.ssv"
            labels_path = sibling if os.path.exists(sibling) else None
        truth = read_volume(labels_path) if labels_path else None
        export_slices(batch[0], truth, pred, axis, out_dir, prefix=stem)
    return pred


def _load_model(checkpoint: str):
    try:
        return load_model(checkpoint)
    except FileNotFoundError as exc:
        raise CommandError(f"cannot open checkpoint: {exc}", EXIT_IO) from exc
    except FormatError as exc:
        raise CommandError(f"bad checkpoint: {exc}", EXIT_IO) from exc
    except (ShapeError, KeyError) as exc:
        raise CommandError(f"checkpoint/config mismatch: {exc}", EXIT_USAGE) from exc


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override model/dataset seed")
    common.add_argument("--config", help="run configuration file (key = value)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results are identical)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="spineseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic phantom volumes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dims", type=_dims, default=(32, 32, 32))
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--n-vertebrae", type=int, default=3)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="continue from an SSCK checkpoint")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--exclude-background", action="store_true")

    sub.add_parser("ablation", parents=[common], help="train and score the four ablation variants")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full model")
    p.add_argument("--probes", type=int, default=None)
    p.add_argument("--h", type=float, default=None)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("infer", parents=[common], help="predict labels for one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--labels", help="ground truth for the exported triptych")
    p.add_argument("--export-slices", action="store_true")
    p.add_argument("--axis", type=int, default=2)
    return parser


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise CommandError(f"{args.command}: --{n} is required", EXIT_USAGE)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "synth":
        _need(args, "out")
        cmd_synth(args.n, args.dims, args.seed or 0, args.out, args.noise_sigma, args.n_vertebrae)
        return EXIT_OK
    if cmd == "gradcheck":
        cfg = load_config(args.config, args.seed) if args.config else RunConfig()
        probes = args.probes if args.probes is not None else cfg.probes
        h = args.h if args.h is not None else cfg.h
        report = cmd_gradcheck(cfg, probes, h, corrupt=args.corrupt_backward)
        worst_name = max(report, key=report.get)
        for name, err in report.items():
            print(f"{name}\t{err:.3e}")
        print(f"worst\t{worst_name}\t{report[worst_name]:.3e}")
        if report[worst_name] >= args.tol:
            print(f"FAIL: {worst_name} relative error {report[worst_name]:.3e} >= {args.tol:g}", file=sys.stderr)
            return EXIT_GRADCHECK
        print("PASS")
        return EXIT_OK
    if cmd == "train":
        _need(args, "config", "out")
        cmd_train(load_config(args.config, args.seed), args.out, resume=args.resume)
        return EXIT_OK
    if cmd == "ablation":
        _need(args, "config", "out")
        try:
            run_ablation(load_config(args.config, args.seed), out_dir=args.out)
        except DivergenceError as exc:
            raise CommandError(f"ablation: diverged: {exc}", EXIT_DIVERGED) from exc
        with open(os.path.join(args.out, "ablation.txt"), encoding="utf-8") as fh:
            print(fh.read(), end="")
        return EXIT_OK
    if cmd == "eval":
        _need(args, "out")
        _, (miou, mdice, macc) = cmd_eval(args.checkpoint, args.dataset, args.out,
                                          include_background=not args.exclude_background)
        print(f"mIoU {miou:.4f}  mDice {mdice:.4f}  mAcc {macc:.4f}")
        return EXIT_OK
    if cmd == "infer":
        _need(args, "out")
        cmd_infer(args.checkpoint, args.volume, args.out, args.export_slices, args.labels, args.axis)
        return EXIT_OK
    raise CommandError(f"unknown command {cmd}", EXIT_USAGE)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    tc.set_threads(args.threads)
    try:
        # BLAS stays single-threaded so reductions keep a fixed order
        with threadpool_limits(limits=1):
            return _dispatch(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, GeometryError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SpinesegError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        tc.set_threads(1)


if __name__ == "__main__":
    sys.exit(main())
