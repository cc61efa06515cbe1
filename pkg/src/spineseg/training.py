"""Adam training loop, checkpoint round trips, evaluation and the ablation harness."""
from __future__ import annotations

import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ck
from .config import RunConfig, format_config, parse_config
from .data import PhantomSpec, generate_phantom, read_volume
from .errors import SpinesegError
from .losses import MetricsReport, combined_loss_from_logits, segmentation_metrics
from .network import SegmentationModel, ablate, init_model

log = logging.getLogger(__name__)

Sample = Tuple[str, np.ndarray, np.ndarray]  # (name, volume[C,H,W,D], labels[H,W,D])

ABLATION_ROWS = (
    ("Ours", None),
    ("Remove multi-scale fusion", "multiscale"),
    ("Removing Adaptive Attention", "adaptive"),
    ("Baseline", "both"),
)


class DivergenceError(SpinesegError, FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def sample_name(i: int) -> str:
    return f"sample_{i:04d}"


def synth_sample(i: int, dims, seed: int, noise_sigma: float = 0.1, n_vertebrae: int = 3) -> Sample:
    vol, lab = generate_phantom(PhantomSpec(tuple(dims), n_vertebrae, noise_sigma), seed=[seed, i])
    return sample_name(i), vol[None], lab.astype(np.int64)


def synth_dataset(indices: Sequence[int], dims, seed: int, noise_sigma=0.1, n_vertebrae=3) -> List[Sample]:
    return [synth_sample(i, dims, seed, noise_sigma, n_vertebrae) for i in indices]


MANIFEST = "manifest.tsv"


def load_dataset(directory: str) -> List[Sample]:
    """Read a directory written by ``synth`` (its manifest lists the sample pairs)."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"dataset directory {directory!r} does not exist")
    path = os.path.join(directory, MANIFEST)
    samples = []
    if not os.path.exists(path):
        return samples
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            name, vol_file, lab_file = line.rstrip("\n").split("\t")
            vol = read_volume(os.path.join(directory, vol_file))
            lab = read_volume(os.path.join(directory, lab_file)).astype(np.int64)
            samples.append((name, vol[None] if vol.ndim == 3 else vol, lab))
    return samples


def datasets_for(cfg: RunConfig) -> Tuple[List[Sample], List[Sample]]:
    """Training and held-out samples named by ``cfg`` (directories win over synthesis)."""
    if cfg.train_dir:
        train = load_dataset(cfg.train_dir)
    else:
        train = synth_dataset(range(cfg.synth_train), cfg.synth_dims, cfg.synth_seed,
                              cfg.noise_sigma, cfg.n_vertebrae)
    if cfg.test_dir:
        test = load_dataset(cfg.test_dir)
    else:
        start = cfg.synth_train
        test = synth_dataset(range(start, start + cfg.synth_test), cfg.synth_dims, cfg.synth_seed,
                             cfg.noise_sigma, cfg.n_vertebrae)
    return train, test


# ---------------------------------------------------------------------------
# optimizer and trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    step: int
    m1: "OrderedDict[str, np.ndarray]"
    m2: "OrderedDict[str, np.ndarray]"
    best_mdice: float = float("-inf")


def adam_update(params, state: TrainState, lr, beta1, beta2, eps) -> None:
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, value in params.items():
        g = params.grad(name)
        m1, m2 = state.m1[name], state.m2[name]
        m1 *= beta1
        m1 += (1.0 - beta1) * g
        m2 *= beta2
        m2 += (1.0 - beta2) * (g * g)
        value -= lr * (m1 / c1) / (np.sqrt(m2 / c2) + eps)


def evaluate(model: SegmentationModel, samples: Sequence[Sample],
             include_background: bool = True) -> List[MetricsReport]:
    k = model.config.num_classes
    return [segmentation_metrics(model.predict(vol), lab, k, include_background) for _, vol, lab in samples]


def mean_metrics(reports: Sequence[MetricsReport]) -> Tuple[float, float, float]:
    n = len(reports)
    return (
        sum(r.mIoU for r in reports) / n,
        sum(r.mDice for r in reports) / n,
        sum(r.mAcc for r in reports) / n,
    )


class Trainer:
    """Single-process trainer; the sample order is a pure function of ``(seed, step)``."""

    def __init__(self, cfg: RunConfig, train: Sequence[Sample], held_out: Sequence[Sample] = (),
                 config_text: Optional[str] = None):
        if not train:
            raise SpinesegError("no training samples")
        self.cfg = cfg
        self.config_text = config_text if config_text is not None else (cfg.text or format_config(cfg))
        self.train_set = list(train)
        self.held_out = list(held_out)
        self.model = init_model(cfg.model)
        zeros = lambda: OrderedDict((n, np.zeros_like(v)) for n, v in self.model.params.items())  # noqa: E731
        self.state = TrainState(step=0, m1=zeros(), m2=zeros())

    def sample_for(self, step: int, j: int = 0) -> Sample:
        rng = np.random.default_rng([self.cfg.model.seed, step, j])
        return self.train_set[int(rng.integers(len(self.train_set)))]

    def loss_at(self, step: int) -> Tuple[float, float, float]:
        """Loss the next update (``step``) would log, without touching gradients."""
        b = self.cfg.batch_size
        tot = np.zeros(3)
        for j in range(b):
            _, vol, lab = self.sample_for(step, j)
            logits = self.model.forward(vol)
            self.model._cache = None
            loss, ce, dl, _ = combined_loss_from_logits(logits, lab, self.cfg.model.lam, self.cfg.binary_dice)
            tot += (loss, ce, dl)
        tot /= b
        return float(tot[0]), float(tot[1]), float(tot[2])

    def train_step(self) -> Tuple[float, float, float]:
        cfg = self.cfg
        step = self.state.step + 1
        params = self.model.params
        params.zero_grad()
        b = cfg.batch_size
        tot = np.zeros(3)
        for j in range(b):
            _, vol, lab = self.sample_for(step, j)
            logits = self.model.forward(vol)
            loss, ce, dl, dlogits = combined_loss_from_logits(logits, lab, cfg.model.lam, cfg.binary_dice)
            if not np.isfinite(loss):
                self.model._cache = None
                raise DivergenceError(step, loss)
            self.model.backward(dlogits / b)
            tot += (loss, ce, dl)
        tot /= b
        self.state.step = step
        adam_update(params, self.state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        return float(tot[0]), float(tot[1]), float(tot[2])

    def evaluate(self, samples: Optional[Sequence[Sample]] = None) -> List[MetricsReport]:
        if samples is None:
            samples = self.held_out or self.train_set
        return evaluate(self.model, samples)

    def run(self, steps: int, out_dir: Optional[str] = None,
            callback: Optional[Callable[["Trainer", int, Tuple[float, float, float]], None]] = None,
            log_name: str = "train_log.tsv") -> List[Tuple[float, float, float]]:
        """Run ``steps`` more updates, logging and checkpointing into ``out_dir`` if given."""
        cfg = self.cfg
        fh = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            log_path = os.path.join(out_dir, log_name)
            fresh = self.state.step == 0 or not os.path.exists(log_path)
            fh = open(log_path, "w" if fresh else "a", encoding="utf-8")
            if fresh:
                fh.write("step\tloss\tce\tdice\tmIoU\tmDice\tmAcc\n")
        history = []
        try:
            for _ in range(steps):
                losses = self.train_step()
                history.append(losses)
                step = self.state.step
                metrics = ("-", "-", "-")
                if cfg.eval_interval and step % cfg.eval_interval == 0:
                    miou, mdice, macc = mean_metrics(self.evaluate())
                    self.state.best_mdice = max(self.state.best_mdice, mdice)
                    metrics = (repr(miou), repr(mdice), repr(macc))
                    log.info("step %d loss %.6f mDice %.4f", step, losses[0], mdice)
                if fh:
                    fh.write("\t".join([str(step)] + [repr(v) for v in losses] + list(metrics)) + "\n")
                    fh.flush()
                    if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                        self.save(os.path.join(out_dir, f"ckpt_step{step:06d}.ssck"))
                if callback:
                    callback(self, step, losses)
        finally:
            if fh:
                fh.close()
        return history

    # -- persistence -------------------------------------------------------

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict(self.model.params.items())
        for name in self.model.params:
            out[name + ".m1"] = self.state.m1[name]
        for name in self.model.params:
            out[name + ".m2"] = self.state.m2[name]
        out["__train__.step"] = np.array([float(self.state.step)])
        out["__train__.best_mdice"] = np.array([self.state.best_mdice])
        return out

    def save(self, path: str) -> None:
        ck.save_checkpoint(path, self.config_text, self.tensors())

    @classmethod
    def from_checkpoint(cls, path: str, train: Sequence[Sample] = (), held_out: Sequence[Sample] = (),
                        ) -> "Trainer":
        text, tensors = ck.load_checkpoint(path)
        cfg = parse_config(text)
        self = cls.__new__(cls)
        self.cfg = cfg
        self.config_text = text
        self.train_set = list(train)
        self.held_out = list(held_out)
        self.model = init_model(cfg.model)
        names = self.model.params.names()
        self.model.params.load_state_dict({n: tensors[n] for n in tensors if "." in n
                                           and not n.endswith((".m1", ".m2")) and not n.startswith("__train__")})
        m1 = OrderedDict((n, tensors.get(n + ".m1", np.zeros_like(self.model.params[n])).copy()) for n in names)
        m2 = OrderedDict((n, tensors.get(n + ".m2", np.zeros_like(self.model.params[n])).copy()) for n in names)
        step = int(tensors["__train__.step"][0]) if "__train__.step" in tensors else 0
        best = float(tensors["__train__.best_mdice"][0]) if "__train__.best_mdice" in tensors else float("-inf")
        self.state = TrainState(step=step, m1=m1, m2=m2, best_mdice=best)
        return self


def load_model(path: str) -> Tuple[SegmentationModel, str]:
    """Model weights and the config text stored in an SSCK checkpoint."""
    trainer = Trainer.from_checkpoint(path)
    return trainer.model, trainer.config_text


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------


@dataclass
class AblationRow:
    name: str
    num_params: int
    mIoU: float
    mDice: float
    mAcc: float
    final_loss: float


def variant_config(cfg: RunConfig, which: Optional[str]) -> Tuple[RunConfig, str]:
    if which is None:
        model = cfg.model
    else:
        model = ablate(cfg.model, which)
    text = (cfg.text or format_config(cfg)).rstrip("\n") + (
        f"\n# ablation variant\nmodel.use_multiscale = {str(model.use_multiscale).lower()}"
        f"\nmodel.use_adaptive = {str(model.use_adaptive).lower()}\n"
    )
    return replace(cfg, model=model, text=text), text


def run_ablation(cfg: RunConfig, out_dir: Optional[str] = None,
                 train: Optional[Sequence[Sample]] = None,
                 test: Optional[Sequence[Sample]] = None) -> List[AblationRow]:
    """Train the four variants with identical data and schedule; score on the held-out split."""
    if train is None or test is None:
        train, test = datasets_for(cfg)
    if not test:
        raise SpinesegError("ablation needs a held-out split (data.test_dir or data.synth_test)")
    rows = []
    for label, which in ABLATION_ROWS:
        vcfg, text = variant_config(cfg, which)
        trainer = Trainer(vcfg, train, held_out=test, config_text=text)
        sub = os.path.join(out_dir, _slug(label)) if out_dir else None
        history = trainer.run(vcfg.steps, out_dir=sub)
        if sub:
            trainer.save(os.path.join(sub, "model.ssck"))
        miou, mdice, macc = mean_metrics(evaluate(trainer.model, test))
        log.info("%s: mIoU %.4f mDice %.4f mAcc %.4f", label, miou, mdice, macc)
        rows.append(AblationRow(label, trainer.model.num_params(), miou, mdice, macc,
                                history[-1][0] if history else float("nan")))
    if out_dir:
        with open(os.path.join(out_dir, "ablation.tsv"), "w", encoding="utf-8") as fh:
            fh.write(format_ablation_tsv(rows))
        with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_ablation_text(rows))
    return rows


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label.lower()).strip("_")


def format_ablation_tsv(rows: Sequence[AblationRow]) -> str:
    lines = ["model\tparams\tmIoU\tmDice\tmAcc"]
    for r in rows:
        lines.append(f"{r.name}\t{r.num_params}\t{r.mIoU!r}\t{r.mDice!r}\t{r.mAcc!r}")
    return "\n".join(lines) + "\n"


def format_ablation_text(rows: Sequence[AblationRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'Model':<{width}}  {'params':>8}  {'mIoU':>6}  {'mDice':>6}  {'mAcc':>6}"]
    for r in rows:
        lines.append(
            f"{r.name:<{width}}  {r.num_params:>8d}  {100 * r.mIoU:6.1f}  {100 * r.mDice:6.1f}  {100 * r.mAcc:6.1f}"
        )
    return "\n".join(lines) + "\n"
