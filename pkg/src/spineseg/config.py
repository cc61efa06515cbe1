"""Flat ``key = value`` run configuration.

Keys are dotted (``model.embed_dim``, ``train.lr``); lists are comma
separated; ``#`` starts a comment. Unknown keys are rejected.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

from .errors import ConfigError
from .fusion import FusionConfig
from .network import ModelConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _str(s: str) -> str:
    return s.strip()


# key -> (section, field, parser)
_KEYS: Dict[str, Tuple[str, str, Callable]] = {
    "model.in_channels": ("model", "in_channels", int),
    "model.num_classes": ("model", "num_classes", int),
    "model.patch_size": ("model", "patch_size", int),
    "model.embed_dim": ("model", "embed_dim", int),
    "model.depths": ("model", "depths", _ints),
    "model.heads": ("model", "heads", _ints),
    "model.window": ("model", "window", int),
    "model.mlp_ratio": ("model", "mlp_ratio", int),
    "model.lambda": ("model", "lam", float),
    "model.use_multiscale": ("model", "use_multiscale", _bool),
    "model.use_adaptive": ("model", "use_adaptive", _bool),
    "model.seed": ("model", "seed", int),
    "fusion.kernel_sizes": ("fusion", "kernel_sizes", _ints),
    "fusion.out_channels": ("fusion", "out_channels", int),
    "train.lr": ("train", "lr", float),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.eps": ("train", "eps", float),
    "train.steps": ("train", "steps", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.eval_interval": ("train", "eval_interval", int),
    "train.checkpoint_interval": ("train", "checkpoint_interval", int),
    "train.binary_dice": ("train", "binary_dice", _bool),
    "data.train_dir": ("train", "train_dir", _str),
    "data.test_dir": ("train", "test_dir", _str),
    "data.synth_train": ("train", "synth_train", int),
    "data.synth_test": ("train", "synth_test", int),
    "data.synth_dims": ("train", "synth_dims", _ints),
    "data.synth_seed": ("train", "synth_seed", int),
    "data.noise_sigma": ("train", "noise_sigma", float),
    "data.n_vertebrae": ("train", "n_vertebrae", int),
    "gradcheck.probes": ("train", "probes", int),
    "gradcheck.h": ("train", "h", float),
    "gradcheck.dims": ("train", "gradcheck_dims", _ints),
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 100
    batch_size: int = 1
    eval_interval: int = 50
    checkpoint_interval: int = 0
    binary_dice: bool = False
    train_dir: str = ""
    test_dir: str = ""
    synth_train: int = 0
    synth_test: int = 0
    synth_dims: Tuple[int, ...] = (32, 32, 32)
    synth_seed: int = 0
    noise_sigma: float = 0.1
    n_vertebrae: int = 3
    probes: int = 5
    h: float = 1e-4
    gradcheck_dims: Tuple[int, ...] = (8, 8, 8)
    text: str = ""

    def validate(self) -> None:
        checks = [
            (self.lr >= 0, "train.lr must be >= 0"),
            (0 <= self.beta1 < 1, "train.beta1 must lie in [0, 1)"),
            (0 <= self.beta2 < 1, "train.beta2 must lie in [0, 1)"),
            (self.eps > 0, "train.eps must be > 0"),
            (self.steps >= 0, "train.steps must be >= 0"),
            (self.batch_size >= 1, "train.batch_size must be >= 1"),
            (self.eval_interval >= 0, "train.eval_interval must be >= 0"),
            (self.checkpoint_interval >= 0, "train.checkpoint_interval must be >= 0"),
            (self.synth_train >= 0 and self.synth_test >= 0, "data.synth_* counts must be >= 0"),
            (len(self.synth_dims) == 3, "data.synth_dims needs three extents"),
            (len(self.gradcheck_dims) == 3, "gradcheck.dims needs three extents"),
            (self.h > 0, "gradcheck.h must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for key in ("train_dir", "test_dir"):
            path = getattr(self, key)
            if path and not os.path.isdir(path):
                raise ConfigError(f"data.{key}: directory {path!r} does not exist")


def parse_config(text: str) -> RunConfig:
    sections: Dict[str, dict] = {"model": {}, "fusion": {}, "train": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name, parse = _KEYS[key]
        try:
            sections[section][name] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None

    model_fields = sections["model"]
    fusion = FusionConfig(in_channels=model_fields.get("in_channels", 1), **sections["fusion"])
    model = ModelConfig(fusion=fusion, **model_fields)
    cfg = RunConfig(model=model, text=text, **sections["train"])
    cfg.validate()
    return cfg


def load_config(path: str, seed: Optional[int] = None) -> RunConfig:
    """Parse ``path``; a ``seed`` override is appended to the text so checkpoints carry it."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if seed is not None:
        text = text.rstrip("\n") + f"\nmodel.seed = {int(seed)}\n"
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    """Serialize ``cfg`` back to config-file text (used when no source text exists)."""
    m, f = cfg.model, cfg.model.fusion
    join = lambda xs: ",".join(str(x) for x in xs)  # noqa: E731
    lines = [
        f"model.in_channels = {m.in_channels}",
        f"model.num_classes = {m.num_classes}",
        f"model.patch_size = {m.patch_size}",
        f"model.embed_dim = {m.embed_dim}",
        f"model.depths = {join(m.depths)}",
        f"model.heads = {join(m.heads)}",
        f"model.window = {m.window}",
        f"model.mlp_ratio = {m.mlp_ratio}",
        f"model.lambda = {m.lam!r}",
        f"model.use_multiscale = {str(m.use_multiscale).lower()}",
        f"model.use_adaptive = {str(m.use_adaptive).lower()}",
        f"model.seed = {m.seed}",
        f"fusion.kernel_sizes = {join(f.kernel_sizes)}",
        f"fusion.out_channels = {f.out_channels}",
        f"train.lr = {cfg.lr!r}",
        f"train.beta1 = {cfg.beta1!r}",
        f"train.beta2 = {cfg.beta2!r}",
        f"train.eps = {cfg.eps!r}",
        f"train.steps = {cfg.steps}",
        f"train.batch_size = {cfg.batch_size}",
        f"train.eval_interval = {cfg.eval_interval}",
        f"train.checkpoint_interval = {cfg.checkpoint_interval}",
        f"train.binary_dice = {str(cfg.binary_dice).lower()}",
        f"data.synth_train = {cfg.synth_train}",
        f"data.synth_test = {cfg.synth_test}",
        f"data.synth_dims = {join(cfg.synth_dims)}",
        f"data.synth_seed = {cfg.synth_seed}",
        f"data.noise_sigma = {cfg.noise_sigma!r}",
        f"data.n_vertebrae = {cfg.n_vertebrae}",
    ]
    if cfg.train_dir:
        lines.append(f"data.train_dir = {cfg.train_dir}")
    if cfg.test_dir:
        lines.append(f"data.test_dir = {cfg.test_dir}")
    return "\n".join(lines) + "\n"
