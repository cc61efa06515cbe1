"""The full segmentation model: fused stem, Swin encoder, U-Net decoder.

Pipeline for an input ``[C,H,W,D]``::

    stem   multi-scale fusion (or one 3^3 conv when ablated) + GELU  -> s0
    embed  patch_size-strided conv                                   -> t0
    stage  i: depth[i] Swin blocks (shift alternating 0, window//2),
           then a 2-strided conv doubling the width (all but last stage)
    decode 2x transposed conv, concat the 1x1x1-projected skip,
           two 3^3 conv+GELU, per stage
    final  patch_size transposed conv, concat projected s0, two 3^3 conv+GELU,
           1x1x1 head to K class logits
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Tuple

import numpy as np

from . import tensor_core as tc
from .attention import SwinBlock, WindowSpec
from .errors import ConfigError, GeometryError, StateError
from .fusion import FusionConfig, MultiScaleFusion
from .layers import GELU, Conv3d, ConvTranspose3d


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 4
    patch_size: int = 2
    embed_dim: int = 24
    depths: Tuple[int, ...] = (2, 2)
    heads: Tuple[int, ...] = (3, 3)
    window: int = 2
    mlp_ratio: int = 2
    fusion: FusionConfig = field(default_factory=FusionConfig)
    lam: float = 1.0
    use_multiscale: bool = True
    use_adaptive: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def stem_channels(self) -> int:
        return self.fusion.out_channels

    def stage_dim(self, i: int) -> int:
        return self.embed_dim * 2**i

    def validate(self) -> None:
        checks = [
            (self.in_channels >= 1, "model.in_channels must be >= 1"),
            (self.num_classes >= 2, "model.num_classes must be >= 2"),
            (self.patch_size >= 1, "model.patch_size must be >= 1"),
            (self.embed_dim >= 1, "model.embed_dim must be >= 1"),
            (self.window >= 1, "model.window must be >= 1"),
            (self.mlp_ratio >= 1, "model.mlp_ratio must be >= 1"),
            (len(self.depths) >= 1, "model.depths must list at least one stage"),
            (len(self.depths) == len(self.heads), "model.depths and model.heads differ in length"),
            (all(d >= 1 for d in self.depths), "model.depths entries must be >= 1"),
            (all(h >= 1 for h in self.heads), "model.heads entries must be >= 1"),
            (self.lam >= 0, "model.lambda must be >= 0"),
            (self.fusion.in_channels == self.in_channels,
             "fusion.in_channels must equal model.in_channels"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for i, h in enumerate(self.heads):
            if self.embed_dim % h:
                raise ConfigError(f"model.embed_dim {self.embed_dim} is not divisible by heads[{i}]={h}")

    def check_geometry(self, extents) -> None:
        """Raise :class:`GeometryError` naming the first axis the network cannot tile."""
        factor = self.patch_size * 2 ** (self.num_stages - 1)
        for axis, n in zip("HWD", extents):
            if n % factor:
                raise GeometryError(
                    f"axis {axis}: extent {n} must be divisible by patch_size*2^(stages-1) = {factor}"
                )
            grid = n // self.patch_size
            for i in range(self.num_stages):
                if (grid >> i) % self.window:
                    raise GeometryError(
                        f"axis {axis}: stage {i} token extent {grid >> i} is not divisible by window {self.window}"
                    )


def ablate(config: ModelConfig, which: str) -> ModelConfig:
    """Clear the multi-scale flag, the adaptive flag, or ``both`` (the baseline variant)."""
    if which == "multiscale":
        return replace(config, use_multiscale=False)
    if which == "adaptive":
        return replace(config, use_adaptive=False)
    if which == "both":
        return replace(config, use_multiscale=False, use_adaptive=False)
    raise ConfigError(f"unknown ablation {which!r}; expected multiscale, adaptive or both")


class SegmentationModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params = tc.ParameterStore()
        rng = np.random.default_rng(config.seed)
        store, c = self.params, config
        cs = c.stem_channels

        if c.use_multiscale:
            self.stem = MultiScaleFusion(store, "stem.fusion", c.fusion, rng=rng)
        else:
            self.stem = Conv3d(store, "stem.conv", c.in_channels, cs, 3, padding=1, rng=rng)
        self.stem_act = GELU()
        self.embed = Conv3d(store, "embed", cs, c.embed_dim, c.patch_size, stride=c.patch_size, rng=rng)

        self.stages: List[List[SwinBlock]] = []
        self.downs: List[Conv3d] = []
        for i, (depth, heads) in enumerate(zip(c.depths, c.heads)):
            dim = c.stage_dim(i)
            blocks = []
            for j in range(depth):
                spec = WindowSpec(c.window, 0 if j % 2 == 0 else c.window // 2)
                blocks.append(SwinBlock(store, f"enc{i}.block{j}", dim, heads, spec,
                                        adaptive=c.use_adaptive, mlp_ratio=c.mlp_ratio, rng=rng))
            self.stages.append(blocks)
            if i < c.num_stages - 1:
                self.downs.append(Conv3d(store, f"enc{i}.down", dim, 2 * dim, 2, stride=2, rng=rng))

        # decoder levels, deepest first
        self.dec = []
        for i in reversed(range(c.num_stages - 1)):
            dim = c.stage_dim(i)
            self.dec.append(self._decoder_level(f"dec{i}", 2 * dim, dim, dim, 2, rng))
        self.final = self._decoder_level("final", c.embed_dim, cs, cs, c.patch_size, rng)
        self.head = Conv3d(store, "head", cs, c.num_classes, 1, rng=rng)

        self._cache = None
        self.input_grad = None

    def _decoder_level(self, name, c_in, c_skip, c_out, factor, rng):
        store = self.params
        return {
            "up": ConvTranspose3d(store, f"{name}.up", c_in, c_skip, factor, rng=rng),
            "skip": Conv3d(store, f"{name}.skip_proj", c_skip, c_skip, 1, rng=rng),
            "conv1": Conv3d(store, f"{name}.conv1", 2 * c_skip, c_out, 3, padding=1, rng=rng),
            "act1": GELU(),
            "conv2": Conv3d(store, f"{name}.conv2", c_out, c_out, 3, padding=1, rng=rng),
            "act2": GELU(),
        }

    @staticmethod
    def _decode_forward(level, x, skip):
        up = level["up"].forward(x)
        cat = np.concatenate([up, level["skip"].forward(skip)], axis=0)
        y = level["act1"].forward(level["conv1"].forward(cat))
        return level["act2"].forward(level["conv2"].forward(y)), up.shape[0]

    @staticmethod
    def _decode_backward(level, dy, n_up):
        dcat = level["conv1"].backward(level["act1"].backward(level["conv2"].backward(level["act2"].backward(dy))))
        return level["up"].backward(dcat[:n_up]), level["skip"].backward(dcat[n_up:])

    def forward(self, volume: np.ndarray) -> np.ndarray:
        c = self.config
        if volume.ndim != 4 or volume.shape[0] != c.in_channels:
            raise GeometryError(f"expected a [{c.in_channels},H,W,D] volume, got shape {volume.shape}")
        c.check_geometry(volume.shape[1:])
        x = np.asarray(volume, dtype=tc.DTYPE)

        s0 = self.stem_act.forward(self.stem.forward(x))
        t = self.embed.forward(s0)
        skips = []
        for i, blocks in enumerate(self.stages):
            for b in blocks:
                t = b.forward(t)
            skips.append(t)
            if i < c.num_stages - 1:
                t = self.downs[i].forward(t)

        d = skips[-1]
        n_ups = []
        for level, skip in zip(self.dec, reversed(skips[:-1])):
            d, n_up = self._decode_forward(level, d, skip)
            n_ups.append(n_up)
        d, n_up = self._decode_forward(self.final, d, s0)
        n_ups.append(n_up)
        logits = self.head.forward(d)
        self._cache = n_ups
        return logits

    def backward(self, dlogits: np.ndarray) -> None:
        """Add parameter gradients for ``dlogits``; the input gradient lands in ``input_grad``."""
        if self._cache is None:
            raise StateError("backward requires a preceding forward (and may only run once per forward)")
        n_ups, self._cache = self._cache, None
        c = self.config

        dd = self.head.backward(dlogits)
        dd, ds0 = self._decode_backward(self.final, dd, n_ups[-1])
        dskips = [None] * c.num_stages
        for k in reversed(range(len(self.dec))):
            dd, dskips[c.num_stages - 2 - k] = self._decode_backward(self.dec[k], dd, n_ups[k])
        dt = dd
        for i in reversed(range(c.num_stages)):
            if i < c.num_stages - 1:
                dt = self.downs[i].backward(dt) + dskips[i]
            for b in reversed(self.stages[i]):
                dt = b.backward(dt)
        ds0 = ds0 + self.embed.backward(dt)
        self.input_grad = self.stem.backward(self.stem_act.backward(ds0))

    def predict(self, volume: np.ndarray) -> np.ndarray:
        logits = self.forward(volume)
        self._cache = None
        return np.argmax(logits, axis=0).astype(np.int64)

    def fusion_weights(self):
        if isinstance(self.stem, MultiScaleFusion):
            return self.stem.weights()
        return None

    def num_params(self) -> int:
        return self.params.num_params()


def init_model(config: ModelConfig) -> SegmentationModel:
    return SegmentationModel(config)


def forward(model: SegmentationModel, volume: np.ndarray) -> np.ndarray:
    return model.forward(volume)


def backward(model: SegmentationModel, dlogits: np.ndarray) -> None:
    model.backward(dlogits)
