"""Multi-scale convolution branches and their softmax-weighted fusion.

The fused map is ``sum_i w_i * F_i`` with ``w = softmax(logits)``, so the
combination is always convex. Branches use stride 1 with same-padding, which
keeps every ``F_i`` on the input grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ShapeError
from .layers import Conv3d, Layer


@dataclass(frozen=True)
class FusionConfig:
    kernel_sizes: Tuple[int, ...] = (1, 3, 5)
    in_channels: int = 1
    out_channels: int = 12

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if len(self.kernel_sizes) < 1:
            raise ConfigError("fusion.kernel_sizes: need at least one branch")
        for k in self.kernel_sizes:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"fusion.kernel_sizes: {k} is not a positive odd size")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("fusion channels must be positive")


def fusion_weights(logits: np.ndarray) -> np.ndarray:
    return tc.softmax(logits, axis=0)


def _check_input(x, cfg: FusionConfig):
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeError(f"fusion expects [{cfg.in_channels},H,W,D] input, got {x.shape}")


def multiscale_extract(x: np.ndarray, cfg: FusionConfig, params: tc.ParameterStore,
                       prefix: str = "fusion") -> List[np.ndarray]:
    """Branch outputs F_1..F_n, one same-padded convolution per kernel size."""
    _check_input(x, cfg)

    def branch(i):
        k = cfg.kernel_sizes[i]
        return tc.conv3d(x, params[f"{prefix}.branch{i}.weight"], params[f"{prefix}.branch{i}.bias"],
                         stride=1, padding=(k - 1) // 2)

    return tc.parallel_map(branch, range(len(cfg.kernel_sizes)))


def adaptive_fuse_forward(features: Sequence[np.ndarray], logits: np.ndarray):
    if len(features) != logits.shape[0]:
        raise ShapeError(f"{len(features)} feature maps but {logits.shape[0]} fusion logits")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise ShapeError(f"fusion features disagree in shape: {shape} vs {f.shape}")
    w = fusion_weights(logits)
    out = w[0] * features[0]
    for wi, f in zip(w[1:], features[1:]):
        out = out + wi * f
    return out, (features, w)


def adaptive_fuse_backward(dy, cache):
    """Returns ``(list of dF_i, dlogits)``."""
    features, w = cache
    dfeatures = [wi * dy for wi in w]
    dw = np.array([np.sum(dy * f) for f in features])
    return dfeatures, tc.softmax_backward(dw, w, axis=0)


def adaptive_fuse(features, logits) -> np.ndarray:
    return adaptive_fuse_forward(features, logits)[0]


class MultiScaleFusion(Layer):
    """Conv branches at several kernel sizes fused with learned convex weights."""

    def __init__(self, store, name: str, cfg: FusionConfig, rng=None):
        super().__init__(store, name)
        self.cfg = cfg
        self.branches = [
            Conv3d(store, f"{name}.branch{i}", cfg.in_channels, cfg.out_channels, k,
                   padding=(k - 1) // 2, rng=rng)
            for i, k in enumerate(cfg.kernel_sizes)
        ]
        n = len(cfg.kernel_sizes)
        self.logits = self._param("logits", lambda r: np.zeros(n), rng)

    def weights(self) -> np.ndarray:
        return fusion_weights(self.store[self.logits])

    def forward(self, x):
        _check_input(x, self.cfg)
        feats = tc.parallel_map(lambda b: b.forward(x), self.branches)
        out, self._cache = adaptive_fuse_forward(feats, self.store[self.logits])
        return out

    def backward(self, dy):
        dfeats, dlogits = adaptive_fuse_backward(dy, self._take_cache())
        self.store.accumulate(self.logits, dlogits)
        dxs = tc.parallel_map(lambda pair: pair[0].backward(pair[1]), list(zip(self.branches, dfeats)))
        dx = dxs[0]
        for d in dxs[1:]:
            dx = dx + d
        return dx
