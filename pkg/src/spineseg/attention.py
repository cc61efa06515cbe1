"""Local window attention with a per-window, per-head adaptive gate.

The gate ``g = sigmoid(MLP(mean of window tokens))`` scales each head's
attention output before the output projection. With the gate ablated the
block reduces to a plain (bias-free) Swin block. Shifted windows use a cyclic
roll with no attention mask.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, GeometryError, ShapeError
from .layers import GELU, Layer, LayerNorm, Linear


@dataclass(frozen=True)
class WindowSpec:
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be positive")
        if not 0 <= self.shift < self.window:
            raise ConfigError(f"shift must lie in [0, {self.window}), got {self.shift}")


def _check_grid(extents, window):
    for axis, n in zip("HWD", extents):
        if n % window:
            raise GeometryError(f"axis {axis}: extent {n} is not divisible by window {window}")


def window_partition(x: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Tile ``x[C,H,W,D]`` into windows ``[nW, window**3, C]``.

    The grid is first rolled by ``-shift`` on every spatial axis; windows are
    ordered lexicographically by origin.
    """
    if x.ndim != 4:
        raise ShapeError(f"window_partition expects [C,H,W,D], got {x.shape}")
    c, h, w, d = x.shape
    s = spec.window
    _check_grid((h, w, d), s)
    if spec.shift:
        x = np.roll(x, shift=(-spec.shift,) * 3, axis=(1, 2, 3))
    x = x.reshape(c, h // s, s, w // s, s, d // s, s)
    x = x.transpose(1, 3, 5, 2, 4, 6, 0)
    return np.ascontiguousarray(x).reshape(-1, s**3, c)


def window_reverse(windows: np.ndarray, spec: WindowSpec, extents: Tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`window_partition`, undoing the cyclic shift."""
    h, w, d = extents
    s = spec.window
    _check_grid(extents, s)
    n_win = (h // s) * (w // s) * (d // s)
    if windows.ndim != 3 or windows.shape[0] != n_win or windows.shape[1] != s**3:
        raise ShapeError(
            f"expected [{n_win}, {s**3}, C] windows for extents {extents}, got {windows.shape}"
        )
    c = windows.shape[2]
    x = windows.reshape(h // s, w // s, d // s, s, s, s, c)
    x = x.transpose(6, 0, 3, 1, 4, 2, 5).reshape(c, h, w, d)
    if spec.shift:
        x = np.roll(x, shift=(spec.shift,) * 3, axis=(1, 2, 3))
    return np.ascontiguousarray(x)


def scaled_dot_attention_forward(q, k, v):
    """``A = softmax(q k^T / sqrt(d_k))`` row-wise, ``out = A v``; leading axes are batch axes."""
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention shapes disagree: Q {q.shape}, K {k.shape}, V {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    a = tc.softmax((q @ np.swapaxes(k, -1, -2)) * scale, axis=-1)
    return a @ v, a, (q, k, v, a, scale)


def scaled_dot_attention_backward(dout, cache):
    q, k, v, a, scale = cache
    dv = np.swapaxes(a, -1, -2) @ dout
    da = dout @ np.swapaxes(v, -1, -2)
    ds = tc.softmax_backward(da, a, axis=-1) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    return dq, dk, dv


def scaled_dot_attention(q, k, v):
    out, a, _ = scaled_dot_attention_forward(q, k, v)
    return out, a


# sigmoid(+-36) is the last value that float64 keeps strictly inside (0, 1)
GATE_CLAMP = 36.0


class AdaptiveGate(Layer):
    """``tokens[..., T, dim] -> g[..., heads]`` in (0, 1)."""

    def __init__(self, store, name, dim, heads, rng=None):
        super().__init__(store, name)
        hidden = max(dim // 2, 1)
        self.fc1 = Linear(store, f"{name}.fc1", dim, hidden, rng=rng)
        self.act = GELU()
        self.fc2 = Linear(store, f"{name}.fc2", hidden, heads, rng=rng)

    def forward(self, tokens):
        t = tokens.shape[-2]
        pooled = tokens.mean(axis=-2)
        z = self.fc2.forward(self.act.forward(self.fc1.forward(pooled)))
        inside = np.abs(z) < GATE_CLAMP
        g = tc.sigmoid(np.clip(z, -GATE_CLAMP, GATE_CLAMP))
        self._cache = (g, inside, t)
        return g

    def backward(self, dg):
        g, inside, t = self._take_cache()
        dz = dg * g * (1.0 - g) * inside
        dpooled = self.fc1.backward(self.act.backward(self.fc2.backward(dz)))
        return np.repeat(dpooled[..., None, :], t, axis=-2) / t


def adaptive_gate(window_tokens: np.ndarray, params: tc.ParameterStore, prefix: str,
                  dim: int, heads: int) -> np.ndarray:
    """Gate values for windows whose gate MLP lives at ``{prefix}.fc1/fc2`` in ``params``."""
    return AdaptiveGate(params, prefix, dim, heads).forward(window_tokens)


class SwinBlock(Layer):
    """Pre-norm window attention block followed by a token MLP.

    ``x <- x + Wo(g * MHA(LN(x)))`` per window, then ``x <- x + MLP(LN(x))``.
    """

    def __init__(self, store, name, dim, heads, spec: WindowSpec, adaptive=True,
                 mlp_ratio=2, rng=None):
        super().__init__(store, name)
        if dim % heads:
            raise ConfigError(f"{name}: dim {dim} is not divisible by heads {heads}")
        self.dim, self.heads, self.spec = dim, heads, spec
        self.adaptive = adaptive
        self.norm1 = LayerNorm(store, f"{name}.norm1", dim, rng=rng)
        self.q = Linear(store, f"{name}.attn.q", dim, dim, bias=False, rng=rng)
        self.k = Linear(store, f"{name}.attn.k", dim, dim, bias=False, rng=rng)
        self.v = Linear(store, f"{name}.attn.v", dim, dim, bias=False, rng=rng)
        self.o = Linear(store, f"{name}.attn.o", dim, dim, rng=rng)
        self.gate = AdaptiveGate(store, f"{name}.gate", dim, heads, rng=rng) if adaptive else None
        self.norm2 = LayerNorm(store, f"{name}.norm2", dim, rng=rng)
        self.fc1 = Linear(store, f"{name}.mlp.fc1", dim, dim * mlp_ratio, rng=rng)
        self.act = GELU()
        self.fc2 = Linear(store, f"{name}.mlp.fc2", dim * mlp_ratio, dim, rng=rng)
        self.last_attention: Optional[np.ndarray] = None
        self.last_gate: Optional[np.ndarray] = None

    def _split(self, t):
        nw, n, _ = t.shape
        return t.reshape(nw, n, self.heads, -1).transpose(0, 2, 1, 3)

    def _merge(self, t):
        nw, _, n, _ = t.shape
        return t.transpose(0, 2, 1, 3).reshape(nw, n, self.dim)

    def _attend(self, q, k, v):
        # windows are independent, so chunks may run on separate threads
        n = q.shape[0]
        chunks = tc.get_threads()
        if chunks < 2 or n < 2:
            return scaled_dot_attention_forward(q, k, v)
        bounds = np.linspace(0, n, min(chunks, n) + 1).astype(int)
        parts = tc.parallel_map(
            lambda lo_hi: scaled_dot_attention_forward(q[lo_hi[0]:lo_hi[1]], k[lo_hi[0]:lo_hi[1]],
                                                       v[lo_hi[0]:lo_hi[1]]),
            list(zip(bounds[:-1], bounds[1:])),
        )
        out = np.concatenate([p[0] for p in parts])
        a = np.concatenate([p[1] for p in parts])
        return out, a, (q, k, v, a, parts[0][2][4])

    def forward(self, x):
        if x.ndim != 4 or x.shape[0] != self.dim:
            raise ShapeError(f"{self.name}: expected [{self.dim},H,W,D], got {x.shape}")
        extents = x.shape[1:]
        xw = window_partition(x, self.spec)
        h = self.norm1.forward(xw)
        q = self._split(self.q.forward(h))
        k = self._split(self.k.forward(h))
        v = self._split(self.v.forward(h))
        att, a, att_cache = self._attend(q, k, v)
        self.last_attention = a
        if self.gate is not None:
            g = self.gate.forward(h)  # [nW, heads]
            self.last_gate = g
            gated = att * g[:, :, None, None]
        else:
            g = None
            gated = att
        x1 = xw + self.o.forward(self._merge(gated))
        m = self.fc2.forward(self.act.forward(self.fc1.forward(self.norm2.forward(x1))))
        x2 = x1 + m
        self._cache = (extents, att_cache, att, g)
        return window_reverse(x2, self.spec, extents)

    def backward(self, dy):
        extents, att_cache, att, g = self._take_cache()
        dx2 = window_partition(dy, self.spec)
        dx1 = dx2 + self.norm2.backward(self.fc1.backward(self.act.backward(self.fc2.backward(dx2))))
        dgated = self._split(self.o.backward(dx1))
        if g is not None:
            datt = dgated * g[:, :, None, None]
            dg = np.sum(dgated * att, axis=(2, 3))
            dh = self.gate.backward(dg)
        else:
            datt = dgated
            dh = 0.0
        dq, dk, dv = scaled_dot_attention_backward(datt, att_cache)
        dh = dh + self.q.backward(self._merge(dq))
        dh = dh + self.k.backward(self._merge(dk))
        dh = dh + self.v.backward(self._merge(dv))
        dxw = dx1 + self.norm1.backward(dh)
        return window_reverse(dxw, self.spec, extents)


def swin_block(tokens: np.ndarray, spec: WindowSpec, params: tc.ParameterStore, prefix: str,
               heads: int, ablate_adaptive: bool = False, mlp_ratio: int = 2) -> np.ndarray:
    """Run one block whose parameters already live in ``params`` under ``prefix``.

    With ``ablate_adaptive`` the gate is fixed at 1 and any gate parameters in
    ``params`` are ignored.
    """
    block = SwinBlock(params, prefix, tokens.shape[0], heads, spec,
                      adaptive=not ablate_adaptive, mlp_ratio=mlp_ratio)
    return block.forward(tokens)
