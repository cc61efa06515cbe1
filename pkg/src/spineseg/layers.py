"""Stateful wrappers around the primitives in :mod:`spineseg.tensor_core`.

A layer owns names in a :class:`ParameterStore`, caches what its backward
needs during ``forward`` and adds its parameter gradients into the store
during ``backward``.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor_core as tc
from .errors import StateError


def scaled_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    def __init__(self, store: tc.ParameterStore, name: str):
        self.store = store
        self.name = name
        self._cache = None

    def _param(self, suffix: str, init, rng: Optional[np.random.Generator]) -> str:
        key = f"{self.name}.{suffix}"
        if key not in self.store:
            if rng is None:
                raise KeyError(f"parameter {key!r} missing and no rng given to create it")
            self.store.add(key, init(rng))
        return key

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache


class Conv3d(Layer):
    def __init__(self, store, name, c_in, c_out, k, stride=1, padding=0, rng=None):
        super().__init__(store, name)
        fan_in = c_in * k**3
        self.w = self._param("weight", lambda r: scaled_uniform(r, (c_out, c_in, k, k, k), fan_in), rng)
        self.b = self._param("bias", lambda r: np.zeros(c_out), rng)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        y, self._cache = tc.conv3d_forward(x, self.store[self.w], self.store[self.b], self.stride, self.padding)
        return y

    def backward(self, dy):
        dx, dw, db = tc.conv3d_backward(dy, self._take_cache())
        self.store.accumulate(self.w, dw)
        self.store.accumulate(self.b, db)
        return dx


class ConvTranspose3d(Layer):
    """Upsampling by an integer factor with a kernel the size of the stride."""

    def __init__(self, store, name, c_in, c_out, factor, rng=None):
        super().__init__(store, name)
        self.w = self._param(
            "weight", lambda r: scaled_uniform(r, (c_in, c_out, factor, factor, factor), c_in), rng
        )
        self.b = self._param("bias", lambda r: np.zeros(c_out), rng)

    def forward(self, x):
        y, self._cache = tc.conv_transpose3d_forward(x, self.store[self.w], self.store[self.b])
        return y

    def backward(self, dy):
        dx, dw, db = tc.conv_transpose3d_backward(dy, self._take_cache())
        self.store.accumulate(self.w, dw)
        self.store.accumulate(self.b, db)
        return dx


class Linear(Layer):
    def __init__(self, store, name, d_in, d_out, bias=True, rng=None):
        super().__init__(store, name)
        self.w = self._param("weight", lambda r: scaled_uniform(r, (d_in, d_out), d_in), rng)
        self.b = self._param("bias", lambda r: np.zeros(d_out), rng) if bias else None

    def forward(self, x):
        b = self.store[self.b] if self.b else None
        y, self._cache = tc.linear_forward(x, self.store[self.w], b)
        return y

    def backward(self, dy):
        dx, dw, db = tc.linear_backward(dy, self._take_cache())
        self.store.accumulate(self.w, dw)
        if self.b:
            self.store.accumulate(self.b, db)
        return dx


class LayerNorm(Layer):
    def __init__(self, store, name, dim, rng=None):
        super().__init__(store, name)
        self.g = self._param("gamma", lambda r: np.ones(dim), rng)
        self.b = self._param("beta", lambda r: np.zeros(dim), rng)

    def forward(self, x):
        y, self._cache = tc.layernorm_forward(x, self.store[self.g], self.store[self.b])
        return y

    def backward(self, dy):
        dx, dg, db = tc.layernorm_backward(dy, self._take_cache())
        self.store.accumulate(self.g, dg)
        self.store.accumulate(self.b, db)
        return dx


class GELU:
    def __init__(self):
        self._cache = None

    def forward(self, x):
        y, self._cache = tc.gelu_forward(x)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise StateError("GELU: backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return tc.gelu_backward(dy, cache)
