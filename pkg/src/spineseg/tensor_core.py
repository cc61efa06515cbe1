"""Dense float64 primitives with hand-written backward passes.

Every ``*_forward`` function returns ``(output, cache)`` and the matching
``*_backward`` consumes ``(grad_output, cache)``. Volumes are laid out
channel-first, ``[C, H, W, D]``, row-major. Tokens are laid out with the
feature axis last.
"""
from __future__ import annotations

from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from .errors import CheckFailedError, GeometryError, ShapeError

DTYPE = np.float64

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# ---------------------------------------------------------------------------
# optional intra-op parallelism
# ---------------------------------------------------------------------------

_pool: Optional[ThreadPoolExecutor] = None
_threads = 1


def set_threads(n: int) -> None:
    """Use ``n`` worker threads for independent sub-computations.

    Only work items that write disjoint outputs are dispatched, and results
    are gathered in submission order, so results are bit-identical for any
    ``n``.
    """
    global _pool, _threads
    if n < 1:
        raise ValueError("threads must be >= 1")
    if _pool is not None:
        _pool.shutdown(wait=True)
        _pool = None
    _threads = n
    if n > 1:
        _pool = ThreadPoolExecutor(max_workers=n)


def get_threads() -> int:
    return _threads


def parallel_map(fn: Callable, items: Sequence) -> list:
    if _pool is None or len(items) < 2:
        return [fn(it) for it in items]
    return list(_pool.map(fn, items))


# ---------------------------------------------------------------------------
# parameter storage
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named, insertion-ordered parameters with paired gradient buffers."""

    def __init__(self) -> None:
        self._values: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=DTYPE)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> List[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self._grads[name] += g

    def set_value(self, name: str, value: np.ndarray) -> None:
        current = self._values[name]
        if current.shape != np.shape(value):
            raise ShapeError(
                f"parameter {name!r}: expected shape {current.shape}, got {np.shape(value)}"
            )
        current[...] = value

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def num_params(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self._values.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [k for k in self._values if k not in state]
        extra = [k for k in state if k not in self._values]
        conflicts = [
            f"{k}: model {self._values[k].shape} vs given {np.shape(state[k])}"
            for k in self._values
            if k in state and self._values[k].shape != np.shape(state[k])
        ]
        if missing or extra or conflicts:
            parts = []
            if missing:
                parts.append("missing: " + ", ".join(missing))
            if extra:
                parts.append("unexpected: " + ", ".join(extra))
            parts.extend(conflicts)
            raise ShapeError("parameter mismatch; " + "; ".join(parts))
        for k in self._values:
            self._values[k][...] = state[k]


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise CheckFailedError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_out_extent(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise GeometryError(
            f"axis {axis}: ({n} + 2*{padding} - {k}) / {stride} + 1 is not a positive integer"
        )
    return span // stride + 1


def conv3d_forward(x, kernel, bias, stride: int = 1, padding: int = 0):
    """3D cross-correlation of ``x[C_in,H,W,D]`` with ``kernel[C_out,C_in,k,k,k]``."""
    if x.ndim != 4:
        raise ShapeError(f"conv3d input must be [C,H,W,D], got shape {x.shape}")
    if kernel.ndim != 5 or not (kernel.shape[2] == kernel.shape[3] == kernel.shape[4]):
        raise ShapeError(f"conv3d kernel must be [C_out,C_in,k,k,k], got {kernel.shape}")
    c_out, c_in, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if x.shape[0] != c_in:
        raise ShapeError(f"conv3d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({c_out},)")
    if stride < 1 or padding < 0:
        raise GeometryError("conv3d: stride must be >= 1 and padding >= 0")

    _, h, w, d = x.shape
    ho = _conv_out_extent(h, k, stride, padding, "H")
    wo = _conv_out_extent(w, k, stride, padding, "W")
    do = _conv_out_extent(d, k, stride, padding, "D")

    if padding:
        xp = np.pad(x, ((0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2))
    else:
        xp = x
    s = stride
    cols = np.empty((c_in, k, k, k, ho, wo, do), dtype=DTYPE)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                cols[:, a, b, c] = xp[:, a : a + s * ho : s, b : b + s * wo : s, c : c + s * do : s]
    cols = cols.reshape(c_in * k**3, ho * wo * do)
    y = kernel.reshape(c_out, -1) @ cols
    y += bias[:, None]
    cache = (x.shape, cols, kernel, stride, padding)
    return y.reshape(c_out, ho, wo, do), cache


def conv3d_backward(dy, cache):
    """Returns ``(dx, dkernel, dbias)``."""
    x_shape, cols, kernel, s, padding = cache
    c_out, c_in, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    ho, wo, do = dy.shape[1:]
    dy2 = dy.reshape(c_out, -1)
    dkernel = (dy2 @ cols.T).reshape(kernel.shape)
    dbias = dy2.sum(axis=1)
    dcols = (kernel.reshape(c_out, -1).T @ dy2).reshape(c_in, k, k, k, ho, wo, do)
    _, h, w, d = x_shape
    dxp = np.zeros((c_in, h + 2 * padding, w + 2 * padding, d + 2 * padding), dtype=DTYPE)
    for a in range(k):
        for b in range(k):
            for c in range(k):
                dxp[:, a : a + s * ho : s, b : b + s * wo : s, c : c + s * do : s] += dcols[:, a, b, c]
    if padding:
        dx = dxp[:, padding:-padding, padding:-padding, padding:-padding]
    else:
        dx = dxp
    return np.ascontiguousarray(dx), dkernel, dbias


def conv3d(x, kernel, bias, stride: int = 1, padding: int = 0):
    return conv3d_forward(x, kernel, bias, stride, padding)[0]


def conv_transpose3d_forward(x, kernel, bias):
    """Non-overlapping transposed convolution (kernel size equals stride).

    ``x[C_in,H,W,D]``, ``kernel[C_in,C_out,s,s,s]`` -> ``[C_out,sH,sW,sD]``.
    """
    if x.ndim != 4 or kernel.ndim != 5 or x.shape[0] != kernel.shape[0]:
        raise ShapeError(f"conv_transpose3d: input {x.shape} incompatible with kernel {kernel.shape}")
    c_out, s = kernel.shape[1], kernel.shape[2]
    _, h, w, d = x.shape
    t = np.tensordot(kernel, x, axes=([0], [0]))  # [C_out,s,s,s,H,W,D]
    y = t.transpose(0, 4, 1, 5, 2, 6, 3).reshape(c_out, h * s, w * s, d * s)
    y = y + bias[:, None, None, None]
    return y, (x, kernel)


def conv_transpose3d_backward(dy, cache):
    x, kernel = cache
    c_out, s = kernel.shape[1], kernel.shape[2]
    _, h, w, d = x.shape
    dyt = dy.reshape(c_out, h, s, w, s, d, s).transpose(0, 2, 4, 6, 1, 3, 5)
    dx = np.tensordot(kernel, dyt, axes=([1, 2, 3, 4], [0, 1, 2, 3]))
    dkernel = np.tensordot(x, dyt, axes=([1, 2, 3], [4, 5, 6]))
    dbias = dy.sum(axis=(1, 2, 3))
    return dx, dkernel, dbias


# ---------------------------------------------------------------------------
# dense token ops
# ---------------------------------------------------------------------------


def linear_forward(x, weight, bias=None):
    """``x[..., d_in] @ weight[d_in, d_out] (+ bias)``."""
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y, (x, weight)


def linear_backward(dy, cache):
    x, weight = cache
    d_in, d_out = weight.shape
    x2 = x.reshape(-1, d_in)
    dy2 = dy.reshape(-1, d_out)
    dweight = x2.T @ dy2
    dbias = dy2.sum(axis=0)
    dx = dy @ weight.T
    return dx, dweight, dbias


def layernorm_forward(x, gamma, beta, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, n).sum(axis=0)
    dbeta = dy.reshape(-1, n).sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu_forward(x):
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dy, cache):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits, axis: int = -1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy, y, axis: int = -1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        pos = i * (n_in - 1) / (n_out - 1)
        lo = min(int(np.floor(pos)), n_in - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        if frac > 0.0:
            m[i, lo + 1] += frac
    return m


def trilinear_resample_forward(x, target: Tuple[int, int, int]):
    """Align-corners trilinear resampling of ``x[C,H,W,D]`` to ``target`` extents."""
    if x.ndim != 4:
        raise ShapeError(f"trilinear_resample expects [C,H,W,D], got {x.shape}")
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1 or min(x.shape) < 1:
        raise GeometryError(f"trilinear_resample: extents must be >= 1, got {x.shape[1:]} -> {target}")
    if target == x.shape[1:]:
        return x.copy(), None
    mats = [_interp_matrix(n, t) for n, t in zip(x.shape[1:], target)]
    y = np.einsum("chwd,ih->ciwd", x, mats[0])
    y = np.einsum("ciwd,jw->cijd", y, mats[1])
    y = np.einsum("cijd,kd->cijk", y, mats[2])
    return y, mats


def trilinear_resample_backward(dy, cache):
    if cache is None:
        return dy.copy()
    m0, m1, m2 = cache
    dx = np.einsum("cijk,kd->cijd", dy, m2)
    dx = np.einsum("cijd,jw->ciwd", dx, m1)
    return np.einsum("ciwd,ih->chwd", dx, m0)


def trilinear_resample(x, target):
    return trilinear_resample_forward(x, target)[0]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps zero gradients from dividing by zero."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck_report(
    f: Callable[[], float],
    params: ParameterStore,
    probes: int = 5,
    h: float = 1e-4,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
) -> Dict[str, float]:
    """Worst relative error between analytic and central-difference gradients, per tensor.

    ``f`` must zero and refill the gradients in ``params`` and return the scalar
    loss. It is evaluated once for the analytic gradient and twice per probe.
    """
    if probes < 1:
        raise ValueError("gradcheck needs at least one probe")
    params.zero_grad()
    base = f()
    if not np.isfinite(base):
        raise CheckFailedError("gradcheck: f returned a non-finite value")
    analytic = {n: params.grad(n).copy() for n in params}
    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for name in names if names is not None else params.names():
        value = params[name]
        flat = value.reshape(-1)
        count = min(probes, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for idx in coords:
            old = flat[idx]
            flat[idx] = old + h
            fp = f()
            flat[idx] = old - h
            fm = f()
            flat[idx] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise CheckFailedError(f"gradcheck: non-finite f while probing {name}")
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, relative_error(analytic[name].reshape(-1)[idx], numeric))
        report[name] = worst
    # leave the store holding the analytic gradient at the unperturbed point
    params.zero_grad()
    f()
    return report


def gradcheck(f, params: ParameterStore, probes: int = 5, h: float = 1e-4, seed: int = 0) -> float:
    report = gradcheck_report(f, params, probes=probes, h=h, seed=seed)
    return max(report.values()) if report else 0.0
