"""Hot inner loops, each in two flavours.

Every kernel has a ``_numpy`` reference implementation and, when numba is
importable, an ``@njit`` twin.  The public names bind to one of the two at
import time; set ``BINSIGHT_DISABLE_NUMBA=1`` to force the numpy path.

Both flavours use the same per-element reduction order, so results agree
bitwise (the test suite checks this).
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def _env_disabled() -> bool:
    return os.environ.get("BINSIGHT_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not _env_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"

_jit = {"cache": True, "nogil": True}


# --------------------------------------------------------------------------
# Hilbert curve
# --------------------------------------------------------------------------

def _hilbert_d2xy_numpy(order: int, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = d.astype(np.int64).copy()
    x = np.zeros_like(t)
    y = np.zeros_like(t)
    s = 1
    side = 1 << order
    while s < side:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        flip = (ry == 0) & (rx == 1)
        x = np.where(flip, s - 1 - x, x)
        y = np.where(flip, s - 1 - y, y)
        swap = ry == 0
        x, y = np.where(swap, y, x), np.where(swap, x, y)
        x += s * rx
        y += s * ry
        t //= 4
        s *= 2
    return x, y


@njit(**_jit)
def _hilbert_d2xy_numba(order, d):
    n = d.shape[0]
    xs = np.empty(n, np.int64)
    ys = np.empty(n, np.int64)
    side = 1 << order
    for i in range(n):
        t = d[i]
        x = 0
        y = 0
        s = 1
        while s < side:
            rx = 1 & (t // 2)
            ry = 1 & (t ^ rx)
            if ry == 0:
                if rx == 1:
                    x = s - 1 - x
                    y = s - 1 - y
                x, y = y, x
            x += s * rx
            y += s * ry
            t //= 4
            s *= 2
        xs[i] = x
        ys[i] = y
    return xs, ys


def _hilbert_xy2d_numpy(order: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = x.astype(np.int64).copy()
    y = y.astype(np.int64).copy()
    d = np.zeros_like(x)
    side = 1 << order
    s = side // 2
    while s > 0:
        rx = ((x & s) > 0).astype(np.int64)
        ry = ((y & s) > 0).astype(np.int64)
        d += s * s * ((3 * rx) ^ ry)
        flip = (ry == 0) & (rx == 1)
        x = np.where(flip, side - 1 - x, x)
        y = np.where(flip, side - 1 - y, y)
        swap = ry == 0
        x, y = np.where(swap, y, x), np.where(swap, x, y)
        s //= 2
    return d


@njit(**_jit)
def _hilbert_xy2d_numba(order, xs, ys):
    n = xs.shape[0]
    out = np.empty(n, np.int64)
    side = 1 << order
    for i in range(n):
        x = xs[i]
        y = ys[i]
        d = 0
        s = side // 2
        while s > 0:
            rx = 1 if (x & s) > 0 else 0
            ry = 1 if (y & s) > 0 else 0
            d += s * s * ((3 * rx) ^ ry)
            if ry == 0:
                if rx == 1:
                    x = side - 1 - x
                    y = side - 1 - y
                x, y = y, x
            s //= 2
        out[i] = d
    return out


# --------------------------------------------------------------------------
# Sliding-window Shannon entropy
# --------------------------------------------------------------------------

def _window_entropies_numpy(data: np.ndarray, centers: np.ndarray, window: int) -> np.ndarray:
    n = data.shape[0]
    starts = np.clip(centers - window // 2, 0, n)
    ends = np.clip(centers - window // 2 + window, 0, n)
    totals = (ends - starts).astype(np.float64)
    pos = starts[:, None] + np.arange(window)[None, :]
    valid = pos < ends[:, None]
    vals = data[np.minimum(pos, n - 1)].astype(np.int64)
    rows = np.broadcast_to(np.arange(centers.shape[0])[:, None], pos.shape)
    counts = np.bincount(
        (rows * 256 + vals)[valid], minlength=centers.shape[0] * 256
    ).reshape(centers.shape[0], 256)
    h = np.zeros(centers.shape[0])
    # sequential over symbols to match the compiled loop's summation order
    for v in range(256):
        c = counts[:, v]
        nz = c > 0
        if not nz.any():
            continue
        p = np.where(nz, c / totals, 1.0)
        h = np.where(nz, h - p * np.log2(p), h)
    return np.clip(h, 0.0, 8.0)


@njit(**_jit)
def _window_entropies_numba(data, centers, window):
    n = data.shape[0]
    m = centers.shape[0]
    out = np.empty(m)
    counts = np.zeros(256, np.int64)
    for i in range(m):
        lo = min(max(centers[i] - window // 2, 0), n)
        hi = min(max(centers[i] - window // 2 + window, 0), n)
        counts[:] = 0
        for j in range(lo, hi):
            counts[data[j]] += 1
        total = float(hi - lo)
        h = 0.0
        for v in range(256):
            c = counts[v]
            if c > 0:
                p = c / total
                h = h - p * np.log2(p)
        out[i] = min(max(h, 0.0), 8.0)
    return out


# --------------------------------------------------------------------------
# 2x2 max pooling, NHWC
# --------------------------------------------------------------------------

def _maxpool2_forward_numpy(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.uint8)


@njit(**_jit)
def _maxpool2_forward_numba(x):
    n, h, w, c = x.shape
    out = np.empty((n, h // 2, w // 2, c), x.dtype)
    idx = np.empty((n, h // 2, w // 2, c), np.uint8)
    for b in range(n):
        for i in range(h // 2):
            for j in range(w // 2):
                for ch in range(c):
                    best = x[b, 2 * i, 2 * j, ch]
                    arg = 0
                    for k in range(1, 4):
                        v = x[b, 2 * i + k // 2, 2 * j + k % 2, ch]
                        if v > best:
                            best = v
                            arg = k
                    out[b, i, j, ch] = best
                    idx[b, i, j, ch] = arg
    return out, idx


def _maxpool2_backward_numpy(grad: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, h2, w2, c = grad.shape
    routed = (idx[..., None] == np.arange(4, dtype=np.uint8)) * grad[..., None]
    routed = routed.astype(grad.dtype, copy=False).reshape(n, h2, w2, c, 2, 2)
    return np.ascontiguousarray(routed.transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c))


@njit(**_jit)
def _maxpool2_backward_numba(grad, idx):
    n, h2, w2, c = grad.shape
    out = np.zeros((n, 2 * h2, 2 * w2, c), grad.dtype)
    for b in range(n):
        for i in range(h2):
            for j in range(w2):
                for ch in range(c):
                    k = idx[b, i, j, ch]
                    out[b, 2 * i + k // 2, 2 * j + k % 2, ch] = grad[b, i, j, ch]
    return out


# --------------------------------------------------------------------------
# col2im: scatter-add of convolution patch gradients, NHWC
# --------------------------------------------------------------------------

def _col2im_numpy(gcols: np.ndarray, k: int, pad: int) -> np.ndarray:
    # gcols: (n, h, w, k, k, c)
    n, h, w, _, _, c = gcols.shape
    out = np.zeros((n, h + k - 1, w + k - 1, c), gcols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + h, dx:dx + w, :] += gcols[:, :, :, dy, dx, :]
    return np.ascontiguousarray(out[:, pad:pad + h, pad:pad + w, :])


@njit(**_jit)
def _col2im_numba(gcols, k, pad):
    n, h, w, _, _, c = gcols.shape
    out = np.zeros((n, h + k - 1, w + k - 1, c), gcols.dtype)
    for dy in range(k):
        for dx in range(k):
            for b in range(n):
                for y in range(h):
                    for x in range(w):
                        for ch in range(c):
                            out[b, y + dy, x + dx, ch] += gcols[b, y, x, dy, dx, ch]
    return np.ascontiguousarray(out[:, pad:pad + h, pad:pad + w, :])


IMPLEMENTATIONS = {
    "hilbert_d2xy": (_hilbert_d2xy_numpy, _hilbert_d2xy_numba),
    "hilbert_xy2d": (_hilbert_xy2d_numpy, _hilbert_xy2d_numba),
    "window_entropies": (_window_entropies_numpy, _window_entropies_numba),
    "maxpool2_forward": (_maxpool2_forward_numpy, _maxpool2_forward_numba),
    "maxpool2_backward": (_maxpool2_backward_numpy, _maxpool2_backward_numba),
    "col2im": (_col2im_numpy, _col2im_numba),
}


def get(name: str, backend: str | None = None):
    """Return kernel ``name`` for ``backend`` ("numpy" or "numba"), default: active one."""
    backend = backend or BACKEND
    ref, fast = IMPLEMENTATIONS[name]
    if backend == "numpy":
        return ref
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        return fast
    raise ValueError(f"unknown backend {backend!r}")


hilbert_d2xy = get("hilbert_d2xy")
hilbert_xy2d = get("hilbert_xy2d")
window_entropies = get("window_entropies")
maxpool2_forward = get("maxpool2_forward")
maxpool2_backward = get("maxpool2_backward")
col2im = get("col2im")
