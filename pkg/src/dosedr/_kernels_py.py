"""Pure numpy fallback for the compiled kernel-window sums.

Semantics match ``_kernels.pyx`` exactly; only the summation order (and
hence the last few ulps) differs.
"""
from __future__ import annotations

import numpy as np

INV_SQRT_2PI = 0.3989422804014327
_CHUNK_CELLS = 2_000_000


def _kernel(u: np.ndarray, kind: int) -> np.ndarray:
    if kind == 0:
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    if kind == 1:
        return np.where(np.abs(u) <= 1.0, 0.5, 0.0)
    return INV_SQRT_2PI * np.exp(-0.5 * u * u)


def window_moments(x, y, centers, h, kind, radius):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    m = centers.shape[0]
    out = np.zeros((m, 6))
    if m == 0 or x.shape[0] == 0:
        return out
    lo = np.searchsorted(x, centers - radius * h, side="left")
    hi = np.searchsorted(x, centers + radius * h, side="right")
    order = np.argsort(centers, kind="stable")
    start = 0
    while start < m:
        # grow the block until the union window would exceed the cell budget
        stop = start + 1
        while stop < m:
            idx = order[start:stop + 1]
            width = hi[idx].max() - lo[idx].min()
            if width * (stop + 1 - start) > _CHUNK_CELLS:
                break
            stop += 1
        idx = order[start:stop]
        a, b = lo[idx].min(), hi[idx].max()
        if b > a:
            xs = x[a:b]
            ys = y[a:b]
            u = (xs[None, :] - centers[idx, None]) / h
            k = _kernel(u, kind) / h
            pos = np.arange(a, b)
            # respect each center's own window
            k = np.where((pos[None, :] >= lo[idx, None]) & (pos[None, :] < hi[idx, None]), k, 0.0)
            ku = k * u
            out[idx, 0] = k.sum(axis=1)
            out[idx, 1] = ku.sum(axis=1)
            out[idx, 2] = (ku * u).sum(axis=1)
            out[idx, 3] = k @ ys
            out[idx, 4] = ku @ ys
            out[idx, 5] = (k > 0.0).sum(axis=1)
        start = stop
    return out


def self_moments(x, y, h, kind, radius):
    return window_moments(x, y, x, h, kind, radius)


def gauss_average_density(a, means, sd):
    a = np.ascontiguousarray(a, dtype=np.float64)
    means = np.ascontiguousarray(means, dtype=np.float64)
    m, r = a.shape[0], means.shape[0]
    out = np.empty(m)
    step = max(1, _CHUNK_CELLS // max(r, 1))
    for s in range(0, m, step):
        z = (a[s:s + step, None] - means[None, :]) / sd
        out[s:s + step] = np.exp(-0.5 * z * z).sum(axis=1)
    return out * (INV_SQRT_2PI / sd / r)
