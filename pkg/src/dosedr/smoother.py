"""Local linear kernel regression and leave-one-out bandwidth selection.

With ``u_i = (A_i - a)/h`` and ``k_i = K(u_i)/h`` the fit at ``a`` depends
on five kernel sums ``S_r = sum k u^r`` (r = 0, 1, 2) and
``T_r = sum k u^r phi`` (r = 0, 1). The intercept is

    (S2 T0 - S1 T1) / (S0 S2 - S1^2)

and the smoother weight of point ``i`` is ``k_i (S2 - S1 u_i) / det``.
Sums are computed by the compiled backend when it is available.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _backend
from .errors import BandwidthSelectionError, DegenerateWindowError

DET_FLOOR = 1e-12  # relative: det / S0^2
LOO_FLOOR = 1e-8
# compact kernels with h >= span/PREFIX_SPAN_RATIO use prefix sums in LOOCV
PREFIX_SPAN_RATIO = 4.0


@dataclass(frozen=True)
class KernelSpec:
    """Symmetric kernel density with its basic constants.

    Attributes
    ----------
    kind : str
        Name of the kernel.
    id : int
        Code understood by the compiled backend.
    K0 : float
        Kernel value at zero.
    int_K2 : float
        Integral of ``K(u)**2``.
    mu2 : float
        Second moment ``int u**2 K(u) du``.
    radius : float
        Half-width (in units of ``h``) beyond which the kernel is treated as
        zero. 40 for the Gaussian, where ``exp(-800)`` underflows anyway.
    """

    kind: str
    id: int
    K0: float
    int_K2: float
    mu2: float
    radius: float

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.id == 0:
            return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
        if self.id == 1:
            return np.where(np.abs(u) <= 1.0, 0.5, 0.0)
        return np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)

    @property
    def compact(self) -> bool:
        return self.id != 2


KERNELS = {
    "epanechnikov": KernelSpec("epanechnikov", 0, 0.75, 0.6, 0.2, 1.0),
    "uniform": KernelSpec("uniform", 1, 0.5, 0.5, 1.0 / 3.0, 1.0),
    "gaussian": KernelSpec("gaussian", 2, 1.0 / math.sqrt(2.0 * math.pi),
                           1.0 / (2.0 * math.sqrt(math.pi)), 1.0, 40.0),
}


def get_kernel(kernel: str | KernelSpec = "epanechnikov") -> KernelSpec:
    if isinstance(kernel, KernelSpec):
        return kernel
    try:
        return KERNELS[str(kernel).lower()]
    except KeyError:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}") from None


@dataclass(frozen=True)
class LocalLinearFit:
    """Local linear fit at one evaluation point.

    ``D`` is the normalized moment matrix (kernel sums divided by the number
    of points ``n``), ``rhs`` the normalized right-hand side and ``beta``
    the solution of ``D beta = rhs``. ``fallback`` marks a degenerate window
    where the kernel-weighted mean was used instead (``beta[1] = 0``).
    """

    a: float
    h: float
    kernel: KernelSpec
    D: np.ndarray
    rhs: np.ndarray
    beta: np.ndarray
    n: int
    n_effective: int
    fallback: bool = False

    @property
    def estimate(self) -> float:
        return float(self.beta[0])


# ---------------------------------------------------------------------------
# sums and solves
# ---------------------------------------------------------------------------

def _sorted(A, phi=None):
    A = np.asarray(A, dtype=float).ravel()
    order = np.argsort(A, kind="stable")
    As = np.ascontiguousarray(A[order])
    if phi is None:
        ys = np.zeros_like(As)
    else:
        ys = np.ascontiguousarray(np.asarray(phi, dtype=float).ravel()[order])
    return As, ys, order


def _check_h(h: float) -> float:
    h = float(h)
    if not (h > 0 and math.isfinite(h)):
        raise ValueError(f"bandwidth must be positive and finite, got {h}")
    return h


def kernel_sums(A, phi, centers, h: float, kernel: str | KernelSpec = "epanechnikov") -> np.ndarray:
    """Columns ``S0, S1, S2, T0, T1, count`` at each center."""
    ks = get_kernel(kernel)
    h = _check_h(h)
    As, ys, _ = _sorted(A, phi)
    centers = np.ascontiguousarray(np.atleast_1d(np.asarray(centers, dtype=float)))
    return _backend.window_moments(As, ys, centers, h, ks.id, ks.radius)


def degenerate_mask(S0, S1, S2) -> np.ndarray:
    S0 = np.asarray(S0, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = (S0 * S2 - S1 * S1) / (S0 * S0)
    return ~(S0 > 0) | ~(rel >= DET_FLOOR)


def _solve_sums(mom: np.ndarray, centers, degenerate: str):
    S0, S1, S2, T0, T1 = (mom[:, j] for j in range(5))
    bad = degenerate_mask(S0, S1, S2)
    empty = ~(S0 > 0)
    if np.any(empty) or (degenerate == "raise" and np.any(bad)):
        j = int(np.flatnonzero(empty if np.any(empty) else bad)[0])
        what = "no points in the kernel window" if empty[j] else "fewer than two distinct weighted points"
        raise DegenerateWindowError(f"degenerate local linear window at a={float(centers[j]):.6g}: {what}")
    det = S0 * S2 - S1 * S1
    with np.errstate(divide="ignore", invalid="ignore"):
        est = np.where(bad, T0 / S0, (S2 * T0 - S1 * T1) / det)
        slope = np.where(bad, 0.0, (S0 * T1 - S1 * T0) / det)
    return est, slope, bad


def _check_mode(degenerate: str) -> str:
    if degenerate not in ("raise", "nw"):
        raise ValueError("degenerate must be 'raise' or 'nw'")
    return degenerate


@dataclass(frozen=True)
class SmoothResult:
    """Vectorized local linear fits on a grid of centers."""

    centers: np.ndarray
    estimate: np.ndarray
    slope: np.ndarray  # in units of h: beta[1]
    sums: np.ndarray
    fallback: np.ndarray
    h: float
    kernel: KernelSpec
    n: int

    @property
    def n_effective(self) -> np.ndarray:
        return self.sums[:, 5].astype(int)


def local_linear_at(A, phi, centers, h: float, kernel: str | KernelSpec = "epanechnikov",
                    degenerate: str = "raise") -> SmoothResult:
    """Local linear estimates at every center.

    Parameters
    ----------
    A, phi : array_like
        Design points and responses (any order).
    centers : array_like
        Evaluation points.
    h : float
        Bandwidth.
    kernel : str or KernelSpec
    degenerate : {"raise", "nw"}
        On a degenerate window either raise :class:`DegenerateWindowError`
        or fall back to the kernel-weighted mean and flag the point. An
        empty window always raises.
    """
    _check_mode(degenerate)
    ks = get_kernel(kernel)
    centers = np.atleast_1d(np.asarray(centers, dtype=float))
    mom = kernel_sums(A, phi, centers, h, ks)
    est, slope, bad = _solve_sums(mom, centers, degenerate)
    return SmoothResult(centers, est, slope, mom, bad, float(h), ks, int(np.size(A)))


def local_linear_point(A, phi, a: float, h: float, kernel: str | KernelSpec = "epanechnikov",
                       degenerate: str = "raise") -> tuple[float, LocalLinearFit]:
    """Local linear estimate at a single point together with its fit record."""
    res = local_linear_at(A, phi, [a], h, kernel, degenerate)
    S0, S1, S2, T0, T1, cnt = res.sums[0]
    n = res.n
    D = np.array([[S0, S1], [S1, S2]]) / n
    rhs = np.array([T0, T1]) / n
    beta = np.array([res.estimate[0], res.slope[0]])
    fit = LocalLinearFit(float(a), float(h), res.kernel, D, rhs, beta, n, int(cnt), bool(res.fallback[0]))
    return float(beta[0]), fit


def smoother_weights(A, a: float, h: float, kernel: str | KernelSpec = "epanechnikov",
                     degenerate: str = "raise") -> np.ndarray:
    """Weights ``W_i(a)`` with ``sum_i W_i phi_i`` equal to the fit at ``a``.

    Returned in the original order of ``A``.
    """
    _check_mode(degenerate)
    ks = get_kernel(kernel)
    h = _check_h(h)
    A = np.asarray(A, dtype=float).ravel()
    u = (A - a) / h
    k = ks(u) / h
    S0, S1, S2 = k.sum(), (k * u).sum(), (k * u * u).sum()
    bad = bool(degenerate_mask(S0, S1, S2))
    if not S0 > 0 or (bad and degenerate == "raise"):
        raise DegenerateWindowError(f"degenerate local linear window at a={a:.6g}")
    if bad:
        return k / S0
    return k * (S2 - S1 * u) / (S0 * S2 - S1 * S1)


def self_weights(A, h: float, kernel: str | KernelSpec = "epanechnikov") -> tuple[np.ndarray, np.ndarray]:
    """Self weights ``K(0)/h * S2/det`` at every ``A_i`` (point ``i`` included).

    Returns ``(W, degenerate)`` in the original order; ``W`` is NaN where the
    window is degenerate.
    """
    ks = get_kernel(kernel)
    h = _check_h(h)
    As, ys, order = _sorted(A)
    mom = _backend.self_moments(As, ys, h, ks.id, ks.radius)
    W, bad = _self_weight_from_sums(mom, ks, h)
    out_W = np.empty_like(W)
    out_bad = np.empty_like(bad)
    out_W[order] = W
    out_bad[order] = bad
    return out_W, out_bad


def _self_weight_from_sums(mom, ks: KernelSpec, h: float):
    S0, S1, S2 = mom[:, 0], mom[:, 1], mom[:, 2]
    bad = degenerate_mask(S0, S1, S2)
    with np.errstate(divide="ignore", invalid="ignore"):
        W = np.where(bad, np.nan, (ks.K0 / h) * S2 / (S0 * S2 - S1 * S1))
    return W, bad


def self_weight(A, i: int, h: float, kernel: str | KernelSpec = "epanechnikov",
                degenerate: str = "raise") -> float:
    """Self weight of point ``i``.

    A degenerate window raises, or with ``degenerate="nw"`` yields the
    kernel-weighted-mean weight ``K(0)/(h S0)``.
    """
    _check_mode(degenerate)
    ks = get_kernel(kernel)
    h = _check_h(h)
    W, bad = self_weights(A, h, ks)
    if bad[i]:
        if degenerate == "raise":
            raise DegenerateWindowError(f"degenerate local linear window at A[{i}]")
        A = np.asarray(A, dtype=float).ravel()
        return float((ks.K0 / h) / np.sum(ks((A - A[i]) / h) / h))
    return float(W[i])


# ---------------------------------------------------------------------------
# bandwidth selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BandwidthScore:
    h: float
    score: float
    feasible: bool
    reason: str = ""


@dataclass(frozen=True)
class BandwidthSelection:
    h: float
    scores: tuple[BandwidthScore, ...]
    kernel: KernelSpec

    @property
    def grid(self) -> np.ndarray:
        return np.array([s.h for s in self.scores])


def default_bandwidth_grid(A, lo: float = 0.05, hi: float = 1.0, count: int = 20) -> np.ndarray:
    """``count`` geometric points from ``lo*range(A)`` to ``hi*range(A)``."""
    A = np.asarray(A, dtype=float)
    if A.size < 2:
        raise ValueError("need at least two treatment values to build a bandwidth grid")
    rng = float(np.ptp(A))
    if not rng > 0:
        raise ValueError("treatment values have zero range")
    if count < 1 or not (0 < lo <= hi):
        raise ValueError("grid needs count >= 1 and 0 < lo <= hi")
    return np.geomspace(lo * rng, hi * rng, int(count))


def loocv_residuals(A, phi, h: float, kernel: str | KernelSpec = "epanechnikov"):
    """Leave-one-out residuals via the self-weight shortcut.

    Returns ``(resid, fitted, W, ok)`` in the original order, where
    ``resid = (phi - fitted)/(1 - W)``. ``ok`` is False if some window is
    degenerate or some ``|1 - W|`` falls below the floor.
    """
    ks = get_kernel(kernel)
    h = _check_h(h)
    As, ys, order = _sorted(A, phi)
    mom = _backend.self_moments(As, ys, h, ks.id, ks.radius)
    W, bad = _self_weight_from_sums(mom, ks, h)
    S0, S1, S2, T0, T1 = (mom[:, j] for j in range(5))
    with np.errstate(divide="ignore", invalid="ignore"):
        fitted = (S2 * T0 - S1 * T1) / (S0 * S2 - S1 * S1)
        resid = (ys - fitted) / (1.0 - W)
    ok = not (np.any(bad) or np.any(np.abs(1.0 - W) < LOO_FLOOR))
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    return resid[inv], fitted[inv], W[inv], ok


def prefix_self_moments(x, y, h: float, kernel: KernelSpec) -> np.ndarray:
    """Self-inclusive window sums at every ``x_i`` from prefix sums.

    Only for the compact polynomial kernels. With ``z = (x - o)/h`` about
    the mean ``o``, window power sums of ``u = z - z_i`` follow from prefix
    sums of ``z**q`` by binomial expansion. Rounding grows like
    ``(span/h)**4`` so callers restrict this to wide bandwidths.
    """
    if not kernel.compact:
        raise ValueError("prefix sums need a compact polynomial kernel")
    n = x.shape[0]
    o = float(x.mean())
    z = (x - o) / h
    zp = np.vstack([z ** q for q in range(5)])
    P = np.zeros((5, n + 1))
    np.cumsum(zp, axis=1, out=P[:, 1:])
    Q = np.zeros((4, n + 1))
    np.cumsum(zp[:4] * y, axis=1, out=Q[:, 1:])
    lo = np.searchsorted(x, x - kernel.radius * h, side="left")
    hi = np.searchsorted(x, x + kernel.radius * h, side="right")
    Z = P[:, hi] - P[:, lo]
    Zy = Q[:, hi] - Q[:, lo]
    d = -z
    binom = ((1,), (1, 1), (1, 2, 1), (1, 3, 3, 1), (1, 4, 6, 4, 1))
    M = np.zeros((5, n))
    N = np.zeros((4, n))
    for p in range(5):
        for q in range(p + 1):
            term = binom[p][q] * d ** (p - q)
            M[p] += term * Z[q]
            if p < 4:
                N[p] += term * Zy[q]
    if kernel.id == 0:
        c = 0.75 / h
        S = [c * (M[r] - M[r + 2]) for r in range(3)]
        T = [c * (N[r] - N[r + 2]) for r in range(2)]
    else:
        c = 0.5 / h
        S = [c * M[r] for r in range(3)]
        T = [c * N[r] for r in range(2)]
    return np.column_stack([*S, *T, (hi - lo).astype(float)])


def _loo_sums(As, ys, h: float, ks: KernelSpec) -> np.ndarray:
    span = float(As[-1] - As[0]) if As.size else 0.0
    if ks.compact and ks.radius * h * PREFIX_SPAN_RATIO >= span:
        return prefix_self_moments(As, ys, h, ks)
    return _backend.self_moments(As, ys, h, ks.id, ks.radius)


def loocv_scores(A, phi, grid: Sequence[float], kernel: str | KernelSpec = "epanechnikov") -> list[BandwidthScore]:
    """Shortcut leave-one-out score ``sum((phi - fit)/(1 - W))**2`` per bandwidth."""
    ks = get_kernel(kernel)
    As, ys, _ = _sorted(A, phi)
    out = []
    for h in grid:
        h = _check_h(h)
        mom = _loo_sums(As, ys, h, ks)
        W, bad = _self_weight_from_sums(mom, ks, h)
        if np.any(bad):
            out.append(BandwidthScore(h, math.nan, False, "degenerate window"))
            continue
        if np.any(np.abs(1.0 - W) < LOO_FLOOR):
            out.append(BandwidthScore(h, math.nan, False, "self weight too close to one"))
            continue
        S0, S1, S2, T0, T1 = (mom[:, j] for j in range(5))
        fitted = (S2 * T0 - S1 * T1) / (S0 * S2 - S1 * S1)
        r = (ys - fitted) / (1.0 - W)
        out.append(BandwidthScore(h, float(r @ r), True))
    return out


def loocv_bandwidth(A, phi, grid: Sequence[float] | None = None,
                    kernel: str | KernelSpec = "epanechnikov") -> BandwidthSelection:
    """Pick the grid bandwidth with the smallest leave-one-out score.

    Ties resolve to the smallest bandwidth; infeasible candidates are
    skipped. Raises :class:`BandwidthSelectionError` if none is feasible.
    """
    ks = get_kernel(kernel)
    if grid is None:
        grid = default_bandwidth_grid(A)
    grid = [float(h) for h in grid]
    if not grid:
        raise ValueError("bandwidth grid is empty")
    scores = loocv_scores(A, phi, grid, ks)
    feas = [s for s in scores if s.feasible and math.isfinite(s.score)]
    if not feas:
        raise BandwidthSelectionError(f"no feasible bandwidth among {len(grid)} candidates")
    best = min(feas, key=lambda s: (s.score, s.h))
    return BandwidthSelection(best.h, tuple(scores), ks)
