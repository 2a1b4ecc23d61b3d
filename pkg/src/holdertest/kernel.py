"""Order-alpha kernels on the radius-1/2 ball and split-sample estimators."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .density import _gl_unit, as_points, bump_profile

MOMENT_NODES = 201


class KernelConstructionError(ArithmeticError):
    pass


def _multi_indices(d: int, max_degree: int):
    out = []
    for deg in range(max_degree + 1):
        for combo in itertools.product(range(deg + 1), repeat=d):
            if sum(combo) == deg:
                out.append(combo)
    return out


def _cube_rule(d: int, nodes_per_axis: int):
    t, w = np.polynomial.legendre.leggauss(nodes_per_axis)
    t, w = t / 2, w / 2
    grids = np.meshgrid(*([t] * d), indexing="ij")
    wg = np.meshgrid(*([w] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.prod(np.stack([g.ravel() for g in wg], axis=1), axis=1)
    return pts, wts


@dataclass(frozen=True, eq=False)
class Kernel:
    alpha: float
    d: int
    m: int
    exponents: tuple
    coefficients: np.ndarray
    bound: float
    C_K: float

    def __call__(self, u) -> np.ndarray:
        pts = as_points(u, self.d)
        return self._eval(pts)

    def _eval(self, pts: np.ndarray) -> np.ndarray:
        base = bump_profile(np.einsum("ij,ij->i", pts, pts))
        if self.m == 0:
            return base * self.coefficients[0]
        poly = np.zeros(len(pts))
        for c, e in zip(self.coefficients, self.exponents):
            poly += c * np.prod(pts ** np.asarray(e), axis=1)
        return base * poly

    def eval_1d(self, u: np.ndarray) -> np.ndarray:
        """Fast path for d = 1 on a flat array."""
        base = bump_profile(u * u)
        if self.m == 0:
            return base * self.coefficients[0]
        poly = np.zeros_like(u)
        for c, e in zip(self.coefficients, self.exponents):
            poly += c * u ** e[0]
        return base * poly

    def moments(self, nodes_per_axis: int = MOMENT_NODES) -> dict:
        pts, w = _cube_rule(self.d, nodes_per_axis)
        k = self._eval(pts)
        return {e: float(np.dot(w, k * np.prod(pts ** np.asarray(e), axis=1)))
                for e in _multi_indices(self.d, self.m)}


@lru_cache(maxsize=None)
def make_kernel(alpha: float, d: int = 1) -> Kernel:
    """Nonnegative bump for alpha <= 1, bump times polynomial with vanishing moments otherwise."""
    if not alpha > 0 or d < 1:
        raise ValueError("need alpha > 0 and d >= 1")
    m = math.ceil(alpha) - 1
    nodes = MOMENT_NODES if d <= 2 else max(21, int(round(4e6 ** (1 / d))))
    pts, w = _cube_rule(d, nodes)
    base = bump_profile(np.einsum("ij,ij->i", pts, pts))
    exps = _multi_indices(d, m)
    mono = np.stack([np.prod(pts ** np.asarray(e), axis=1) for e in exps], axis=1)
    gram = (mono * (w * base)[:, None]).T @ mono
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e13:
        raise KernelConstructionError(f"moment system ill-conditioned (condition number {cond:.3e})")
    rhs = np.zeros(len(exps))
    rhs[0] = 1.0
    coef = np.linalg.solve(gram, rhs)
    k = base * (mono @ coef)
    norms = np.sqrt(np.einsum("ij,ij->i", pts, pts))
    C_K = float(np.dot(w, norms ** m * np.abs(k))) / math.factorial(m)
    return Kernel(alpha=float(alpha), d=int(d), m=m, exponents=tuple(exps), coefficients=coef,
                  bound=float(np.max(np.abs(k))), C_K=C_K)


@dataclass(frozen=True, eq=False)
class SplitSample:
    first: np.ndarray
    second: np.ndarray

    @classmethod
    def from_points(cls, points, d: Optional[int] = None) -> "SplitSample":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1) if d in (None, 1) else pts.reshape(1, -1)
        if len(pts) % 2:
            raise ValueError("split sample needs an even number of observations")
        k = len(pts) // 2
        return cls(pts[:k], pts[k:])

    @property
    def k(self) -> int:
        return len(self.first)

    @property
    def n(self) -> int:
        return 2 * self.k


def kde(data: np.ndarray, x: np.ndarray, h, kernel: Kernel) -> np.ndarray:
    """(1/k) sum_i K_h(x - X_i) with a bandwidth per evaluation point."""
    data = as_points(data, kernel.d)
    x = as_points(x, kernel.d)
    h = np.broadcast_to(np.asarray(h, dtype=float), (len(x),))
    k = len(data)
    out = np.zeros(len(x))
    if k == 0 or len(x) == 0:
        return out
    d = kernel.d
    if d == 1:
        xs = np.sort(data[:, 0])
        lo = np.searchsorted(xs, x[:, 0] - h / 2, side="left")
        hi = np.searchsorted(xs, x[:, 0] + h / 2, side="right")
        counts = hi - lo
        total = int(counts.sum())
        if total == 0:
            return out
        rows = np.repeat(np.arange(len(x)), counts)
        offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        cols = np.repeat(lo, counts) + offsets
        u = (x[rows, 0] - xs[cols]) / h[rows]
        vals = kernel.eval_1d(u) / h[rows]
        out = np.bincount(rows, weights=vals, minlength=len(x))
        return out / k
    from scipy.spatial import cKDTree

    tree = cKDTree(data)
    hoods = tree.query_ball_point(x, r=h / 2 * (1 + 1e-12))
    counts = np.array([len(v) for v in hoods])
    if counts.sum() == 0:
        return out
    rows = np.repeat(np.arange(len(x)), counts)
    cols = np.concatenate([np.asarray(v, dtype=int) for v in hoods if v])
    u = (x[rows] - data[cols]) / h[rows, None]
    vals = kernel._eval(u) / h[rows] ** d
    return np.bincount(rows, weights=vals, minlength=len(x)) / k


def kde_pair(sample: SplitSample, x, h, kernel: Kernel):
    """Half-sample estimators (p_hat(x), p_hat'(x))."""
    if np.any(np.asarray(h) <= 0):
        raise ValueError("bandwidth must be positive")
    return kde(sample.first, x, h, kernel), kde(sample.second, x, h, kernel)


def convolve(kernel: Kernel, f, x, h: float, nodes_per_axis: int = 64) -> np.ndarray:
    """(K_h * f)(x) = ∫ K(u) f(x - h u) du by Gauss-Legendre on the unit cube."""
    pts, w = _cube_rule(kernel.d, nodes_per_axis)
    kw = kernel._eval(pts) * w
    keep = kw != 0
    pts, kw = pts[keep], kw[keep]
    x = as_points(x, kernel.d)
    shifted = x[:, None, :] - h * pts[None, :, :]
    vals = np.asarray(f(shifted.reshape(-1, kernel.d)), dtype=float).reshape(len(x), len(pts))
    return vals @ kw


def local_rule(d: int, order: int = 16):
    """Gauss-Legendre nodes on [-1, 1]^d for sample-centred quadrature."""
    t, w = _gl_unit(order)
    t = 2 * t - 1
    w = 2 * w
    if d == 1:
        return t.reshape(-1, 1), w
    grids = np.meshgrid(*([t] * d), indexing="ij")
    wg = np.meshgrid(*([w] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1), np.prod(np.stack([g.ravel() for g in wg], axis=1), axis=1)
