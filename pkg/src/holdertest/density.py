"""Densities on cubic domains: Hölder metadata, quadrature, built-in nulls, bump."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special

GL_ORDER = 4
DEFAULT_RESOLUTION = 2000


class ParameterError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class HolderSpec:
    alpha: float
    L: float
    c_star: float = 0.1
    delta: float = 0.1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if not self.L > 0:
            raise ParameterError(f"L must be positive, got {self.L}")
        if not 0 < self.c_star < 0.5:
            raise ParameterError(f"c_star must lie in (0, 1/2), got {self.c_star}")
        if not self.delta >= 0:
            raise ParameterError(f"delta must be nonnegative, got {self.delta}")

    @property
    def m(self) -> int:
        return math.ceil(self.alpha) - 1

    @property
    def L_prime(self) -> float:
        return (1 + self.delta) * self.L

    @property
    def c_star_prime(self) -> float:
        return (1 + self.delta) * self.c_star

    def with_L(self, L: float) -> "HolderSpec":
        return HolderSpec(self.alpha, L, self.c_star, self.delta)

    def enlarged(self) -> "HolderSpec":
        # c_star' may leave (0, 1/2) for large delta; clamp just below 1/2
        return HolderSpec(self.alpha, self.L_prime, min(self.c_star_prime, 0.5 - 1e-12), 0.0)


@dataclass(frozen=True)
class Domain:
    kind: str
    d: int
    lower: Optional[tuple] = None
    upper: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in ("box", "full_space"):
            raise ParameterError(f"unknown domain kind {self.kind!r}")
        if self.d < 1:
            raise ParameterError("dimension must be a positive integer")
        if self.kind == "full_space":
            if self.lower is not None or self.upper is not None:
                raise ParameterError("full_space domains carry no bounds")
            return
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != (self.d,) or hi.shape != (self.d,):
            raise ParameterError("box bounds must have one entry per axis")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ParameterError("box bounds must be finite with lower < upper")
        edges = hi - lo
        if np.max(np.abs(edges - edges[0])) > 1e-12 * edges[0]:
            raise ParameterError(f"box must be cubic, got edges {edges.tolist()}")

    @classmethod
    def box(cls, lower, upper, d: Optional[int] = None) -> "Domain":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if d is not None:
            lo = np.broadcast_to(lo, (d,))
            hi = np.broadcast_to(hi, (d,))
        return cls("box", len(lo), tuple(float(v) for v in lo), tuple(float(v) for v in hi))

    @classmethod
    def full_space(cls, d: int) -> "Domain":
        return cls("full_space", int(d))

    @property
    def is_box(self) -> bool:
        return self.kind == "box"

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    @property
    def edge(self) -> float:
        if not self.is_box:
            return math.inf
        return float(self.upper[0] - self.lower[0])

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = as_points(points, self.d)
        if not self.is_box:
            return np.ones(len(pts), dtype=bool)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "d": self.d}
        if self.is_box:
            out["lower"] = list(self.lower)
            out["upper"] = list(self.upper)
        return out


def as_points(x, d: int) -> np.ndarray:
    """Coerce scalars, 1-d arrays and (N, d) arrays to an (N, d) float array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return np.full((1, d), float(arr))
    if arr.ndim == 1:
        if d == 1:
            return arr.reshape(-1, 1)
        if arr.shape[0] == d:
            return arr.reshape(1, d)
        raise ValueError(f"cannot interpret shape {arr.shape} as points in dimension {d}")
    if arr.shape[1] != d:
        raise ValueError(f"points have dimension {arr.shape[1]}, expected {d}")
    return arr


# ---------------------------------------------------------------------------
# quadrature

@lru_cache(maxsize=None)
def _gl_unit(order: int):
    t, w = np.polynomial.legendre.leggauss(order)
    return (t + 1) / 2, w / 2


def panel_rule(knots: np.ndarray, order: int = GL_ORDER):
    """Composite Gauss-Legendre rule with one panel per pair of consecutive knots."""
    knots = np.asarray(knots, dtype=float)
    t, w = _gl_unit(order)
    widths = np.diff(knots)
    nodes = (knots[:-1, None] + widths[:, None] * t[None, :]).ravel()
    weights = (widths[:, None] * w[None, :]).ravel()
    return nodes, weights


def uniform_knots(lo: float, hi: float, resolution: int, breakpoints: Sequence[float] = ()) -> np.ndarray:
    panels = max(1, int(math.ceil(resolution / GL_ORDER)))
    knots = np.linspace(lo, hi, panels + 1)
    inner = [b for b in breakpoints if lo < b < hi]
    if inner:
        knots = np.unique(np.concatenate([knots, inner]))
    return knots


def tensor_rule(axes: Sequence[tuple]):
    """Tensor product of per-axis (nodes, weights)."""
    if len(axes) == 1:
        nodes, weights = axes[0]
        return nodes.reshape(-1, 1), weights.copy()
    grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    wgrids = np.meshgrid(*[a[1] for a in axes], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return nodes, weights


# ---------------------------------------------------------------------------
# bump function

def bump_profile(r2: np.ndarray) -> np.ndarray:
    """exp(-1/(1 - 4 r^2)) inside the radius-1/2 ball, exactly 0 outside."""
    r2 = np.asarray(r2, dtype=float)
    s = 1.0 - 4.0 * r2
    out = np.zeros_like(s)
    inside = s > 0
    out[inside] = np.exp(-1.0 / s[inside])
    return out


def _pair_sup(values: np.ndarray, x: np.ndarray, exponent: float, c_star: float = 0.0, chunk: int = 512) -> float:
    """sup over grid pairs of (|v_i - v_j| - c_star*v_i)_+ / |x_i - x_j|^exponent."""
    best = 0.0
    n = len(values)
    for start in range(0, n, chunk):
        vi = values[start:start + chunk, None]
        dist = np.abs(x[start:start + chunk, None] - x[None, :])
        num = np.abs(vi - values[None, :]) - c_star * vi
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dist > 0, num / dist ** exponent, 0.0)
        best = max(best, float(np.max(ratio)))
    return best


def _taylor_sup(values: np.ndarray, x: np.ndarray, alpha: float, chunk: int = 512) -> float:
    m = math.ceil(alpha) - 1
    dx = x[1] - x[0]
    derivs = [values]
    for _ in range(m):
        derivs.append(np.gradient(derivs[-1], dx, edge_order=2))
    best = 0.0
    n = len(values)
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        diff = x[None, :] - x[sl, None]
        taylor = np.zeros_like(diff)
        for k, dk in enumerate(derivs):
            taylor += dk[sl, None] * diff ** k / math.factorial(k)
        rem = np.abs(values[None, :] - taylor)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(diff != 0, rem / np.abs(diff) ** alpha, 0.0)
        best = max(best, float(np.max(ratio)))
    return best


@dataclass(frozen=True, eq=False)
class BumpFunction:
    """Radial C-infinity bump on the radius-1/2 ball, scaled into H(alpha, 1).

    The scale is certified on a dense line through the origin: the Hölder (or
    Taylor-remainder) ratio and the (★) ratio with constant ``c_star`` are both
    kept at or below one.
    """

    alpha: float
    d: int
    c_star: float
    scale: float

    def __call__(self, x) -> np.ndarray:
        pts = as_points(x, self.d)
        return bump_profile(np.einsum("ij,ij->i", pts, pts)) / self.scale

    def profile(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return bump_profile(r * r) / self.scale

    @property
    def sup(self) -> float:
        return math.exp(-1.0) / self.scale

    def norm(self, t: float = 1.0) -> float:
        """||f||_t in dimension d (radial integral)."""
        surface = 2 * math.pi ** (self.d / 2) / math.gamma(self.d / 2)
        val, _ = integrate.quad(lambda r: bump_profile(r * r) ** t * r ** (self.d - 1), 0.0, 0.5,
                                epsabs=1e-15, epsrel=1e-12, limit=200)
        return (surface * val) ** (1.0 / t) / self.scale

    @property
    def l1(self) -> float:
        return self.norm(1.0)


@lru_cache(maxsize=None)
def make_bump(alpha: float, d: int = 1, c_star: float = 0.1) -> BumpFunction:
    x = np.linspace(-0.6, 0.6, 2401)
    b = bump_profile(x * x)
    if alpha <= 1:
        ratio = _pair_sup(b, x, alpha)
    else:
        ratio = max(_taylor_sup(b, x, alpha), _pair_sup(b, x, alpha, c_star=c_star))
    return BumpFunction(alpha=float(alpha), d=int(d), c_star=float(c_star), scale=max(ratio, 1e-300) * 1.02)


# ---------------------------------------------------------------------------
# models

Evaluator = Callable[[np.ndarray], np.ndarray]
Sampler = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(eq=False)
class DensityModel:
    """Evaluable density with Hölder metadata.

    ``support`` is the effective integration box (the domain itself for box
    domains). ``breakpoints`` lists per-axis knots where the evaluator is not
    smooth; quadrature panels are split there. ``axis_layout`` optionally
    replaces uniform panels with a custom knot builder ``(lo, hi, resolution)``.
    """

    domain: Domain
    holder: HolderSpec
    evaluator: Evaluator
    name: str = "custom"
    sampler: Optional[Sampler] = None
    support: Optional[tuple] = None
    breakpoints: tuple = ()
    axis_layout: Optional[Callable[[float, float, int], np.ndarray]] = None
    compact: bool = False
    check_box: Optional[tuple] = None
    params: dict = field(default_factory=dict)
    levelset: Optional[dict] = None
    sup_bound: Optional[float] = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.support is None:
            if not self.domain.is_box:
                raise ParameterError("full_space models need an effective support box")
            self.support = (self.domain.lo.copy(), self.domain.hi.copy())
        else:
            lo, hi = self.support
            self.support = (np.broadcast_to(np.asarray(lo, dtype=float), (self.d,)).copy(),
                            np.broadcast_to(np.asarray(hi, dtype=float), (self.d,)).copy())
        if not self.breakpoints:
            self.breakpoints = tuple(() for _ in range(self.d))
        elif all(np.isscalar(b) for b in self.breakpoints):
            self.breakpoints = tuple(tuple(float(b) for b in self.breakpoints) for _ in range(self.d))
        else:
            self.breakpoints = tuple(tuple(float(b) for b in axis) for axis in self.breakpoints)

    @property
    def d(self) -> int:
        return self.domain.d

    def __call__(self, x) -> np.ndarray:
        pts = as_points(x, self.d)
        vals = np.asarray(self.evaluator(pts), dtype=float).reshape(len(pts))
        if self.domain.is_box:
            vals = np.where(self.domain.contains(pts), vals, 0.0)
        return vals

    def axis_knots(self, axis: int, lo: float, hi: float, resolution: int) -> np.ndarray:
        if self.axis_layout is not None:
            knots = np.asarray(self.axis_layout(lo, hi, resolution), dtype=float)
        else:
            knots = uniform_knots(lo, hi, resolution)
        inner = [b for b in self.breakpoints[axis] if lo < b < hi]
        if inner:
            knots = np.unique(np.concatenate([knots, inner]))
        return knots

    def rule(self, lo, hi, resolution: int):
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.d,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.d,))
        axes = [panel_rule(self.axis_knots(k, lo[k], hi[k], resolution)) for k in range(self.d)]
        return tensor_rule(axes)

    def grid(self, resolution: Optional[int] = None):
        """Cached (nodes, weights, values) over the effective support."""
        if resolution is None:
            resolution = default_resolution(self.d)
        key = ("grid", resolution)
        if key not in self._cache:
            nodes, weights = self.rule(self.support[0], self.support[1], resolution)
            values = self(nodes)
            self._cache[key] = (nodes, weights, values)
        return self._cache[key]

    def max_value(self, resolution: Optional[int] = None) -> float:
        if self.sup_bound is not None:
            return float(self.sup_bound)
        _, _, values = self.grid(resolution)
        return float(values.max())

    def argmax(self, resolution: Optional[int] = None) -> np.ndarray:
        nodes, _, values = self.grid(resolution)
        return nodes[int(np.argmax(values))].copy()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        from .adversarial import sample_from

        return sample_from(self, n, rng)

    def describe(self) -> dict:
        return {"name": self.name, "domain": self.domain.to_dict(), "params": dict(self.params),
                "holder": {"alpha": self.holder.alpha, "L": self.holder.L,
                           "c_star": self.holder.c_star, "delta": self.holder.delta}}


def default_resolution(d: int) -> int:
    return {1: DEFAULT_RESOLUTION, 2: 400, 3: 60}.get(d, 16)


def integrate_box(model: DensityModel, cube, resolution: int = DEFAULT_RESOLUTION, power: float = 1.0) -> float:
    """Gauss-Legendre tensor quadrature of ``model**power`` over an axis-aligned box.

    ``cube`` is a (lower, upper) pair or a partition ``Cube``.
    """
    if resolution < 2:
        raise ParameterError("resolution must be at least 2")
    if hasattr(cube, "lower") and hasattr(cube, "upper") and not isinstance(cube, tuple):
        lo, hi = cube.lower, cube.upper
    else:
        lo, hi = cube
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (model.d,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (model.d,))
    if np.any(hi < lo):
        raise DomainError("cube upper bounds must not be below lower bounds")
    if model.domain.is_box:
        tol = 1e-12 * max(1.0, model.domain.edge)
        if np.any(lo < model.domain.lo - tol) or np.any(hi > model.domain.hi + tol):
            raise DomainError("cube lies outside the box domain")
    if np.any(hi == lo):
        return 0.0
    nodes, weights = model.rule(lo, hi, resolution)
    vals = model(nodes)
    if power != 1.0:
        vals = vals ** power
    return float(np.dot(weights, vals))


def total_mass(model: DensityModel, resolution: Optional[int] = None) -> float:
    _, w, v = model.grid(resolution)
    return float(np.dot(w, v))


# ---------------------------------------------------------------------------
# regularity

@dataclass(frozen=True)
class RegularityReport:
    holder_ok: bool
    star_ok: bool
    worst_violation: float
    holder_violation: float
    star_violation: float


def _line_violations(vals: np.ndarray, x: np.ndarray, alpha: float, L: float, c_star: float):
    """Worst Hölder and (★) excess along one grid line (1-d coordinates)."""
    n = len(vals)
    dx = x[1] - x[0]
    spread = float(vals.max() - vals.min())
    holder = -math.inf
    star = -math.inf
    if alpha <= 1:
        # pairs farther apart than this cannot violate either inequality
        max_lag = n - 1 if spread == 0 else min(n - 1, int(math.ceil((spread / L) ** (1 / alpha) / dx)) + 1)
        for lag in range(1, max_lag + 1):
            a, b = vals[:-lag], vals[lag:]
            diff = np.abs(a - b)
            rhs = L * (lag * dx) ** alpha
            holder = max(holder, float(np.max(diff - rhs)))
            star = max(star, float(np.max(diff - c_star * np.minimum(a, b) - rhs)))
        if max_lag < n - 1:
            holder = max(holder, spread - L * ((max_lag + 1) * dx) ** alpha)
        return holder, star
    m = math.ceil(alpha) - 1
    derivs = [vals]
    for _ in range(m):
        derivs.append(np.gradient(derivs[-1], dx, edge_order=2))
    for start in range(0, n, 256):
        sl = slice(start, start + 256)
        diff = x[None, :] - x[sl, None]
        taylor = np.zeros_like(diff)
        for k, dk in enumerate(derivs):
            taylor += dk[sl, None] * diff ** k / math.factorial(k)
        dist = np.abs(diff)
        rhs = L * dist ** alpha
        holder = max(holder, float(np.max(np.abs(vals[None, :] - taylor) - rhs)))
        vi = vals[sl, None]
        star = max(star, float(np.max(np.abs(vi - vals[None, :]) - c_star * vi - rhs)))
    return holder, star


def check_regularity(model: DensityModel, grid_resolution: int = 2000, holder: Optional[HolderSpec] = None,
                     box: Optional[tuple] = None) -> RegularityReport:
    """Check the Hölder inequality and (★) on all pairs of a uniform grid.

    For d > 1 pairs are taken along the grid lines parallel to each axis.
    """
    if grid_resolution < 2:
        raise ParameterError("grid_resolution must be at least 2")
    hs = holder or model.holder
    if box is None:
        box = model.check_box or model.support
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (model.d,)) for b in box)
    axes = [np.linspace(lo[k], hi[k], grid_resolution) for k in range(model.d)]
    holder_v = -math.inf
    star_v = -math.inf
    if model.d == 1:
        vals = model(axes[0])
        holder_v, star_v = _line_violations(vals, axes[0], hs.alpha, hs.L, hs.c_star)
    else:
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        vals = model(pts).reshape(mesh[0].shape)
        for axis in range(model.d):
            lines = np.moveaxis(vals, axis, -1).reshape(-1, grid_resolution)
            for line in lines:
                h, s = _line_violations(line, axes[axis], hs.alpha, hs.L, hs.c_star)
                holder_v = max(holder_v, h)
                star_v = max(star_v, s)
    tol = 1e-10 * (float(np.max(np.abs(vals))) + hs.L)
    worst = max(0.0, holder_v, star_v)
    return RegularityReport(holder_ok=holder_v <= tol, star_ok=star_v <= tol,
                            worst_violation=0.0 if worst <= tol else worst,
                            holder_violation=max(0.0, holder_v), star_violation=max(0.0, star_v))


# ---------------------------------------------------------------------------
# built-in families

def _uniform_box(params: dict, holder: HolderSpec) -> DensityModel:
    d = int(params.get("d", 1))
    lo = np.broadcast_to(np.asarray(params.get("lower", 0.0), dtype=float), (d,)).copy()
    hi = np.broadcast_to(np.asarray(params.get("upper", 1.0), dtype=float), (d,)).copy()
    domain = Domain.box(lo, hi)
    density = 1.0 / float(np.prod(hi - lo))

    def evaluator(x):
        return np.full(len(x), density)

    def sampler(rng, n):
        return rng.uniform(lo, hi, size=(n, d))

    return DensityModel(domain, holder, evaluator, name="uniform_box", sampler=sampler,
                        params={"d": d, "lower": lo.tolist(), "upper": hi.tolist()},
                        levelset={"constant": density}, sup_bound=density)


def _gaussian(params: dict, holder: HolderSpec) -> DensityModel:
    d = int(params.get("d", 1))
    sigma = float(params.get("sigma", 1.0))
    if not sigma > 0:
        raise ParameterError("gaussian requires sigma > 0")
    mu = np.broadcast_to(np.asarray(params.get("mu", 0.0), dtype=float), (d,)).copy()
    norm = (2 * math.pi * sigma ** 2) ** (-d / 2)
    reach = 12.0 * sigma

    def evaluator(x):
        z = (x - mu) / sigma
        return norm * np.exp(-0.5 * np.einsum("ij,ij->i", z, z))

    def sampler(rng, n):
        return mu + sigma * rng.standard_normal((n, d))

    def box_mass(lam):
        # mass of [-lam, lam]^d
        return float(np.prod([0.5 * (special.erf((lam - m) / (sigma * math.sqrt(2)))
                                     - special.erf((-lam - m) / (sigma * math.sqrt(2)))) for m in mu]))

    return DensityModel(Domain.full_space(d), holder, evaluator, name="gaussian", sampler=sampler,
                        support=(mu - reach, mu + reach), check_box=(mu - 6 * sigma, mu + 6 * sigma),
                        params={"d": d, "sigma": sigma, "mu": mu.tolist()},
                        levelset={"box_mass": box_mass}, sup_bound=norm)


class _ParetoJoin:
    """Cubic Hermite join on [x_m1, x1] glued to a Pareto tail on [x1, inf)."""

    def __init__(self, beta: float, x0: float, x1: float, x_m1: float):
        self.beta, self.x0, self.x1, self.x_m1 = beta, x0, x1, x_m1
        self.width = x1 - x_m1
        v = beta * x0 ** beta * x1 ** (-beta - 1)
        s = -(beta + 1) * v / x1
        self.v, self.s = v, s
        join = self.width * (v / 2 - s * self.width / 12)
        tail = (x0 / x1) ** beta
        self.c = 1.0 / (join + tail)
        self.join_mass = self.c * join
        self.tail_mass = self.c * tail
        taus = [0.0, 1.0]
        # H'(tau) = 6v(tau - tau^2) + s w (3 tau^2 - 2 tau) = 0
        a = -6 * v + 3 * s * self.width
        b = 6 * v - 2 * s * self.width
        roots = np.roots([a, b]) if abs(a) > 0 else []
        taus += [float(r) for r in np.atleast_1d(roots) if 0 <= r <= 1]
        self.join_sup = max(float(self._hermite(np.array([t]))[0]) for t in taus) * self.c

    def _hermite(self, tau):
        return self.v * (3 * tau ** 2 - 2 * tau ** 3) + self.s * self.width * (tau ** 3 - tau ** 2)

    def __call__(self, x):
        x = x[:, 0]
        out = np.zeros_like(x)
        mid = (x >= self.x_m1) & (x < self.x1)
        out[mid] = self.c * self._hermite((x[mid] - self.x_m1) / self.width)
        far = x >= self.x1
        out[far] = self.c * self.beta * self.x0 ** self.beta * x[far] ** (-self.beta - 1)
        return out

    def upper_mass(self, b: float) -> float:
        # mass of [b, inf) for b >= x1
        return self.tail_mass * (self.x1 / b) ** self.beta

    def sample(self, rng, n):
        out = np.empty(n)
        is_tail = rng.random(n) < self.tail_mass
        k = int(is_tail.sum())
        out[is_tail] = self.x1 * rng.random(k) ** (-1.0 / self.beta)
        need = n - k
        filled = []
        while need > 0:
            m = max(2 * need, 64)
            x = rng.uniform(self.x_m1, self.x1, m)
            u = rng.random(m) * self.join_sup
            acc = x[u < self(x.reshape(-1, 1))]
            filled.append(acc[:need])
            need -= len(filled[-1])
        if filled:
            out[~is_tail] = np.concatenate(filled)
        return out.reshape(-1, 1)

    def layout(self, lo, hi, resolution):
        panels = max(8, int(math.ceil(resolution / GL_ORDER)))
        pieces = []
        if lo < self.x_m1:
            pieces.append(np.array([lo, min(self.x_m1, hi)]))
        a, b = max(lo, self.x_m1), min(hi, self.x1)
        if a < b:
            pieces.append(np.linspace(a, b, max(4, panels // 4) + 1))
        a = max(lo, self.x1)
        if a < hi:
            if a > 0:
                decades = math.log10(hi / a)
                count = max(4, min(panels, int(math.ceil(max(decades, 0.1) * 40))))
                pieces.append(np.geomspace(a, hi, count + 1))
            else:
                pieces.append(np.linspace(a, hi, panels + 1))
        return np.unique(np.concatenate(pieces))


def _pareto(params: dict, holder: HolderSpec) -> DensityModel:
    beta = float(params.get("beta", 0.5))
    x0 = float(params.get("x0", 1.0))
    if not (0 < beta < 1) or not x0 > 0:
        raise ParameterError("pareto requires beta in (0,1) and x0 > 0")
    x1 = float(params.get("x1", 2.0 * x0))
    x_m1 = float(params.get("x_minus1", 0.0))
    if not x_m1 < x1:
        raise ParameterError("pareto requires x_minus1 < x1")
    join = _ParetoJoin(beta, x0, x1, x_m1)
    far = x1 * (join.tail_mass / 1e-14) ** (1 / beta)

    def box_mass(lam):
        lower = max(-lam, x_m1)
        if lam <= lower:
            return 0.0
        if lam >= x1:
            return 1.0 - join.upper_mass(lam)
        return None

    return DensityModel(Domain.full_space(1), holder, join, name="pareto_smoothed", sampler=join.sample,
                        support=(np.array([x_m1]), np.array([far])), breakpoints=((x_m1, x1),),
                        axis_layout=join.layout, check_box=(np.array([x_m1 - 0.5]), np.array([x1 + 8 * x0])),
                        params={"beta": beta, "x0": x0, "x1": x1, "x_minus1": x_m1},
                        levelset={"box_mass": box_mass, "tail_mass": join.tail_mass, "join": join},
                        sup_bound=max(join.join_sup, join.c * join.v))


def _spiky(params: dict, holder: HolderSpec) -> DensityModel:
    d = int(params.get("d", 1))
    L = holder.L
    f = make_bump(holder.alpha, d, holder.c_star)
    a = (f.l1 * L) ** (-1.0 / (holder.alpha + d))
    amp = L * a ** holder.alpha
    half = a / 2

    def evaluator(x):
        return amp * f(x / a)

    def sampler(rng, n):
        chunks = []
        need = n
        while need > 0:
            m = max(4 * need, 64)
            x = rng.uniform(-half, half, size=(m, d))
            u = rng.random(m) * amp * f.sup
            acc = x[u < evaluator(x)]
            chunks.append(acc[:need])
            need -= len(chunks[-1])
        return np.concatenate(chunks)

    bp = tuple((-half, half) for _ in range(d))
    return DensityModel(Domain.full_space(d), holder, evaluator, name="spiky", sampler=sampler,
                        support=(np.full(d, -half), np.full(d, half)), breakpoints=bp, compact=True,
                        params={"d": d, "a": a}, sup_bound=amp * f.sup)


BUILTINS = {
    "uniform_box": _uniform_box,
    "gaussian": _gaussian,
    "pareto_smoothed": _pareto,
    "spiky": _spiky,
}


def make_builtin(family: str, params: Optional[dict] = None, holder: Optional[HolderSpec] = None) -> DensityModel:
    if family not in BUILTINS:
        raise ParameterError(f"unknown family {family!r}; choose from {sorted(BUILTINS)}")
    holder = holder or HolderSpec(alpha=1.0, L=1.0)
    return BUILTINS[family](dict(params or {}), holder)


def from_function(fn: Evaluator, domain: Domain, holder: HolderSpec, name: str = "custom",
                  breakpoints: tuple = (), normalize: bool = False, resolution: Optional[int] = None) -> DensityModel:
    model = DensityModel(domain, holder, fn, name=name, breakpoints=breakpoints)
    if normalize:
        mass = total_mass(model, resolution)
        if not mass > 0:
            raise ParameterError("function has zero mass on the domain")
        model = DensityModel(domain, holder, lambda x: fn(x) / mass, name=name, breakpoints=breakpoints)
    return model


def from_grid(points: np.ndarray, values: np.ndarray, holder: HolderSpec, name: str = "grid") -> DensityModel:
    """Piecewise-linear density from values on a regular tensor grid, renormalized."""
    from scipy.interpolate import RegularGridInterpolator

    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    d = points.shape[1]
    axes = [np.unique(points[:, k]) for k in range(d)]
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != len(points):
        raise ParameterError("grid CSV must list every point of a tensor grid exactly once")
    if np.any(values < 0):
        raise ParameterError("density values must be nonnegative")
    order = np.lexsort(tuple(points[:, k] for k in reversed(range(d))))
    table = values[order].reshape(shape)
    interp = RegularGridInterpolator(axes, table, method="linear", bounds_error=False, fill_value=0.0)
    domain = Domain.box([a[0] for a in axes], [a[-1] for a in axes])
    bp = tuple(tuple(a.tolist()) if len(a) <= 4096 else () for a in axes)
    raw = DensityModel(domain, holder, lambda x: interp(x), name=name, breakpoints=bp)
    mass = total_mass(raw, max(default_resolution(d), 2 * max(shape)))
    if not mass > 0:
        raise ParameterError("grid density has zero mass")
    return DensityModel(domain, holder, lambda x: interp(x) / mass, name=name, breakpoints=bp,
                        params={"shape": list(shape)}, sup_bound=float(values.max()) / mass)
