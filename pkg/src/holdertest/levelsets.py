"""Level-set quantities, cutoffs, separation radii, rescaling and domain restriction."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from .density import DensityModel, Domain, HolderSpec, ParameterError, default_resolution


class NumericError(ArithmeticError):
    pass


class DegenerateConfiguration(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class NormSpec:
    t: float = 1.0

    def __post_init__(self):
        if not 1.0 <= self.t <= 2.0:
            raise ParameterError(f"t must lie in [1, 2], got {self.t}")

    def r(self, alpha: float, d: int) -> float:
        return 2 * alpha * self.t / ((4 - self.t) * alpha + d)


@dataclass(frozen=True)
class ConstantsLedger:
    """Absolute constants left symbolic by the theory.

    ``c_h`` and ``C_K`` default to ``None``: the bandwidth multiplier is then
    derived from ``c_B`` and the kernel constant from the constructed kernel.
    ``c_cell`` (bulk-prior cell constant) defaults to the smallest admissible
    value; ``c_small`` sets the remainder-prior scale and ``c_cover`` the
    tail-prior grid edge in units of h_tail.
    """

    c_aux: float = 0.05
    c_B: float = 0.1
    C_BT: float = 10.0
    c_h: Optional[float] = None
    C_tn: float = 1.0
    C_psib: float = 1.0
    C_psi1: float = 2 * math.sqrt(2) / math.sqrt(0.3)
    c_u: float = 0.05
    c_tail: float = 20.0
    c_Rd: float = 0.1
    C_K: Optional[float] = None
    c_small: float = 1.0
    c_cell: Optional[float] = None
    c_cover: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and not v > 0:
                raise ParameterError(f"ledger constant {f.name} must be positive, got {v}")
        for name in ("c_B", "c_aux", "c_u", "c_Rd"):
            if not getattr(self, name) < 1:
                raise ParameterError(f"ledger constant {name} must be below 1")
        for name in ("C_BT", "C_tn", "C_psib", "C_psi1"):
            if not getattr(self, name) >= 1:
                raise ParameterError(f"ledger constant {name} must be at least 1")

    def bandwidth_multiplier(self, alpha: float, d: int, t: float) -> float:
        if self.c_h is not None:
            return self.c_h
        A = 2 ** (2 * alpha / ((4 - t) * alpha + d) - 1) * self.c_B
        return (A / 4) ** (1 / alpha)

    def updated(self, **kw) -> "ConstantsLedger":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# level-set integrals

def _sorted_levels(model: DensityModel, resolution: Optional[int]):
    """Node values sorted ascending with cumulative p, p^2 sums (cached)."""
    key = ("levels", resolution)
    if key not in model._cache:
        _, w, v = model.grid(resolution)
        order = np.argsort(v, kind="stable")
        vs = v[order]
        ws = w[order]
        c1 = np.concatenate([[0.0], np.cumsum(ws * vs)])
        c2 = np.concatenate([[0.0], np.cumsum(ws * vs * vs)])
        model._cache[key] = (vs, ws, c1, c2)
    return model._cache[key]


def tail_mass(model: DensityModel, u: float, resolution: Optional[int] = None) -> float:
    """p0[T(u)] with T(u) = {p0 < u} (strict)."""
    vs, _, c1, _ = _sorted_levels(model, resolution)
    k = int(np.searchsorted(vs, u, side="left"))
    return float(c1[k])


def tail_second_moment(model: DensityModel, u: float, resolution: Optional[int] = None) -> float:
    vs, _, _, c2 = _sorted_levels(model, resolution)
    k = int(np.searchsorted(vs, u, side="left"))
    return float(c2[k])


def bulk_r_integral(model: DensityModel, u: float, r: float, resolution: Optional[int] = None) -> float:
    """∫ p0^r over B(u) = {p0 >= u}."""
    _, w, v = model.grid(resolution)
    mask = v >= u
    if u <= 0:
        mask &= v > 0
    return float(np.dot(w[mask], v[mask] ** r))


def _aux_ratio(model: DensityModel, u: float, d: int, alpha: float, resolution: Optional[int]) -> float:
    mass = tail_mass(model, u, resolution)
    if mass <= 0:
        return 0.0
    return tail_second_moment(model, u, resolution) / mass ** (d / (alpha + d))


def aux_threshold(n: int, holder: HolderSpec, d: int, ledger: ConstantsLedger) -> float:
    L_tilde = holder.L ** d / n ** (2 * holder.alpha)
    return ledger.c_aux * L_tilde ** (1 / (holder.alpha + d))


def compute_u_aux(model: DensityModel, n: int, holder: Optional[HolderSpec] = None, norm: Optional[NormSpec] = None,
                  ledger: Optional[ConstantsLedger] = None, resolution: Optional[int] = None,
                  threshold: Optional[float] = None, return_flag: bool = False):
    """sup{u >= 0 : p0^2[T(u)] / p0[T(u)]^{d/(alpha+d)} <= theta} by bisection.

    ``threshold`` overrides theta = c_aux * L_tilde^{1/(alpha+d)}. With
    ``return_flag`` the pair (u_aux, clamped) is returned, ``clamped`` meaning
    the condition held for every level and u_aux was set to max p0.
    """
    if n < 2:
        raise ParameterError("n must be at least 2")
    holder = holder or model.holder
    ledger = ledger or ConstantsLedger()
    d = model.d
    theta = threshold if threshold is not None else aux_threshold(n, holder, d, ledger)
    vmax = float(model.grid(resolution)[2].max())
    ratio = lambda u: _aux_ratio(model, u, d, holder.alpha, resolution)
    if ratio(math.nextafter(vmax, math.inf)) <= theta:
        return (vmax, True) if return_flag else vmax
    if ratio(vmax) <= theta:
        # the sup sits in [vmax, nextafter(vmax)): report vmax itself
        return (vmax, False) if return_flag else vmax
    lo, hi = 0.0, vmax
    while hi - lo > 1e-6 * hi:
        mid = 0.5 * (lo + hi)
        g = ratio(mid)
        if not math.isfinite(g):
            raise NumericError(f"non-finite level-set ratio at u={mid}")
        if g <= theta:
            lo = mid
        else:
            hi = mid
    return (lo, False) if return_flag else lo


def scan_u_aux(model: DensityModel, n: int, holder: Optional[HolderSpec] = None, ledger: Optional[ConstantsLedger] = None,
               points: int = 10_000, resolution: Optional[int] = None, threshold: Optional[float] = None):
    """Dense-grid scan of the defining sup; returns (u_scan, grid step)."""
    holder = holder or model.holder
    ledger = ledger or ConstantsLedger()
    theta = threshold if threshold is not None else aux_threshold(n, holder, model.d, ledger)
    vmax = float(model.grid(resolution)[2].max())
    grid = np.linspace(0.0, vmax, points)
    ok = [u for u in grid if _aux_ratio(model, u, model.d, holder.alpha, resolution) <= theta]
    return (max(ok) if ok else 0.0), grid[1] - grid[0]


# ---------------------------------------------------------------------------
# cutoffs

@dataclass(frozen=True)
class CutoffSummary:
    n: int
    d: int
    alpha: float
    t: float
    r: float
    L: float
    L_tilde: float
    u_aux: float
    u_aux_clamped: bool
    u_B: float
    I: float
    tail_mass: float
    rho_bulk: float
    rho_tail: float
    rho_r: float
    dominance: str
    u_tilde: float
    h_tail: float
    h_m: float
    c_h: float
    C_BT: float

    @property
    def rho_star(self) -> float:
        return self.rho_bulk + self.rho_tail + self.rho_r

    @property
    def tail_edge(self) -> float:
        return self.h_m if self.dominance == "bulk" else self.h_tail

    def to_dict(self) -> dict:
        out = asdict(self)
        out["h_tail_infinite"] = math.isinf(self.h_tail)
        if math.isinf(self.h_tail):
            out["h_tail"] = None
        out["rho_star"] = self.rho_star
        return out


def compute_cutoffs(model: DensityModel, n: int, holder: Optional[HolderSpec] = None, norm: Optional[NormSpec] = None,
                    ledger: Optional[ConstantsLedger] = None, resolution: Optional[int] = None) -> CutoffSummary:
    if n < 4 or n % 2:
        raise ParameterError(f"n must be even and at least 4, got {n}")
    holder = holder or model.holder
    norm = norm or NormSpec()
    ledger = ledger or ConstantsLedger()
    a, L, t, d = holder.alpha, holder.L, norm.t, model.d
    r = norm.r(a, d)
    L_tilde = L ** d / n ** (2 * a)
    u_aux, clamped = compute_u_aux(model, n, holder, norm, ledger, resolution, return_flag=True)
    I = bulk_r_integral(model, u_aux, r, resolution)
    if not I > 0:
        raise DegenerateConfiguration("bulk integral I vanishes; no bulk to test")
    D = (4 - t) * a + d
    base = ledger.c_B * L ** (d / (4 * a + d)) / (n * n * I) ** (a / (4 * a + d))
    u_m = base ** (D / ((2 - t) * a + d))
    u_B = max(u_aux, u_m)
    mass = tail_mass(model, u_B, resolution)
    rho_bulk = (L_tilde * I ** (2 * a / r)) ** (1 / (4 * a + d))
    rho_tail = (L_tilde ** (t - 1) * mass ** ((2 - t) * a + d)) ** (1 / (t * (a + d))) if mass > 0 else 0.0
    rho_r = (L ** (d * (t - 1)) / n ** (a * t + d)) ** (1 / (t * (a + d)))
    h_tail = (n * n * L * mass) ** (-1 / (a + d)) if mass > 0 else math.inf
    c_m = ((0.5 - holder.c_star / 2) * ledger.c_B / math.sqrt(d) ** a) ** (1 / a)
    h_m = c_m / (n * n * L ** 4 * I) ** (1 / (4 * a + d)) * base ** (2 / ((2 - t) * a + d))
    dominance = "bulk" if ledger.C_BT * rho_bulk >= rho_tail else "tail"
    u_tilde = u_B / 2 if dominance == "bulk" else u_B
    vals = (L_tilde, u_aux, u_B, I, mass, rho_bulk, rho_tail, rho_r, h_m)
    if not all(math.isfinite(v) for v in vals):
        raise NumericError(f"non-finite cutoff quantity: {vals}")
    return CutoffSummary(n=n, d=d, alpha=a, t=t, r=r, L=L, L_tilde=L_tilde, u_aux=u_aux, u_aux_clamped=clamped,
                         u_B=u_B, I=I, tail_mass=mass, rho_bulk=rho_bulk, rho_tail=rho_tail, rho_r=rho_r,
                         dominance=dominance, u_tilde=u_tilde, h_tail=h_tail, h_m=h_m,
                         c_h=ledger.bandwidth_multiplier(a, d, t), C_BT=ledger.C_BT)


def theoretical_exponent(cutoff_fn, n_values) -> float:
    """Least-squares slope of log rho*(n) from a callable n -> CutoffSummary."""
    ns = np.asarray(n_values, dtype=float)
    rho = np.array([cutoff_fn(int(n)).rho_star for n in ns])
    return float(np.polyfit(np.log(ns), np.log(rho), 1)[0])


def bandwidth_bulk(model: DensityModel, x, cutoffs: CutoffSummary, values: Optional[np.ndarray] = None) -> np.ndarray:
    """h_b(x) = p0(x)^{2/((4-t)alpha+d)} / (n^2 L^4 I)^{1/(4 alpha+d)} on B(u_B/2)."""
    p = model(x) if values is None else np.asarray(values, dtype=float)
    if np.any(p < cutoffs.u_B / 2 * (1 - 1e-12)):
        raise ParameterError("bandwidth_bulk requested below u_B/2")
    return bulk_bandwidth_values(p, cutoffs)


def bulk_bandwidth_values(p: np.ndarray, c: CutoffSummary) -> np.ndarray:
    a, d, t = c.alpha, c.d, c.t
    return np.asarray(p, dtype=float) ** (2 / ((4 - t) * a + d)) / (c.n ** 2 * c.L ** 4 * c.I) ** (1 / (4 * a + d))


def rho_bulk_closed_form(n: int, alpha: float, d: int, L: float, I: float, r: float) -> float:
    return (L ** d / n ** (2 * alpha) * I ** (2 * alpha / r)) ** (1 / (4 * alpha + d))


# ---------------------------------------------------------------------------
# rescaling and restriction

def rescale(model: DensityModel, lam: float) -> DensityModel:
    """Phi_lambda(p)(y) = lambda^d p(lambda y) on the box shrunk by lambda."""
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    if not model.domain.is_box:
        if lam == 1:
            return model
        raise ParameterError("rescaling a full_space model is unsupported")
    if lam == 1:
        return model
    d = model.d
    fac = lam ** d
    base = model.evaluator
    domain = Domain.box(model.domain.lo / lam, model.domain.hi / lam)
    holder = model.holder.with_L(model.holder.L * lam ** (model.holder.alpha + d))
    sampler = None
    if model.sampler is not None:
        inner = model.sampler
        sampler = lambda rng, k: inner(rng, k) / lam
    layout = None
    if model.axis_layout is not None:
        outer = model.axis_layout
        layout = lambda lo, hi, res: np.asarray(outer(lo * lam, hi * lam, res)) / lam
    bp = tuple(tuple(b / lam for b in axis) for axis in model.breakpoints)
    return type(model)(domain=domain, holder=holder, evaluator=lambda y: fac * base(y * lam),
                       name=model.name, sampler=sampler, support=(model.support[0] / lam, model.support[1] / lam),
                       breakpoints=bp, axis_layout=layout, compact=model.compact,
                       check_box=None if model.check_box is None else tuple(np.asarray(b) / lam for b in model.check_box),
                       params={**model.params, "rescaled_by": lam},
                       sup_bound=None if model.sup_bound is None else model.sup_bound * fac)


def _box_mass(model: DensityModel, lam: float, resolution: int) -> float:
    if model.levelset and "box_mass" in model.levelset:
        val = model.levelset["box_mass"](lam)
        if val is not None:
            return float(val)
    from .density import integrate_box

    lo = np.maximum(np.full(model.d, -lam), model.support[0])
    hi = np.minimum(np.full(model.d, lam), model.support[1])
    if np.any(hi <= lo):
        return 0.0
    return integrate_box(model, (lo, hi), resolution)


@dataclass(eq=False)
class Restriction:
    domain: Domain
    model: DensityModel
    V: float
    lam: float


def restrict_to_box(model: DensityModel, n: int, ledger: Optional[ConstantsLedger] = None,
                    resolution: Optional[int] = None, max_lambda: float = 1e30) -> Restriction:
    """Smallest lambda with mass([-lambda, lambda]^d) >= 1 - c_Rd/n, and p0/V on it."""
    if model.domain.is_box:
        raise ParameterError("restrict_to_box expects a full_space model")
    ledger = ledger or ConstantsLedger()
    res = resolution or default_resolution(model.d)
    target = 1.0 - ledger.c_Rd / n
    if model.compact:
        lam = float(max(np.max(np.abs(model.support[0])), np.max(np.abs(model.support[1]))))
        V = 1.0
    else:
        lam = 1.0
        if _box_mass(model, lam, res) >= target:
            while lam > 1e-300 and _box_mass(model, lam / 2, res) >= target:
                lam /= 2.0
        else:
            while _box_mass(model, lam, res) < target:
                lam *= 2.0
                if lam > max_lambda:
                    raise ConfigurationError("mass target unreachable within the maximal box")
        lo = lam / 2
        hi = lam
        for _ in range(200):
            if hi - lo <= 1e-12 * hi:
                break
            mid = 0.5 * (lo + hi)
            if _box_mass(model, mid, res) >= target:
                hi = mid
            else:
                lo = mid
        lam = hi
        V = _box_mass(model, lam, res)
    domain = Domain.box(np.full(model.d, -lam), np.full(model.d, lam))
    base = model.evaluator
    sampler = None
    if model.sampler is not None:
        inner = model.sampler

        def sampler(rng, k):
            chunks, need = [], k
            while need > 0:
                x = inner(rng, max(need + 8, int(need * 1.05) + 8))
                keep = x[np.all(np.abs(x) <= lam, axis=1)]
                chunks.append(keep[:need])
                need -= len(chunks[-1])
            return np.concatenate(chunks)

    lo_s = np.maximum(model.support[0], -lam)
    hi_s = np.minimum(model.support[1], lam)
    bp = tuple(tuple(sorted(set(axis) | {float(lo_s[k]), float(hi_s[k])})) for k, axis in
               enumerate(model.breakpoints))
    levelset = None
    if model.levelset and "box_mass" in model.levelset:
        bm = model.levelset["box_mass"]
        levelset = {"box_mass": lambda l: None if bm(min(l, lam)) is None else bm(min(l, lam)) / V}
    restricted = DensityModel(domain, model.holder, lambda x: base(x) / V, name=f"{model.name}|box",
                              sampler=sampler, support=(lo_s, hi_s) if not model.compact else (model.support[0], model.support[1]),
                              breakpoints=bp, axis_layout=model.axis_layout, compact=model.compact,
                              check_box=model.check_box, params={**model.params, "lambda": lam, "V": V},
                              levelset=levelset,
                              sup_bound=None if model.sup_bound is None else model.sup_bound / V)
    return Restriction(domain=domain, model=restricted, V=V, lam=lam)
