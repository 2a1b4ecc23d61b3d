"""Least-favourable priors, samplers and L_t distances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .density import (DensityModel, Domain, HolderSpec, as_points, make_bump, panel_rule, tensor_rule,
                      uniform_knots, default_resolution)
from .kernel import local_rule
from .levelsets import (ConstantsLedger, CutoffSummary, NormSpec, bulk_bandwidth_values, compute_cutoffs,
                        restrict_to_box, tail_mass)
from .partition import Cube, adaptive_partition, tail_splitting


class AmplitudeError(ValueError):
    pass


class RegimeError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class EnvelopeError(RuntimeError):
    pass


SeedLike = Union[int, np.random.Generator, None]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# sampling and distances

def sample_from(density: DensityModel, n: int, seed: SeedLike = None, batch: int = 4096) -> np.ndarray:
    """n draws from ``density``; native sampler when present, else uniform-envelope rejection."""
    rng = _rng(seed)
    if n < 0:
        raise ValueError("n must be nonnegative")
    if density.sampler is not None:
        return np.asarray(density.sampler(rng, n), dtype=float).reshape(n, density.d)
    lo, hi = density.support
    vol = float(np.prod(hi - lo))
    M = density.max_value() * 1.05
    if not M > 0:
        raise EnvelopeError("density vanishes on its working box")
    rate = 1.0 / (M * vol)
    if rate < 1e-6:
        raise EnvelopeError(f"uniform envelope acceptance {rate:.2e} is below 1e-6")
    out, need = [], n
    while need > 0:
        m = max(batch, int(need / rate * 1.2) + 16)
        x = rng.uniform(lo, hi, size=(m, density.d))
        v = density(x)
        if np.any(v > M):
            raise EnvelopeError("envelope bound exceeded; grid scan missed the maximum")
        acc = x[rng.random(m) * M < v]
        out.append(acc[:need])
        need -= len(out[-1])
    return np.concatenate(out) if out else np.zeros((0, density.d))


def _merged_rule(p: DensityModel, q: DensityModel, resolution: Optional[int]):
    res = resolution or default_resolution(p.d)
    lo = np.minimum(p.support[0], q.support[0])
    hi = np.maximum(p.support[1], q.support[1])
    axes = []
    for k in range(p.d):
        knots = np.unique(np.concatenate([p.axis_knots(k, lo[k], hi[k], res), q.axis_knots(k, lo[k], hi[k], res)]))
        axes.append(panel_rule(knots))
    return tensor_rule(axes)


def lt_distance(p: DensityModel, q: DensityModel, t: float = 1.0, resolution: Optional[int] = None) -> float:
    """||p - q||_t by composite Gauss-Legendre quadrature on the merged knots."""
    if p.d != q.d:
        raise ValueError("dimension mismatch")
    nodes, w = _merged_rule(p, q, resolution)
    diff = np.abs(p(nodes) - q(nodes))
    return float(np.dot(w, diff ** t)) ** (1.0 / t)


# ---------------------------------------------------------------------------
# bumps

@dataclass(eq=False)
class BumpSum:
    """x -> sum_j coef_j f((x - centre_j) / scale_j) for the bump f of H(alpha, 1)."""

    centres: np.ndarray
    scales: np.ndarray
    coefs: np.ndarray
    alpha: float
    c_star: float = 0.1

    def __post_init__(self):
        self.centres = np.atleast_2d(np.asarray(self.centres, dtype=float))
        self.scales = np.asarray(self.scales, dtype=float).reshape(-1)
        self.coefs = np.asarray(self.coefs, dtype=float).reshape(-1)
        self.f = make_bump(self.alpha, self.d, self.c_star)

    @property
    def d(self) -> int:
        return self.centres.shape[1]

    def __len__(self) -> int:
        return len(self.scales)

    def _buckets(self) -> list:
        # bumps grouped by scale within a factor 2, so each group searches with its own reach
        if getattr(self, "_groups", None) is None:
            key = np.floor(np.log2(np.maximum(self.scales, 1e-300))).astype(int)
            groups = []
            for k in np.unique(key):
                ids = np.nonzero(key == k)[0]
                reach = float(self.scales[ids].max()) / 2
                if self.d == 1:
                    order = ids[np.argsort(self.centres[ids, 0], kind="stable")]
                    groups.append((order, self.centres[order, 0], reach))
                else:
                    from scipy.spatial import cKDTree

                    groups.append((ids, cKDTree(self.centres[ids]), reach))
            self._groups = groups
        return self._groups

    def _pairs(self, pts: np.ndarray):
        for ids, index, reach in self._buckets():
            if self.d == 1:
                lo = np.searchsorted(index, pts[:, 0] - reach, side="left")
                hi = np.searchsorted(index, pts[:, 0] + reach, side="right")
                counts = hi - lo
                rows = np.repeat(np.arange(len(pts)), counts)
                offs = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
                cols = ids[np.repeat(lo, counts) + offs]
            else:
                hoods = index.query_ball_point(pts, r=reach)
                counts = np.array([len(v) for v in hoods])
                rows = np.repeat(np.arange(len(pts)), counts)
                cols = ids[np.concatenate([np.asarray(v, dtype=np.int64) for v in hoods])] if counts.sum() else np.zeros(0, np.int64)
            yield rows, cols

    def __call__(self, x, chunk: int = 200_000) -> np.ndarray:
        pts = as_points(x, self.d)
        out = np.zeros(len(pts))
        if not len(self) or not len(pts):
            return out
        for s in range(0, len(pts), chunk):
            block = pts[s:s + chunk]
            for rows, cols in self._pairs(block):
                if len(rows):
                    u = (block[rows] - self.centres[cols]) / self.scales[cols, None]
                    out[s:s + chunk] += np.bincount(rows, weights=self.coefs[cols] * self.f(u), minlength=len(block))
        return out

    def masses(self) -> np.ndarray:
        return self.coefs * self.scales ** self.d * self.f.l1

    def norms_t(self, t: float) -> np.ndarray:
        """||coef_j f((. - c_j)/s_j)||_t^t per bump."""
        return np.abs(self.coefs) ** t * self.scales ** self.d * self.f.norm(t) ** t

    def edges(self, axis: int) -> np.ndarray:
        return np.concatenate([self.centres[:, axis] - self.scales / 2, self.centres[:, axis] + self.scales / 2])

    def knots(self, axis: int, lo: float, hi: float, panels: int) -> np.ndarray:
        if not len(self):
            return np.zeros(0)
        if self.d > 1:
            k = self.edges(axis)
        else:
            t = np.linspace(-0.5, 0.5, panels + 1)
            k = (self.centres[:, axis, None] + self.scales[:, None] * t[None, :]).ravel()
        return k[(k > lo) & (k < hi)]


def perturbed_model(base: DensityModel, bumps: BumpSum, name: str, scale: float = 1.0,
                    sampler=None, params: Optional[dict] = None, panels: int = 8) -> DensityModel:
    """(base + bumps) / scale as a DensityModel whose quadrature resolves every bump."""
    outer_layout = base.axis_layout
    inner = base.evaluator

    def evaluator(x):
        return (inner(x) + bumps(x)) / scale

    def layout(lo, hi, res):
        if outer_layout is not None:
            knots = np.asarray(outer_layout(lo, hi, res), dtype=float)
        else:
            knots = uniform_knots(lo, hi, res)
        # one layout serves every axis, so for d > 1 it merges the bump edges of all axes
        extra = [bumps.knots(k, lo, hi, panels) for k in range(base.d)]
        return np.unique(np.concatenate([knots, *extra, [lo, hi]]))

    peak = None if base.sup_bound is None else (base.sup_bound + float(np.max(np.maximum(bumps.coefs, 0), initial=0)) * bumps.f.sup) / scale
    return DensityModel(domain=base.domain, holder=base.holder, evaluator=evaluator, name=name, sampler=sampler,
                        support=(base.support[0].copy(), base.support[1].copy()), breakpoints=base.breakpoints,
                        axis_layout=layout, compact=base.compact, check_box=base.check_box,
                        params={**base.params, **(params or {})}, sup_bound=peak)


def rejection_sampler(base: DensityModel, target, envelope: float):
    """Sampler for ``target`` by rejection against ``base`` with target <= envelope * base."""

    def sampler(rng, n):
        out, need = [], n
        while need > 0:
            m = max(64, int(need * envelope * 1.1) + 16)
            x = sample_from(base, m, rng)
            p0 = base(x)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(p0 > 0, target(x) / (envelope * p0), 0.0)
            acc = x[rng.random(m) < ratio]
            out.append(acc[:need])
            need -= len(out[-1])
        return np.concatenate(out) if out else np.zeros((0, base.d))

    return sampler


def _support_minimum(model: DensityModel, centres: np.ndarray, scales: np.ndarray, probes: int = 9) -> np.ndarray:
    d = centres.shape[1]
    t = np.linspace(-0.5, 0.5, probes)
    off = np.stack(np.meshgrid(*([t] * d), indexing="ij"), axis=-1).reshape(-1, d)
    pts = (centres[:, None, :] + scales[:, None, None] * off[None, :, :]).reshape(-1, d)
    return model(pts).reshape(len(centres), len(off)).min(axis=1)


@dataclass(eq=False)
class PriorRealization:
    kind: str
    base: DensityModel
    density: DensityModel
    metadata: dict
    separation: float
    amplitudes: dict
    seed: Optional[int]
    bumps: Optional[BumpSum] = None
    t: float = 1.0
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        meta = {k: v for k, v in self.metadata.items() if np.isscalar(v) or v is None}
        return {"kind": self.kind, "seed": self.seed, "separation": self.separation, "t": self.t,
                "amplitudes": dict(self.amplitudes), "metadata": meta}


def _working(model: DensityModel, n: int, ledger: ConstantsLedger) -> DensityModel:
    return model if model.domain.is_box else restrict_to_box(model, n, ledger).model


# ---------------------------------------------------------------------------
# bulk prior

def default_cell_constant(holder: HolderSpec, d: int, ledger: ConstantsLedger) -> float:
    """Largest c with c_B c^{-alpha} >= sqrt(d)^alpha (2^{1-alpha} v 1) / (1/2 - c_star)."""
    if ledger.c_cell is not None:
        return ledger.c_cell
    a = holder.alpha
    need = math.sqrt(d) ** a * max(2 ** (1 - a), 1.0) / (0.5 - holder.c_star)
    return (ledger.c_B / need) ** (1 / a)


def bulk_omega(model: DensityModel, u: float, resolution: Optional[int] = None) -> Cube:
    """Working cube for the bulk partition: the domain unless it dwarfs the bulk."""
    nodes, _, values = model.grid(resolution)
    bulk = nodes[values >= u]
    dom = Cube(model.domain.lo + model.domain.edge / 2, model.domain.edge)
    if not len(bulk):
        return dom
    lo, hi = bulk.min(axis=0), bulk.max(axis=0)
    extent = float(np.max(hi - lo))
    if dom.edge <= 4 * max(extent, 1e-300):
        return dom
    edge = extent * 1.25 + 1e-12 * dom.edge
    return Cube((lo + hi) / 2, edge)


@dataclass(eq=False)
class BulkDesign:
    """Cells and bump geometry of the bulk prior; ``draw`` picks the signs."""

    model: DensityModel
    cutoffs: CutoffSummary
    partition: object
    centres_plus: np.ndarray
    centres_minus: np.ndarray
    h: np.ndarray
    A: np.ndarray
    c: float
    beta: float
    c_beta: float
    C_phi: Optional[float]
    rel_amplitude: Optional[float]
    fill: bool
    capped: int

    @property
    def N(self) -> int:
        return len(self.h)

    def pair_norm_t(self, t: float) -> np.ndarray:
        f = make_bump(self.cutoffs.alpha, self.cutoffs.d, self.model.holder.c_star)
        return 2 * np.abs(self.A) ** t * self.h ** self.cutoffs.d * f.norm(t) ** t

    def closed_form_separation(self, t: float) -> float:
        return float(np.sum(self.pair_norm_t(t))) ** (1 / t)

    def bumps(self, signs: np.ndarray) -> BumpSum:
        centres = np.concatenate([self.centres_plus, self.centres_minus])
        scales = np.concatenate([self.h, self.h])
        coefs = np.concatenate([signs * self.A, -signs * self.A])
        return BumpSum(centres, scales, coefs, self.cutoffs.alpha, self.model.holder.c_star)

    def draw(self, seed: SeedLike = 0, signs: Optional[np.ndarray] = None, t: Optional[float] = None,
             check: bool = True, separation: bool = True) -> PriorRealization:
        rng = _rng(seed)
        if signs is None:
            signs = rng.choice(np.array([-1.0, 1.0]), size=self.N)
        signs = np.asarray(signs, dtype=float)
        bumps = self.bumps(signs)
        f = bumps.f
        envelope = 1.0 + (float(np.max(self.A * f.sup / np.maximum(self._pmin, 1e-300))) if self.N else 0.0)
        target = lambda x: self.model(x) + bumps(x)
        dens = perturbed_model(self.model, bumps, name=f"{self.model.name}+bulk",
                               sampler=rejection_sampler(self.model, target, envelope),
                               params={"prior": "bulk"})
        if check:
            _check_nonnegative(dens, bumps)
        t = self.cutoffs.t if t is None else t
        sep = lt_distance(dens, self.model, t) if separation else self.closed_form_separation(t)
        return PriorRealization(kind="bulk", base=self.model, density=dens,
                                metadata={"N": self.N, "signs": signs, "h": self.h, "c": self.c, "beta": self.beta,
                                          "c_beta": self.c_beta, "fill": self.fill, "capped_cells": self.capped,
                                          "u": self.cutoffs.u_B, "closed_form_separation": self.closed_form_separation(t)},
                                separation=sep,
                                amplitudes={"C_phi": self.C_phi, "rel_amplitude": self.rel_amplitude},
                                seed=seed if isinstance(seed, (int, np.integer)) else None, bumps=bumps, t=t,
                                extra={"design": self})


def _check_nonnegative(dens: DensityModel, bumps: BumpSum) -> None:
    nodes, _, v = dens.grid()
    # the negative lobes bottom out at their centres
    neg = bumps.coefs < 0
    low = dens(bumps.centres[neg]) if neg.any() else np.zeros(0)
    worst = min(float(v.min()), float(low.min()) if len(low) else math.inf)
    if worst < -1e-12:
        raise AmplitudeError(f"perturbation drives the density negative (min {worst:.3e}); shrink the amplitude")


def bulk_design(model: DensityModel, cutoffs: CutoffSummary, C_phi: Optional[float] = None, c: Optional[float] = None,
                fill: bool = False, rel_amplitude: Optional[float] = None, ledger: Optional[ConstantsLedger] = None,
                omega_tilde: Optional[Cube] = None) -> BulkDesign:
    ledger = ledger or ConstantsLedger()
    if not model.domain.is_box:
        raise GeometryError("bulk prior needs the working-box model")
    holder = model.holder
    a, d, t, n = cutoffs.alpha, cutoffs.d, cutoffs.t, cutoffs.n
    D = (4 - t) * a + d
    beta = D / 2
    c = default_cell_constant(holder, d, ledger) if c is None else float(c)
    c_beta = c ** (-beta) * (n * n * cutoffs.L ** 4 * cutoffs.I) ** (beta / (4 * a + d))
    omega = omega_tilde or bulk_omega(model, cutoffs.u_B)
    part = adaptive_partition(model, omega, beta, cutoffs.u_B, c_beta)
    if not len(part):
        raise RegimeError("bulk prior needs a nonempty bulk")
    X = part.centers
    e = part.edges
    room = e / (2 / math.sqrt(d) + 1)
    if fill:
        h = room
    else:
        hb = bulk_bandwidth_values(model(X), cutoffs)
        h = np.minimum(c * hb / 4, room)
    shift = (h / math.sqrt(d))[:, None] * np.ones((1, d))
    cp, cm = X + shift, X - shift
    f = make_bump(a, d, holder.c_star)
    pmin = np.minimum(_support_minimum(model, cp, h), _support_minimum(model, cm, h))
    capped = 0
    if rel_amplitude is not None:
        want = rel_amplitude * model(X) / f.sup
        cap = pmin * (1 - 1e-9) / f.sup
        capped = int(np.sum(want > cap))
        A = np.minimum(want, cap)
    else:
        C_phi = holder.delta if C_phi is None else float(C_phi)
        if not C_phi > 0:
            raise AmplitudeError("C_phi must be positive")
        A = C_phi * cutoffs.L * h ** a
    des = BulkDesign(model=model, cutoffs=cutoffs, partition=part, centres_plus=cp, centres_minus=cm, h=h, A=A,
                     c=c, beta=beta, c_beta=c_beta, C_phi=None if rel_amplitude is not None else C_phi,
                     rel_amplitude=rel_amplitude, fill=fill, capped=capped)
    des._pmin = pmin
    return des


def bulk_prior(model: DensityModel, cutoffs: CutoffSummary, C_phi: Optional[float] = None, seed: SeedLike = 0,
               signs: Optional[np.ndarray] = None, **kw) -> PriorRealization:
    """p0 + sum_j eps_j phi_j with Rademacher eps_j over the adaptive bulk cells."""
    return bulk_design(model, cutoffs, C_phi=C_phi, **kw).draw(seed, signs=signs)


def chi2_bound_bulk(prior: PriorRealization, n: Optional[int] = None, order: int = 32) -> float:
    """exp(1/2 sum_j n^2 (∫ phi_j^2 / p0)^2) - 1 with per-cell quadrature."""
    if prior.kind != "bulk":
        raise ValueError("chi2_bound_bulk needs a bulk prior")
    des: BulkDesign = prior.extra["design"]
    n = des.cutoffs.n if n is None else n
    s = _phi_sq_over_p0(des, order)
    log_bound = 0.5 * n * n * float(np.sum(s ** 2))
    if log_bound > 700:
        return math.inf
    return math.expm1(log_bound)


def _phi_sq_over_p0(des: BulkDesign, order: int = 32) -> np.ndarray:
    """∫ phi_j^2 / p0 for every cell (both lobes)."""
    d = des.cutoffs.d
    t, w = local_rule(d, order)
    f = make_bump(des.cutoffs.alpha, d, des.model.holder.c_star)
    out = np.zeros(des.N)
    for centres in (des.centres_plus, des.centres_minus):
        half = des.h / 2
        x = (centres[:, None, :] + half[:, None, None] * t[None, :, :]).reshape(-1, d)
        p0 = des.model(x).reshape(des.N, len(w))
        if np.any(p0 <= 0):
            raise ArithmeticError("null density vanishes on a perturbed cell")
        phi = des.A[:, None] * f(np.tile(t, (des.N, 1)) / 2).reshape(des.N, len(w))
        out += (phi ** 2 / p0) @ w * half ** d
    return out


# ---------------------------------------------------------------------------
# tail prior

@dataclass(eq=False)
class TailDesign:
    model: DensityModel
    cutoffs: CutoffSummary
    covering: object
    U: int
    pi: np.ndarray
    pi_bar: float
    cube_index: np.ndarray
    cube_edge: float
    up_centres: np.ndarray
    up_coef: np.ndarray
    c_up: np.ndarray
    Gamma_up: np.ndarray
    Gamma_down: np.ndarray
    down: list
    u_j: np.ndarray
    c_down: float
    c_beta_prime: float

    def norm_qb(self, b: np.ndarray) -> float:
        return 1.0 + float(np.sum(b * self.Gamma_up - (1 - b) * self.Gamma_down))

    def draw(self, seed: SeedLike = 0, t: Optional[float] = None, check: bool = True,
             separation: bool = True) -> PriorRealization:
        rng = _rng(seed)
        b = (rng.random(len(self.pi)) < self.pi).astype(float)
        d = self.model.d
        a = self.cutoffs.alpha
        cs, ss, cf = [], [], []
        for j, bj in enumerate(b):
            if bj:
                cs.append(self.up_centres[j:j + 1])
                ss.append(np.array([self.cube_edge]))
                cf.append(np.array([self.up_coef[j]]))
            else:
                z, h, coef = self.down[j]
                cs.append(z)
                ss.append(h)
                cf.append(-coef)
        bumps = BumpSum(np.concatenate(cs) if cs else np.zeros((0, d)), np.concatenate(ss) if ss else np.zeros(0),
                        np.concatenate(cf) if cf else np.zeros(0), a, self.model.holder.c_star)
        norm = self.norm_qb(b)
        f = bumps.f
        up_peak = float(np.max(self.up_coef * b, initial=0.0)) * f.sup
        pmin = float(np.min(self.model(self.up_centres[b > 0]), initial=math.inf)) if b.any() else math.inf
        envelope = (1.0 + (up_peak / pmin if pmin > 0 and math.isfinite(pmin) else 0.0)) / norm
        target = lambda x, _b=bumps: (self.model(x) + _b(x)) / norm
        dens = perturbed_model(self.model, bumps, name=f"{self.model.name}+tail", scale=norm,
                               sampler=rejection_sampler(self.model, target, max(envelope, 1.0 / norm)),
                               params={"prior": "tail"})
        if check:
            _check_nonnegative(dens, bumps)
        t = self.cutoffs.t if t is None else t
        sep = lt_distance(dens, self.model, t) if separation else math.nan
        return PriorRealization(kind="tail", base=self.model, density=dens,
                                metadata={"b": b, "U": self.U, "pi": self.pi, "pi_bar": self.pi_bar,
                                          "norm_qb": norm, "selected": int(b.sum()), "cubes": len(self.pi),
                                          "c_up_min": float(self.c_up.min()) if len(self.c_up) else None,
                                          "c_up_max": float(self.c_up.max()) if len(self.c_up) else None},
                                separation=sep, amplitudes={"c_down": self.c_down,
                                                            "c_up_bracket": [float(self.c_up.min()), float(self.c_up.max())] if len(self.c_up) else None},
                                seed=seed if isinstance(seed, (int, np.integer)) else None, bumps=bumps, t=t,
                                extra={"design": self})


def _median_mass_level(model: DensityModel, cube: Cube, half_mass: float, resolution: int) -> float:
    nodes, w = model.rule(cube.lower, cube.upper, resolution)
    v = model(nodes)
    order = np.argsort(-v, kind="stable")
    cum = np.cumsum((w * v)[order])
    k = int(np.searchsorted(cum, half_mass, side="left"))
    return float(v[order][min(k, len(v) - 1)])


def tail_design(model: DensityModel, cutoffs: CutoffSummary, ledger: Optional[ConstantsLedger] = None,
                c_down: Optional[float] = None, max_cubes: int = 200_000, local_resolution: int = 64) -> TailDesign:
    ledger = ledger or ConstantsLedger()
    n = cutoffs.n
    if cutoffs.dominance != "tail":
        raise RegimeError("tail prior needs a tail-dominated configuration")
    if cutoffs.tail_mass < ledger.c_tail / n:
        raise RegimeError(f"tail mass {cutoffs.tail_mass:.3e} below c_tail/n = {ledger.c_tail / n:.3e}")
    if not model.domain.is_box:
        raise GeometryError("tail prior needs the working-box model")
    holder = model.holder
    a, d, L = cutoffs.alpha, cutoffs.d, cutoffs.L
    cov = tail_splitting(model, cutoffs.u_B, ledger.c_cover * cutoffs.h_tail, n=n, c_u=ledger.c_u, max_cubes=max_cubes)
    if not cov.complete:
        raise RegimeError("tail covering too large to materialize for the tail prior")
    U = cov.U
    if U is None:
        raise RegimeError("no index U satisfies the sparsity condition")
    p = cov.masses[U - 1:]
    idx = cov.indices[U - 1:]
    keep = p > 0
    p, idx = p[keep], idx[keep]
    S = float(p.sum())
    pi_bar = 2 * ledger.c_u / (n * n * S)
    pi = p / pi_bar
    if np.any(pi > 0.5 + 1e-12):
        raise ArithmeticError(f"Bernoulli parameter above 1/2 (max {pi.max():.4f})")
    f = make_bump(a, d, holder.c_star)
    c_down = holder.delta if c_down is None else float(c_down)
    cbp = math.sqrt(d) ** a * max(2 ** (1 - a), 1.0) / (0.5 - holder.c_star)
    edge = cov.edge
    centres = cov.origin + (idx + 0.5) * edge
    down, G_down, u_js = [], np.zeros(len(p)), np.zeros(len(p))
    for j, (cz, pj) in enumerate(zip(centres, p)):
        cube = Cube(cz, edge)
        u_j = _median_mass_level(model, cube, pj / 2, local_resolution)
        u_js[j] = u_j
        part = adaptive_partition(model, cube, a, u_j, cbp * L)
        z = part.centers
        h = part.edges
        coef = c_down * L * h ** a
        down.append((z, h, coef))
        G_down[j] = float(np.sum(coef * h ** d)) * f.l1
    up_unit = L * edge ** a
    G_unit = up_unit * edge ** d * f.l1
    c_up = (1 - pi) * G_down / (pi * G_unit)
    up_coef = c_up * up_unit
    G_up = up_coef * edge ** d * f.l1
    return TailDesign(model=model, cutoffs=cutoffs, covering=cov, U=U, pi=pi, pi_bar=pi_bar, cube_index=idx,
                      cube_edge=edge, up_centres=centres, up_coef=up_coef, c_up=c_up, Gamma_up=G_up,
                      Gamma_down=G_down, down=down, u_j=u_js, c_down=c_down, c_beta_prime=cbp)


def tail_prior(model: DensityModel, cutoffs: CutoffSummary, seed: SeedLike = 0, **kw) -> PriorRealization:
    """Sparse Bernoulli prior on the tail covering, normalised by ||q_b||_1."""
    return tail_design(model, cutoffs, **kw).draw(seed)


# ---------------------------------------------------------------------------
# remainder prior

def remainder_prior(model: DensityModel, n: int, c_r: Optional[float] = None, seed: SeedLike = 0,
                    ledger: Optional[ConstantsLedger] = None, norm: Optional[NormSpec] = None,
                    cutoffs: Optional[CutoffSummary] = None) -> PriorRealization:
    """p0 plus an opposite-sign bump pair of scale h_r next to the mode."""
    ledger = ledger or ConstantsLedger()
    work = _working(model, n, ledger)
    holder = work.holder
    cut = cutoffs or compute_cutoffs(work, n, holder, norm or NormSpec(), ledger)
    if cut.tail_mass >= ledger.c_tail / n:
        raise RegimeError("remainder prior needs tail mass below c_tail/n")
    a, d, L = holder.alpha, work.d, holder.L
    h_r = (n * L / ledger.c_small) ** (-1 / (a + d))
    x0 = work.argmax().astype(float)
    lo, hi = work.domain.lo, work.domain.hi
    if np.any(hi - lo < 2 * h_r):
        raise GeometryError(f"domain edge {float(np.min(hi - lo)):.3e} cannot hold two bumps of scale {h_r:.3e}")
    x0[0] = min(max(x0[0], lo[0] + h_r), hi[0] - h_r)
    for k in range(1, d):
        x0[k] = min(max(x0[k], lo[k] + h_r / 2), hi[k] - h_r / 2)
    e1 = np.zeros(d)
    e1[0] = h_r / 2
    x1, x2 = x0 - e1, x0 + e1
    c_r = holder.delta if c_r is None else float(c_r)
    A = c_r * L * h_r ** a
    bumps = BumpSum(np.stack([x1, x2]), np.array([h_r, h_r]), np.array([A, -A]), a, holder.c_star)
    envelope = 1.0 + A * bumps.f.sup / max(float(_support_minimum(work, x1[None], np.array([h_r]))[0]), 1e-300)
    target = lambda x: work(x) + bumps(x)
    dens = perturbed_model(work, bumps, name=f"{work.name}+remainder",
                           sampler=rejection_sampler(work, target, envelope), params={"prior": "remainder"})
    _check_nonnegative(dens, bumps)
    t = cut.t
    f = bumps.f
    return PriorRealization(kind="remainder", base=work, density=dens,
                            metadata={"h_r": h_r, "x1": x1.tolist(), "x2": x2.tolist(),
                                      "tv_closed_form": A * h_r ** d * f.l1,
                                      "closed_form_separation": (2 * A ** t * h_r ** d * f.norm(t) ** t) ** (1 / t)},
                            separation=lt_distance(dens, work, t), amplitudes={"c_r": c_r},
                            seed=seed if isinstance(seed, (int, np.integer)) else None, bumps=bumps, t=t)


# ---------------------------------------------------------------------------
# tail amplitude family for power runs

def _smooth_step(v: np.ndarray) -> np.ndarray:
    """1 for v <= 1, 0 for v >= 2, C^1 in between."""
    s = np.clip(v - 1.0, 0.0, 1.0)
    return 1.0 - s * s * (3 - 2 * s)


def _spike_mixture_sampler(model: DensityModel, deflated: DensityModel, bumps: BumpSum, removed: float,
                           scale: float):
    # p_a is a mixture: the deflated null (weight 1 - removed) plus equal-mass spikes
    body = rejection_sampler(model, deflated, 1.0)
    peak = float(np.max(bumps.coefs)) * bumps.f.sup
    d = model.d

    def sampler(rng, n):
        k = int(rng.binomial(n, removed))
        parts = [body(rng, n - k)]
        which = rng.integers(len(bumps.centres), size=k)
        out = np.empty((k, d))
        todo = np.arange(k)
        while len(todo):
            c = bumps.centres[which[todo]]
            x = c + scale * (rng.random((len(todo), d)) - 0.5)
            ok = rng.random(len(todo)) * peak < bumps(x)
            out[todo[ok]] = x[ok]
            todo = todo[~ok]
        parts.append(out)
        x = np.concatenate(parts)
        return x[rng.permutation(n)]

    return sampler


def _tail_family_distance(model: DensityModel, deflated: DensityModel, bumps: BumpSum, t: float,
                          scale: float) -> float:
    # deflation on the model grid, corrected on each (disjoint) spike cube by a local rule
    nodes, w, v = model.grid()
    total = float(np.dot(w, np.abs(v - deflated(nodes)) ** t))
    pts, lw = local_rule(model.d, 48 if model.d == 1 else 12)
    half = scale / 2
    for c in bumps.centres:
        x = c + half * pts
        lw_c = lw * half ** model.d
        gap = model(x) - deflated(x)
        total += float(np.dot(lw_c, np.abs(bumps(x) - gap) ** t - np.abs(gap) ** t))
    return max(total, 0.0) ** (1 / t)


def tail_family(model: DensityModel, cutoffs: CutoffSummary, amplitude: float, spikes: int = 4,
                seed: SeedLike = 0) -> PriorRealization:
    """Move a fraction ``amplitude`` of the low-density mass into a few narrow spikes.

    p_a = p0 (1 - a tau(p0 / u_B)) + spikes carrying exactly the removed mass, so
    the total stays one and the separation is increasing in a.
    """
    if not 0 <= amplitude <= 1:
        raise AmplitudeError("tail amplitude must lie in [0, 1]")
    if not model.domain.is_box:
        raise GeometryError("tail family needs the working-box model")
    u = cutoffs.u_B
    a, d = cutoffs.alpha, model.d
    nodes, w, v = model.grid()
    removed = amplitude * float(np.dot(w, v * _smooth_step(v / u)))
    rng = _rng(seed)
    pool = sample_from(model, 20_000, rng)
    pool = pool[model(pool) < u]
    scale = min(cutoffs.h_tail if math.isfinite(cutoffs.h_tail) else cutoffs.h_m, cutoffs.h_m * 4)
    if len(pool) < spikes or not removed > 0:
        raise RegimeError("no tail region to perturb")
    lo, hi = model.domain.lo + scale / 2, model.domain.hi - scale / 2
    centres = []
    for x in np.clip(pool, lo, hi):
        if all(np.max(np.abs(x - c)) > scale for c in centres):
            centres.append(x)
            if len(centres) == spikes:
                break
    if len(centres) < spikes:
        raise RegimeError("tail region too small for disjoint spikes")
    centres = np.asarray(centres)
    f = make_bump(a, d, model.holder.c_star)
    coef = np.full(spikes, removed / spikes / (scale ** d * f.l1))
    bumps = BumpSum(centres, np.full(spikes, scale), coef, a, model.holder.c_star)
    base = model.evaluator

    deflated = DensityModel(domain=model.domain, holder=model.holder,
                            evaluator=lambda x: base(x) * (1 - amplitude * _smooth_step(base(x) / u)),
                            name=model.name, support=model.support, breakpoints=model.breakpoints,
                            axis_layout=model.axis_layout, sup_bound=model.sup_bound)
    dens = perturbed_model(deflated, bumps, name=f"{model.name}+tailfamily",
                           sampler=_spike_mixture_sampler(model, deflated, bumps, removed, scale),
                           params={"prior": "tail_family"})
    return PriorRealization(kind="tail", base=model, density=dens,
                            metadata={"removed_mass": removed, "spikes": spikes, "scale": scale},
                            separation=_tail_family_distance(model, deflated, bumps, cutoffs.t, scale),
                            amplitudes={"amplitude": amplitude},
                            seed=seed if isinstance(seed, (int, np.integer)) else None, bumps=bumps, t=cutoffs.t)
