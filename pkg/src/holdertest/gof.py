"""Bulk statistic, tail tests and the combined goodness-of-fit decision."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .density import DensityModel, HolderSpec, as_points
from .kernel import Kernel, SplitSample, kde, local_rule, make_kernel
from .levelsets import (ConstantsLedger, CutoffSummary, NormSpec, Restriction, bulk_bandwidth_values,
                        compute_cutoffs, restrict_to_box, tail_mass)
from .partition import TailCovering, tail_splitting


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class CalibratedThresholds:
    """Null quantiles of T_bulk / t_n and of |S/n - m| / sqrt(m/n)."""

    bulk: Optional[float]
    psi1: Optional[float]
    eta: float
    trials: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TestConfig:
    holder: Optional[HolderSpec] = None
    norm: NormSpec = field(default_factory=NormSpec)
    ledger: ConstantsLedger = field(default_factory=ConstantsLedger)
    thresholds: Optional[CalibratedThresholds] = None
    resolution: Optional[int] = None
    quad_order: Optional[int] = None
    max_cubes: int = 200_000
    seed: Optional[int] = None

    @property
    def mode(self) -> str:
        return "ledger" if self.thresholds is None else "calibrated"


@dataclass(frozen=True)
class Histogram:
    cells: np.ndarray
    counts: np.ndarray
    outside: int
    n: int

    def __post_init__(self):
        if int(self.counts.sum()) + self.outside != self.n or np.any(self.counts < 0):
            raise ValueError("histogram counts do not add up")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def max_count(self) -> int:
        return int(self.counts.max()) if len(self.counts) else 0


def tail_histogram(points, covering: Optional[TailCovering], d: Optional[int] = None) -> Histogram:
    """N_j per occupied cube; a point on a shared face goes to the lower cube."""
    if covering is None:
        pts = as_points(points, d or 1) if np.size(points) else np.zeros((0, d or 1))
        return Histogram(np.zeros((0, pts.shape[1]), dtype=np.int64), np.zeros(0, dtype=np.int64), len(pts), len(pts))
    pts = as_points(points, covering.d) if np.size(points) else np.zeros((0, covering.d))
    n = len(pts)
    if n == 0:
        return Histogram(np.zeros((0, covering.d), dtype=np.int64), np.zeros(0, dtype=np.int64), 0, 0)
    idx, inside = covering.index_of(pts)
    keep = inside & ~covering.is_removed(idx)
    if covering.complete:
        listed = _rows_in(idx, covering.indices)
        keep &= listed
    if not keep.any():
        return Histogram(np.zeros((0, covering.d), dtype=np.int64), np.zeros(0, dtype=np.int64), n, n)
    cells, counts = np.unique(idx[keep], axis=0, return_counts=True)
    return Histogram(cells, counts.astype(np.int64), int(n - keep.sum()), n)


def _rows_in(rows: np.ndarray, table: np.ndarray) -> np.ndarray:
    if not len(table):
        return np.zeros(len(rows), dtype=bool)
    view = lambda a: np.ascontiguousarray(a.astype(np.int64)).view([("", np.int64)] * a.shape[1]).ravel()
    return np.isin(view(rows), view(table))


def psi1_threshold(tail_mass_value: float, n: int, C_psi1: float) -> float:
    return C_psi1 * math.sqrt(tail_mass_value / n)


def psi1_deviation(hist: Histogram, tail_mass_value: float, n: int) -> float:
    """|S/n - m| / sqrt(m/n); infinite when m = 0 and a tail point exists."""
    dev = abs(hist.total / n - tail_mass_value)
    if tail_mass_value <= 0:
        return math.inf if hist.total else 0.0
    return dev / math.sqrt(tail_mass_value / n)


def psi1(hist: Histogram, tail_mass_value: float, n: int, C_psi1: float) -> bool:
    if not 0 <= tail_mass_value <= 1 + 1e-9:
        raise ValueError("tail mass must lie in [0, 1]")
    if tail_mass_value <= 0:
        return hist.total > 0
    return abs(hist.total / n - tail_mass_value) > psi1_threshold(tail_mass_value, n, C_psi1)


def psi2(hist: Histogram) -> bool:
    return hist.max_count >= 2


def psi_out(points, box) -> bool:
    """Reject when any observation lies outside the working box ``(lo, hi)``."""
    lo, hi = (box.lo, box.hi) if hasattr(box, "lo") else box
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if not np.size(points):
        return False
    pts = as_points(points, len(lo))
    return bool(np.any(~np.all((pts >= lo) & (pts <= hi), axis=1)))


# ---------------------------------------------------------------------------
# bulk statistic

def omega_exponent(alpha: float, d: int, t: float) -> float:
    return (2 * alpha * t - 4 * alpha) / ((4 - t) * alpha + d)


def threshold_tn(cutoffs: CutoffSummary, C_tn: float = 1.0) -> float:
    a, d, n = cutoffs.alpha, cutoffs.d, cutoffs.n
    return C_tn * cutoffs.L ** (2 * d / (4 * a + d)) * cutoffs.I ** ((2 * a + d) / (4 * a + d)) / n ** (4 * a / (4 * a + d))


@dataclass(eq=False)
class BulkSetup:
    """Everything T_bulk needs that does not depend on the data."""

    model: DensityModel
    cutoffs: CutoffSummary
    kernel: Kernel
    u_tilde: float
    exponent: float
    c_h: float
    C: float
    t_n: float
    empty: bool
    order: int

    def bandwidth(self, p: np.ndarray) -> np.ndarray:
        return self.c_h * bulk_bandwidth_values(np.maximum(p, self.u_tilde), self.cutoffs)

    def weight(self, p: np.ndarray) -> np.ndarray:
        return np.maximum(p, self.u_tilde) ** self.exponent


def bulk_setup(model: DensityModel, cutoffs: CutoffSummary, ledger: Optional[ConstantsLedger] = None,
               resolution: Optional[int] = None, order: Optional[int] = None) -> BulkSetup:
    ledger = ledger or ConstantsLedger()
    kernel = make_kernel(cutoffs.alpha, cutoffs.d)
    e = omega_exponent(cutoffs.alpha, cutoffs.d, cutoffs.t)
    _, w, v = model.grid(resolution)
    mask = v >= cutoffs.u_tilde
    C = float(np.dot(w[mask], v[mask] ** (2 + e))) if mask.any() else 0.0
    order = order or {1: 48, 2: 24}.get(cutoffs.d, 8)
    return BulkSetup(model=model, cutoffs=cutoffs, kernel=kernel, u_tilde=cutoffs.u_tilde, exponent=e,
                     c_h=cutoffs.c_h, C=C, t_n=threshold_tn(cutoffs, ledger.C_tn), empty=not mask.any(), order=order)


def _window_radius(setup: BulkSetup, X: np.ndarray) -> np.ndarray:
    """Half-width of a cube containing every x with |x - X_i| <= h(x)/2."""
    h0 = setup.bandwidth(setup.model(X))
    reach = 0.75 * h0  # probe a little past the support
    probe = np.array([-1.0, -0.5, 0.5, 1.0])
    d = X.shape[1]
    rad = 0.55 * h0
    for _ in range(2):
        hmax = h0.copy()
        for k in range(d):
            for s in probe:
                y = X.copy()
                y[:, k] += s * reach
                hmax = np.maximum(hmax, setup.bandwidth(setup.model(y)))
        rad = np.maximum(rad, 0.55 * hmax)
        reach = np.maximum(reach, 1.4 * rad)
    return rad



def _kernel_scaled(setup: BulkSetup, u: np.ndarray, h: np.ndarray) -> np.ndarray:
    if setup.kernel.d == 1:
        return setup.kernel.eval_1d(u[:, 0]) / h
    return setup.kernel._eval(u) / h ** setup.kernel.d


def _live(v: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", v, v) < 0.25


def _window_nodes(setup: BulkSetup, lo: np.ndarray, hi: np.ndarray):
    """Quadrature nodes on the boxes [lo_i, hi_i] as (x, weights, owner row).

    Windows are clipped to a box domain, and in d = 1 split at the model's
    breakpoints, where p0 and hence h(x) may jump.
    """
    m, d = lo.shape
    dom = setup.model.domain
    if dom.is_box:
        lo, hi = np.maximum(lo, dom.lo), np.minimum(hi, dom.hi)
        hi = np.maximum(hi, lo)
    t, w = local_rule(d, setup.order)
    seg_lo, seg_hi, owner = lo, hi, np.arange(m)
    breaks = np.asarray(setup.model.breakpoints[0], dtype=float) if d == 1 and setup.model.breakpoints else np.zeros(0)
    if len(breaks):
        hit = np.any((breaks[None, :] > lo) & (breaks[None, :] < hi), axis=1)
        if hit.any():
            rows = np.nonzero(hit)[0]
            cuts = np.clip(breaks[None, :], lo[rows], hi[rows])
            edges = np.concatenate([lo[rows], cuts, hi[rows]], axis=1)
            keep = ~hit
            seg_lo = np.concatenate([lo[keep], edges[:, :-1].reshape(-1, 1)])
            seg_hi = np.concatenate([hi[keep], edges[:, 1:].reshape(-1, 1)])
            owner = np.concatenate([np.nonzero(keep)[0], np.repeat(rows, edges.shape[1] - 1)])
    mid, half = (seg_lo + seg_hi) / 2, (seg_hi - seg_lo) / 2
    x = (mid[:, None, :] + half[:, None, :] * t[None, :, :]).reshape(-1, d)
    wt = (np.prod(half, axis=1)[:, None] * w[None, :]).ravel()
    return x, wt, np.repeat(owner, len(w))


def _linear_term(setup: BulkSetup, X: np.ndarray, rad: np.ndarray, chunk: int = 400_000) -> float:
    """(1/k) sum_i ∫_B ω p0 K_h(x)(x - X_i) dx."""
    total = 0.0
    step = max(1, chunk // setup.order ** X.shape[1])
    for s in range(0, len(X), step):
        Xs, rs = X[s:s + step], rad[s:s + step]
        x, wt, own = _window_nodes(setup, Xs - rs[:, None], Xs + rs[:, None])
        p = setup.model(x)
        h = setup.bandwidth(p)
        u = (x - Xs[own]) / h[:, None]
        # nodes off B̃ or outside the kernel support contribute exactly zero
        keep = (p >= setup.u_tilde) & _live(u)
        p, h = p[keep], h[keep]
        K = _kernel_scaled(setup, u[keep], h)
        total += float(np.dot(wt[keep], setup.weight(p) * p * K))
    return total / len(X)


def _close_pairs(X1, r1, X2, r2):
    d = X1.shape[1]
    if d == 1:
        order = np.argsort(X2[:, 0], kind="stable")
        xs = X2[order, 0]
        reach = r1 + r2.max()
        lo = np.searchsorted(xs, X1[:, 0] - reach, side="left")
        hi = np.searchsorted(xs, X1[:, 0] + reach, side="right")
        counts = hi - lo
        rows = np.repeat(np.arange(len(X1)), counts)
        offs = np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)
        cols = order[np.repeat(lo, counts) + offs]
    else:
        from scipy.spatial import cKDTree

        tree = cKDTree(X2)
        hoods = tree.query_ball_point(X1, r=r1 + r2.max(), p=np.inf)
        counts = np.array([len(v) for v in hoods])
        rows = np.repeat(np.arange(len(X1)), counts)
        cols = np.concatenate([np.asarray(v, dtype=np.int64) for v in hoods]) if counts.sum() else np.zeros(0, np.int64)
    if not len(rows):
        return rows, cols
    gap = np.max(np.abs(X1[rows] - X2[cols]), axis=1)
    ok = gap < r1[rows] + r2[cols]
    return rows[ok], cols[ok]


def _cross_term(setup: BulkSetup, X1, r1, X2, r2, chunk: int = 400_000) -> float:
    """(1/k^2) sum_{i,j} ∫_B ω K_h(x)(x - X_i) K_h(x)(x - X'_j) dx over overlapping windows."""
    rows, cols = _close_pairs(X1, r1, X2, r2)
    if not len(rows):
        return 0.0
    total = 0.0
    step = max(1, chunk // setup.order ** X1.shape[1])
    for s in range(0, len(rows), step):
        i, j = rows[s:s + step], cols[s:s + step]
        lo = np.maximum(X1[i] - r1[i, None], X2[j] - r2[j, None])
        hi = np.minimum(X1[i] + r1[i, None], X2[j] + r2[j, None])
        x, wt, own = _window_nodes(setup, lo, hi)
        p = setup.model(x)
        h = setup.bandwidth(p)
        u1 = (x - X1[i][own]) / h[:, None]
        u2 = (x - X2[j][own]) / h[:, None]
        keep = (p >= setup.u_tilde) & _live(u1) & _live(u2)
        p, h = p[keep], h[keep]
        K1 = _kernel_scaled(setup, u1[keep], h)
        K2 = _kernel_scaled(setup, u2[keep], h)
        total += float(np.dot(wt[keep], setup.weight(p) * K1 * K2))
    return total / (len(X1) * len(X2))


@dataclass(frozen=True)
class BulkResult:
    T: float
    t_n: float
    empty: bool


def bulk_statistic(sample: SplitSample, model: DensityModel, cutoffs: CutoffSummary,
                   grid_resolution: Optional[int] = None, ledger: Optional[ConstantsLedger] = None,
                   setup: Optional[BulkSetup] = None, method: str = "exact",
                   estimators: Optional[tuple] = None) -> BulkResult:
    """T_bulk = ∫_B̃ ω (p̂ - p0)(p̂' - p0) with B̃ = {p0 >= ũ}.

    ``method="exact"`` expands the product into data-centred integrals, each
    computed on the kernel window of its observation, so no global grid fine
    enough for the smallest bandwidth is needed. ``method="grid"`` integrates
    on the masked level-set grid and accepts ``estimators=(f, g)`` callables
    in place of the two half-sample estimators.
    """
    setup = setup or bulk_setup(model, cutoffs, ledger, grid_resolution)
    if setup.empty:
        return BulkResult(0.0, setup.t_n, True)
    if method == "grid" or estimators is not None:
        return BulkResult(_grid_statistic(setup, sample, grid_resolution, estimators), setup.t_n, False)
    if method != "exact":
        raise ValueError(f"unknown method {method!r}")
    X1, X2 = sample.first, sample.second
    r1, r2 = _window_radius(setup, X1), _window_radius(setup, X2)
    A = _cross_term(setup, X1, r1, X2, r2)
    B1 = _linear_term(setup, X1, r1)
    B2 = _linear_term(setup, X2, r2)
    return BulkResult(A - B1 - B2 + setup.C, setup.t_n, False)


def _grid_statistic(setup: BulkSetup, sample: Optional[SplitSample], resolution, estimators) -> float:
    nodes, w, v = setup.model.grid(resolution)
    mask = v >= setup.u_tilde
    x, w, p = nodes[mask], w[mask], v[mask]
    if estimators is not None:
        f, g = estimators
        a, b = np.asarray(f(x), dtype=float), np.asarray(g(x), dtype=float)
    else:
        h = setup.bandwidth(p)
        a, b = kde(sample.first, x, h, setup.kernel), kde(sample.second, x, h, setup.kernel)
    return float(np.dot(w, setup.weight(p) * (a - p) * (b - p)))


# ---------------------------------------------------------------------------
# combined test

@dataclass(eq=False)
class TestPlan:
    """Data-independent part of the combined test for one (model, n, config)."""

    model: DensityModel
    working: DensityModel
    restriction: Optional[Restriction]
    n: int
    cutoffs: CutoffSummary
    setup: BulkSetup
    covering: Optional[TailCovering]
    tail_reference: float
    tail_mass_T: float
    box: tuple
    config: TestConfig

    def describe(self) -> dict:
        cov = self.covering
        return {
            "n": self.n,
            "cutoffs": self.cutoffs.to_dict(),
            "working_box": [self.box[0].tolist(), self.box[1].tolist()],
            "lambda": None if self.restriction is None else self.restriction.lam,
            "V": None if self.restriction is None else self.restriction.V,
            "t_n": self.setup.t_n,
            "bulk_empty": self.setup.empty,
            "tail_edge": None if cov is None else cov.edge,
            "tail_cubes_materialized": 0 if cov is None else len(cov),
            "tail_covering_complete": None if cov is None else cov.complete,
            "tail_reference_mass": self.tail_reference,
            "tail_mass_T": self.tail_mass_T,
        }


def plan_test(model: DensityModel, n: int, config: Optional[TestConfig] = None) -> TestPlan:
    config = config or TestConfig()
    if n < 4 or n % 2:
        raise InputError(f"n must be even and at least 4, got {n}")
    holder = config.holder or model.holder
    restriction = None
    working = model
    if not model.domain.is_box:
        restriction = restrict_to_box(model, n, config.ledger, config.resolution)
        working = restriction.model
    cut = compute_cutoffs(working, n, holder, config.norm, config.ledger, config.resolution)
    setup = bulk_setup(working, cut, config.ledger, config.resolution, config.quad_order)
    covering = None
    reference = 0.0
    edge = cut.tail_edge
    if tail_mass(working, cut.u_tilde, config.resolution) > 0 and math.isfinite(edge):
        covering = tail_splitting(working, cut.u_tilde, edge, n=n, c_u=config.ledger.c_u,
                                  max_cubes=config.max_cubes, resolution=config.resolution)
        reference = min(max(covering.covering_mass, 0.0), 1.0)
    box = (working.domain.lo.copy(), working.domain.hi.copy())
    return TestPlan(model=model, working=working, restriction=restriction, n=n, cutoffs=cut, setup=setup,
                    covering=covering, tail_reference=reference, tail_mass_T=cut.tail_mass, box=box, config=config)


@dataclass(frozen=True)
class TestReport:
    T_bulk: float
    t_n: float
    bulk_threshold: float
    psi_bulk: bool
    tail_sum: float
    tail_reference: float
    tail_mass_T: float
    psi1_threshold: float
    psi1: bool
    max_cell_count: int
    psi2: bool
    psi_out: bool
    decision: bool
    n_used: int
    dropped_observation: bool
    bulk_empty: bool
    mode: str
    cutoffs: CutoffSummary
    seed: Optional[int] = None

    def __post_init__(self):
        if self.decision != (self.psi_bulk or self.psi1 or self.psi2 or self.psi_out):
            raise AssertionError("decision must be the disjunction of the components")
        if self.psi2 != (self.max_cell_count >= 2):
            raise AssertionError("psi2 must match the maximal cell count")

    @property
    def components(self) -> dict:
        return {"psi_bulk": self.psi_bulk, "psi1": self.psi1, "psi2": self.psi2, "psi_out": self.psi_out}

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "cutoffs"}
        out["cutoffs"] = self.cutoffs.to_dict()
        for k, v in out.items():
            if isinstance(v, float) and not math.isfinite(v):
                out[k] = None
        return out


def prepare_sample(points, d: int):
    pts = as_points(points, d) if np.size(points) else np.zeros((0, d))
    if len(pts) < 4:
        raise InputError(f"need at least 4 observations, got {len(pts)}")
    dropped = bool(len(pts) % 2)
    if dropped:
        pts = pts[:-1]
    return pts, dropped


def run_plan(plan: TestPlan, points: np.ndarray, dropped: bool = False,
             thresholds: Optional[CalibratedThresholds] = None) -> TestReport:
    """Apply a prepared plan to ``points`` (already of even length plan.n)."""
    config = plan.config
    thresholds = thresholds if thresholds is not None else config.thresholds
    led = config.ledger
    out = psi_out(points, plan.box)
    inside = np.all((points >= plan.box[0]) & (points <= plan.box[1]), axis=1)
    sample = SplitSample.from_points(points, plan.working.d)
    # observations outside the working box contribute nothing to the bulk integrals
    masked = SplitSample(sample.first[inside[:plan.n // 2]], sample.second[inside[plan.n // 2:]])
    k = sample.k
    if plan.setup.empty:
        T = 0.0
    else:
        res = _statistic_with_k(plan.setup, masked, k)
        T = res
    if thresholds is not None and thresholds.bulk is not None:
        bulk_threshold = thresholds.bulk * plan.setup.t_n
    else:
        bulk_threshold = led.C_psib * plan.setup.t_n
    psi_b = (not plan.setup.empty) and T > bulk_threshold

    hist = tail_histogram(points, plan.covering, plan.working.d)
    m = plan.tail_reference
    C1 = thresholds.psi1 if thresholds is not None and thresholds.psi1 is not None else led.C_psi1
    p1 = psi1(hist, m, plan.n, C1)
    p2 = psi2(hist)
    decision = psi_b or p1 or p2 or out
    return TestReport(T_bulk=T, t_n=plan.setup.t_n, bulk_threshold=bulk_threshold, psi_bulk=bool(psi_b),
                      tail_sum=hist.total / plan.n, tail_reference=m, tail_mass_T=plan.tail_mass_T,
                      psi1_threshold=psi1_threshold(m, plan.n, C1), psi1=bool(p1), max_cell_count=hist.max_count,
                      psi2=bool(p2), psi_out=out, decision=bool(decision), n_used=plan.n,
                      dropped_observation=dropped, bulk_empty=plan.setup.empty,
                      mode="ledger" if thresholds is None else "calibrated", cutoffs=plan.cutoffs, seed=config.seed)


def _statistic_with_k(setup: BulkSetup, sample: SplitSample, k: int) -> float:
    """Exact expansion with the 1/k normalisation of the full halves."""
    X1, X2 = sample.first, sample.second
    A = B1 = B2 = 0.0
    if len(X1):
        r1 = _window_radius(setup, X1)
        B1 = _linear_term(setup, X1, r1) * len(X1) / k
    if len(X2):
        r2 = _window_radius(setup, X2)
        B2 = _linear_term(setup, X2, r2) * len(X2) / k
    if len(X1) and len(X2):
        A = _cross_term(setup, X1, r1, X2, r2) * len(X1) * len(X2) / k ** 2
    return A - B1 - B2 + setup.C


def null_statistics(plan: TestPlan, points: np.ndarray) -> tuple:
    """(T_bulk / t_n, psi1 deviation) for calibration runs."""
    inside = np.all((points >= plan.box[0]) & (points <= plan.box[1]), axis=1)
    sample = SplitSample.from_points(points, plan.working.d)
    masked = SplitSample(sample.first[inside[:plan.n // 2]], sample.second[inside[plan.n // 2:]])
    T = 0.0 if plan.setup.empty else _statistic_with_k(plan.setup, masked, sample.k)
    hist = tail_histogram(points, plan.covering, plan.working.d)
    return T / plan.setup.t_n, psi1_deviation(hist, plan.tail_reference, plan.n)


def combined_test(sample, model: DensityModel, config: Optional[TestConfig] = None,
                  plan: Optional[TestPlan] = None) -> TestReport:
    """psi* = psi_bulk or psi1 or psi2 or psi_out on ``sample``."""
    config = config or (plan.config if plan is not None else TestConfig())
    pts, dropped = prepare_sample(sample, model.d)
    if plan is None or plan.n != len(pts):
        plan = plan_test(model, len(pts), config)
    return run_plan(plan, pts, dropped)
