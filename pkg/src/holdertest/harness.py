"""Monte Carlo risk, critical radii, rate regression and threshold calibration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .adversarial import BulkDesign, PriorRealization, bulk_design, sample_from, tail_family
from .density import DensityModel, HolderSpec, make_bump
from .gof import CalibratedThresholds, TestConfig, TestPlan, null_statistics, plan_test, run_plan
from .levelsets import ConstantsLedger, NormSpec, compute_cutoffs

CAL, NULL, ALT, PRIOR = 1, 2, 3, 4


class SearchError(RuntimeError):
    pass


class InsufficientData(ValueError):
    pass


def stream(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(tag), int(index)])


@dataclass
class SimulationConfig:
    eta: float = 0.3
    trials: int = 300
    n_grid: list = field(default_factory=lambda: [250, 500, 1000, 2000, 4000])
    seed: int = 0
    threshold_mode: str = "calibrated"
    calibration_trials: Optional[int] = None
    alternative: dict = field(default_factory=lambda: {"kind": "auto"})
    holder: Optional[HolderSpec] = None
    norm: NormSpec = field(default_factory=NormSpec)
    ledger: ConstantsLedger = field(default_factory=ConstantsLedger)
    resolution: Optional[int] = None
    max_iter: int = 14

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        for n in self.n_grid:
            if n < 4 or n % 2:
                raise ValueError(f"n_grid entries must be even and at least 4, got {n}")
        if self.threshold_mode not in ("calibrated", "ledger"):
            raise ValueError("threshold_mode must be 'calibrated' or 'ledger'")
        if (self.alternative or {}).get("kind", "auto") not in ("auto", "bulk", "tail"):
            raise ValueError("alternative kind must be 'auto', 'bulk' or 'tail'")

    def test_config(self) -> TestConfig:
        return TestConfig(holder=self.holder, norm=self.norm, ledger=self.ledger, resolution=self.resolution,
                          seed=self.seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["holder"] = None if self.holder is None else asdict(self.holder)
        return out


def wilson_se(rate: float, trials: int, z: float = 1.0) -> float:
    """Half-width of the Wilson score interval at z standard deviations."""
    if trials <= 0:
        return math.nan
    denom = 1 + z * z / trials
    return z * math.sqrt(rate * (1 - rate) / trials + z * z / (4 * trials * trials)) / denom


def wilson_interval(rate: float, trials: int, z: float = 1.96) -> tuple:
    denom = 1 + z * z / trials
    centre = (rate + z * z / (2 * trials)) / denom
    half = wilson_se(rate, trials, z)
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass(frozen=True)
class RiskEstimate:
    type_I: float
    type_II: Optional[float]
    se_I: float
    se_II: Optional[float]
    trials: int
    breakdown_null: dict
    breakdown_alt: Optional[dict]

    @property
    def total(self) -> float:
        return self.type_I + (self.type_II or 0.0)

    @property
    def se_total(self) -> float:
        return math.hypot(self.se_I, self.se_II or 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# calibration

def null_statistic_samples(plan: TestPlan, trials: int, seed: int, tag: int = CAL) -> np.ndarray:
    out = np.empty((trials, 2))
    for i in range(trials):
        x = sample_from(plan.model, plan.n, stream(seed, tag, i))
        out[i] = null_statistics(plan, x)
    return out


def _quantile(values: np.ndarray, level: float) -> float:
    # infinite deviations are genuine rejections and stay in the sample
    if not np.isfinite(values).any():
        return math.inf
    return float(np.quantile(values, level, method="higher"))


def calibrate_thresholds(null: DensityModel, n: int, eta: float, trials: int, seed: int,
                         config: Optional[TestConfig] = None, plan: Optional[TestPlan] = None,
                         samples: Optional[np.ndarray] = None) -> CalibratedThresholds:
    """Empirical (1 - eta/2)-quantiles of T_bulk / t_n and of the psi1 deviation under H0."""
    if trials < 100:
        raise ValueError("calibration needs at least 100 trials")
    plan = plan or plan_test(null, n, config)
    samples = null_statistic_samples(plan, trials, seed) if samples is None else samples
    level = min(1.0, max(0.0, 1 - eta / 2))
    bulk = None if plan.setup.empty else _quantile(samples[:, 0], level)
    psi1 = None if plan.tail_reference <= 0 else _quantile(samples[:, 1], level)
    return CalibratedThresholds(bulk=bulk, psi1=psi1, eta=eta, trials=trials, seed=seed)


def active_components(plan: TestPlan) -> int:
    return int(not plan.setup.empty) + int(plan.tail_reference > 0)


def calibrate_plan(plan: TestPlan, cfg: SimulationConfig) -> Optional[CalibratedThresholds]:
    """Thresholds at eta/k for the k calibrated components so their union stays near eta/2."""
    if cfg.threshold_mode == "ledger":
        return None
    k = max(1, active_components(plan))
    trials = max(100, cfg.calibration_trials or cfg.trials)
    return calibrate_thresholds(plan.model, plan.n, cfg.eta / k, trials, cfg.seed, plan=plan)


# ---------------------------------------------------------------------------
# risk

_KEYS = ("psi_bulk", "psi1", "psi2", "psi_out")


def _rejections(plan: TestPlan, thresholds, draw: Callable[[int], np.ndarray], trials: int) -> tuple:
    hits = 0
    parts = dict.fromkeys(_KEYS, 0)
    for i in range(trials):
        rep = run_plan(plan, draw(i), thresholds=thresholds)
        hits += rep.decision
        for k in _KEYS:
            parts[k] += getattr(rep, k)
    return hits / trials, {k: v / trials for k, v in parts.items()}


def estimate_risk(null: DensityModel, alt, cfg: SimulationConfig, n: Optional[int] = None,
                  plan: Optional[TestPlan] = None, thresholds: Optional[CalibratedThresholds] = None) -> RiskEstimate:
    """Type-I rate under ``null`` and type-II rate under ``alt`` (a DensityModel, a prior family
    callable ``trial_rng -> DensityModel``, or None)."""
    n = n or cfg.n_grid[0]
    plan = plan or plan_test(null, n, cfg.test_config())
    if thresholds is None and cfg.threshold_mode == "calibrated":
        thresholds = calibrate_plan(plan, cfg)
    t1, b1 = _rejections(plan, thresholds, lambda i: sample_from(null, n, stream(cfg.seed, NULL, i)), cfg.trials)
    t2 = b2 = se2 = None
    if alt is not None:
        if isinstance(alt, DensityModel):
            draw = lambda i: sample_from(alt, n, stream(cfg.seed, ALT, i))
        else:
            draw = lambda i: sample_from(alt(stream(cfg.seed, PRIOR, i)), n, stream(cfg.seed, ALT, i))
        power, b2 = _rejections(plan, thresholds, draw, cfg.trials)
        t2 = 1 - power
        se2 = wilson_se(t2, cfg.trials)
    return RiskEstimate(type_I=t1, type_II=t2, se_I=wilson_se(t1, cfg.trials), se_II=se2, trials=cfg.trials,
                        breakdown_null=b1, breakdown_alt=b2)


# ---------------------------------------------------------------------------
# amplitude families

@dataclass(eq=False)
class AmplitudeFamily:
    """a -> random alternative with a separation that increases in a."""

    kind: str
    separation: Callable[[float], float]
    sampler: Callable[[float], Callable]
    a_max: float
    info: dict


def bulk_family(plan: TestPlan, c: float = 2.0, fill: bool = True) -> AmplitudeFamily:
    """Cell-filling Rademacher bumps with peak a * p0(x_j), capped for nonnegativity."""
    des = bulk_design(plan.working, plan.cutoffs, c=c, fill=fill, rel_amplitude=1.0, ledger=plan.config.ledger)
    sup = make_bump(plan.cutoffs.alpha, plan.cutoffs.d, plan.working.holder.c_star).sup
    want = plan.working(des.partition.centers) / sup
    cap = des._pmin * (1 - 1e-9) / sup
    t = plan.cutoffs.t

    def at(a: float) -> BulkDesign:
        d2 = replace(des, A=np.minimum(a * want, cap), rel_amplitude=a)
        d2._pmin = des._pmin
        return d2

    def sampler(a: float):
        d2 = at(a)
        return lambda rng: d2.draw(rng, check=False, separation=False).density

    a_max = float(np.max(cap / np.maximum(want, 1e-300)))
    return AmplitudeFamily(kind="bulk", separation=lambda a: at(a).closed_form_separation(t), sampler=sampler,
                           a_max=max(a_max, 1e-12), info={"cells": des.N, "c": c, "fill": fill})


def tail_amplitude_family(plan: TestPlan, spikes: int = 4) -> AmplitudeFamily:
    cache = {}

    def real(a: float, seed=0) -> PriorRealization:
        key = (a, seed)
        if key not in cache:
            cache[key] = tail_family(plan.working, plan.cutoffs, a, spikes=spikes, seed=seed)
        return cache[key]

    return AmplitudeFamily(kind="tail", separation=lambda a: real(a).separation,
                           sampler=lambda a: (lambda rng: real(a).density), a_max=1.0, info={"spikes": spikes})


def default_family(plan: TestPlan, cfg: SimulationConfig) -> AmplitudeFamily:
    alt = dict(cfg.alternative or {})
    kind = alt.pop("kind", "auto")
    if kind == "auto":
        kind = plan.cutoffs.dominance
    if kind == "bulk":
        return bulk_family(plan, **{k: alt[k] for k in ("c", "fill") if k in alt})
    if kind == "tail":
        return tail_amplitude_family(plan, **{k: alt[k] for k in ("spikes",) if k in alt})
    raise ValueError(f"unknown alternative kind {kind!r}")


# ---------------------------------------------------------------------------
# critical radius

@dataclass(frozen=True)
class RadiusResult:
    n: int
    rho_hat: float
    amplitude: float
    risk_at: float
    type_I: float
    evaluations: list
    rho_theory: float
    thresholds: Optional[dict]


def critical_radius(null: DensityModel, n: int, cfg: SimulationConfig,
                    amplitude_family: Optional[Callable[[TestPlan], AmplitudeFamily]] = None,
                    detail: bool = False):
    """Separation at which the estimated total risk crosses eta.

    Bisection in log-amplitude with common random numbers across amplitudes;
    stops once the risk at the midpoint is within one Wilson SE of eta or the
    bracket is narrower than 2%.
    """
    plan = plan_test(null, n, cfg.test_config())
    thr = calibrate_plan(plan, cfg)
    fam = (amplitude_family or (lambda p: default_family(p, cfg)))(plan)
    t1, _ = _rejections(plan, thr, lambda i: sample_from(plan.model, n, stream(cfg.seed, NULL, i)), cfg.trials)
    se1 = wilson_se(t1, cfg.trials)
    evals = []

    def risk(a: float) -> float:
        make = fam.sampler(a)
        draw = lambda i: sample_from(make(stream(cfg.seed, PRIOR, i)), n, stream(cfg.seed, ALT, i))
        power, _ = _rejections(plan, thr, draw, cfg.trials)
        r = t1 + 1 - power
        evals.append((a, r))
        return r

    hi = fam.a_max
    r_hi = risk(hi)
    if r_hi > cfg.eta:
        raise SearchError(f"risk {r_hi:.3f} at the largest amplitude {hi:.3g} stays above eta={cfg.eta}")
    lo = hi
    r_lo = r_hi
    for _ in range(40):
        lo /= 4
        r_lo = risk(lo)
        if r_lo > cfg.eta:
            break
        hi, r_hi = lo, r_lo
    else:
        raise SearchError("risk stays below eta at vanishing amplitude; the test is not level-calibrated")
    for _ in range(cfg.max_iter):
        if hi / lo < 1.02:
            break
        mid = math.sqrt(lo * hi)
        r = risk(mid)
        se = math.hypot(se1, wilson_se(max(min(r - t1, 1.0), 0.0), cfg.trials))
        if r > cfg.eta:
            lo, r_lo = mid, r
        else:
            hi, r_hi = mid, r
        if abs(r - cfg.eta) <= se and hi / lo < 1.5:
            break
    # log-linear interpolation of the crossing inside the final bracket
    w = 0.5 if r_lo == r_hi else min(max((r_lo - cfg.eta) / (r_lo - r_hi), 0.0), 1.0)
    a_star = lo * (hi / lo) ** w
    rho = fam.separation(a_star)
    if not detail:
        return rho
    return RadiusResult(n=n, rho_hat=rho, amplitude=a_star, risk_at=cfg.eta, type_I=t1, evaluations=evals,
                        rho_theory=plan.cutoffs.rho_star, thresholds=None if thr is None else thr.to_dict())


# ---------------------------------------------------------------------------
# rates

def closed_form_exponent(family: str, alpha: float, d: int, t: float = 1.0, params: Optional[dict] = None) -> Fraction:
    """Asymptotic exponent of n in rho*(n) for the built-in nulls, in exact arithmetic."""
    a = Fraction(alpha).limit_denominator(10_000)
    if family in ("uniform_box", "gaussian", "spiky"):
        return -2 * a / (4 * a + d)
    if family == "pareto_smoothed":
        if a > 1 or t != 1:
            raise ValueError("the Pareto closed form covers alpha <= 1 and t = 1 only")
        b = Fraction((params or {}).get("beta", 0.5)).limit_denominator(10_000)
        return -2 * a * b / (3 * b + a + 1)
    raise ValueError(f"no closed-form exponent for {family!r}")


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    theory_local: float
    theory_asymptotic: Optional[float]
    rows: list

    def to_dict(self) -> dict:
        return asdict(self)


def fit_loglog(ns, rhos) -> tuple:
    x, y = np.log(np.asarray(ns, float)), np.log(np.asarray(rhos, float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1 - float(np.sum(resid ** 2)) / ss if ss > 0 else 1.0
    return float(slope), float(intercept), r2


def rate_regression(null: DensityModel, cfg: SimulationConfig, amplitude_family=None, progress=None) -> RateFit:
    """Least-squares slope of log rho_hat against log n over cfg.n_grid."""
    if len(cfg.n_grid) < 4:
        raise InsufficientData("rate regression needs at least 4 sample sizes")
    rows = []
    for n in cfg.n_grid:
        try:
            res = critical_radius(null, n, cfg, amplitude_family, detail=True)
        except SearchError as exc:
            rows.append({"n": n, "rho_hat": None, "rho_theory": None, "error": str(exc)})
            continue
        rows.append({"n": n, "rho_hat": res.rho_hat, "rho_theory": res.rho_theory, "amplitude": res.amplitude,
                     "type_I": res.type_I, "evaluations": len(res.evaluations)})
        if progress:
            progress(rows[-1])
    valid = [r for r in rows if r["rho_hat"] is not None and r["rho_hat"] > 0]
    if len(valid) < 4:
        raise InsufficientData(f"only {len(valid)} valid radii")
    slope, intercept, r2 = fit_loglog([r["n"] for r in valid], [r["rho_hat"] for r in valid])
    holder = cfg.holder or null.holder
    th_local, _, _ = fit_loglog([r["n"] for r in valid], [r["rho_theory"] for r in valid])
    try:
        th_asym = float(closed_form_exponent(null.name.split("|")[0], holder.alpha, null.d, cfg.norm.t, null.params))
    except ValueError:
        th_asym = None
    return RateFit(slope=slope, intercept=intercept, r_squared=r2, theory_local=th_local,
                   theory_asymptotic=th_asym, rows=rows)
