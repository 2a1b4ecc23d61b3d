"""Goodness-of-fit testing for Hölder densities with local minimax rates."""

from .adversarial import bulk_prior, lt_distance, remainder_prior, sample_from, tail_prior
from .density import Domain, DensityModel, HolderSpec, from_function, from_grid, make_builtin
from .gof import CalibratedThresholds, TestConfig, TestReport, combined_test, plan_test
from .harness import SimulationConfig, calibrate_thresholds, critical_radius, estimate_risk, rate_regression
from .kernel import make_kernel
from .levelsets import ConstantsLedger, NormSpec, compute_cutoffs, restrict_to_box
from .partition import adaptive_partition, tail_splitting

__all__ = [
    "ConstantsLedger", "CalibratedThresholds", "DensityModel", "Domain", "HolderSpec", "NormSpec",
    "SimulationConfig", "TestConfig", "TestReport", "adaptive_partition", "bulk_prior", "calibrate_thresholds",
    "combined_test", "compute_cutoffs", "critical_radius", "estimate_risk", "from_function", "from_grid",
    "lt_distance", "make_builtin", "make_kernel", "plan_test", "rate_regression", "remainder_prior",
    "restrict_to_box", "sample_from", "tail_prior", "tail_splitting",
]
