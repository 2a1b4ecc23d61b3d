import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from holdertest.density import Domain, HolderSpec, from_function, make_builtin

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def two_level(high=1.8, low=0.2, split=0.5, holder=None):
    """p0 = high on [0, split), low on [split, 1]; masses 0.9 and 0.1 with the defaults."""
    holder = holder or HolderSpec(alpha=1.0, L=1.0)
    return from_function(lambda x: np.where(x[:, 0] < split, high, low), Domain.box([0.0], [1.0]), holder,
                         name="two_level", breakpoints=(split,))


@pytest.fixture(scope="session")
def uniform():
    return make_builtin("uniform_box")


@pytest.fixture(scope="session")
def gaussian():
    return make_builtin("gaussian")


@pytest.fixture(scope="session")
def pareto():
    return make_builtin("pareto_smoothed", {"beta": 0.5})


@pytest.fixture(scope="session")
def spiky():
    return make_builtin("spiky")


_MODELS = {}


def _model(key):
    from holdertest.levelsets import restrict_to_box

    if key not in _MODELS:
        fam, params = key[0], dict(key[1])
        m = make_builtin(fam, params)
        _MODELS[key] = m if m.domain.is_box else restrict_to_box(m, 1000).model
    return _MODELS[key]


def random_partition_config(rng, max_cells=50_000):
    """A bulk-regime configuration: u = u_B, beta = ((4-t)alpha+d)/2 and an admissible cell constant.

    Configurations whose expected cell count exceeds ``max_cells`` are redrawn.
    """
    while True:
        cfg = _draw_partition_config(rng)
        m, _, beta, u, c_beta = cfg
        _, w, v = m.grid()
        mask = v >= u
        expected = float(np.dot(w[mask], (v[mask] / c_beta) ** (-m.d / beta)))
        if expected <= max_cells:
            return cfg


def _draw_partition_config(rng):
    from holdertest.adversarial import bulk_omega, default_cell_constant
    from holdertest.levelsets import ConstantsLedger, NormSpec, compute_cutoffs

    d = int(rng.integers(1, 3))
    fam = ["uniform_box", "gaussian", "spiky", "pareto_smoothed"][int(rng.integers(0, 4 if d == 1 else 3))]
    params = {"d": d} if fam != "pareto_smoothed" else {"beta": 0.5}
    if fam == "gaussian":
        params["sigma"] = float(np.round(rng.uniform(0.5, 2.0), 2))
    m = _model((fam, tuple(sorted(params.items()))))
    n = int(2 * round(10 ** rng.uniform(2, 5 if d == 1 else 4) / 2))
    t = float(rng.uniform(1, 2))
    ledger = ConstantsLedger()
    cut = compute_cutoffs(m, n, norm=NormSpec(t), ledger=ledger)
    a = cut.alpha
    beta = ((4 - t) * a + d) / 2
    c = default_cell_constant(m.holder, d, ledger) * float(rng.uniform(0.1, 1.0))
    c_beta = c ** (-beta) * (n * n * cut.L ** 4 * cut.I) ** (beta / (4 * a + d))
    return m, bulk_omega(m, cut.u_B), beta, cut.u_B, c_beta
