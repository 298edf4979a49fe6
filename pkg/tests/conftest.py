import numpy as np
import pytest

from marketeq.market import CES, ADDITIVE, MarketInstance, UtilitySpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, p, rel_step=1e-6):
    """Central-difference gradient of a scalar f at p with relative steps."""
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    for j in range(len(p)):
        h = rel_step * p[j]
        pp, pm = p.copy(), p.copy()
        pp[j] += h
        pm[j] -= h
        out[j] = (f(pp) - f(pm)) / (2 * h)
    return out


def central_diff_vec(f, p, rel_step=1e-6):
    """Central-difference Jacobian (columns df/dp_j) of a vector map."""
    p = np.asarray(p, dtype=float)
    f0 = f(p)
    J = np.zeros((len(f0), len(p)))
    for j in range(len(p)):
        h = rel_step * p[j]
        pp, pm = p.copy(), p.copy()
        pp[j] += h
        pm[j] -= h
        J[:, j] = (f(pp) - f(pm)) / (2 * h)
    return J


def random_player(rng, n, kind="ces", allow_negative_r=True):
    """Random valid utility spec with at least one positive coefficient."""
    c = np.zeros(n)
    nz = rng.integers(1, n + 1)
    idx = rng.choice(n, size=nz, replace=False)
    c[idx] = rng.uniform(0.1, 2.0, size=nz)
    if kind == "ces":
        if allow_negative_r and rng.random() < 0.5:
            rho = -rng.uniform(0.1, 3.0)
        else:
            rho = rng.uniform(0.05, 0.95)
        return UtilitySpec(CES, np.flatnonzero(c), c[np.flatnonzero(c)], rho=rho)
    if allow_negative_r and rng.random() < 0.5:
        r = -rng.uniform(0.1, 3.0)
        k = rng.uniform(1.0 / r, -1e-3)
    else:
        r = rng.uniform(0.05, 0.95)
        k = rng.uniform(1e-3, 1.0 / r)
    return UtilitySpec(ADDITIVE, np.flatnonzero(c), c[np.flatnonzero(c)], k=k, r=r)


def symmetric_instance(n, m, rho=0.5):
    """Uniform coefficients and budgets: the equilibrium is (sum w / n) * 1."""
    utilities = [UtilitySpec(CES, np.arange(n), np.ones(n), rho=rho) for _ in range(m)]
    return MarketInstance(n, m, np.full(m, 1.0 / m), utilities)
