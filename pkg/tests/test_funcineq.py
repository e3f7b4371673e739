import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fde_lab import funcineq as fi
from fde_lab.domain import build_grid
from fde_lab.errors import EstimationError, ParameterError


@pytest.fixture(scope="module")
def square9():
    return build_grid(2, [(0, 1), (0, 1)], 9)


# -- exponents ------------------------------------------------------------------------------------


def test_chi_tabulated_cases():
    assert fi.chi_exponent(1, 2.0).chi == 1.5
    three = fi.chi_exponent(3, 2.0)
    assert three.s == 1.0 and three.chi == 1.5
    four = fi.chi_exponent(4, 3.0)
    assert four.s == 1.0 and four.chi == pytest.approx(4 / 3, rel=1e-15)
    assert fi.chi_exponent(2, 3.0).chi == pytest.approx(4 / 3)


def test_chi_rejects_bad_input():
    with pytest.raises(ParameterError):
        fi.chi_exponent(0, 2.0)
    with pytest.raises(ParameterError):
        fi.chi_exponent(3, 1.0)
    with pytest.raises(ParameterError):
        fi.chi_exponent(2.5, 2.0)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6, 10])
def test_chi_above_one_and_continuous(n):
    ps = np.linspace(1.001, 8, 2000)
    chis = np.array([fi.chi_exponent(n, p).chi for p in ps])
    assert np.all(chis > 1)
    assert np.max(np.abs(np.diff(chis))) < 1e-2


# -- Hardy-Sobolev ---------------------------------------------------------------------------------


def half_disk_bump(grid, radius=1.0):
    def f(x, y):
        return y * np.maximum(1 - np.hypot(x, y) / radius, 0.0)

    return grid.sample(f)


def test_hardy_sobolev_refinement_stable():
    ratios = [fi.hardy_sobolev_ratio(half_disk_bump(build_grid(2, [(-1.5, 1.5), (0, 1.5)], (2 * N - 1, N))), 2, 1.0)
              for N in (61, 121)]
    assert ratios[0] == pytest.approx(ratios[1], rel=0.02)
    assert 0 < ratios[1] < math.inf


def test_hardy_sobolev_support_scaling():
    """For f_l(x) = f(x/l): ratio(f_l) = l^(2(n-s)/r - (n-2)) ratio(f); n=2, r=s=1 gives l^2."""
    g = build_grid(2, [(-1.5, 1.5), (0, 1.5)], (241, 121))
    full = fi.hardy_sobolev_ratio(half_disk_bump(g, 1.0), 2, 1.0)
    half = fi.hardy_sobolev_ratio(half_disk_bump(g, 0.5), 2, 1.0)
    assert half / full == pytest.approx(0.25, rel=0.03)


@settings(max_examples=25, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3))
def test_hardy_sobolev_homogeneous(c):
    g = build_grid(2, [(-1, 1), (0, 1)], (21, 11))
    f = half_disk_bump(g)
    assert fi.hardy_sobolev_ratio(f * c, 2, 1.0) == pytest.approx(fi.hardy_sobolev_ratio(f, 2, 1.0), rel=1e-12)


def test_hardy_sobolev_errors():
    g = build_grid(2, [(-1, 1), (0, 1)], (21, 11))
    with pytest.raises(EstimationError):
        fi.hardy_sobolev_ratio(g.sample(lambda x, y: 0 * x), 2, 1.0)
    with pytest.raises(ParameterError):
        fi.hardy_sobolev_ratio(half_disk_bump(g), 2, 2.5)


# -- weighted Sobolev ---------------------------------------------------------------------------------


def test_weighted_sobolev_separable_refinement():
    ratios = []
    for N in (201, 401):
        g = build_grid(1, [(0, 1)], N)
        f = fi.SpaceTimeFunction.from_callable(g, np.linspace(0, 1, 11), lambda x, t: x * (1 - x), dirichlet=True)
        ratios.append(fi.weighted_sobolev_ratio(f, 2.0))
    assert ratios[0] == pytest.approx(ratios[1], rel=0.02)


@settings(max_examples=25, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3), st.integers(0, 1000))
def test_weighted_sobolev_homogeneous(c, seed):
    g = build_grid(1, [(0, 1)], 41)
    fam = fi.PiecewiseLinearFamily(g, tuple(np.linspace(0, 1, 5)))
    f = fam.sample(np.random.default_rng(seed))
    assert fi.weighted_sobolev_ratio(f * c, 2.0) == pytest.approx(fi.weighted_sobolev_ratio(f, 2.0), rel=1e-12)


def test_weighted_sobolev_samples_below_empirical_constant():
    g = build_grid(1, [(0, 1)], 41)
    fam = fi.PiecewiseLinearFamily(g, tuple(np.linspace(0, 1, 9)))
    C = fi.empirical_sobolev_constant(fam, 2.0, seed=0, starts=4)
    rng = np.random.default_rng(1)
    assert max(fi.weighted_sobolev_ratio(fam.sample(rng), 2.0) for _ in range(100)) <= C


def test_weighted_sobolev_zero_rejected():
    g = build_grid(1, [(0, 1)], 11)
    f = fi.SpaceTimeFunction.from_callable(g, [0.0, 1.0], lambda x, t: 0 * x, dirichlet=True)
    with pytest.raises(EstimationError):
        fi.weighted_sobolev_ratio(f, 2.0)


# -- Campanato and weighted Holder -------------------------------------------------------------------


def test_campanato_of_constant_is_zero(square9):
    u = fi.SpaceTimeFunction.from_callable(square9, np.linspace(0, 1, 9), lambda x, y, t: 0 * x + 3.7)
    assert fi.campanato_seminorm(u, 0.5, 2.0).value == 0.0
    assert fi.weighted_holder_seminorm(u, 0.5, 2.0) == 0.0


def test_campanato_xn_stable_and_monotone_in_sampling():
    g = build_grid(2, [(0, 1), (0, 1)], 17)
    u = fi.SpaceTimeFunction.from_callable(g, np.linspace(0, 1, 17), lambda x, y, t: y)
    base = fi.campanato_seminorm(u, 0.5, 2.0)
    fine = fi.campanato_seminorm(u, 0.5, 2.0, base.policy.refined())
    assert 0 < base.value < math.inf
    assert fine.value >= base.value
    assert fine.value == pytest.approx(base.value, rel=0.05)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_campanato_monotone_random(seed):
    g = build_grid(2, [(0, 1), (0, 1)], 7)
    vals = np.random.default_rng(seed).standard_normal((5,) + g.shape)
    u = fi.SpaceTimeFunction(g, np.linspace(0, 1, 5), vals)
    small = fi.CampanatoSampling(time_stride=2, radii=(0.5, 0.25), boundary_radii=(0.5,))
    big = fi.CampanatoSampling(time_stride=1, radii=(0.5, 0.25, 0.125), boundary_radii=(0.5, 0.25))
    assert fi.campanato_seminorm(u, 0.3, 2.0, big).value >= fi.campanato_seminorm(u, 0.3, 2.0, small).value


def test_bridge_inequality_per_sample(square9):
    for f in fi.holder_test_family(5, seed=3):
        u = fi.SpaceTimeFunction.from_callable(square9, np.linspace(0, 1, 9), f)
        res = fi.campanato_seminorm(u, 0.5, 2.0, bridge=True)
        assert res.bridge
        for b in res.bridge:
            assert b.lhs <= b.bound * b.rhs * (1 + 1e-12) + 1e-300


def test_holder_of_xn():
    g = build_grid(2, [(0, 1), (0, 1)], 9)
    u = fi.SpaceTimeFunction.from_callable(g, np.linspace(0, 1, 5), lambda x, y, t: y)
    parts = fi.weighted_holder_parts(u, 0.5, 2.0)
    assert parts.spatial == pytest.approx(1.0, rel=1e-14)
    assert parts.temporal == 0.0 and parts.weighted_temporal == 0.0
    with pytest.raises(EstimationError):
        fi.weighted_holder_seminorm(fi.SpaceTimeFunction.from_callable(g, [0.0], lambda x, y, t: y), 0.5, 2.0)


def test_campanato_dominated_by_holder(square9):
    K = fi.campanato_holder_bound(0.5, 2.0)
    for f in fi.holder_test_family(8, seed=0):
        u = fi.SpaceTimeFunction.from_callable(square9, np.linspace(0, 1, 9), f)
        c = fi.campanato_seminorm(u, 0.5, 2.0).value
        h = fi.weighted_holder_seminorm(u, 0.5, 2.0)
        assert c <= K * h


def test_norm_json(tmp_path):
    text = fi.norm_json(0.5, fi.CampanatoSampling().to_dict(), [0.4, 0.5], tmp_path / "n.json")
    data = json.loads(text)
    assert set(data) == {"value", "policy", "refinement_series"}
    assert json.loads((tmp_path / "n.json").read_text()) == data


# -- ODE comparison -----------------------------------------------------------------------------------


def test_ode_bound_closed_forms():
    assert fi.ode_bound(0.7, 1.0, 0.0, 1.0, 0.3, 2.0) == pytest.approx(math.exp(math.log1p(0.3) + 1.4) - 1, rel=1e-14)
    assert fi.ode_bound(0.7, 1.0, 0.0, 0.0, 0.3, 2.0) == pytest.approx(0.3 + 2 * 0.7 * 2.0, rel=1e-14)


def test_ode_quadrature_branch_agrees_with_closed_forms():
    # perturbing off the special cases changes the bound continuously
    a = fi.ode_bound(1.0, 1.0, 1e-9, 1.0, 0.2, 0.5)
    b = fi.ode_bound(1.0, 1.0, 0.0, 1.0, 0.2, 0.5)
    assert a == pytest.approx(b, rel=1e-6)
    h = fi.ode_H(2.0, 0.3, 0.7)
    from scipy.integrate import quad

    assert h == pytest.approx(quad(lambda s: 1 / (s**0.3 + s**0.7), 0, 2.0, limit=200)[0], rel=1e-9)


def test_ode_bound_dominates_reference_oracle():
    traj = fi.ode_rk4_oracle(1.0, 1.0, 0.5, 1.0, 0.1, 1.0)
    bound = fi.ode_bound(1.0, 1.0, 0.5, 1.0, 0.1, 1.0)
    assert traj.max() <= bound * (1 + 1e-9)
    # the oracle is the equality case, so the bound is attained
    assert traj[-1] == pytest.approx(bound, rel=1e-8)


def test_ode_bound_random_tuples():
    rng = np.random.default_rng(7)
    for _ in range(50):
        params = fi.random_ode_parameters(rng)
        assert fi.ode_rk4_oracle(*params).max() <= fi.ode_bound(*params) * (1 + 1e-9)


def test_ode_parameter_errors():
    for bad in ((0.0, 1, 0, 1, 0, 1), (1, 1, 1.0, 1, 0, 1), (1, 1, 0, 1.5, 0, 1), (1, 1, 0, 1, -1, 1)):
        with pytest.raises(ParameterError):
            fi.ode_bound(*bad)
