import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fde_lab import diagnostics as dg
from fde_lab.domain import build_grid, distance_field, integrate_values
from fde_lab.errors import ContractError, DomainError
from fde_lab.evolve import DtPolicy, estimate_extinction_time, evolve_base, evolve_rescaled, rescaled_image
from fde_lab.steady import initial_data, solve_steady


@pytest.fixture(scope="module")
def separable_run(steady_101):
    u0 = initial_data("scaled_steady", {"a": 0.5}, steady_101).u
    return evolve_base(u0, 2.0, dt_policy=DtPolicy(dt=1e-4, snapshot_every=100))


@pytest.fixture(scope="module")
def bump_run(steady_101):
    u0 = initial_data("steady_plus_bump", {"a": 0.5}, steady_101).u
    return evolve_base(u0, 2.0, dt_policy=DtPolicy(dt=1e-4, snapshot_every=50))


# -- containers -----------------------------------------------------------------------------


def test_time_series_contracts_and_csv(tmp_path):
    s = dg.TimeSeries("x", [0, 1, 2], [1.0, 0.5, 0.25])
    assert s.to_csv(tmp_path / "x.csv").splitlines() == ["t,value", "0.0,1.0", "1.0,0.5", "2.0,0.25"]
    assert len(s.window(0.5, 2)) == 2
    with pytest.raises(ContractError):
        dg.TimeSeries("x", [0, 0], [1, 2])
    with pytest.raises(ContractError):
        dg.TimeSeries("x", [0, 1], [1, math.nan])


def test_report_round_trip():
    rep = dg.DiagnosticsReport(tolerances={"tol": 1.0})
    rep.series["x"] = dg.TimeSeries("x", [0, 1], [2, 3], "note")
    rep.constants["c"] = 4.0
    rep.add_flag("ok", True, 0.5, "tol")
    with pytest.raises(ContractError):
        rep.add_flag("bad", True, 0.5, "missing")
    back = dg.DiagnosticsReport.from_dict(json.loads(rep.to_json()))
    assert back.to_dict() == rep.to_dict()
    assert back.passed


# -- Harnack ------------------------------------------------------------------------------------


def test_harnack_of_distance_is_one():
    g = build_grid(2, [(0, 1), (0, 1)], 11)
    r = dg.harnack_ratio(distance_field(g))
    assert r.c0 == pytest.approx(1.0)
    assert not r.degenerate


def test_harnack_detects_quadratic_vanishing():
    g = build_grid(1, [(0, 1)], 201)
    d = distance_field(g)
    r = dg.harnack_ratio(g.function(d.values**2, dirichlet=True))
    assert r.degenerate
    assert r.min < 0.01


def test_harnack_of_profile(steady_101, steady_2d):
    r = dg.harnack_ratio(steady_101.S)
    assert not r.degenerate
    assert r.c0 == pytest.approx(steady_101.S.values[1] / steady_101.grid.h[0], rel=1e-12)
    # rectangle corners force S/d -> 0 but do not count as degeneracy
    assert not dg.harnack_ratio(steady_2d.S).degenerate


def test_base_band_for_separable_run(separable_run, steady_101):
    lo, hi = dg.base_harnack_band(separable_run, 1.0)
    ratio = steady_101.S.interior / distance_field(steady_101.grid).interior / 2
    assert lo == pytest.approx(ratio.min(), rel=1e-2)
    assert hi == pytest.approx(ratio.max(), rel=1e-2)


# -- energy -------------------------------------------------------------------------------------


def test_energy_of_profile_matches_pohozaev(steady_401):
    S = steady_401.S
    J = dg.energy_J(S, 2.0)
    assert J == pytest.approx((1 - 2 / 3) * integrate_values(S.grid, S.values**3), rel=1e-4)
    assert dg.energy_J(S, 2.0, source=False) > J


def test_energy_non_increasing_on_base_runs(separable_run, bump_run):
    for traj in (separable_run, bump_run):
        assert np.all(dg.energy_slopes(traj) <= 0)


def test_dissipation_identity_mid_run(bump_run):
    rel = dg.dissipation_residual(bump_run, relative=True)
    mid = int(np.argmin(np.abs(rel.t - rel.t[-1] / 2)))
    assert rel.values[mid] < 0.05


def test_energy_non_increasing_rescaled_image(bump_run):
    resc = rescaled_image(bump_run)
    assert np.all(dg.energy_slopes(resc) <= 0)


# -- curvature and moments ------------------------------------------------------------------------


def test_curvature_of_profile_is_one(steady_401):
    c = dg.curvature_R(steady_401.S, 2.0)
    dev = np.abs(c.R_e.values[c.unmasked] - 1)
    assert dev.max() <= 10 * steady_401.tol
    assert c.masked_fraction == 0.0
    m, frac = dg.moment_Mq(steady_401.S, 2.0, 0.0, 2)
    assert m < 1e-15 and frac == 0.0


def test_curvature_forms_agree_on_amplitude_mode(steady_101):
    """For v = lam(t) S in the rescaled flow both forms equal lam^(1-p)."""
    S = steady_101.S
    traj = evolve_rescaled(S * 1.2, 2.0, dt_policy=DtPolicy(dt=1e-5, snapshot_every=1), t_end=5e-5)
    t0, prev = traj.at(len(traj) - 2)
    t1, v = traj.at(len(traj) - 1)
    c = dg.curvature_R(v, 2.0, dt_pair=(prev, t1 - t0))
    lam = v.values[50] / S.values[50]
    np.testing.assert_allclose(c.R_e.values[c.unmasked], 1 / lam, rtol=1e-8)
    np.testing.assert_allclose(c.R_t.values[c.unmasked], c.R_e.values[c.unmasked], rtol=1e-4)


def test_curvature_masks_tiny_values():
    g = build_grid(1, [(0, 1)], 51)
    d = distance_field(g).values
    v = g.function(np.where(np.abs(g.axes[0] - 0.5) < 0.1, 1e-6 * d, d), dirichlet=True)
    c = dg.curvature_R(v, 2.0)
    assert c.masked_fraction > 0
    assert np.all(c.R_e.values[c.masked] == 1.0)


def test_moments_grow_with_distance_from_profile(steady_101):
    S = steady_101.S
    m1 = dg.moment_Mq(S * 1.1, 2.0, 0.0, 2)[0]
    m2 = dg.moment_Mq(S * 1.2, 2.0, 0.0, 2)[0]
    assert 0 < m1 < m2


def test_moment_evolution_residual_is_finite(steady_101):
    traj = evolve_rescaled(initial_data("steady_plus_bump", {"a": 0.8}, steady_101).u, 2.0,
                           dt_policy=DtPolicy(dt=1e-3, snapshot_every=10), t_end=0.1)
    res = dg.moment_evolution_residual(traj, 2)
    assert np.all(np.isfinite(res.values))
    with pytest.raises(ContractError):
        dg.moment_evolution_residual(traj, 1)


# -- Benilan-Crandall ---------------------------------------------------------------------------------


def test_bc_coefficient_formula():
    assert dg.bc_coefficient(2.0, 1.0) == pytest.approx(2 / (1 - math.exp(-2)))
    t = np.linspace(0.1, 5, 20)
    assert np.all(np.diff(dg.bc_coefficient(3.0, t)) < 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.05, 5.0), st.floats(1e-3, 50.0))
def test_bc_coefficient_dominates_sharp_bound(p, t):
    sharp = 1 / (p * -math.expm1(-(p - 1) * t / p))
    assert dg.bc_coefficient(p, t) >= sharp * (1 - 1e-12)


def test_bc_margin_negative_at_profile(steady_101):
    traj = evolve_rescaled(steady_101.S, 2.0, dt_policy=DtPolicy(dt=1e-2, snapshot_every=5), t_end=1.0)
    m = dg.benilan_crandall_margin(traj)
    assert np.all(m.values < 0)
    assert m.t[0] > 0


# -- rates ---------------------------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(1e-3, 0.4))
def test_fit_recovers_synthetic_rate(gamma, amp):
    t = np.linspace(0, 5, 40)
    sup = dg.TimeSeries("s", t, amp * np.exp(-gamma * t))
    wtd = dg.TimeSeries("w", t, 0.1 * amp * np.exp(-gamma * t))
    fit = dg.fit_decay_rate(sup, wtd)
    assert not fit.refused
    assert fit.gamma_sup == pytest.approx(gamma, rel=1e-8)
    assert fit.gamma_weighted == pytest.approx(gamma, rel=1e-8)
    assert fit.r_squared == pytest.approx(1.0)


def test_fit_refusals():
    t = np.linspace(0, 5, 40)
    assert dg.fit_decay_rate(dg.TimeSeries("s", t, 1e-12 * np.exp(-t))).refused
    grow = dg.fit_decay_rate(dg.TimeSeries("s", t, 1e-3 * np.exp(t / 4)))
    assert grow.refused and "not decreasing" in grow.reason
    assert dg.fit_decay_rate(dg.TimeSeries("s", t[:3], [0.1, 0.05, 0.02])).refused
    assert dg.fit_decay_rate(dg.TimeSeries("s", t, np.ones(40))).refused


def test_robust_fit_ignores_outliers():
    t = np.linspace(0, 5, 41)
    e = 0.3 * np.exp(-t)
    e[[5, 17, 30]] *= 5
    s = dg.TimeSeries("s", t, np.minimum(e, 0.45))
    assert dg.fit_decay_rate(s, robust=True).gamma_sup == pytest.approx(1.0, rel=1e-6)
    assert abs(dg.fit_decay_rate(s).gamma_sup - 1.0) > 1e-3


def test_decades_window():
    t = np.linspace(0, 10, 101)
    e = np.where(t < 5, 0.4 * np.exp(-t), 0.4 * np.exp(-5) * np.exp(-2 * (t - 5)))
    fit = dg.fit_decay_rate(dg.TimeSeries("s", t, e), decades=1)
    assert fit.gamma_sup == pytest.approx(2.0, rel=1e-8)


def test_relative_error_zero_at_profile(steady_101):
    traj = evolve_rescaled(steady_101.S, 2.0, dt_policy=DtPolicy(dt=0.1), t_end=0.2)
    sup, wtd = dg.relative_error_series(traj, steady_101)
    assert sup.values.max() < 1e-9 and wtd.values.max() < 1e-9


def test_rescaled_image_converges_exponentially(bump_run, steady_101):
    resc = rescaled_image(bump_run)
    sup, wtd = dg.relative_error_series(resc, steady_101)
    fit = dg.fit_decay_rate(sup, wtd)
    assert not fit.refused
    assert fit.gamma_sup > 0 and fit.r_squared >= 0.95
    # weighted error is dominated by the sup error
    assert np.all(wtd.values <= sup.values * math.sqrt(integrate_values(steady_101.grid, steady_101.S.values**3)))


# -- envelopes and reports ----------------------------------------------------------------------------


def test_envelopes_constant_on_separable_run(separable_run, steady_101):
    ratio = np.max(steady_101.S.interior / distance_field(steady_101.grid).interior)
    Tstar = estimate_extinction_time(separable_run).Tstar
    for l in (0, 1):
        env = dg.scaling_envelope(separable_run, Tstar, l)
        assert env.sup == pytest.approx(ratio / 2, rel=1e-3)
        assert np.ptp(env.series.values) < 1e-2 * env.sup


def test_envelope_rejects_early_extinction_time(separable_run):
    with pytest.raises(DomainError):
        dg.scaling_envelope(separable_run, 0.5, 0)
    with pytest.raises(ContractError):
        dg.scaling_envelope(separable_run, 1.0, 2)


def test_reports(bump_run, steady_101):
    est = estimate_extinction_time(bump_run)
    base = dg.base_report(bump_run, est.Tstar)
    assert base.passed
    assert {"envelope_C0", "envelope_C1"} <= set(base.constants)
    rep = dg.rescaled_report(rescaled_image(bump_run, est.Tstar), steady_101)
    assert {"M_2", "M_4", "M_8", "bc_margin", "J", "harnack_c0", "rel_err_sup"} <= set(rep.series)
    assert rep.constants["gamma_sup"] > 0


def test_two_dimensional_diagnostics(steady_2d):
    traj = evolve_rescaled(steady_2d.S * 0.9, 2.0, dt_policy=DtPolicy(dt=0.05, snapshot_every=2), t_end=1.0)
    assert np.all(dg.benilan_crandall_margin(traj).values <= 0)
    assert np.all(dg.energy_slopes(traj) <= 0)
    g = solve_steady(3.0, 0.0, build_grid(2, [(0, 2), (0, 1)], (21, 11)), tol=1e-8)
    assert dg.harnack_ratio(g.S).c0 < math.inf


# -- stated examples and properties ---------------------------------------------------------------


def test_energy_examples():
    g = build_grid(1, [(0, 1)], 201)
    assert dg.energy_J(g.function(np.zeros(201), dirichlet=True), 2.0) == 0.0
    from fde_lab.steady import first_eigenpair

    ep = first_eigenpair(g)
    expected = ep.value - 2 / 3 * integrate_values(g, ep.psi.values**3)
    assert dg.energy_J(ep.psi, 2.0) == pytest.approx(expected, rel=1e-10)


def test_dissipation_residual_stationary_is_zero(steady_101):
    traj = evolve_rescaled(steady_101.S, 2.0, dt_policy=DtPolicy(dt=0.05, snapshot_every=1), t_end=0.5)
    r = dg.dissipation_residual(traj)
    assert r.values.max() < 1e-12


def test_total_energy_drop_matches_dissipation(bump_run):
    traj = bump_run
    J = dg.energy_series(traj).values
    dv = np.gradient(traj.values, traj.t, axis=0, edge_order=1)
    D = np.array([4 * integrate_values(traj.grid, traj.values[k] * dv[k] ** 2) for k in range(len(traj))])
    half = len(traj) // 2
    drop = J[0] - J[half]
    assert drop == pytest.approx(np.trapezoid(D[: half + 1], traj.t[: half + 1]), rel=0.05)


def test_curvature_of_scaled_profile(steady_401):
    for a in (0.5, 2.0):
        c = dg.curvature_R(steady_401.S * a, 2.0)
        np.testing.assert_allclose(c.R_e.values, a ** (1 - 2.0), rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 2.0), st.sampled_from([1, 2, 4, 8]))
def test_moment_scaling_law(steady_101, a, q):
    S = steady_101.S
    m = dg.moment_Mq(S * a, 2.0, 0.0, q)[0]
    exact = abs(a ** (1 - 2.0) - 1) ** q * a**3 * integrate_values(S.grid, S.values**3)
    assert m == pytest.approx(exact, rel=1e-5, abs=1e-12)


def test_moments_bounded_on_generic_run(bump_run):
    resc = rescaled_image(bump_run)
    T = resc.t[-1]
    for q in (1, 2, 4, 8):
        M = dg.moments_Mq(resc, q)
        assert np.all(np.isfinite(M.values))
    M8 = dg.moments_Mq(resc, 8)
    late = M8.window(0.75 * T, T).values.max()
    mid = M8.window(0.5 * T, 0.75 * T).values.max()
    assert late <= 2 * mid


def test_bc_coefficient_long_time_limit():
    for p in (1.5, 2.0, 3.0):
        t = 50 * (p - 1) / p
        assert dg.bc_coefficient(p, t) == pytest.approx(p / (p - 1) ** 2, rel=1e-6)


def test_bc_margin_flags_injected_jump(steady_101):
    from fde_lab.evolve import Trajectory

    S = steady_101.S
    traj = Trajectory("rescaled", 2.0, 0.0, (0.5, 1.0, 1.5), (S, S * 3.0, S * 3.0))
    m = dg.benilan_crandall_margin(traj)
    assert m.values.max() > 0


def test_rate_refused_at_profile(steady_101):
    traj = evolve_rescaled(steady_101.S, 2.0, dt_policy=DtPolicy(dt=0.1), t_end=1.0)
    fit = dg.convergence_rate(traj, steady_101)
    assert fit.refused


def test_generic_envelope_finite(bump_run):
    Tstar = estimate_extinction_time(bump_run).Tstar
    env = dg.scaling_envelope(bump_run, Tstar, 1)
    assert 0 < env.sup <= 1e3
