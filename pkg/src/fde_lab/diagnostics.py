"""Diagnostics evaluated along trajectories.

Time derivatives of snapshot sequences use centered differences at interior
snapshot times and one-sided differences at the two ends (``np.gradient``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from fde_lab.domain import (
    DistanceField,
    Grid,
    GridFunction,
    dirichlet_energy_values,
    distance_field,
    integrate_values,
    laplacian_values,
)
from fde_lab.errors import ContractError, DomainError, EstimationError
from fde_lab.evolve import Trajectory
from fde_lab.steady import SteadyState

MASK_THRESHOLD = 1e-3


@dataclass(frozen=True, eq=False)
class TimeSeries:
    name: str
    t: np.ndarray
    values: np.ndarray
    note: str = ""

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if t.shape != v.shape:
            raise ContractError("times and values differ in length")
        if np.any(np.diff(t) <= 0):
            raise ContractError("times must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ContractError(f"time series {self.name!r} has non-finite values")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.t.size

    def to_csv(self, path=None) -> str:
        text = "t,value\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(self.t, self.values))
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_dict(self) -> dict:
        return {"name": self.name, "note": self.note, "t": [float(x) for x in self.t], "values": [float(x) for x in self.values]}

    @classmethod
    def from_dict(cls, data: dict) -> "TimeSeries":
        return cls(data["name"], data["t"], data["values"], data.get("note", ""))

    def window(self, t_a: float, t_b: float) -> "TimeSeries":
        keep = (self.t >= t_a) & (self.t <= t_b)
        return TimeSeries(self.name, self.t[keep], self.values[keep], self.note)


@dataclass(frozen=True)
class Flag:
    name: str
    passed: bool
    value: float
    tolerance: str  # key into DiagnosticsReport.tolerances


@dataclass
class DiagnosticsReport:
    series: dict[str, TimeSeries] = field(default_factory=dict)
    constants: dict[str, float] = field(default_factory=dict)
    tolerances: dict[str, float] = field(default_factory=dict)
    flags: list[Flag] = field(default_factory=list)

    def add_flag(self, name: str, passed: bool, value: float, tolerance: str):
        if tolerance not in self.tolerances:
            raise ContractError(f"flag {name!r} references unknown tolerance {tolerance!r}")
        self.flags.append(Flag(name, bool(passed), float(value), tolerance))

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.flags)

    def to_dict(self) -> dict:
        return {
            "series": {k: s.to_dict() for k, s in self.series.items()},
            "constants": {k: float(v) for k, v in self.constants.items()},
            "tolerances": {k: float(v) for k, v in self.tolerances.items()},
            "flags": [{"name": f.name, "passed": f.passed, "value": f.value, "tolerance": f.tolerance} for f in self.flags],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "DiagnosticsReport":
        rep = cls(
            {k: TimeSeries.from_dict(v) for k, v in data.get("series", {}).items()},
            dict(data.get("constants", {})),
            dict(data.get("tolerances", {})),
        )
        rep.flags = [Flag(**f) for f in data.get("flags", [])]
        return rep


def _time_derivative(traj: Trajectory) -> np.ndarray:
    if len(traj) < 2:
        raise EstimationError("need at least two snapshots for a time derivative")
    return np.gradient(traj.values, traj.t, axis=0, edge_order=1)


# -- Harnack ----------------------------------------------------------------------------


@dataclass(frozen=True)
class HarnackRatio:
    min: float
    max: float
    c0: float
    degenerate: bool


def _edge_slopes(grid: Grid, values: np.ndarray) -> np.ndarray:
    """One-sided second-order normal derivatives ``(4 v_1 - v_2) / 2h`` along the middle half of every edge."""
    out = []
    for axis, hk in enumerate(grid.h):
        for first, second in ((1, 2), (-2, -3)):
            v1 = np.take(values, first, axis=axis)
            v2 = np.take(values, second, axis=axis)
            slope = (4 * v1 - v2) / (2 * hk)
            if grid.dimension == 2:
                n = slope.size
                slope = slope[n // 4: n - n // 4]
            out.append(np.ravel(slope))
    return np.concatenate(out)


def harnack_ratio(v: GridFunction, d: DistanceField | None = None) -> HarnackRatio:
    """Extremes of ``v/d`` over interior nodes.

    The ``degenerate`` flag is raised when ``v`` is not positive in the
    interior, or when ``v/d`` extrapolates to zero at the boundary (``v``
    vanishes to higher order there), judged on the middle half of each edge so
    that corner degeneracy of rectangles does not count.
    """
    grid = v.grid
    d = distance_field(grid) if d is None else d
    if d.grid != grid:
        raise ContractError("distance field lives on another grid")
    ratio = v.interior / d.interior
    rmax = float(ratio.max())
    if np.any(v.interior <= 0):
        return HarnackRatio(0.0, rmax, math.inf, True)
    rmin = float(ratio.min())
    slopes = _edge_slopes(grid, v.values)
    degenerate = bool(np.min(slopes) <= MASK_THRESHOLD * rmax)
    return HarnackRatio(rmin, rmax, max(rmax, 1.0 / rmin), degenerate)


def harnack_series(traj: Trajectory) -> tuple[TimeSeries, TimeSeries, TimeSeries]:
    """(min, max, c0) of ``v/d`` per snapshot."""
    d = distance_field(traj.grid)
    rs = [harnack_ratio(s, d) for s in traj.snapshots]
    t = traj.t
    c0 = [min(r.c0, 1e300) for r in rs]
    return (TimeSeries("harnack_min", t, [r.min for r in rs]),
            TimeSeries("harnack_max", t, [r.max for r in rs]),
            TimeSeries("harnack_c0", t, c0))


def base_harnack_band(traj: Trajectory, Tstar: float, window=(0.25, 0.9)) -> tuple[float, float]:
    """Extremes of ``u / (d (T*-t)^(1/(p-1)))`` over snapshots with ``t/T*`` in ``window``."""
    if traj.frame != "base":
        raise ContractError("base-frame band needs a base trajectory")
    d = distance_field(traj.grid).interior
    lo, hi = math.inf, -math.inf
    for t, s in zip(traj.times, traj.snapshots):
        if window[0] * Tstar <= t <= window[1] * Tstar:
            r = s.interior / (d * (Tstar - t) ** (1 / (traj.p - 1)))
            lo, hi = min(lo, float(r.min())), max(hi, float(r.max()))
    if not math.isfinite(lo):
        raise EstimationError("no snapshots in the requested window")
    return lo, hi


# -- energy ---------------------------------------------------------------------------


def energy_J_values(grid: Grid, values: np.ndarray, p: float, b: float = 0.0, source: bool = True) -> float:
    values = np.asarray(values).reshape(grid.shape)
    J = dirichlet_energy_values(grid, values) - b * integrate_values(grid, values**2)
    if source:
        J -= 2.0 / (p + 1) * integrate_values(grid, np.abs(values) ** (p + 1))
    return J


def energy_J(v: GridFunction, p: float, b: float = 0.0, source: bool = True) -> float:
    """``int |grad v|^2 - b v^2 - 2/(p+1) |v|^(p+1)``; ``source=False`` drops the last term (base frame)."""
    if not v.dirichlet:
        raise ContractError("energy_J requires a Dirichlet-tagged function")
    return energy_J_values(v.grid, v.values, p, b, source)


def _frame_source(traj: Trajectory) -> bool:
    return traj.frame == "rescaled"


def energy_series(traj: Trajectory) -> TimeSeries:
    """J along a trajectory: with the potential term in the rescaled frame, without it in the base frame."""
    src = _frame_source(traj)
    vals = [energy_J_values(traj.grid, s.values, traj.p, traj.b, src) for s in traj.snapshots]
    return TimeSeries("J", traj.t, vals, "with source term" if src else "without source term")


def dissipation_residual(traj: Trajectory, relative: bool = False) -> TimeSeries:
    """``|dJ/dt + 2p int v^(p-1) (d_t v)^2|`` per snapshot (relative: divided by ``|dJ/dt|``)."""
    if len(traj) < 3:
        raise EstimationError("dissipation residual needs at least three snapshots")
    grid, p = traj.grid, traj.p
    J = energy_series(traj).values
    dJ = np.gradient(J, traj.t, edge_order=1)
    dv = _time_derivative(traj)
    V = traj.values
    D = np.array([2 * p * integrate_values(grid, V[k] ** (p - 1) * dv[k] ** 2) for k in range(len(traj))])
    r = np.abs(dJ + D)
    if relative:
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(np.abs(dJ) > 0, r / np.abs(dJ), np.where(r == 0, 0.0, np.inf))
        rel = np.minimum(rel, 1e300)
        return TimeSeries("dissipation_residual_rel", traj.t, rel)
    return TimeSeries("dissipation_residual", traj.t, r)


def energy_slopes(traj: Trajectory) -> np.ndarray:
    """``Delta J / Delta t`` on consecutive snapshot intervals."""
    J = energy_series(traj).values
    return np.diff(J) / np.diff(traj.t)


# -- curvature quantity and its moments -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class Curvature:
    R_e: GridFunction
    R_t: GridFunction | None
    masked: np.ndarray  # boolean mask over grid nodes (interior nodes only can be masked)

    @property
    def masked_fraction(self) -> float:
        n = int(np.sum(self.R_e.grid.interior_mask))
        return float(np.sum(self.masked)) / n

    @property
    def unmasked(self) -> np.ndarray:
        return self.R_e.grid.interior_mask & ~self.masked


def _extend(grid: Grid, interior_block: np.ndarray) -> np.ndarray:
    """Copy interior values outward to boundary nodes (nearest interior neighbour)."""
    return np.pad(interior_block, 1, mode="edge")


def _mask(v: GridFunction) -> np.ndarray:
    d = distance_field(v.grid).values
    return v.grid.interior_mask & (v.values < MASK_THRESHOLD * d)


def curvature_R(v: GridFunction, p: float, b: float = 0.0, dt_pair: tuple[GridFunction, float] | None = None) -> Curvature:
    """``R_e = (-Lap_h v - b v) / v^p``; with ``dt_pair = (v_prev, dt)``, also ``R_t = 1 - p (v - v_prev) / (dt v)``.

    The two agree along the rescaled flow (in the base frame ``R_e = -p d_t u / u``).

    Masked interior nodes (``v < 1e-3 d``) carry ``R = 1`` and are listed in ``masked``.
    """
    grid = v.grid
    if not v.dirichlet:
        raise ContractError("curvature_R requires a Dirichlet-tagged function")
    masked = _mask(v)
    safe = np.where(masked | grid.boundary_mask, 1.0, v.values)
    Lv = -laplacian_values(grid, v.values) - b * v.values
    inner = tuple(slice(1, -1) for _ in range(grid.dimension))
    Re = np.where(masked, 1.0, Lv / safe**p)
    R_e = GridFunction(grid, _extend(grid, Re[inner]))
    R_t = None
    if dt_pair is not None:
        prev, dt = dt_pair
        if prev.grid != grid or not dt > 0:
            raise ContractError("dt_pair must hold a snapshot on the same grid and a positive dt")
        Rt = np.where(masked, 1.0, 1.0 - p * (v.values - prev.values) / (dt * safe))
        R_t = GridFunction(grid, _extend(grid, Rt[inner]))
    return Curvature(R_e, R_t, masked)


def moment_Mq(v: GridFunction, p: float, b: float, q: float) -> tuple[float, float]:
    """``M_q = int |R_e - 1|^q v^(p+1)`` over unmasked nodes; returns (M_q, masked fraction)."""
    if q < 1:
        raise ContractError("q must be >= 1")
    c = curvature_R(v, p, b)
    integrand = np.where(c.unmasked, np.abs(c.R_e.values - 1) ** q * v.values ** (p + 1), 0.0)
    return integrate_values(v.grid, integrand), c.masked_fraction


def moments_Mq(traj: Trajectory, q: float) -> TimeSeries:
    vals, frac = [], 0.0
    for s in traj.snapshots:
        m, f = moment_Mq(s, traj.p, traj.b, q)
        vals.append(m)
        frac = max(frac, f)
    name = f"M_{int(q)}" if float(q).is_integer() else f"M_{q}"
    return TimeSeries(name, traj.t, vals, f"max masked fraction {frac!r}")


def moment_evolution_residual(traj: Trajectory, q: float) -> TimeSeries:
    """Experimental: relative defect of the evolution identity for ``M_q`` in the rescaled frame.

    ``dM_q/dt = -q(q-1)/p int |R-1|^(q-2) |grad(R-1)|^2 v^2
                + int ((p-1)/p (q - (p+1)/(p-1)) |R-1|^q (R-1) + (q - q/p) |R-1|^q) v^(p+1)``

    with ``dM_q/dt`` from centered differences and gradients from forward
    differences. Not an acceptance gate: two levels of differentiation make
    the expected accuracy unclear.
    """
    if traj.frame != "rescaled":
        raise ContractError("the identity is stated in the rescaled frame")
    if q < 2:
        raise ContractError("q must be >= 2 for the pointwise identity")
    p, grid = traj.p, traj.grid
    M = moments_Mq(traj, q).values
    dM = np.gradient(M, traj.t, edge_order=1)
    rhs = []
    for s in traj.snapshots:
        c = curvature_R(s, p, traj.b)
        w = c.R_e.values - 1.0
        keep = c.unmasked
        grad_sq = np.zeros(grid.shape)
        for axis, hk in enumerate(grid.h):
            g = np.diff(w, axis=axis) / hk
            pad = [(0, 0)] * grid.dimension
            pad[axis] = (0, 1)
            grad_sq += np.pad(g, pad) ** 2
        a = np.abs(w)
        term1 = -q * (q - 1) / p * np.where(keep, a ** (q - 2) * grad_sq * s.values**2, 0.0)
        term2 = np.where(keep, ((p - 1) / p * (q - (p + 1) / (p - 1)) * a**q * w + (q - q / p) * a**q) * s.values ** (p + 1), 0.0)
        rhs.append(integrate_values(grid, term1 + term2))
    rhs = np.array(rhs)
    scale = np.maximum(np.abs(dM), np.abs(rhs))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, np.abs(dM - rhs) / scale, 0.0)
    return TimeSeries(f"M_{q}_evolution_residual", traj.t, rel, "experimental")


# -- Benilan-Crandall ---------------------------------------------------------------------


def bc_coefficient(p: float, t):
    """``p/(p-1)^2 * [1 - exp(-p t/(p-1))]^(-1)``."""
    t = np.asarray(t, dtype=float)
    return p / (p - 1) ** 2 / -np.expm1(-p * t / (p - 1))


def benilan_crandall_margin(traj: Trajectory) -> TimeSeries:
    """Per snapshot with ``t > 0``: max over interior nodes of ``d_t v - coefficient(t) v``."""
    if traj.frame != "rescaled":
        raise ContractError("the bound is stated for the rescaled flow")
    dv = _time_derivative(traj)
    V = traj.values
    mask = traj.grid.interior_mask
    ts, margins = [], []
    for k, t in enumerate(traj.t):
        if t <= 0:
            continue
        m = dv[k][mask] - bc_coefficient(traj.p, t) * V[k][mask]
        ts.append(t)
        margins.append(float(m.max()))
    return TimeSeries("bc_margin", ts, margins, "negative means the bound holds")


# -- convergence to the profile ------------------------------------------------------------


def relative_error_series(traj: Trajectory, steady: SteadyState) -> tuple[TimeSeries, TimeSeries]:
    """``||v/S - 1||_inf`` and ``(int |v/S - 1|^2 S^(p+1))^(1/2)`` over interior nodes."""
    if steady.grid != traj.grid:
        raise ContractError("steady state and trajectory live on different grids")
    S = steady.S.values
    mask = traj.grid.interior_mask
    weight = np.where(mask, S ** (steady.p + 1), 0.0)
    sup, wtd = [], []
    for s in traj.snapshots:
        e = np.zeros(traj.grid.shape)
        e[mask] = s.values[mask] / S[mask] - 1.0
        sup.append(float(np.max(np.abs(e[mask]))))
        wtd.append(math.sqrt(integrate_values(traj.grid, e**2 * weight)))
    return TimeSeries("rel_err_sup", traj.t, sup), TimeSeries("rel_err_weighted", traj.t, wtd)


@dataclass(frozen=True)
class RateFit:
    gamma_sup: float
    gamma_weighted: float
    r_squared: float
    refused: bool
    reason: str = ""
    window: tuple[float, float] = (math.nan, math.nan)
    n_points: int = 0


NOISE_FLOOR = 1e-10


def _slope(t, y, robust: bool):
    if robust:
        res = stats.theilslopes(y, t)
        slope, intercept = res[0], res[1]
    else:
        slope, intercept = np.polyfit(t, y, 1)
    pred = slope * t + intercept
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot if ss_tot > 0 else 0.0
    return float(slope), r2


def fit_decay_rate(sup: TimeSeries, weighted: TimeSeries | None = None, robust: bool = False,
                   decades: float | None = None, tail_threshold: float = 0.5, min_points: int = 4) -> RateFit:
    """Least-squares decay rates of log errors over the tail where ``sup < tail_threshold``.

    With ``decades`` the window is further cut to the final stretch over which
    the sup error falls by that many decades (ending at the last point).
    """
    t, e = sup.t, sup.values
    tail = np.nonzero(e < tail_threshold)[0]
    if tail.size == 0:
        return RateFit(math.nan, math.nan, math.nan, True, "error never below the tail threshold")
    start = tail[0]
    # the tail is the final contiguous stretch below the threshold
    above = np.nonzero(e[start:] >= tail_threshold)[0]
    if above.size:
        start = start + above[-1] + 1
    idx = np.arange(start, t.size)
    if decades is not None and idx.size:
        target = e[idx[-1]] * 10**decades
        high = np.nonzero(e[idx] >= target)[0]
        if high.size:
            idx = idx[high[-1]:]
    if idx.size < min_points:
        return RateFit(math.nan, math.nan, math.nan, True, "too few points in the fit window")
    tt, ee = t[idx], e[idx]
    if np.max(ee) < NOISE_FLOOR:
        return RateFit(math.nan, math.nan, math.nan, True, "error at the noise floor", (tt[0], tt[-1]), idx.size)
    if not ee[-1] < ee[0]:
        return RateFit(math.nan, math.nan, math.nan, True, "error not decreasing over the window", (tt[0], tt[-1]), idx.size)
    slope, r2 = _slope(tt, np.log(np.maximum(ee, 1e-300)), robust)
    if slope >= 0:
        return RateFit(math.nan, math.nan, r2, True, "nonnegative fitted slope", (tt[0], tt[-1]), idx.size)
    gw = math.nan
    if weighted is not None:
        ww = weighted.values[idx]
        gw = -_slope(tt, np.log(np.maximum(ww, 1e-300)), robust)[0]
    return RateFit(-slope, gw, max(0.0, r2), False, "", (float(tt[0]), float(tt[-1])), int(idx.size))


def convergence_rate(traj: Trajectory, steady: SteadyState, robust: bool = False, decades: float | None = None) -> RateFit:
    """Exponential rates of ``v -> S`` in sup and weighted norms, with R^2 of the sup fit."""
    sup, wtd = relative_error_series(traj, steady)
    return fit_decay_rate(sup, wtd, robust=robust, decades=decades)


# -- derivative envelopes ------------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    l: int
    series: TimeSeries
    sup: float
    window: tuple[float, float]


def scaling_envelope(traj: Trajectory, Tstar: float, l: int, delta: float | None = None) -> Envelope:
    """``C_l(t) = max |d_t^l u| / (d (T*-t)^(1/(p-1)-l))`` over snapshots with ``t in [delta, T* - 5 dt]``."""
    if traj.frame != "base":
        raise ContractError("envelopes are measured in the base frame")
    if l not in (0, 1):
        raise ContractError("l must be 0 or 1")
    umax = traj.umax
    alive = traj.t[umax > 1e-3 * umax[0]] if umax[0] > 0 else traj.t[:0]
    if not Tstar > traj.t[0] or (alive.size and alive.max() >= Tstar):
        raise DomainError(f"T* = {Tstar} is inconsistent with the trajectory")
    delta = Tstar / 8 if delta is None else delta
    dt = float(traj.policy.get("resolved_dt", 0.0))
    t_hi = Tstar - 5 * dt
    d = distance_field(traj.grid).interior
    data = _time_derivative(traj) if l == 1 else traj.values
    mask = traj.grid.interior_mask
    ts, cs = [], []
    for k, t in enumerate(traj.t):
        if delta <= t <= t_hi:
            ts.append(t)
            cs.append(float(np.max(np.abs(data[k][mask]) / d)) / (Tstar - t) ** (1 / (traj.p - 1) - l))
    if not ts:
        raise EstimationError("no snapshots in the envelope window")
    return Envelope(l, TimeSeries(f"envelope_C{l}", ts, cs), float(max(cs)), (float(delta), float(t_hi)))


# -- report assembly -------------------------------------------------------------------------


def rescaled_report(traj: Trajectory, steady: SteadyState | None = None, qs=(2, 4, 8)) -> DiagnosticsReport:
    """Standard diagnostics for a rescaled trajectory with the default tolerances."""
    rep = DiagnosticsReport(tolerances={"J_monotone": 0.0, "bc_margin": 0.0, "harnack_c0": 10.0, "rate_r2": 0.95, "moment_ratio": 2.0})
    rep.series["J"] = energy_series(traj)
    slopes = energy_slopes(traj) if len(traj) > 1 else np.zeros(0)
    rep.add_flag("J_non_increasing", bool(np.all(slopes <= 0)), float(slopes.max()) if slopes.size else 0.0, "J_monotone")
    hmin, hmax, c0 = harnack_series(traj)
    rep.series.update({"harnack_min": hmin, "harnack_max": hmax, "harnack_c0": c0})
    rep.constants["c0"] = float(c0.values.max())
    rep.add_flag("harnack", rep.constants["c0"] <= rep.tolerances["harnack_c0"], rep.constants["c0"], "harnack_c0")
    for q in qs:
        s = moments_Mq(traj, q)
        rep.series[s.name] = s
    if len(traj) > 1:
        bc = benilan_crandall_margin(traj)
        rep.series["bc_margin"] = bc
        if len(bc):
            rep.add_flag("benilan_crandall", bool(np.all(bc.values <= 0)), float(bc.values.max()), "bc_margin")
    if steady is not None:
        sup, wtd = relative_error_series(traj, steady)
        rep.series["rel_err_sup"], rep.series["rel_err_weighted"] = sup, wtd
        fit = fit_decay_rate(sup, wtd)
        if not fit.refused:
            rep.constants.update({"gamma_sup": fit.gamma_sup, "gamma_weighted": fit.gamma_weighted, "rate_r2": fit.r_squared})
    return rep


def base_report(traj: Trajectory, Tstar: float | None = None) -> DiagnosticsReport:
    rep = DiagnosticsReport(tolerances={"J_monotone": 0.0})
    rep.series["J"] = energy_series(traj)
    slopes = energy_slopes(traj) if len(traj) > 1 else np.zeros(0)
    rep.add_flag("J_non_increasing", bool(np.all(slopes <= 0)), float(slopes.max()) if slopes.size else 0.0, "J_monotone")
    rep.series["umax"] = TimeSeries("umax", traj.t, traj.umax)
    if Tstar is not None:
        rep.constants["Tstar"] = Tstar
        for l in (0, 1):
            try:
                env = scaling_envelope(traj, Tstar, l)
            except (EstimationError, DomainError):
                continue
            rep.series[env.series.name] = env.series
            rep.constants[f"envelope_C{l}"] = env.sup
    return rep
