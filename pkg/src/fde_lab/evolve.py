"""Implicit time integration of the base and rescaled fast-diffusion flows.

Both flows are advanced by backward Euler in ``w = u^p``:

    base      (w+ - w) / dt = (Lap_h + b) (w+)^(1/p)
    rescaled  (w+ - w) / dt = (Lap_h + b) (w+)^(1/p) + w+

and each step is a damped Newton solve of that residual, iterating on ``u+``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import solve_banded

from fde_lab.domain import Grid, GridFunction, gridfunction_from_csv, gridfunction_to_csv
from fde_lab.errors import ContractError, DomainError, EstimationError, RunFailure, StepFailure

FRAMES = ("base", "rescaled")
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 30
MAX_DT_HALVINGS = 10


@dataclass(frozen=True)
class DtPolicy:
    """Step size and snapshot cadence.

    ``dt=None`` means ``h^2`` (smallest spacing). Once an on-the-fly extinction
    estimate exists the step is capped at ``extinction_fraction * (T_est - t)``.
    Snapshots are taken every ``snapshot_every`` steps, and additionally
    whenever ``snapshot_interval`` time has passed since the previous one. Since
    the step shrinks like ``T_est - t`` near extinction, step-count cadence is
    geometric in ``T* - t`` there.
    """

    dt: float | None = None
    extinction_fraction: float | None = 0.01
    snapshot_every: int = 100
    snapshot_interval: float | None = None
    max_steps: int = 10_000_000

    def __post_init__(self):
        if self.dt is not None and not self.dt > 0:
            raise ContractError("dt must be positive")
        if self.snapshot_every < 1:
            raise ContractError("snapshot_every must be >= 1")

    def base_dt(self, grid: Grid) -> float:
        return self.dt if self.dt is not None else min(grid.h) ** 2

    def record(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StopCriterion:
    t_end: float | None = None
    floor_factor: float = 1e-8  # extinction floor is floor_factor * max u0


@dataclass(frozen=True, eq=False)
class Trajectory:
    frame: str
    p: float
    b: float
    times: tuple[float, ...]
    snapshots: tuple[GridFunction, ...]
    policy: dict = field(default_factory=dict)
    status: str = "complete"  # complete | extinct | partial

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ContractError(f"unknown frame {self.frame!r}")
        if len(self.times) != len(self.snapshots) or not self.snapshots:
            raise ContractError("need one time per snapshot and at least one snapshot")
        t = np.asarray(self.times)
        if np.any(np.diff(t) <= 0):
            raise ContractError("snapshot times must be strictly increasing")
        grid = self.snapshots[0].grid
        for s in self.snapshots:
            if s.grid != grid or not s.dirichlet:
                raise ContractError("snapshots must be Dirichlet functions on one grid")
            if s.min() < 0:
                raise ContractError("snapshots must be nonnegative")

    @property
    def grid(self) -> Grid:
        return self.snapshots[0].grid

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.times)

    @property
    def values(self) -> np.ndarray:
        """Stacked snapshot values of shape ``(n_snapshots, *grid.shape)``."""
        return np.stack([s.values for s in self.snapshots])

    @property
    def umax(self) -> np.ndarray:
        return np.array([s.max() for s in self.snapshots])

    def __len__(self):
        return len(self.snapshots)

    def at(self, k: int) -> tuple[float, GridFunction]:
        return self.times[k], self.snapshots[k]


@dataclass(frozen=True)
class ExtinctionEstimate:
    Tstar: float
    window: tuple[float, float]
    r_squared: float
    method: str


# -- a single implicit step -------------------------------------------------------


class _Stepper:
    """Backward-Euler step in w = u^p with a damped Newton solve."""

    def __init__(self, grid: Grid, p: float, b: float, source: bool):
        if p <= 1:
            raise ContractError(f"p must exceed 1, got {p}")
        self.grid, self.p, self.b, self.source = grid, p, b, source
        self.A = (grid.interior_laplacian + b * sp.identity(grid.interior_laplacian.shape[0])).tocsr()
        self.op_norm = sum(4.0 / hk**2 for hk in grid.h) + abs(b)
        if grid.dimension == 1:
            h2 = grid.h[0] ** 2
            m = grid.interior_shape[0]
            self._band = (np.ones(m) / h2, np.full(m, -2.0 / h2 + b))

    def _solve(self, diag: np.ndarray, dt: float, rhs: np.ndarray) -> np.ndarray:
        # (diag - dt A) y = rhs
        if self.grid.dimension == 1:
            off, main = self._band
            ab = np.empty((3, diag.size))
            ab[0] = -dt * off
            ab[1] = diag - dt * main
            ab[2] = -dt * off
            return solve_banded((1, 1), ab, rhs)
        M = sp.diags(diag) - dt * self.A
        return spla.spsolve(M.tocsc(), rhs)

    def residual(self, u, w_old, dt):
        c = 1.0 - dt if self.source else 1.0
        return c * u**self.p - w_old - dt * (self.A @ u)

    def step(self, u: np.ndarray, dt: float) -> tuple[np.ndarray, int, float]:
        """Advance interior values ``u``. Returns (u+, iterations, final residual).

        The residual is measured in ``w = u^p``; Newton updates are applied to
        ``u``, where the Jacobian ``c p u^(p-1) - dt A`` stays an M-matrix even
        at nodes with ``u = 0`` (in ``w`` those nodes would be frozen).
        """
        p = self.p
        if self.source and dt >= 1:
            raise StepFailure("rescaled step needs dt < 1", dt=dt)
        w_old = u**p
        scale = float(np.max(w_old)) if w_old.size else 0.0
        if scale == 0.0:
            return np.zeros_like(u), 0, 0.0
        umax = scale ** (1 / p)
        tol = NEWTON_TOL * scale + 8 * np.finfo(float).eps * (scale + dt * self.op_norm * umax)
        c = 1.0 - dt if self.source else 1.0
        x = u.copy()
        F = self.residual(x, w_old, dt)
        norm = float(np.max(np.abs(F)))
        for it in range(NEWTON_MAX_ITER):
            if norm <= tol:
                return x, it, norm
            y = self._solve(c * p * x ** (p - 1), dt, -F)
            if not np.all(np.isfinite(y)):
                break
            step = 1.0
            for _ in range(MAX_HALVINGS + 1):
                trial = np.maximum(x + step * y, 0.0)
                F_trial = self.residual(trial, w_old, dt)
                n_trial = float(np.max(np.abs(F_trial)))
                if n_trial < norm:
                    break
                step *= 0.5
            else:
                break
            x, F, norm = trial, F_trial, n_trial
        if norm <= tol:
            return x, NEWTON_MAX_ITER, norm
        raise StepFailure("Newton did not converge", last_residual=norm, tolerance=tol, dt=dt)


def _as_dirichlet(u: GridFunction) -> GridFunction:
    if not u.dirichlet:
        raise ContractError("expected a Dirichlet-tagged grid function")
    if u.min() < 0:
        raise ContractError("expected a nonnegative grid function")
    return u


def step_base(u: GridFunction, dt: float, p: float, b: float = 0.0) -> GridFunction:
    """One backward-Euler step of the base flow."""
    _as_dirichlet(u)
    if not dt > 0:
        raise ContractError("dt must be positive")
    new, _, _ = _Stepper(u.grid, p, b, source=False).step(u.interior, dt)
    return GridFunction(u.grid, u.grid.embed(new), dirichlet=True)


def step_rescaled(v: GridFunction, dt: float, p: float, b: float = 0.0) -> GridFunction:
    """One backward-Euler step of the rescaled flow (source treated implicitly)."""
    _as_dirichlet(v)
    if not 0 < dt < 1:
        raise ContractError("dt must lie in (0, 1)")
    new, _, _ = _Stepper(v.grid, p, b, source=True).step(v.interior, dt)
    return GridFunction(v.grid, v.grid.embed(new), dirichlet=True)


def _run(u0: GridFunction, p: float, b: float, policy: DtPolicy, t_end, floor_factor, frame: str) -> Trajectory:
    _as_dirichlet(u0)
    grid = u0.grid
    stepper = _Stepper(grid, p, b, source=frame == "rescaled")
    base_dt = policy.base_dt(grid)
    if frame == "rescaled":
        base_dt = min(base_dt, 0.5)
    u = u0.interior.copy()
    u_max0 = float(u.max()) if u.size else 0.0
    floor = floor_factor * u_max0
    times, snaps = [0.0], [u0]
    record = policy.record() | {"resolved_dt": base_dt, "extinction_floor": floor, "t_end": t_end}

    def finish(status):
        return Trajectory(frame, p, b, tuple(times), tuple(snaps), record, status)

    if u_max0 == 0.0:
        return finish("extinct")
    t = 0.0
    t_est = math.inf
    prev = None  # (t, umax^(p-1)) at the previous step
    last_snap_t, steps_since = 0.0, 0
    for _ in range(policy.max_steps):
        dt = base_dt
        if policy.extinction_fraction is not None and math.isfinite(t_est):
            dt = min(dt, max(t_est - t, 0.0) * policy.extinction_fraction) or base_dt
        final = False
        if t_end is not None and t + dt >= t_end * (1 - 1e-14):
            dt, final = t_end - t, True
            if dt <= 0:
                break
        for _halving in range(MAX_DT_HALVINGS + 1):
            try:
                new, _, _ = stepper.step(u, dt)
                break
            except StepFailure as exc:
                last_error = exc
                dt *= 0.5
                final = False
        else:
            raise RunFailure("step failed after repeated dt halving", partial=finish("partial"), t=t, **last_error.diagnostics)
        t += dt
        u = new
        umax = float(u.max())
        y = umax ** (p - 1)
        if frame == "base" and prev is not None and prev[1] > y:
            t_est = t + y * (t - prev[0]) / (prev[1] - y)
        prev = (t, y)
        steps_since += 1
        extinct = umax < floor
        take = final or extinct or steps_since >= policy.snapshot_every
        if policy.snapshot_interval is not None and t - last_snap_t >= policy.snapshot_interval * (1 - 1e-12):
            take = True
        if take:
            times.append(t)
            snaps.append(GridFunction(grid, grid.embed(u), dirichlet=True))
            last_snap_t, steps_since = t, 0
        if extinct:
            return finish("extinct")
        if final:
            return finish("complete")
    raise RunFailure("maximum number of steps reached", partial=finish("partial"), t=t)


def evolve_base(u0: GridFunction, p: float, b: float = 0.0, dt_policy: DtPolicy | None = None,
                stop: StopCriterion | None = None) -> Trajectory:
    """Integrate the base flow until the extinction floor or ``stop.t_end``."""
    stop = stop or StopCriterion()
    return _run(u0, p, b, dt_policy or DtPolicy(), stop.t_end, stop.floor_factor, "base")


def evolve_rescaled(v0: GridFunction, p: float, b: float = 0.0, dt_policy: DtPolicy | None = None,
                    t_end: float = 1.0, floor_factor: float = 1e-8) -> Trajectory:
    """Integrate the rescaled flow up to ``t_end``.

    The step is never reduced by an extinction estimate here; the rescaled
    solution is bounded away from zero in the regime of interest.
    """
    policy = dt_policy or DtPolicy()
    policy = DtPolicy(policy.dt, None, policy.snapshot_every, policy.snapshot_interval, policy.max_steps)
    return _run(v0, p, b, policy, t_end, floor_factor, "rescaled")


# -- extinction time ----------------------------------------------------------------


def estimate_extinction_time(traj: Trajectory, fraction: float = 0.25, min_points: int = 8) -> ExtinctionEstimate:
    """Fit ``u_max^(p-1)`` linearly in t over the final quarter of the usable snapshots.

    Usable snapshots are those with ``u_max`` above the extinction floor (or
    the very last one when the floor terminated the run and it is nonzero).
    """
    if traj.frame != "base":
        raise ContractError("extinction time is defined for base trajectories")
    umax = traj.umax
    if umax[0] == 0.0:
        return ExtinctionEstimate(0.0, (0.0, 0.0), 1.0, "zero-data")
    floor = traj.policy.get("extinction_floor", 0.0)
    usable = umax > floor
    t = traj.t[usable]
    y = umax[usable] ** (traj.p - 1)
    n = len(t)
    k = max(min_points, int(math.ceil(fraction * n)))
    if n < min_points:
        raise EstimationError(f"need at least {min_points} usable snapshots, got {n}")
    t_fit, y_fit = t[-k:], y[-k:]
    slope, intercept = np.polyfit(t_fit, y_fit, 1)
    if not slope < 0:
        raise EstimationError("u_max^(p-1) is not decreasing over the fit window")
    pred = slope * t_fit + intercept
    ss_res = float(np.sum((y_fit - pred) ** 2))
    ss_tot = float(np.sum((y_fit - y_fit.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    Tstar = -intercept / slope
    Tstar = max(Tstar, float(np.nextafter(t_fit[-1], np.inf)))
    return ExtinctionEstimate(float(Tstar), (float(t_fit[0]), float(t_fit[-1])), float(min(max(r2, 0.0), 1.0)), "umax-power-regression")


# -- frame transforms ------------------------------------------------------------------


def rescaled_time(tau, Tstar: float, p: float):
    """Rescaled time ``(p/(p-1)) log(T*/(T*-tau))``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau >= Tstar):
        raise DomainError(f"base time must be below T* = {Tstar}")
    return p / (p - 1) * np.log(Tstar / (Tstar - tau))


def base_time(t, Tstar: float, p: float):
    t = np.asarray(t, dtype=float)
    return Tstar * -np.expm1(-(p - 1) * t / p)


def amplitude(tau, Tstar: float, p: float):
    """``[(p-1)(T*-tau)/p]^(1/(p-1))`` so that ``u = amplitude * v``."""
    tau = np.asarray(tau, dtype=float)
    return ((p - 1) * (Tstar - tau) / p) ** (1 / (p - 1))


def frame_transform(traj: Trajectory, Tstar: float, direction: str) -> Trajectory:
    """Map between base time tau and rescaled time t.

    ``v(t) = u(tau) / amplitude(tau)`` with ``t = rescaled_time(tau)``; the
    inverse applies the same formulas backwards.
    """
    p = traj.p
    if direction == "to_rescaled":
        if traj.frame != "base":
            raise ContractError("to_rescaled expects a base trajectory")
        tau = traj.t
        new_t = rescaled_time(tau, Tstar, p)
        factors = 1.0 / amplitude(tau, Tstar, p)
        frame = "rescaled"
    elif direction == "to_base":
        if traj.frame != "rescaled":
            raise ContractError("to_base expects a rescaled trajectory")
        new_t = base_time(traj.t, Tstar, p)
        factors = amplitude(new_t, Tstar, p)
        frame = "base"
    else:
        raise ContractError(f"unknown direction {direction!r}")
    snaps = tuple(s * float(f) for s, f in zip(traj.snapshots, factors))
    policy = dict(traj.policy) | {"transformed_with_Tstar": Tstar}
    return Trajectory(frame, p, traj.b, tuple(float(x) for x in new_t), snaps, policy, traj.status)


def rescaled_image(traj: Trajectory, Tstar: float | None = None, horizon: float = 0.1) -> Trajectory:
    """Rescaled view of a base run, restricted to ``tau <= (1 - horizon) T*``.

    Close to ``T*`` the division by the vanishing amplitude magnifies both the
    error in ``T*`` and the time-discretization error, so those snapshots are
    dropped. ``Tstar`` defaults to the regression estimate.
    """
    if not 0 < horizon < 1:
        raise ContractError("horizon must lie in (0, 1)")
    if Tstar is None:
        Tstar = estimate_extinction_time(traj).Tstar
    keep = [k for k, t in enumerate(traj.times) if t <= (1 - horizon) * Tstar]
    if not keep:
        raise EstimationError("no snapshots before the rescaling horizon")
    sub = Trajectory(traj.frame, traj.p, traj.b, tuple(traj.times[k] for k in keep),
                     tuple(traj.snapshots[k] for k in keep), dict(traj.policy) | {"rescaling_horizon": horizon}, traj.status)
    return frame_transform(sub, Tstar, "to_rescaled")


# -- directory I/O -----------------------------------------------------------------------


def save_trajectory(traj: Trajectory, directory) -> list[Path]:
    """Write ``meta.json``, ``times.csv`` and ``snap_<k>.csv``; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"frame": traj.frame, "p": traj.p, "b": traj.b, "dt_policy": traj.policy,
            "grid": traj.grid.spec(), "status": traj.status, "n_snapshots": len(traj)}
    written = [directory / "meta.json", directory / "times.csv"]
    written[0].write_text(json.dumps(meta, indent=2, default=float))
    lines = ["k,t"] + [f"{k},{float(t)!r}" for k, t in enumerate(traj.times)]
    written[1].write_text("\n".join(lines) + "\n")
    for k, snap in enumerate(traj.snapshots):
        path = directory / f"snap_{k}.csv"
        gridfunction_to_csv(snap, path)
        written.append(path)
    return written


def load_trajectory(directory) -> Trajectory:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    rows = (directory / "times.csv").read_text().strip().splitlines()[1:]
    times = [float(r.split(",")[1]) for r in rows]
    snaps = []
    grid = None
    for k in range(len(times)):
        f = gridfunction_from_csv(directory / f"snap_{k}.csv", dirichlet=True, grid=grid)
        grid = f.grid
        snaps.append(f)
    return Trajectory(meta["frame"], meta["p"], meta["b"], tuple(times), tuple(snaps), meta["dt_policy"], meta.get("status", "complete"))
