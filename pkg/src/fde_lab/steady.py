"""Stationary profiles and spectral barriers.

The positive steady state solves ``-Lap S - b S = S^p`` with ``S = 0`` on the
boundary. In 1D it is found by shooting and then polished by Newton on the
discrete residual, so that downstream diagnostics (which use the discrete
Laplacian) see an exact discrete steady state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from fde_lab.domain import (
    Grid,
    GridFunction,
    dirichlet_energy,
    distance_field,
    gridfunction_to_csv,
    integrate,
    integrate_values,
    laplacian_values,
)
from fde_lab.errors import ConfigurationError, ContractError, DomainError, ParameterError, SolverError

SHOOTING_BRACKET = (1e-6, 1e3)
MAX_HALVINGS = 30
EIGEN_RQ_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ShootingProfile:
    """The continuous profile on the auxiliary shooting mesh."""

    x: np.ndarray
    S: np.ndarray
    dS: np.ndarray
    slope: float


@dataclass(frozen=True, eq=False)
class SteadyState:
    S: GridFunction
    p: float
    b: float
    residual_norm: float
    method: str
    tol: float
    profile: ShootingProfile | None = field(default=None, repr=False)

    @property
    def grid(self) -> Grid:
        return self.S.grid

    def sidecar(self) -> dict:
        return {"p": self.p, "b": self.b, "residual_norm": self.residual_norm, "method": self.method}

    def save(self, stem) -> None:
        """Write ``<stem>.csv`` and the ``<stem>.json`` sidecar."""
        stem = Path(stem)
        gridfunction_to_csv(self.S, stem.with_suffix(".csv"))
        stem.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2))


@dataclass(frozen=True, eq=False)
class EigenPair:
    value: float
    psi: GridFunction
    weight: str  # "unweighted" or "distance-weighted"
    residual_norm: float
    p: float | None = None
    b: float = 0.0

    def sidecar(self) -> dict:
        return {
            "p": self.p,
            "b": self.b,
            "lambda": self.value,
            "residual_norm": self.residual_norm,
            "method": f"inverse-power/{self.weight}",
        }

    def save(self, stem) -> None:
        stem = Path(stem)
        gridfunction_to_csv(self.psi, stem.with_suffix(".csv"))
        stem.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2))


def _signed_power(s, p):
    return np.abs(s) ** (p - 1) * s


def steady_residual(grid: Grid, values: np.ndarray, p: float, b: float) -> np.ndarray:
    """Discrete residual ``-Lap_h S - b S - S^p`` (zero on the boundary)."""
    values = np.asarray(values).reshape(grid.shape)
    res = -laplacian_values(grid, values) - b * values - _signed_power(values, p)
    res[grid.boundary_mask] = 0.0
    return res


# -- eigenpairs -----------------------------------------------------------------


def _inverse_iteration(K, W, interior_weight, tol, residual_tol, max_iter=10000):
    """Smallest eigenpair of ``K x = lam W x`` for SPD K and diagonal W >= 0."""
    lu = spla.splu(sp.csc_matrix(K))
    n = K.shape[0]
    x = np.ones(n)
    lam_old = np.inf
    for it in range(max_iter):
        y = lu.solve(W @ x)
        y /= np.sqrt(interior_weight * (y @ y))
        Ky = K @ y
        lam = (y @ Ky) / (y @ (W @ y))
        res = np.max(np.abs(Ky - lam * (W @ y)))
        x = y
        if abs(lam - lam_old) < tol and res <= residual_tol:
            return lam, x, res, it + 1
        lam_old = lam
    raise SolverError("inverse iteration did not converge", last_value=lam, last_residual=res, iterations=max_iter)


def first_eigenpair(grid: Grid, tol: float = EIGEN_RQ_TOL, residual_tol: float = 1e-8) -> EigenPair:
    """First Dirichlet eigenpair of ``-Lap_h`` with ``int psi^2 = 1`` and ``psi >= 0``."""
    K = -grid.interior_laplacian
    W = sp.identity(K.shape[0], format="csr")
    lam, x, res, _ = _inverse_iteration(K, W, grid.cell_volume, tol, residual_tol)
    x = np.abs(x) if x.sum() >= 0 else np.abs(-x)
    psi = GridFunction(grid, grid.embed(x), dirichlet=True)
    return EigenPair(float(lam), psi, "unweighted", float(res))


def _check_below_lambda1(grid: Grid, b: float) -> float:
    lam1 = first_eigenpair(grid).value
    if b >= lam1:
        raise ParameterError(f"b = {b} must be below the first Dirichlet eigenvalue {lam1:.6g}")
    return lam1


def weighted_eigenpair(grid: Grid, p: float, b: float = 0.0, tol: float = EIGEN_RQ_TOL, residual_tol: float = 1e-8) -> EigenPair:
    """First eigenpair of ``(-Lap_h - b) psi = lam d^(p-1) psi`` on interior nodes."""
    if p <= 1:
        raise ParameterError(f"p must exceed 1, got {p}")
    _check_below_lambda1(grid, b)
    K = -grid.interior_laplacian - b * sp.identity(grid.interior_laplacian.shape[0])
    d = distance_field(grid).interior
    W = sp.diags(d ** (p - 1))
    lam, x, res, _ = _inverse_iteration(sp.csr_matrix(K), sp.csr_matrix(W), grid.cell_volume, tol, residual_tol)
    x = np.abs(x)
    psi = GridFunction(grid, grid.embed(x), dirichlet=True)
    return EigenPair(float(lam), psi, "distance-weighted", float(res), p=p, b=b)


# -- steady states -----------------------------------------------------------------


def _rk4_shoot(L: float, n_steps: int, slope: float, p: float, b: float, keep: bool = False):
    """Integrate S'' = -|S|^(p-1) S - b S from S(0)=0, S'(0)=slope.

    Returns (S(L), crossed) or the full profile when ``keep``.
    """
    hstep = L / n_steps
    s, ds = 0.0, slope
    crossed = False

    def f(s_, ds_):
        return ds_, -(abs(s_) ** (p - 1)) * s_ - b * s_

    if keep:
        xs = np.empty(n_steps + 1)
        ss = np.empty(n_steps + 1)
        dss = np.empty(n_steps + 1)
        xs[0], ss[0], dss[0] = 0.0, s, ds
    for k in range(n_steps):
        k1s, k1d = f(s, ds)
        k2s, k2d = f(s + 0.5 * hstep * k1s, ds + 0.5 * hstep * k1d)
        k3s, k3d = f(s + 0.5 * hstep * k2s, ds + 0.5 * hstep * k2d)
        k4s, k4d = f(s + hstep * k3s, ds + hstep * k3d)
        s += hstep / 6 * (k1s + 2 * k2s + 2 * k3s + k4s)
        ds += hstep / 6 * (k1d + 2 * k2d + 2 * k3d + k4d)
        if keep:
            xs[k + 1], ss[k + 1], dss[k + 1] = (k + 1) * hstep, s, ds
        elif s < 0 and k < n_steps - 1:
            crossed = True
            break
    if keep:
        return xs, ss, dss
    return s, crossed


def shoot_profile(length: float, p: float, b: float, n_steps: int, tol: float = 1e-12) -> ShootingProfile:
    """Find the initial slope whose trajectory first vanishes at ``length``."""
    lo, hi = SHOOTING_BRACKET

    def endpoint(m):
        s_end, crossed = _rk4_shoot(length, n_steps, m, p, b)
        return -1.0 if crossed else s_end

    f_lo, f_hi = endpoint(lo), endpoint(hi)
    if not (f_lo > 0 and f_hi < 0):
        raise SolverError("shooting bracket does not enclose a positive profile", bracket=(lo, hi), values=(f_lo, f_hi))
    # Bisect on "vanishes before the end" until the endpoint value is a clean
    # single-crossing function of the slope, then finish with a secant-type root find.
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        s_mid, crossed = _rk4_shoot(length, n_steps, mid, p, b)
        if crossed or s_mid < 0:
            hi = mid
        else:
            lo = mid
        if hi / lo - 1 < 1e-3:
            break
    def end_value(m):
        return _rk4_shoot(length, n_steps, m, p, b, keep=True)[1][-1]

    slope = brentq(end_value, lo, hi, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps, maxiter=200)
    xs, ss, dss = _rk4_shoot(length, n_steps, slope, p, b, keep=True)
    if abs(ss[-1]) > tol * max(1.0, ss.max()) * 1e3:
        raise SolverError("shooting did not reach the far endpoint", slope=slope, endpoint=ss[-1])
    ss[-1] = 0.0  # the root is accurate to rounding; pin the boundary value
    return ShootingProfile(xs, ss, dss, slope)


def rounding_floor(grid: Grid, values: np.ndarray, p: float, b: float) -> float:
    """Residual level below which floating-point cancellation in ``Lap_h`` dominates."""
    scale = float(np.max(np.abs(values))) if np.size(values) else 0.0
    op = sum(4.0 / hk**2 for hk in grid.h) + abs(b) + p * scale ** (p - 1)
    return 16 * np.finfo(float).eps * scale * op


def newton_steady(grid: Grid, guess: np.ndarray, p: float, b: float, tol: float, max_iter: int = 60) -> tuple[np.ndarray, float]:
    """Damped Newton on the discrete steady residual. Returns (values, residual max-norm)."""
    A = grid.interior_laplacian
    n = A.shape[0]
    identity = sp.identity(n, format="csr")
    x = np.asarray(guess).reshape(grid.shape)[grid.interior_mask].copy()

    def resid(y):
        return -(A @ y) - b * y - _signed_power(y, p)

    r = resid(x)
    norm = np.max(np.abs(r))
    tol = max(tol, rounding_floor(grid, x, p, b))
    for it in range(max_iter):
        if norm <= tol:
            break
        J = sp.csc_matrix(-A - b * identity - sp.diags(p * np.abs(x) ** (p - 1)))
        delta = spla.spsolve(J, -r)
        step = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = x + step * delta
            r_trial = resid(trial)
            n_trial = np.max(np.abs(r_trial))
            if n_trial < norm:
                break
            step *= 0.5
        else:
            raise SolverError("Newton stagnated on the steady problem", last_residual=norm, iterations=it)
        x, r, norm = trial, r_trial, n_trial
    else:
        if norm > tol:
            raise SolverError("Newton did not reach the steady tolerance", last_residual=norm, iterations=max_iter)
    return grid.embed(x), float(norm)


def _finish(grid, values, p, b, tol, method, profile=None, polished=True) -> SteadyState:
    res = steady_residual(grid, values, p, b)
    norm = float(np.max(np.abs(res)))
    S = GridFunction(grid, values, dirichlet=True)
    if np.any(S.interior <= 0):
        raise SolverError("steady profile is not positive in the interior", method=method)
    return SteadyState(S, p, b, norm, method, tol if polished else norm, profile)


def solve_steady_1d(p: float, b: float, grid: Grid, tol: float = 1e-10, refine: int = 20, polish: bool = True) -> SteadyState:
    """Positive steady state on an interval.

    Shooting with classical RK4 on an auxiliary mesh ``refine`` times finer
    than the grid; with ``polish`` the sampled profile seeds a Newton solve of
    the discrete problem, so the residual bound refers to the discrete operator.
    """
    if grid.dimension != 1:
        raise ContractError("solve_steady_1d needs a 1D grid")
    if p <= 1:
        raise ParameterError(f"p must exceed 1, got {p}")
    _check_below_lambda1(grid, b)
    (a, c), = grid.extents
    n_steps = refine * (grid.shape[0] - 1)
    profile = shoot_profile(c - a, p, b, n_steps)
    profile = ShootingProfile(profile.x + a, profile.S, profile.dS, profile.slope)
    values = profile.S[::refine].copy()
    values[0] = values[-1] = 0.0
    if not polish:
        return _finish(grid, values, p, b, tol, "shooting", profile, polished=False)
    values, _ = newton_steady(grid, values, p, b, tol)
    return _finish(grid, values, p, b, max(tol, rounding_floor(grid, values, p, b)), "shooting+newton", profile)


def solve_steady_2d(p: float, b: float, grid: Grid, tol: float = 1e-10) -> SteadyState:
    """Positive steady state on a rectangle by damped Newton.

    The starting guess is ``c psi_1`` with ``c^(p-1) = (lambda_1 - b) / int psi_1^(p+1)``,
    the one-mode Galerkin solution; if Newton fails from there the amplitude is
    continued from a small multiple of that guess.
    """
    if grid.dimension != 2:
        raise ContractError("solve_steady_2d needs a 2D grid")
    if p <= 1:
        raise ParameterError(f"p must exceed 1, got {p}")
    eig = first_eigenpair(grid)
    if b >= eig.value:
        raise ParameterError(f"b = {b} must be below the first Dirichlet eigenvalue {eig.value:.6g}")
    psi = eig.psi.values
    c = ((eig.value - b) / integrate_values(grid, psi ** (p + 1))) ** (1 / (p - 1))
    try:
        values, _ = newton_steady(grid, c * psi, p, b, tol)
    except SolverError:
        values = None
        for scale in (0.5, 0.75, 1.0, 1.5, 2.0):
            try:
                values, _ = newton_steady(grid, scale * c * psi, p, b, tol)
                break
            except SolverError:
                continue
        if values is None:
            raise
    return _finish(grid, values, p, b, max(tol, rounding_floor(grid, values, p, b)), "newton")


def solve_steady(p: float, b: float, grid: Grid, tol: float | None = None) -> SteadyState:
    if grid.dimension == 1:
        return solve_steady_1d(p, b, grid, tol=1e-10 if tol is None else tol)
    return solve_steady_2d(p, b, grid, tol=1e-10 if tol is None else tol)


# -- closed forms and initial data ----------------------------------------------------


def separable_prefactor(p: float, Tstar: float, t):
    """``[(p-1)(T*-t)/p]^(1/(p-1))``."""
    t = np.asarray(t, dtype=float)
    if np.any(t > Tstar):
        raise DomainError(f"t must not exceed T* = {Tstar}")
    return ((p - 1) * (Tstar - t) / p) ** (1 / (p - 1))


def separable_solution(steady: SteadyState, Tstar: float, t: float) -> GridFunction:
    if t < 0:
        raise DomainError("t must be nonnegative")
    return steady.S * float(separable_prefactor(steady.p, Tstar, t))


def separable_extinction_time(p: float, a: float) -> float:
    """Extinction time of the solution started from ``a S``."""
    return p * a ** (p - 1) / (p - 1)


def smooth_bump(grid: Grid, center, width: float) -> np.ndarray:
    """C-infinity bump ``exp(1 - 1/(1 - r^2))`` (peak value 1) supported in a ball."""
    center = np.broadcast_to(np.asarray(center, dtype=float), (grid.dimension,))
    r2 = sum(((c - x0) / width) ** 2 for c, x0 in zip(grid.coords, center))
    out = np.zeros(grid.shape)
    inside = r2 < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    return out


@dataclass(frozen=True, eq=False)
class InitialData:
    u: GridFunction
    harnack_constant: float
    curvature_sup: float  # max |u^(1-p) L_h u| over interior nodes; membership diagnostic only


def harnack_constant(values: np.ndarray, grid: Grid) -> float:
    d = distance_field(grid).interior
    ratio = np.asarray(values).reshape(grid.shape)[grid.interior_mask] / d
    if np.any(ratio <= 0):
        return math.inf
    return float(max(ratio.max(), 1.0 / ratio.min()))


def initial_data(kind: str, params: dict | None, steady: SteadyState, grid: Grid | None = None) -> InitialData:
    """Initial data modeled on the admissible set.

    kinds:
      ``scaled_steady``          a S                    (params: a > 0)
      ``steady_plus_bump``       a S + (1-a) B          (params: a in (0,1], center, width, amplitude)
      ``weighted_eigenfunction`` scale * psi~           (params: scale > 0)

    ``B`` is a smooth compactly supported bump of the given peak ``amplitude``
    (default: the peak of S).
    """
    params = dict(params or {})
    grid = steady.grid if grid is None else grid
    if grid != steady.grid:
        raise ContractError("steady state and grid differ")
    p, b = steady.p, steady.b
    if kind == "scaled_steady":
        a = float(params.pop("a", 1.0))
        if a <= 0:
            raise ConfigurationError("scaled_steady needs a > 0")
        values = a * steady.S.values
    elif kind == "steady_plus_bump":
        a = float(params.pop("a", 0.5))
        if not 0 < a <= 1:
            raise ConfigurationError("steady_plus_bump needs a in (0, 1]")
        lo = np.array([e[0] for e in grid.extents])
        hi = np.array([e[1] for e in grid.extents])
        center = np.asarray(params.pop("center", (lo + hi) / 2 - (hi - lo) / 8), dtype=float)
        width = float(params.pop("width", 0.25 * float(np.min(hi - lo))))
        amplitude = float(params.pop("amplitude", steady.S.max()))
        if width <= 0 or amplitude < 0:
            raise ConfigurationError("bump width must be positive and amplitude nonnegative")
        bump = smooth_bump(grid, center, width)
        if np.any(bump[grid.boundary_mask] != 0):
            raise ConfigurationError("bump support must stay inside the domain")
        values = a * steady.S.values + (1 - a) * amplitude * bump
    elif kind == "weighted_eigenfunction":
        scale = float(params.pop("scale", 1.0))
        if scale <= 0:
            raise ConfigurationError("weighted_eigenfunction needs scale > 0")
        values = scale * weighted_eigenpair(grid, p, b).psi.values
    else:
        raise ConfigurationError(f"unknown initial data kind {kind!r}")
    if params:
        raise ConfigurationError(f"unknown parameters for {kind}: {sorted(params)}")
    values = np.array(values)
    values[grid.boundary_mask] = 0.0
    interior = values[grid.interior_mask]
    if np.any(interior <= 0):
        raise ConfigurationError(f"{kind} produced a sign change in the interior")
    u = GridFunction(grid, values, dirichlet=True)
    Lu = -laplacian_values(grid, values) - b * values
    curv = np.abs(interior ** (1 - p) * Lu[grid.interior_mask])
    return InitialData(u, harnack_constant(values, grid), float(curv.max()))


def pohozaev_defect(steady: SteadyState) -> float:
    """Relative defect of ``int |grad S|^2 - b int S^2 = int S^(p+1)``."""
    S = steady.S
    lhs = dirichlet_energy(S) - steady.b * integrate(S, S)
    rhs = integrate_values(S.grid, S.values ** (steady.p + 1))
    return abs(lhs - rhs) / abs(rhs)
