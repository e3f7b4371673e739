"""Discrete versions of the weighted functional inequalities and norms.

Conventions: the last coordinate is ``x_n`` and the face ``x_n = 0`` (the low
end of the last axis) plays the role of the flat boundary. Averages over
cylinders are node-count averages on the uniform lattice, with closed balls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, optimize

from fde_lab.domain import Grid, GridFunction, dirichlet_energy_values, integrate_values
from fde_lab.errors import ContractError, EstimationError, ParameterError


# -- exponents ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExponentPack:
    n: int
    p: float
    s: float | None
    chi: float


def chi_exponent(n: int, p: float) -> ExponentPack:
    """Integrability gain of the weighted space-time Sobolev inequality."""
    if int(n) != n or n < 1:
        raise ParameterError(f"n must be a positive integer, got {n}")
    if not p > 1:
        raise ParameterError(f"p must exceed 1, got {p}")
    n = int(n)
    if n <= 2:
        return ExponentPack(n, p, None, (p + 1) / p)
    s = 2 * (p - 1) / (n + p - 3)
    if not 0 < s < 2:
        raise ParameterError(f"s = {s} leaves the range (0, 2) required by the Hardy-Sobolev inequality")
    return ExponentPack(n, p, s, (n + 2 - 2 * s) / (n - s))


# -- space-time functions -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpaceTimeFunction:
    grid: Grid
    times: np.ndarray
    values: np.ndarray  # shape (n_times, *grid.shape)
    dirichlet: bool = False

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        if t.size < 1 or np.any(np.diff(t) <= 0):
            raise ContractError("time levels must be strictly increasing")
        v = np.array(self.values, dtype=float).reshape((t.size,) + self.grid.shape)
        if self.dirichlet and np.any(v[:, self.grid.boundary_mask] != 0):
            raise ContractError("Dirichlet space-time function is nonzero on the lateral boundary")
        v.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: Grid, times, func, dirichlet: bool = False) -> "SpaceTimeFunction":
        times = np.asarray(times, dtype=float)
        vals = np.stack([np.broadcast_to(np.asarray(func(*grid.coords, t), dtype=float), grid.shape) for t in times])
        if dirichlet:
            vals = vals.copy()
            vals[:, grid.boundary_mask] = 0.0
        return cls(grid, times, vals, dirichlet)

    @classmethod
    def from_trajectory(cls, traj) -> "SpaceTimeFunction":
        return cls(traj.grid, traj.t, traj.values, dirichlet=True)

    def __mul__(self, c):
        if np.isscalar(c):
            return SpaceTimeFunction(self.grid, self.times, self.values * float(c), self.dirichlet)
        return NotImplemented

    __rmul__ = __mul__

    @property
    def xn(self) -> np.ndarray:
        """Distance to the flat face ``x_n = a_n`` at every node."""
        return self.grid.coords[-1] - self.grid.extents[-1][0]


# -- Hardy-Sobolev and weighted Sobolev ratios --------------------------------------------------------


def _ratio_over_xn(grid: Grid, values: np.ndarray, s: float) -> np.ndarray:
    """``|f|^s / x_n^s`` with the ``x_n = 0`` row filled by second-order extrapolation of ``f/x_n``."""
    xn = grid.coords[-1] - grid.extents[-1][0]
    g = np.zeros(grid.shape)
    pos = xn > 0
    g[pos] = values[pos] / xn[pos]
    g1 = np.take(g, 1, axis=-1)
    g2 = np.take(g, 2, axis=-1)
    index = [slice(None)] * grid.dimension
    index[-1] = 0
    g[tuple(index)] = 2 * g1 - g2
    return np.abs(g) ** s


def hardy_sobolev_ratio(f: GridFunction, n: int, s: float, r: float | None = None) -> float:
    """``(int |f|^r / x_n^s)^(2/r) / int |grad f|^2`` for the low-dimensional variant (n = 1, 2).

    ``f`` must vanish on ``x_n = 0``; ``r`` defaults to ``s`` and must satisfy ``s <= r``.
    """
    grid = f.grid
    if n != grid.dimension:
        raise ContractError(f"n = {n} does not match the grid dimension {grid.dimension}")
    if n >= 3:
        raise ParameterError("for n >= 3 only the exponent check (chi_exponent) is available")
    if not 0 < s < 2:
        raise ParameterError("s must lie in (0, 2)")
    r = s if r is None else r
    if r < s:
        raise ParameterError("need s <= r")
    index = [slice(None)] * grid.dimension
    index[-1] = 0
    if np.any(f.values[tuple(index)] != 0):
        raise ContractError("f must vanish on the face x_n = 0")
    grad = dirichlet_energy_values(grid, f.values)
    if grad == 0:
        raise EstimationError("ratio undefined for a constant (zero) function")
    integrand = _ratio_over_xn(grid, f.values, s) * np.abs(f.values) ** (r - s)
    return integrate_values(grid, integrand) ** (2 / r) / grad


def _time_weights(times: np.ndarray) -> np.ndarray:
    if times.size == 1:
        return np.ones(1)
    w = np.zeros(times.size)
    dt = np.diff(times)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def sobolev_sides(f: SpaceTimeFunction, p: float) -> tuple[float, float]:
    """(LHS, RHS) of the weighted Sobolev inequality: ``(iint |f|^(2chi))^(1/chi)`` and the squared V_0^1 norm."""
    grid = f.grid
    chi = chi_exponent(grid.dimension, p).chi
    weight = (grid.coords[-1] - grid.extents[-1][0]) ** (p - 1)
    tw = _time_weights(f.times)
    lhs = sum(w * integrate_values(grid, np.abs(v) ** (2 * chi)) for w, v in zip(tw, f.values)) ** (1 / chi)
    sup_l2 = max(integrate_values(grid, v**2 * weight) for v in f.values)
    grad = sum(w * dirichlet_energy_values(grid, v) for w, v in zip(tw, f.values))
    return lhs, sup_l2 + grad


def weighted_sobolev_ratio(f: SpaceTimeFunction, p: float) -> float:
    if not f.dirichlet:
        raise ContractError("weighted Sobolev ratio needs a Dirichlet-in-space function")
    lhs, rhs = sobolev_sides(f, p)
    if rhs == 0:
        raise EstimationError("ratio undefined for the zero function")
    return lhs / rhs


def _hat_matrix(nodes: np.ndarray, n_knots: int) -> np.ndarray:
    """Piecewise-linear interpolation from ``n_knots`` interior knots (zero at both ends) to ``nodes``."""
    a, b = nodes[0], nodes[-1]
    knots = np.linspace(a, b, n_knots + 2)
    eye = np.eye(n_knots + 2)[:, 1:-1]
    return np.stack([np.interp(nodes, knots, eye[:, j]) for j in range(n_knots)], axis=1)


@dataclass(frozen=True)
class PiecewiseLinearFamily:
    """Space-time functions that are piecewise linear in every variable with Dirichlet knots in space."""

    grid: Grid
    times: tuple[float, ...]
    space_knots: int = 4
    time_knots: int = 3

    @property
    def n_params(self) -> int:
        return self.time_knots * self.space_knots**self.grid.dimension

    def build(self, theta: np.ndarray) -> SpaceTimeFunction:
        g = self.grid
        mats = [_hat_matrix(ax, self.space_knots) for ax in g.axes]
        t = np.asarray(self.times)
        tk = np.linspace(t[0], t[-1], self.time_knots)
        teye = np.eye(self.time_knots)
        T = np.stack([np.interp(t, tk, teye[:, j]) for j in range(self.time_knots)], axis=1)
        coef = np.asarray(theta, dtype=float).reshape((self.time_knots,) + (self.space_knots,) * g.dimension)
        vals = np.tensordot(T, coef, axes=(1, 0))
        for axis, M in enumerate(mats):
            vals = np.moveaxis(np.tensordot(vals, M, axes=(1 + axis, 1)), -1, 1 + axis)
        vals[:, g.boundary_mask] = 0.0
        return SpaceTimeFunction(g, t, vals, dirichlet=True)

    def sample(self, rng: np.random.Generator) -> SpaceTimeFunction:
        return self.build(rng.standard_normal(self.n_params))


def empirical_sobolev_constant(family: PiecewiseLinearFamily, p: float, seed: int = 0, starts: int = 8) -> float:
    """Largest ratio found by multistart local maximization over the family."""
    rng = np.random.default_rng(seed)

    def neg(theta):
        if not np.any(theta):
            return 0.0
        return -weighted_sobolev_ratio(family.build(theta), p)

    best = 0.0
    for _ in range(starts):
        x0 = rng.standard_normal(family.n_params)
        res = optimize.minimize(neg, x0, method="L-BFGS-B", options={"maxiter": 400})
        best = max(best, -float(res.fun), -neg(x0))
    return best


# -- Campanato seminorm ---------------------------------------------------------------------------------


DEFAULT_RADII = tuple(2.0**-k for k in range(1, 7))


@dataclass(frozen=True)
class CampanatoSampling:
    """Finite sampling of centers and radii standing in for the two suprema."""

    time_stride: int = 4
    radii: tuple[float, ...] = DEFAULT_RADII
    boundary_radii: tuple[float, ...] = DEFAULT_RADII

    def refined(self) -> "CampanatoSampling":
        """Twice the density: every other time level and half-dyadic radii in between."""
        def densify(rs):
            rs = sorted(rs)
            mids = [math.sqrt(a * b) for a, b in zip(rs[:-1], rs[1:])]
            return tuple(sorted(set(rs) | set(mids), reverse=True))
        return CampanatoSampling(max(1, self.time_stride // 2), densify(self.radii), densify(self.boundary_radii))

    def to_dict(self) -> dict:
        return {"time_stride": self.time_stride, "radii": list(self.radii), "boundary_radii": list(self.boundary_radii)}


@dataclass(frozen=True)
class BridgeSample:
    lhs: float
    rhs: float
    bound: float  # discrete constant guaranteeing lhs <= bound * rhs


@dataclass(frozen=True, eq=False)
class CampanatoResult:
    value: float
    interior_sup: float
    boundary_sup: float
    policy: CampanatoSampling
    n_interior: int
    n_boundary: int
    bridge: tuple[BridgeSample, ...] = ()

    @property
    def bridge_constant(self) -> float:
        """Largest measured ratio of the two sides of the bridge inequality."""
        ratios = [b.lhs / b.rhs for b in self.bridge if b.rhs > 0]
        return max(ratios) if ratios else 0.0

    def to_dict(self, refinement_series=None) -> dict:
        return {"value": self.value, "policy": self.policy.to_dict(), "refinement_series": list(refinement_series or [])}


class _Cylinders:
    """Box-restricted node selection for balls times time intervals."""

    def __init__(self, u: SpaceTimeFunction, p: float):
        self.u, self.p = u, p
        self.axes = u.grid.axes
        self.t = u.times
        self.xn_axis = self.axes[-1] - self.axes[-1][0]
        self.tol = 1e-12 * max(max(b - a for a, b in u.grid.extents), 1.0)

    def select(self, center, radius, t_lo, t_hi):
        """Values and x_n on nodes of closed ball x [t_lo, t_hi]; shapes (nt, k)."""
        it = np.nonzero((self.t >= t_lo - 1e-14) & (self.t <= t_hi + 1e-14))[0]
        if it.size == 0:
            return None, None
        slices, sub_axes = [], []
        for ax, c in zip(self.axes, center):
            lo = np.searchsorted(ax, c - radius - self.tol, side="left")
            hi = np.searchsorted(ax, c + radius + self.tol, side="right")
            slices.append(slice(lo, hi))
            sub_axes.append(ax[lo:hi])
        if any(a.size == 0 for a in sub_axes):
            return None, None
        mesh = np.meshgrid(*sub_axes, indexing="ij")
        r2 = sum((m - c) ** 2 for m, c in zip(mesh, center))
        inside = r2 <= radius**2 + self.tol
        if not inside.any():
            return None, None
        block = self.u.values[(slice(it[0], it[-1] + 1),) + tuple(slices)]
        vals = block[:, inside]
        xn = (mesh[-1] - self.axes[-1][0])[inside]
        return vals, xn


def _interior_term(cyl: _Cylinders, center, xbar_n, t_bar, rho, alpha, p, mean_over_tilde=False):
    r = rho * xbar_n
    h = xbar_n ** (p + 1) * rho**2
    tilde, _ = cyl.select(center, r, t_bar - h, t_bar + h)
    if tilde is None:
        return None
    ref = tilde.flat[0]  # shifting by a sample value makes constants exactly zero
    tilde = tilde - ref
    if mean_over_tilde:
        m = tilde.mean()
    else:
        D, _ = cyl.select(center, r, t_bar - h, t_bar)
        if D is None:
            return None
        m = (D - ref).mean()
    return float(np.mean((tilde - m) ** 2)) / r ** (2 * alpha)


def _boundary_term(cyl: _Cylinders, center, t_bar, R, alpha, p):
    h = R ** (p + 1)
    vals, xn = cyl.select(center, R, t_bar - h, t_bar + h)
    if vals is None:
        return None, None, None
    w = np.broadcast_to(xn ** (p - 1), vals.shape)
    mu = float(w.sum())
    if mu <= 0:
        return None, None, None
    dev = vals - vals.flat[0]
    m = float((w * dev).sum()) / mu
    return float((w * (dev - m) ** 2).sum()) / mu / R ** (2 * alpha), mu, vals


def campanato_seminorm(u: SpaceTimeFunction, alpha: float, p: float, sampling: CampanatoSampling | None = None,
                       bridge: bool = False) -> CampanatoResult:
    """Sampled two-sup Campanato seminorm ``sqrt(sup interior) + sqrt(sup boundary)``.

    Interior centers are all grid-interior nodes at every ``time_stride``-th
    time level; boundary centers are the nodes of the face ``x_n = 0`` at the
    same levels. With ``bridge`` each interior center also records both sides
    of the bridge inequality (interior oscillation on the doubled cylinder at
    ``rho = 1/2`` against the boundary term at ``R = 2 x_n``) together with
    the discrete constant that guarantees it.
    """
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    sampling = sampling or CampanatoSampling()
    grid = u.grid
    cyl = _Cylinders(u, p)
    levels = range(0, u.times.size, sampling.time_stride)
    pts = grid.points
    interior_pts = pts[grid.interior_mask.ravel()]
    face = pts[np.isclose(pts[:, -1], grid.extents[-1][0])]
    a_n = grid.extents[-1][0]
    sup_i, sup_b = 0.0, 0.0
    n_i = n_b = 0
    samples = []
    for k in levels:
        t_bar = u.times[k]
        for x in interior_pts:
            xbar_n = x[-1] - a_n
            for rho in sampling.radii:
                term = _interior_term(cyl, x, xbar_n, t_bar, rho, alpha, p)
                if term is not None:
                    sup_i = max(sup_i, term)
                    n_i += 1
            if bridge:
                samples.append(_bridge_sample(cyl, x, xbar_n, t_bar, alpha, p, a_n))
        for x in face:
            for R in sampling.boundary_radii:
                term, _, _ = _boundary_term(cyl, x, t_bar, R, alpha, p)
                if term is not None:
                    sup_b = max(sup_b, term)
                    n_b += 1
    if n_i == 0 and n_b == 0:
        raise EstimationError("every sampled cylinder was empty")
    value = math.sqrt(sup_i) + math.sqrt(sup_b)
    return CampanatoResult(value, sup_i, sup_b, sampling, n_i, n_b, tuple(s for s in samples if s is not None))


def _bridge_sample(cyl, x, xbar_n, t_bar, alpha, p, a_n):
    r = xbar_n / 2
    h = xbar_n ** (p + 1) / 4
    tilde, xn_tilde = cyl.select(x, r, t_bar - h, t_bar + h)
    if tilde is None:
        return None
    dev = tilde - tilde.flat[0]
    lhs = float(np.mean((dev - dev.mean()) ** 2)) / xbar_n ** (2 * alpha)
    base = np.array(x, dtype=float)
    base[-1] = a_n
    R = 2 * xbar_n
    rhs, mu_big, _ = _boundary_term(cyl, base, t_bar, R, alpha, p)
    if rhs is None:
        return None
    w = xn_tilde ** (p - 1)
    mu_small = float(w.sum()) * tilde.shape[0]
    bound = (w.max() / w.min()) * (mu_big / mu_small) * 2 ** (2 * alpha)
    return BridgeSample(lhs, rhs, float(bound))


# -- weighted Holder seminorm ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HolderParts:
    spatial: float
    temporal: float
    weighted_temporal: float

    @property
    def value(self) -> float:
        return self.spatial + self.temporal + self.weighted_temporal


def weighted_holder_parts(u: SpaceTimeFunction, alpha: float, p: float) -> HolderParts:
    """Exhaustive pair scan over nodes and time levels."""
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    if u.times.size < 2:
        raise EstimationError("the time quotients need at least two time levels")
    grid = u.grid
    pts = grid.points
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    off = dist > 0
    inv = np.zeros_like(dist)
    inv[off] = dist[off] ** -alpha
    flat = u.values.reshape(u.times.size, -1)
    spatial = 0.0
    for v in flat:
        spatial = max(spatial, float(np.max(np.abs(v[:, None] - v[None, :]) * inv)))
    dt = np.abs(u.times[:, None] - u.times[None, :])
    toff = dt > 0
    q1 = np.zeros_like(dt)
    q2 = np.zeros_like(dt)
    q1[toff] = dt[toff] ** (-alpha / (p + 1))
    q2[toff] = dt[toff] ** (-alpha / 2)
    xn = (pts[:, -1] - grid.extents[-1][0]) ** ((p - 1) * alpha / 2)
    temporal = weighted = 0.0
    for j in range(flat.shape[1]):
        col = flat[:, j]
        d = np.abs(col[:, None] - col[None, :])
        temporal = max(temporal, float(np.max(d * q1)))
        weighted = max(weighted, float(xn[j] * np.max(d * q2)))
    return HolderParts(spatial, temporal, weighted)


def weighted_holder_seminorm(u: SpaceTimeFunction, alpha: float, p: float) -> float:
    return weighted_holder_parts(u, alpha, p).value


def campanato_holder_bound(alpha: float, p: float) -> float:
    """Constant K with ``[u]_Campanato <= K [u]_weighted-Holder`` on any lattice (interior + boundary parts)."""
    return max(2**alpha, 2 ** (p * alpha / 2)) + max(2**alpha, 2 ** (alpha / (p + 1)))


def holder_test_family(count: int = 20, seed: int = 0):
    """Smooth and rough test functions ``f(*coords, t)``; the last coordinate is x_n."""
    rng = np.random.default_rng(seed)
    fixed = [
        lambda *a: a[-2],
        lambda *a: a[-2] ** 2,
        lambda *a: np.sqrt(a[-2]),
        lambda *a: a[-2] * (1 - a[-2]) * np.exp(-a[-1]),
        lambda *a: np.sin(np.pi * a[-2]) * np.cos(a[-1]),
        lambda *a: a[-1] * a[-2],
        lambda *a: a[-2] ** 0.75 + 0.1 * a[-1],
        lambda *a: np.cos(3 * a[0]) * (1 + a[-1]),
    ]
    funcs = list(fixed)
    while len(funcs) < count:
        k = rng.integers(1, 4, size=2)
        c = rng.standard_normal(3)

        def f(*a, k=k, c=c):
            return c[0] * np.sin(k[0] * np.pi * a[-2]) + c[1] * a[0] * np.cos(k[1] * a[-1]) + c[2] * a[-2] * a[-1]

        funcs.append(f)
    return funcs[:count]


# -- ODE comparison bound ---------------------------------------------------------------------------------


def _check_ode_params(alpha, mu1, mu2, mu3, zeta0, integral):
    if not alpha > 0 or not mu1 > 0:
        raise ParameterError("need alpha > 0 and mu1 > 0")
    if not 0 <= mu2 < 1:
        raise ParameterError("need mu2 in [0, 1)")
    if not 0 <= mu3 <= 1:
        raise ParameterError("need mu3 in [0, 1]")
    if zeta0 < 0 or integral < 0:
        raise ParameterError("need zeta0 >= 0 and a nonnegative integral")


def ode_H(zeta: float, mu2: float, mu3: float) -> float:
    """``H(zeta) = int_0^zeta ds / (s^mu2 + s^mu3)``."""
    if zeta <= 0:
        return 0.0
    if mu2 == mu3:
        return zeta ** (1 - mu2) / (2 * (1 - mu2))
    if mu2 == 0 and mu3 == 1:
        return math.log1p(zeta)
    lo = min(mu2, mu3)
    # substitute s = y^(1/(1-lo)) to remove the integrable singularity at 0
    k = 1 / (1 - lo)

    def integrand(y):
        s = y**k
        return k * y ** (k - 1) / (s**mu2 + s**mu3)

    top = zeta ** (1 - lo)
    val, _ = integrate.quad(integrand, 0.0, top, limit=200, epsabs=0.0, epsrel=1e-13)
    return val


def ode_bound(alpha: float, mu1: float, mu2: float, mu3: float, zeta0: float, integral_zeta_mu1: float) -> float:
    """Upper bound ``H^{-1}(H(zeta0) + alpha I)`` for solutions of ``zeta' <= alpha zeta^mu1 (zeta^mu2 + zeta^mu3)``.

    ``I`` is the time integral of ``zeta^mu1``. Closed forms are used for
    ``mu2 = mu3`` (power form) and ``mu2 = 0, mu3 = 1`` (exponential form);
    otherwise ``H`` is evaluated by quadrature and inverted by bisection.
    """
    _check_ode_params(alpha, mu1, mu2, mu3, zeta0, integral_zeta_mu1)
    target = ode_H(zeta0, mu2, mu3) + alpha * integral_zeta_mu1
    if mu2 == mu3:
        return (2 * (1 - mu2) * target) ** (1 / (1 - mu2))
    if mu2 == 0 and mu3 == 1:
        return math.expm1(target)
    lo, hi = 0.0, 1e3 * (zeta0 + 1) * math.exp(min(alpha * integral_zeta_mu1, 700.0))
    while ode_H(hi, mu2, mu3) < target:
        lo, hi = hi, 2 * hi
    while hi - lo > 1e-12 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if ode_H(mid, mu2, mu3) < target:
            lo = mid
        else:
            hi = mid
    return hi


def ode_rk4_oracle(alpha: float, mu1: float, mu2: float, mu3: float, zeta0: float, integral_zeta_mu1: float,
                   steps: int = 4000) -> np.ndarray:
    """Solve ``zeta' = alpha zeta^mu1 (zeta^mu2 + zeta^mu3)`` up to where ``int zeta^mu1 dt = I``.

    Integrates in ``s = int zeta^mu1 dt``, where the equation reads
    ``d zeta / ds = alpha (zeta^mu2 + zeta^mu3)``; returns the trajectory at the RK4 nodes.
    """
    _check_ode_params(alpha, mu1, mu2, mu3, zeta0, integral_zeta_mu1)

    def f(z):
        z = max(z, 0.0)
        return alpha * (z**mu2 + z**mu3)  # 0.0 ** 0 == 1

    hstep = integral_zeta_mu1 / steps
    out = np.empty(steps + 1)
    z = out[0] = zeta0
    for k in range(steps):
        k1 = f(z)
        k2 = f(z + 0.5 * hstep * k1)
        k3 = f(z + 0.5 * hstep * k2)
        k4 = f(z + hstep * k3)
        z = z + hstep / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = z
    return out


def random_ode_parameters(rng: np.random.Generator) -> tuple[float, ...]:
    return (
        float(rng.uniform(0.1, 2.0)),
        float(rng.uniform(0.1, 2.0)),
        float(rng.uniform(0.0, 0.95)),
        float(rng.choice([rng.uniform(0.0, 1.0), 1.0])),
        float(rng.uniform(0.0, 2.0)),
        float(rng.uniform(0.0, 2.0)),
    )


# -- export -------------------------------------------------------------------------------------------------


def norm_json(value: float, policy: dict, refinement_series=(), path=None) -> str:
    """``{value, policy, refinement_series}`` document for a norm evaluation."""
    text = json.dumps({"value": float(value), "policy": policy, "refinement_series": [float(x) for x in refinement_series]},
                      indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text
