"""Uniform tensor grids with homogeneous Dirichlet boundary, quadrature and
finite-difference operators.

Node values are stored as arrays of shape ``grid.shape`` with ``ij`` indexing,
so ``values[i, j]`` sits at ``(x_i, y_j)``. The interior operators work on the
C-ordered flattening of ``values[interior]``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from fde_lab.errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class Grid:
    """Uniform lattice covering a closed interval or rectangle."""

    extents: tuple[tuple[float, float], ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if len(self.extents) != len(self.shape):
            raise ConfigurationError("extents and shape must have the same length")
        if self.dimension not in (1, 2):
            raise ConfigurationError(f"dimension must be 1 or 2, got {self.dimension}")
        for (a, b), n in zip(self.extents, self.shape):
            if not (np.isfinite(a) and np.isfinite(b)) or not b > a:
                raise ConfigurationError(f"degenerate extent [{a}, {b}]")
            if int(n) != n or n < 3:
                raise ConfigurationError(f"need at least 3 nodes per axis, got {n}")

    @property
    def dimension(self) -> int:
        return len(self.shape)

    @cached_property
    def h(self) -> tuple[float, ...]:
        return tuple((b - a) / (n - 1) for (a, b), n in zip(self.extents, self.shape))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(a, b, n) for (a, b), n in zip(self.extents, self.shape))

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Per-axis coordinate arrays of shape ``self.shape``."""
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def points(self) -> np.ndarray:
        """All nodes as an ``(n_nodes, dimension)`` array in row-major order."""
        return np.stack([c.ravel() for c in self.coords], axis=1)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for axis in range(self.dimension):
            index = [slice(None)] * self.dimension
            index[axis] = 0
            mask[tuple(index)] = True
            index[axis] = -1
            mask[tuple(index)] = True
        mask.flags.writeable = False
        return mask

    @cached_property
    def interior_mask(self) -> np.ndarray:
        mask = ~self.boundary_mask
        mask.flags.writeable = False
        return mask

    @property
    def interior_shape(self) -> tuple[int, ...]:
        return tuple(n - 2 for n in self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        """Tensor-product trapezoidal weights."""
        w = np.ones(())
        for hk, n in zip(self.h, self.shape):
            wk = np.full(n, hk)
            wk[0] = wk[-1] = hk / 2
            w = np.multiply.outer(w, wk)
        w.flags.writeable = False
        return w

    @cached_property
    def interior_laplacian(self) -> sp.csr_matrix:
        """Five-point (three-point in 1D) Dirichlet Laplacian on interior nodes."""
        ops = []
        for hk, m in zip(self.h, self.interior_shape):
            ops.append(sp.diags([np.ones(m - 1), -2 * np.ones(m), np.ones(m - 1)], [-1, 0, 1]) / hk**2)
        if self.dimension == 1:
            return sp.csr_matrix(ops[0])
        mx, my = self.interior_shape
        return sp.csr_matrix(sp.kron(ops[0], sp.identity(my)) + sp.kron(sp.identity(mx), ops[1]))

    def spec(self) -> dict:
        return {"dimension": self.dimension, "extents": [list(e) for e in self.extents], "N": list(self.shape)}

    def embed(self, interior_values: np.ndarray) -> np.ndarray:
        """Scatter interior values into a full nodal array with zero boundary."""
        full = np.zeros(self.shape)
        full[self.interior_mask] = np.asarray(interior_values).ravel()
        return full

    def function(self, values, dirichlet: bool = False) -> "GridFunction":
        return GridFunction(self, values, dirichlet=dirichlet)

    def sample(self, func: Callable[..., np.ndarray], dirichlet: bool = False) -> "GridFunction":
        """Evaluate ``func(*coords)`` at every node; Dirichlet samples get an exact zero boundary."""
        values = np.broadcast_to(np.asarray(func(*self.coords), dtype=float), self.shape).copy()
        if dirichlet:
            values[self.boundary_mask] = 0.0
        return GridFunction(self, values, dirichlet=dirichlet)


def build_grid(dimension: int, extents: Sequence[Sequence[float]], N) -> Grid:
    """Build a uniform grid.

    ``extents`` is one ``(a, b)`` pair per axis (a bare pair is accepted in 1D)
    and ``N`` the node count, either a single integer or one per axis.
    """
    if dimension not in (1, 2):
        raise ConfigurationError(f"dimension must be 1 or 2, got {dimension}")
    ext = np.asarray(extents, dtype=float)
    if ext.ndim == 1:
        ext = ext.reshape(1, 2) if dimension == 1 else np.tile(ext, (dimension, 1))
    if ext.shape != (dimension, 2):
        raise ConfigurationError(f"expected {dimension} extent pairs, got {np.asarray(extents).tolist()}")
    counts = [N] * dimension if np.isscalar(N) else list(N)
    if len(counts) != dimension:
        raise ConfigurationError(f"expected {dimension} node counts, got {counts}")
    for n in counts:
        if int(n) != n:
            raise ConfigurationError(f"node count must be an integer, got {n}")
    return Grid(tuple((float(a), float(b)) for a, b in ext), tuple(int(n) for n in counts))


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Nodal values on a grid. ``dirichlet`` functions are exactly zero on the boundary."""

    grid: Grid
    values: np.ndarray
    dirichlet: bool = False

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.size != self.grid.n_nodes:
            raise ContractError(f"{arr.size} values for a grid of {self.grid.n_nodes} nodes")
        arr = arr.reshape(self.grid.shape)
        if self.dirichlet and np.any(arr[self.grid.boundary_mask] != 0.0):
            raise ContractError("Dirichlet-tagged function is nonzero on the boundary")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def interior(self) -> np.ndarray:
        return self.values[self.grid.interior_mask]

    def with_values(self, values, dirichlet: bool | None = None) -> "GridFunction":
        return GridFunction(self.grid, values, self.dirichlet if dirichlet is None else dirichlet)

    def max(self) -> float:
        return float(self.values.max())

    def min(self) -> float:
        return float(self.values.min())

    def _check(self, other: "GridFunction"):
        if other.grid != self.grid:
            raise ContractError("grid functions live on different grids")

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return GridFunction(self.grid, self.values + other.values, self.dirichlet and other.dirichlet)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            self._check(other)
            return GridFunction(self.grid, self.values - other.values, self.dirichlet and other.dirichlet)
        return NotImplemented

    def __mul__(self, scalar):
        if np.isscalar(scalar):
            return GridFunction(self.grid, self.values * float(scalar), self.dirichlet)
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


class DistanceField(GridFunction):
    """Exact Euclidean distance to the boundary of the rectangle."""


def distance_field(grid: Grid) -> DistanceField:
    d = np.full(grid.shape, np.inf)
    for c, (a, b) in zip(grid.coords, grid.extents):
        d = np.minimum(d, np.minimum(c - a, b - c))
    d = np.maximum(d, 0.0)
    d[grid.boundary_mask] = 0.0
    return DistanceField(grid, d, dirichlet=True)


def _require_dirichlet(f: GridFunction, op: str):
    if not f.dirichlet:
        raise ContractError(f"{op} requires a Dirichlet-tagged grid function")


def laplacian_values(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Centered second differences at interior nodes, zero on the boundary."""
    values = np.asarray(values, dtype=float).reshape(grid.shape)
    out = np.zeros(grid.shape)
    inner = tuple(slice(1, -1) for _ in range(grid.dimension))
    for axis, hk in enumerate(grid.h):
        plus = list(inner)
        minus = list(inner)
        plus[axis] = slice(2, None)
        minus[axis] = slice(None, -2)
        out[inner] += (values[tuple(plus)] - 2 * values[inner] + values[tuple(minus)]) / hk**2
    return out


def laplacian(f: GridFunction) -> GridFunction:
    _require_dirichlet(f, "laplacian")
    return GridFunction(f.grid, laplacian_values(f.grid, f.values), dirichlet=True)


def integrate(f: GridFunction, weight: GridFunction | None = None) -> float:
    """Trapezoidal quadrature of ``f * weight`` over the grid."""
    integrand = f.values
    if weight is not None:
        f._check(weight)
        integrand = integrand * weight.values
    return float(np.sum(f.grid.quadrature_weights * integrand))


def integrate_values(grid: Grid, values: np.ndarray) -> float:
    return float(np.sum(grid.quadrature_weights * values))


def dirichlet_energy_values(grid: Grid, values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float).reshape(grid.shape)
    total = 0.0
    for axis, hk in enumerate(grid.h):
        total += float(np.sum((np.diff(values, axis=axis) / hk) ** 2))
    return total * grid.cell_volume


def dirichlet_energy(f: GridFunction) -> float:
    """Sum of squared forward differences times the cell measure (approximates the integral of |grad f|^2)."""
    return dirichlet_energy_values(f.grid, f.values)


# -- CSV serialization -------------------------------------------------------

_AXIS_NAMES = ("x", "y")


def _fmt(v: float) -> str:
    return repr(float(v))


def gridfunction_to_csv(f: GridFunction, path=None) -> str:
    """Write ``x[,y],value`` rows (row-major over the lattice); returns the text."""
    grid = f.grid
    header = ",".join(_AXIS_NAMES[: grid.dimension] + ("value",))
    buf = io.StringIO()
    buf.write(header + "\n")
    pts = grid.points
    vals = f.values.ravel()
    for row, v in zip(pts, vals):
        buf.write(",".join(_fmt(c) for c in row) + "," + _fmt(v) + "\n")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def gridfunction_from_csv(source, dirichlet: bool | None = None, grid: Grid | None = None) -> GridFunction:
    """Read a GridFunction CSV. ``source`` is a path or the CSV text itself.

    The grid is rebuilt from the coordinate columns unless one is supplied.
    With ``dirichlet=None`` the tag is inferred from the boundary values.
    """
    text = Path(source).read_text() if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source) else source
    lines = text.strip().splitlines()
    header = lines[0].strip().split(",")
    dim = len(header) - 1
    if header[-1] != "value" or dim not in (1, 2) or header[:dim] != list(_AXIS_NAMES[:dim]):
        raise ContractError(f"unexpected GridFunction CSV header {lines[0]!r}")
    data = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
    if grid is None:
        axes = [np.unique(data[:, k]) for k in range(dim)]
        grid = build_grid(dim, [(a[0], a[-1]) for a in axes], [len(a) for a in axes])
    values = data[:, -1]
    if dirichlet is None:
        dirichlet = bool(np.all(values.reshape(grid.shape)[grid.boundary_mask] == 0.0))
    return GridFunction(grid, values, dirichlet=dirichlet)
