"""Uniform 1-D spatial grid, Crank-Nicolson heat semigroup, kernels, quadrature.

Fields are cell-centered densities (mass per unit length); the quadrature rule
throughout is the midpoint/cell sum ``values.sum() * dx``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct, idct, dst, idst

GAUSS_NORM = 1.0 / math.sqrt(2.0 * math.pi)


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid of n_cells cells of width dx; cell j is centered at
    x_min + (j + 1/2) * dx."""

    x_min: float
    x_max: float
    dx: float
    n_cells: int

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_cells) + 0.5) * self.dx


def make_grid(x_min: float, x_max: float, dx: float) -> GridSpec:
    """Build a GridSpec covering [x_min, x_max] with cell width dx.

    n_cells = round((x_max - x_min) / dx); at least 2 cells are required.
    """
    if not (math.isfinite(x_min) and math.isfinite(x_max) and math.isfinite(dx)):
        raise LatticeError("grid parameters must be finite")
    if dx <= 0:
        raise LatticeError(f"dx must be positive, got {dx}")
    if x_min >= x_max:
        raise LatticeError(f"degenerate interval [{x_min}, {x_max}]")
    n_cells = round((x_max - x_min) / dx)
    if n_cells < 2:
        raise LatticeError(f"grid would have {n_cells} < 2 cells")
    return GridSpec(float(x_min), float(x_max), float(dx), int(n_cells))


@dataclass
class LatticeField:
    """A real-valued density sampled at cell centers of a GridSpec."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.n_cells,):
            raise LatticeError(
                f"values shape {self.values.shape} does not match grid "
                f"({self.grid.n_cells},)"
            )

    def copy(self) -> "LatticeField":
        return LatticeField(self.grid, self.values.copy())


def zeros(grid: GridSpec) -> LatticeField:
    return LatticeField(grid, np.zeros(grid.n_cells))


def mass(f: LatticeField) -> float:
    """Total mass: sum of cell values times dx."""
    return float(f.values.sum() * f.grid.dx)


class HeatOperator:
    """One Crank-Nicolson step of du/dt = (1/2) u_xx on a fixed grid.

    (I - alpha L) u' = (I + alpha L) u with alpha = dt / (4 dx^2) and L the
    tridiagonal discrete Laplacian.  L diagonalizes exactly in the DCT-II
    basis for mirrored (Neumann) ghost cells and in the DST-II basis for zero
    (Dirichlet) ghost cells, so the step is a forward transform, a diagonal
    multiply by (1 + alpha lam_k) / (1 - alpha lam_k), and an inverse
    transform, vectorized over any batch of rows.

    Neumann conserves total mass to roundoff (the k = 0 mode has factor
    exactly 1); Dirichlet is mass-decreasing.
    """

    def __init__(self, n: int, dx: float, dt: float, boundary: str = "neumann"):
        if boundary not in ("neumann", "dirichlet"):
            raise LatticeError(f"unknown boundary {boundary!r}")
        if dt <= 0 or not math.isfinite(dt):
            raise LatticeError(f"dt must be positive and finite, got {dt}")
        self.n = n
        self.dx = dx
        self.dt = dt
        self.boundary = boundary
        alpha = dt / (4.0 * dx * dx)
        self.alpha = alpha
        if boundary == "neumann":
            lam = -4.0 * np.sin(np.pi * np.arange(n) / (2.0 * n)) ** 2
        else:
            lam = -4.0 * np.sin(np.pi * np.arange(1, n + 1) / (2.0 * n)) ** 2
        self._factor = (1.0 + alpha * lam) / (1.0 - alpha * lam)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Advance one CN step; works on (n,) vectors or (rows, n) batches."""
        if self.boundary == "neumann":
            coeffs = dct(values, type=2, axis=-1, norm=None, overwrite_x=False)
            coeffs *= self._factor
            return idct(coeffs, type=2, axis=-1, norm=None, overwrite_x=True)
        coeffs = dst(values, type=2, axis=-1, norm=None, overwrite_x=False)
        coeffs *= self._factor
        return idst(coeffs, type=2, axis=-1, norm=None, overwrite_x=True)


_OPERATOR_CACHE: dict = {}


def heat_operator(grid: GridSpec, dt: float, boundary: str = "neumann") -> HeatOperator:
    key = (grid.n_cells, grid.dx, dt, boundary)
    op = _OPERATOR_CACHE.get(key)
    if op is None:
        op = HeatOperator(grid.n_cells, grid.dx, dt, boundary)
        if len(_OPERATOR_CACHE) > 64:
            _OPERATOR_CACHE.clear()
        _OPERATOR_CACHE[key] = op
    return op


def heat_step(f: LatticeField, dt: float, boundary: str = "neumann") -> LatticeField:
    """Crank-Nicolson solution of du/dt = (1/2) u_xx over duration dt."""
    if not np.all(np.isfinite(f.values)):
        raise LatticeError("heat_step requires finite field values")
    op = heat_operator(f.grid, dt, boundary)
    return LatticeField(f.grid, op.apply(f.values.copy()))


def epanechnikov(z: np.ndarray) -> np.ndarray:
    """J(z) = (3/4)(1 - z^2)+  (even, continuous, <= 3/4, support [-1,1],
    integral 1)."""
    return 0.75 * np.maximum(1.0 - z * z, 0.0)


def kernel_values(x0: float, eps: float, grid: GridSpec) -> np.ndarray:
    """Raw values of eps^(1/2) J((x - x0) eps^(-1/2)) at cell centers,
    renormalized so the discrete mass is exactly eps."""
    root = math.sqrt(eps)
    z = (grid.centers - x0) / root
    vals = root * epanechnikov(z)
    total = vals.sum() * grid.dx
    if total <= 0.0:
        raise LatticeError(
            f"kernel support around {x0} (radius {root:.4g}) contains no cell"
        )
    vals *= eps / total
    return vals


def kernel_J(x0: float, eps: float, grid: GridSpec) -> LatticeField:
    """Immigration kernel of total mass exactly eps, support [x0-sqrt(eps),
    x0+sqrt(eps)]."""
    if not 0.0 < eps <= 1.0:
        raise LatticeError(f"eps must be in (0, 1], got {eps}")
    root = math.sqrt(eps)
    if x0 - root < grid.x_min or x0 + root > grid.x_max:
        raise LatticeError(
            f"kernel support [{x0 - root:.4g}, {x0 + root:.4g}] exits the grid"
        )
    return LatticeField(grid, kernel_values(x0, eps, grid))


def gaussian_kernel(t: float, grid: GridSpec, x0: float = 0.0) -> LatticeField:
    """Heat kernel p_t(x - x0) = exp(-(x-x0)^2 / 2t) / sqrt(2 pi t) sampled at
    cell centers."""
    if t <= 0:
        raise LatticeError(f"t must be positive, got {t}")
    x = grid.centers - x0
    vals = (GAUSS_NORM / math.sqrt(t)) * np.exp(-x * x / (2.0 * t))
    return LatticeField(grid, vals)
