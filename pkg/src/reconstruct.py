"""
Reconstruction module for the Rivulet drop simulator.
Recovers a drop's color field from its contact front with a biharmonic
boundary-value solve, then converts it into a volume-tracked height field.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg, spsolve
from scipy.spatial import cKDTree

from src.geometry import Contour, points_in_contour
from src.imaging import GradientProfile


logger = logging.getLogger(__name__)


EXTERIOR, BAND, INTERIOR = 0, 1, 2
MIN_MARGIN_CELLS = 3

# 13-point biharmonic stencil (times h^4): (dj, di, weight)
STENCIL = (
    [(0, 0, 20.0)]
    + [(dj, di, -8.0) for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0))]
    + [(dj, di, 2.0) for dj, di in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
    + [(dj, di, 1.0) for dj, di in ((0, 2), (0, -2), (2, 0), (-2, 0))]
)


class ReconstructionError(Exception):
    """Base exception for reconstruction errors."""
    pass


class InvalidGrid(ReconstructionError, ValueError):
    """Raised when grid dimensions or spacing are out of range."""
    pass


class ContourTooSmall(ReconstructionError):
    """Raised when fewer than 4 cells fall inside the contour."""
    pass


class MarginViolation(ReconstructionError):
    """Raised when the contour comes within 3 cells of the grid edge."""
    pass


class NoConvergence(ReconstructionError):
    """Raised when the iterative solver misses its tolerance."""
    pass


class SingularSystem(ReconstructionError):
    """Raised when the linear system cannot be solved."""
    pass


class DegenerateField(ReconstructionError):
    """Raised when a color field has no positive mass to scale."""
    pass


@dataclass(frozen=True)
class GridSpec:
    """Regular cell grid; cell (i, j) is centred at origin + ((i + 0.5)h, (j + 0.5)h)."""

    nx: int
    ny: int
    h: float
    origin: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise InvalidGrid(f"Grid needs at least 8x8 cells, got {self.nx}x{self.ny}")
        if not self.h > 0:
            raise InvalidGrid(f"Cell spacing must be positive, got {self.h}")

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Cell-centre coordinate arrays of shape (ny, nx)."""
        xs = self.origin[0] + (np.arange(self.nx) + 0.5) * self.h
        ys = self.origin[1] + (np.arange(self.ny) + 0.5) * self.h
        return np.meshgrid(xs, ys)

    @property
    def cell_area(self) -> float:
        return self.h * self.h


def default_grid(contour: Contour, margin: int = 4, min_cells: int = 96, max_cells: int = 256) -> GridSpec:
    """
    Tight bounding box plus a margin, fine enough that the contour spans at
    least ``min_cells`` cells across its larger extent, capped at
    ``max_cells`` per side.
    """
    lo = contour.dense.min(axis=0)
    hi = contour.dense.max(axis=0)
    extent = float(np.max(hi - lo))
    h = extent / min_cells
    if extent / h + 2 * margin + 1 > max_cells:
        h = extent / (max_cells - 2 * margin - 1)
    nx = int(np.ceil((hi[0] - lo[0]) / h)) + 2 * margin + 1
    ny = int(np.ceil((hi[1] - lo[1]) / h)) + 2 * margin + 1
    origin = (float(lo[0] - margin * h), float(lo[1] - margin * h))
    return GridSpec(max(nx, 8), max(ny, 8), h, origin)


@dataclass
class ReconstructionProblem:
    """
    Discretized boundary-value problem on one grid.

    Attributes:
        grid: Cell grid
        labels: (ny, nx) array of EXTERIOR / BAND / INTERIOR
        band: (n_band, 2) array of (j, i) band-cell indices
        dirichlet: Color values on band cells
        neumann: Inward-normal gradient magnitudes on band cells
        gradients: Gradient vectors on band cells used by the ghost rule
    """

    grid: GridSpec
    labels: np.ndarray
    band: np.ndarray
    dirichlet: np.ndarray
    neumann: np.ndarray
    gradients: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.labels != EXTERIOR

    def interior_count(self) -> int:
        return int(np.count_nonzero(self.labels != EXTERIOR))


@dataclass
class ColorField:
    grid: GridSpec
    values: np.ndarray
    labels: np.ndarray
    iterations: int
    residual: float


@dataclass
class HeightField:
    """Heights per cell (zero outside the footprint) and the tracked volume."""

    grid: GridSpec
    values: np.ndarray
    labels: np.ndarray
    volume: float

    @property
    def mask(self) -> np.ndarray:
        return self.labels != EXTERIOR

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.cell_area)


def classify(inside: np.ndarray) -> np.ndarray:
    """Label cells: band cells are inside cells with an outside 4-neighbour."""
    padded = np.pad(inside, 1, constant_values=False)
    all_neighbors_inside = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    labels = np.full(inside.shape, EXTERIOR, dtype=np.int8)
    labels[inside] = BAND
    labels[inside & all_neighbors_inside] = INTERIOR
    return labels


def rasterize(contour: Contour, profile: GradientProfile, grid: GridSpec,
              dirichlet_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
              gradient_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None) -> ReconstructionProblem:
    """
    Classify grid cells against a contour and attach boundary data.

    Band-cell Neumann values interpolate the 52 magnitudes by arc length at
    the nearest dense sample; their gradient vectors point along that
    sample's inward normal. ``dirichlet_fn`` and ``gradient_fn`` replace the
    zero Dirichlet data and the normal-only gradients (used for
    manufactured solutions).

    Raises:
        MarginViolation: If the contour is within 3 cells of the grid edge
        ContourTooSmall: If fewer than 4 cells lie inside
    """
    lo = contour.dense.min(axis=0)
    hi = contour.dense.max(axis=0)
    g_lo = np.array(grid.origin) + MIN_MARGIN_CELLS * grid.h
    g_hi = np.array(grid.origin) + (np.array([grid.nx, grid.ny]) - MIN_MARGIN_CELLS) * grid.h
    if np.any(lo < g_lo) or np.any(hi > g_hi):
        raise MarginViolation(f"Contour bbox {lo.round(4).tolist()}-{hi.round(4).tolist()} "
                              f"leaves less than {MIN_MARGIN_CELLS} cells of margin")

    X, Y = grid.centers()
    inside = points_in_contour(contour, np.column_stack([X.ravel(), Y.ravel()])).reshape(X.shape)
    if np.count_nonzero(inside) < 4:
        raise ContourTooSmall(f"Only {np.count_nonzero(inside)} cells inside the contour")

    labels = classify(inside)
    band = np.argwhere(labels == BAND)
    bx, by = X[band[:, 0], band[:, 1]], Y[band[:, 0], band[:, 1]]

    tree = cKDTree(contour.dense)
    _, nearest = tree.query(np.column_stack([bx, by]))
    arcs = contour.dense_arc_lengths[nearest]
    neumann = np.interp(arcs, contour.anchor_arc_lengths, profile.mags, period=contour.perimeter)
    normals = contour.dense_normals()[nearest]

    if gradient_fn is not None:
        gradients = np.asarray(gradient_fn(bx, by), dtype=float).reshape(2, -1).T
    else:
        gradients = neumann[:, None] * normals
    dirichlet = np.zeros(len(band)) if dirichlet_fn is None else np.asarray(dirichlet_fn(bx, by), dtype=float)

    logger.debug(f"Rasterized contour: {np.count_nonzero(labels == INTERIOR)} interior, {len(band)} band cells")
    return ReconstructionProblem(grid, labels, band, dirichlet, neumann, gradients)


def assemble(problem: ReconstructionProblem) -> Tuple[sparse.csr_matrix, np.ndarray, np.ndarray]:
    """
    Biharmonic system over strict-interior cells.

    Band cells contribute their Dirichlet values. Exterior cells reached by
    the stencil take first-order ghost values from the nearest band cell b:
    c_ghost = c_b + (x_ghost - x_b) . grad_b.

    Returns:
        (matrix, right-hand side, (n, 2) array of unknown (j, i) indices)
    """
    grid = problem.grid
    labels = problem.labels
    unknowns = np.argwhere(labels == INTERIOR)
    n = len(unknowns)
    index = -np.ones(labels.shape, dtype=np.int64)
    index[unknowns[:, 0], unknowns[:, 1]] = np.arange(n)

    band_value = np.zeros(labels.shape)
    band_value[problem.band[:, 0], problem.band[:, 1]] = problem.dirichlet
    band_tree = cKDTree(problem.band.astype(float))

    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    for dj, di, w in STENCIL:
        nj = unknowns[:, 0] + dj
        ni = unknowns[:, 1] + di
        lab = labels[nj, ni]

        hit = lab == INTERIOR
        rows.append(np.flatnonzero(hit))
        cols.append(index[nj[hit], ni[hit]])
        vals.append(np.full(np.count_nonzero(hit), w))

        on_band = lab == BAND
        rhs[on_band] -= w * band_value[nj[on_band], ni[on_band]]

        ghost = lab == EXTERIOR
        if np.any(ghost):
            cells = np.column_stack([nj[ghost], ni[ghost]])
            _, k = band_tree.query(cells.astype(float))
            offset = (cells - problem.band[k])[:, ::-1] * grid.h  # (dx, dy)
            values = problem.dirichlet[k] + np.einsum('ij,ij->i', offset, problem.gradients[k])
            rhs[ghost] -= w * values

    matrix = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return matrix, rhs, unknowns


def solve_biharmonic(problem: ReconstructionProblem, tol: float = 1e-8, max_iter: Optional[int] = None,
                     solver: str = 'cg') -> ColorField:
    """
    Solve the discrete biharmonic problem for the color field.

    Args:
        problem: Rasterized problem
        tol: Relative residual target for the iterative solver
        max_iter: Iteration cap (default 10 x number of unknowns)
        solver: 'cg' (Jacobi-preconditioned conjugate gradient) or 'direct'

    Returns:
        ColorField with band values, interior solution, iteration count and
        final residual norm

    Raises:
        NoConvergence: If the residual exceeds tol * |rhs| after max_iter
        SingularSystem: If the system cannot be solved
    """
    matrix, rhs, unknowns = assemble(problem)
    n = len(rhs)
    field = np.zeros(problem.labels.shape)
    field[problem.band[:, 0], problem.band[:, 1]] = problem.dirichlet

    rhs_norm = float(np.linalg.norm(rhs))
    if n == 0 or rhs_norm == 0.0:
        return ColorField(problem.grid, field, problem.labels, 0, 0.0)

    iterations = 0
    if solver == 'direct':
        solution = spsolve(matrix.tocsc(), rhs)
        if not np.all(np.isfinite(solution)):
            raise SingularSystem("Direct solve produced non-finite values")
    elif solver == 'cg':
        diag = matrix.diagonal()
        if np.any(diag <= 0):
            raise SingularSystem("Non-positive diagonal in the biharmonic system")
        preconditioner = LinearOperator((n, n), matvec=lambda v: v / diag)

        def count(_):
            nonlocal iterations
            iterations += 1

        solution, info = cg(matrix, rhs, rtol=tol, atol=0.0, maxiter=max_iter or 10 * n,
                            M=preconditioner, callback=count)
        if info < 0:
            raise SingularSystem(f"Conjugate gradient breakdown (info={info})")
    else:
        raise ValueError(f"Unknown solver: {solver}")

    residual = float(np.linalg.norm(rhs - matrix @ solution))
    if solver == 'cg' and residual > tol * rhs_norm:
        raise NoConvergence(f"Residual {residual:.3e} exceeds {tol:.1e} x |rhs| after {iterations} iterations")

    field[unknowns[:, 0], unknowns[:, 1]] = solution
    logger.debug(f"Biharmonic solve ({solver}): {n} unknowns, {iterations} iterations, residual {residual:.3e}")
    return ColorField(problem.grid, field, problem.labels, iterations, residual)


def color_to_height(field: ColorField, volume: float) -> HeightField:
    """
    Scale a color field into heights holding exactly ``volume``.

    Negative colors inside the footprint are clamped to zero first.

    Raises:
        DegenerateField: If the clamped field integrates to zero or less
    """
    grid = field.grid
    inside = field.labels != EXTERIOR
    if volume == 0:
        return HeightField(grid, np.zeros_like(field.values), field.labels, 0.0)

    values = np.where(inside, np.maximum(field.values, 0.0), 0.0)
    mass = float(values.sum() * grid.cell_area)
    if not mass > 0:
        raise DegenerateField(f"Color field integrates to {mass:.3e}; cannot scale to volume {volume}")
    return HeightField(grid, values * (volume / mass), field.labels, float(volume))


def smooth(heightfield: HeightField, iters: int) -> HeightField:
    """
    Relaxed 4-neighbour averaging on strict-interior cells.

    Each pass moves interior cells halfway toward their neighbour mean with
    the band held at zero; the result is rescaled to the tracked volume.
    """
    if iters < 0:
        raise ValueError(f"Smoothing iterations must be >= 0, got {iters}")
    if iters == 0:
        return heightfield

    labels = heightfield.labels
    interior = labels == INTERIOR
    values = np.where(interior, heightfield.values, 0.0)
    for _ in range(iters):
        padded = np.pad(values, 1)
        mean4 = 0.25 * (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:])
        values = np.where(interior, values + 0.5 * (mean4 - values), 0.0)

    mass = float(values.sum() * heightfield.grid.cell_area)
    if mass > 0:
        values = values * (heightfield.volume / mass)
    return HeightField(heightfield.grid, values, labels, heightfield.volume)


def reconstruct_drop(contour: Contour, profile: GradientProfile, volume: float,
                     grid: Optional[GridSpec] = None, smoothing_iters: int = 3,
                     solver: str = 'cg', tol: float = 1e-8) -> Tuple[HeightField, ColorField]:
    """Rasterize, solve, convert to heights and smooth in one call."""
    grid = grid or default_grid(contour)
    problem = rasterize(contour, profile, grid)
    field = solve_biharmonic(problem, tol=tol, solver=solver)
    heights = smooth(color_to_height(field, volume), smoothing_iters)
    return heights, field
