"""
Geometry module for the Rivulet drop simulator.
Closed B-spline contact-front contours and the geometric queries built on them.
"""

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import NamedTuple, Tuple, Union

import numpy as np
import shapely
from scipy.interpolate import BSpline
from shapely.geometry import LinearRing, Polygon


logger = logging.getLogger(__name__)


N_CTRL = 52
N_DENSE = 256
CONTOUR_HEADER = "contour v1"
BOUNDARY_TOLERANCE = 1e-9

# Uniform cubic B-spline centred at 0, support [-2, 2].
_CARDINAL = BSpline.basis_element(np.arange(-2.0, 3.0), extrapolate=False)
_CARDINAL_D1 = _CARDINAL.derivative(1)
_CARDINAL_D2 = _CARDINAL.derivative(2)


class GeometryError(Exception):
    """Base exception for geometry errors."""
    pass


class InvalidContour(GeometryError, ValueError):
    """Raised when control points do not describe a 52-point contour."""
    pass


class InsufficientSamples(GeometryError, ValueError):
    """Raised when fewer than 52 samples are given to the fitter."""
    pass


class DegenerateLoop(GeometryError, ValueError):
    """Raised when a sample loop encloses no area."""
    pass


class SelfIntersecting(GeometryError):
    """Raised when a contour's dense polyline is not simple."""
    pass


class DegenerateTangent(GeometryError):
    """Raised when the curve derivative vanishes at a control point."""
    pass


class StitchFailure(GeometryError):
    """Raised when two overlapping outlines cannot be joined into one loop."""
    pass


class ContourFormatError(GeometryError):
    """Raised when a serialized contour cannot be parsed."""
    pass


def _wrapped_offsets(u: np.ndarray) -> np.ndarray:
    """Signed cyclic offsets between parameters ``u`` and every control index."""
    d = np.asarray(u, dtype=float)[..., None] - np.arange(N_CTRL, dtype=float)
    return np.mod(d + N_CTRL / 2, N_CTRL) - N_CTRL / 2


def basis_matrix(u: np.ndarray, derivative: int = 0) -> np.ndarray:
    """
    Periodic uniform cubic B-spline basis evaluated at parameters ``u``.

    Args:
        u: Parameters in control-index units (period 52)
        derivative: 0, 1 or 2

    Returns:
        Array of shape (len(u), 52); row k holds the weights of every
        control point for the curve point at u[k]
    """
    kernel = (_CARDINAL, _CARDINAL_D1, _CARDINAL_D2)[derivative]
    return np.nan_to_num(kernel(_wrapped_offsets(u)), nan=0.0)


@lru_cache(maxsize=16)
def _uniform_basis(n: int) -> np.ndarray:
    basis = basis_matrix(N_CTRL * np.arange(n) / n)
    basis.setflags(write=False)
    return basis


def _signed_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True, eq=False)
class Contour:
    """
    Closed uniform periodic cubic B-spline with exactly 52 control points.

    Coordinates are normalized scene units with y pointing up. Canonical
    contours run clockwise and start at their topmost control point; use
    ``canonicalize`` to obtain one from raw control points.
    """

    ctrl: np.ndarray

    def __post_init__(self):
        ctrl = np.array(self.ctrl, dtype=np.float64)
        if ctrl.shape != (N_CTRL, 2):
            raise InvalidContour(f"Contour needs {N_CTRL} control points of shape (52, 2), got {ctrl.shape}")
        if not np.all(np.isfinite(ctrl)):
            raise InvalidContour("Contour control points must be finite")
        ctrl.setflags(write=False)
        object.__setattr__(self, 'ctrl', ctrl)

    def evaluate(self, u: np.ndarray, derivative: int = 0) -> np.ndarray:
        """Curve points (or derivatives) at parameters ``u``."""
        return basis_matrix(np.atleast_1d(u), derivative) @ self.ctrl

    @cached_property
    def dense(self) -> np.ndarray:
        """The 256 dense samples used by every polyline query."""
        points = _uniform_basis(N_DENSE) @ self.ctrl
        points.setflags(write=False)
        return points

    @cached_property
    def signed_area(self) -> float:
        return _signed_area(self.dense)

    @cached_property
    def polygon(self) -> Polygon:
        poly = Polygon(self.dense)
        shapely.prepare(poly)
        return poly

    @cached_property
    def ring(self) -> LinearRing:
        return LinearRing(self.dense)

    def is_simple(self) -> bool:
        """True when the dense polyline does not cross itself."""
        return bool(self.ring.is_simple)

    def is_canonical(self) -> bool:
        """True when ordering is clockwise and index 0 is the canonical start."""
        return bool(np.array_equal(canonical_order(self.ctrl), np.arange(N_CTRL)))

    def anchor_points(self) -> np.ndarray:
        """On-curve points at the parameters of the 52 control points."""
        return self.evaluate(np.arange(N_CTRL, dtype=float))

    def centroid(self) -> np.ndarray:
        """Area centroid of the enclosed region."""
        c = self.polygon.centroid
        return np.array([c.x, c.y])

    def control_mean(self) -> np.ndarray:
        return self.ctrl.mean(axis=0)

    @cached_property
    def dense_arc_lengths(self) -> np.ndarray:
        """Cumulative polyline length at each dense sample (first is 0)."""
        seg = np.linalg.norm(np.roll(self.dense, -1, axis=0) - self.dense, axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)[:-1]])

    @cached_property
    def perimeter(self) -> float:
        return float(np.linalg.norm(np.roll(self.dense, -1, axis=0) - self.dense, axis=1).sum())

    @cached_property
    def anchor_arc_lengths(self) -> np.ndarray:
        """Polyline arc position of each control-point parameter."""
        return self.arc_position(np.arange(N_CTRL, dtype=float))

    def arc_position(self, u: np.ndarray) -> np.ndarray:
        """Arc position along the dense polyline of curve parameters ``u``."""
        f = np.mod(np.asarray(u, dtype=float), N_CTRL) * N_DENSE / N_CTRL
        k = np.floor(f).astype(int) % N_DENSE
        seg = np.linalg.norm(np.roll(self.dense, -1, axis=0) - self.dense, axis=1)
        return self.dense_arc_lengths[k] + (f - np.floor(f)) * seg[k]

    def tangents(self, u: np.ndarray) -> np.ndarray:
        return self.evaluate(u, derivative=1)

    def normals_at(self, u: np.ndarray) -> np.ndarray:
        """
        Unit normals pointing into the enclosed region at parameters ``u``.

        Raises:
            DegenerateTangent: If the curve derivative vanishes at any parameter
        """
        t = self.tangents(u)
        norm = np.linalg.norm(t, axis=1)
        if np.any(norm < 1e-12):
            bad = np.flatnonzero(norm < 1e-12)
            raise DegenerateTangent(f"Curve derivative vanishes at parameters {np.asarray(u)[bad].tolist()}")
        # Interior lies to the right of travel for clockwise loops.
        side = -1.0 if self.signed_area > 0 else 1.0
        return side * np.column_stack([t[:, 1], -t[:, 0]]) / norm[:, None]

    def dense_normals(self) -> np.ndarray:
        return self.normals_at(N_CTRL * np.arange(N_DENSE) / N_DENSE)

    def translated(self, offset: np.ndarray) -> 'Contour':
        return Contour(self.ctrl + np.asarray(offset, dtype=float))

    def scaled(self, factor: float, about: np.ndarray) -> 'Contour':
        """Uniform scaling about a point; ordering is preserved for factor > 0."""
        about = np.asarray(about, dtype=float)
        return Contour(about + factor * (self.ctrl - about))

    def flat(self) -> np.ndarray:
        """Control coordinates as the 104-vector [x_0..x_51, y_0..y_51]."""
        return np.concatenate([self.ctrl[:, 0], self.ctrl[:, 1]])

    @classmethod
    def from_flat(cls, values: np.ndarray) -> 'Contour':
        values = np.asarray(values, dtype=float)
        return cls(np.column_stack([values[:N_CTRL], values[N_CTRL:2 * N_CTRL]]))


@dataclass(frozen=True)
class SplitConfig:
    """Parameters of the splitting-pair search."""

    delta: float = -0.5
    min_separation: int = 6

    def __post_init__(self):
        if not -1.0 <= self.delta < 1.0:
            raise ValueError(f"Split delta must satisfy -1 <= delta < 1, got {self.delta}")
        if not 2 <= self.min_separation <= 25:
            raise ValueError(f"min_separation must be in [2, 25], got {self.min_separation}")


class SplineFit(NamedTuple):
    """Result of ``fit_spline``: the canonical contour and its RMS residual."""

    contour: Contour
    residual: float


def canonical_order(ctrl: np.ndarray) -> np.ndarray:
    """
    Permutation that brings raw control points into canonical order.

    Clockwise orientation first, then a cyclic rotation so that index 0 has
    the maximal y, ties broken by minimal x and then by lowest original index.
    """
    ctrl = np.asarray(ctrl, dtype=float)
    order = np.arange(N_CTRL)
    if _signed_area(_uniform_basis(N_DENSE) @ ctrl) > 0:
        order = order[::-1]
    points = ctrl[order]
    # lexsort keys: last key is primary
    start = np.lexsort((order, points[:, 0], -points[:, 1]))[0]
    return np.roll(order, -start)


def canonicalize(points: np.ndarray) -> Contour:
    """
    Canonical contour from 52 raw control points.

    Args:
        points: Array of shape (52, 2)

    Returns:
        Contour oriented clockwise, starting at the topmost control point
    """
    points = np.asarray(points, dtype=float)
    if points.shape != (N_CTRL, 2):
        raise InvalidContour(f"canonicalize needs {N_CTRL} control points, got {points.shape}")
    return Contour(points[canonical_order(points)])


def _clean_loop(samples: np.ndarray) -> np.ndarray:
    pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InsufficientSamples(f"Samples must have shape (n, 2), got {pts.shape}")
    if len(pts) > 1 and np.allclose(pts[0], pts[-1], rtol=0.0, atol=1e-15):
        pts = pts[:-1]
    keep = np.linalg.norm(pts - np.roll(pts, 1, axis=0), axis=1) > 1e-15
    return pts[keep] if len(pts) else pts


def _project_parameters(ctrl: np.ndarray, pts: np.ndarray, u: np.ndarray, iterations: int = 4) -> np.ndarray:
    """Newton steps moving each parameter to the closest curve point."""
    for _ in range(iterations):
        c = basis_matrix(u) @ ctrl
        d1 = basis_matrix(u, 1) @ ctrl
        d2 = basis_matrix(u, 2) @ ctrl
        r = c - pts
        num = np.einsum('ij,ij->i', r, d1)
        den = np.einsum('ij,ij->i', d1, d1) + np.einsum('ij,ij->i', r, d2)
        step = np.where(den > 1e-15, num / np.where(den > 1e-15, den, 1.0), 0.0)
        u = u - np.clip(step, -0.5, 0.5)
    return u


def _fit_candidate(pts: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, float]:
    """Linear fit, one parameter-correction pass, and a refit."""
    ctrl = np.linalg.lstsq(basis_matrix(u), pts, rcond=None)[0]
    u = _project_parameters(ctrl, pts, u)
    ctrl = np.linalg.lstsq(basis_matrix(u), pts, rcond=None)[0]
    rms = float(np.sqrt(np.mean(np.sum((basis_matrix(u) @ ctrl - pts) ** 2, axis=1))))
    return ctrl, rms


def fit_spline(samples: np.ndarray) -> SplineFit:
    """
    Least-squares periodic cubic B-spline with 52 control points.

    Sample parameters start from uniform chord length and receive one
    projection pass before the final linear fit. Samples that are already
    evenly spaced in parameter (such as the output of ``sample``) are also
    fitted with index-uniform parameters; the lower residual wins.

    Args:
        samples: Ordered closed polyline of at least 52 points

    Returns:
        SplineFit with the canonical contour and RMS residual

    Raises:
        InsufficientSamples: If fewer than 52 distinct samples are given
        DegenerateLoop: If the samples enclose no area
        SelfIntersecting: If the fitted curve crosses itself
    """
    pts = _clean_loop(samples)
    if len(pts) < N_CTRL:
        raise InsufficientSamples(f"Need at least {N_CTRL} samples, got {len(pts)}")

    extent = np.ptp(pts, axis=0)
    diag2 = float(extent @ extent)
    if diag2 == 0.0 or abs(_signed_area(pts)) < 1e-12 * diag2:
        raise DegenerateLoop("Sample loop encloses zero area")

    n = len(pts)
    seg = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    chord = N_CTRL * np.concatenate([[0.0], np.cumsum(seg)[:-1]]) / seg.sum()
    uniform = N_CTRL * np.arange(n) / n

    ctrl, rms = _fit_candidate(pts, chord)
    alt_ctrl, alt_rms = _fit_candidate(pts, uniform)
    if alt_rms < rms:
        ctrl, rms = alt_ctrl, alt_rms

    contour = canonicalize(ctrl)
    if not contour.is_simple():
        raise SelfIntersecting("Fitted contour crosses itself")

    logger.debug(f"Fitted spline to {n} samples (rms={rms:.3e})")
    return SplineFit(contour, rms)


def sample(contour: Contour, n: int) -> np.ndarray:
    """
    Points uniformly spaced in spline parameter, starting at control point 0.

    Args:
        contour: Contour to sample
        n: Number of points (at least 3)

    Returns:
        Array of shape (n, 2), in the contour's (clockwise) order
    """
    if n < 3:
        raise ValueError(f"Need at least 3 samples, got {n}")
    if n == N_DENSE:
        return contour.dense.copy()
    return _uniform_basis(n) @ contour.ctrl


def inward_normals(contour: Contour) -> np.ndarray:
    """Unit normals at the 52 control-point parameters, pointing inside."""
    return contour.normals_at(np.arange(N_CTRL, dtype=float))


def enclosed_area(contour: Contour) -> float:
    """
    Shoelace area of the 256 dense samples.

    Raises:
        SelfIntersecting: If the polyline is not simple or encloses no area
    """
    if not contour.is_simple():
        raise SelfIntersecting("Contour polyline is not simple")
    area = abs(contour.signed_area)
    if area < 1e-12:
        raise SelfIntersecting(f"Contour encloses a degenerate area ({area:.3e})")
    return area


def arc_length_between(contour: Contour, i: int, j: int) -> float:
    """Shorter-way arc length along the dense polyline between control parameters i and j."""
    if not (0 <= i < N_CTRL and 0 <= j < N_CTRL):
        raise IndexError(f"Control indices must be in [0, {N_CTRL}), got {i}, {j}")
    arcs = contour.anchor_arc_lengths
    d = abs(arcs[i] - arcs[j])
    return float(min(d, contour.perimeter - d))


def arc_length_matrix(contour: Contour) -> np.ndarray:
    """All pairwise ``arc_length_between`` values as a 52x52 matrix."""
    arcs = contour.anchor_arc_lengths
    d = np.abs(arcs[:, None] - arcs[None, :])
    return np.minimum(d, contour.perimeter - d)


def points_in_contour(contour: Contour, points: np.ndarray) -> np.ndarray:
    """Vectorized ``point_in_contour``; boundary points count as inside."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    inside = shapely.contains_xy(contour.polygon, pts[:, 0], pts[:, 1])
    near = shapely.distance(contour.ring, shapely.points(pts)) <= BOUNDARY_TOLERANCE
    return np.asarray(inside | near, dtype=bool)


def point_in_contour(contour: Contour, p: np.ndarray) -> bool:
    """Even-odd test of ``p`` against the dense polyline."""
    return bool(points_in_contour(contour, np.asarray(p, dtype=float).reshape(1, 2))[0])


def overlap_samples(a: Contour, b: Contour) -> Tuple[np.ndarray, np.ndarray]:
    """
    Dense-sample overlap between two contours.

    Returns:
        (indices of a's samples inside b, indices of b's samples inside a);
        the drops overlap iff either is non-empty
    """
    return (np.flatnonzero(points_in_contour(b, a.dense)),
            np.flatnonzero(points_in_contour(a, b.dense)))


def cut_at_chord(contour: Contour, i: int, j: int, arc_samples: int = 160) -> Tuple[np.ndarray, np.ndarray]:
    """
    Divide a contour along the chord between control parameters i and j.

    Each piece follows the curve clockwise from one end of the chord to the
    other and is closed by points along the chord itself.

    Returns:
        Two closed sample loops, the first running from i to j
    """
    i, j = sorted((int(i), int(j)))
    ends = contour.evaluate(np.array([i, j], dtype=float))
    spacing = contour.perimeter / N_DENSE
    chord_n = max(4, int(np.ceil(np.linalg.norm(ends[1] - ends[0]) / spacing)))
    t = np.linspace(0.0, 1.0, chord_n + 1)[1:-1, None]

    first = contour.evaluate(np.linspace(i, j, arc_samples))
    second = contour.evaluate(np.linspace(j, i + N_CTRL, arc_samples))
    first = np.vstack([first, ends[1] + t * (ends[0] - ends[1])])
    second = np.vstack([second, ends[0] + t * (ends[1] - ends[0])])
    return first, second


def _single_run(mask: np.ndarray) -> np.ndarray:
    """Indices of the one cyclic run of True values, in order."""
    starts = np.flatnonzero(mask & ~np.roll(mask, 1))
    if len(starts) != 1:
        raise StitchFailure(f"Outline has {len(starts)} separate outside runs")
    idx = (starts[0] + np.arange(len(mask))) % len(mask)
    run = idx[mask[idx]]
    # the run is contiguous from its start
    return run[:int(mask.sum())]


def union_outline(a: Contour, b: Contour) -> np.ndarray:
    """
    Outline of the union of two overlapping contours.

    a's samples outside b are followed by b's samples outside a, each run in
    clockwise order, so that the two runs meet at the crossing points.

    Raises:
        StitchFailure: If either outside set is not a single cyclic run, or the
            contours do not overlap
    """
    a_in_b, b_in_a = overlap_samples(a, b)
    if len(a_in_b) == 0 and len(b_in_a) == 0:
        raise StitchFailure("Contours do not overlap")

    a_out = np.ones(N_DENSE, dtype=bool)
    a_out[a_in_b] = False
    b_out = np.ones(N_DENSE, dtype=bool)
    b_out[b_in_a] = False

    if not a_out.any():
        return b.dense.copy()
    if not b_out.any():
        return a.dense.copy()

    if a_out.all():
        b_run = b.dense[_single_run(b_out)]
        start = int(np.argmin(np.linalg.norm(a.dense - b_run[-1], axis=1)))
        return np.vstack([np.roll(a.dense, -start, axis=0), b_run])
    if b_out.all():
        a_run = a.dense[_single_run(a_out)]
        start = int(np.argmin(np.linalg.norm(b.dense - a_run[-1], axis=1)))
        return np.vstack([a_run, np.roll(b.dense, -start, axis=0)])

    return np.vstack([a.dense[_single_run(a_out)], b.dense[_single_run(b_out)]])


def contour_to_text(contour: Contour) -> str:
    """
    Serialize control points as "contour v1" text.

    Coordinates are written with 17 significant digits, so a reload gives
    bit-identical control points.

    Args:
        contour: Contour to serialize

    Returns:
        Header line followed by one "x y" line per control point
    """
    lines = [CONTOUR_HEADER] + [f"{x:.17g} {y:.17g}" for x, y in contour.ctrl]
    return "\n".join(lines) + "\n"


def contour_from_text(text: str) -> Contour:
    """
    Parse the "contour v1" text format.

    Raises:
        ContourFormatError: If the header or any coordinate line is malformed
    """
    lines = [line.strip() for line in text.strip().splitlines()]
    if not lines or lines[0] != CONTOUR_HEADER:
        raise ContourFormatError(f"Missing '{CONTOUR_HEADER}' header")
    try:
        ctrl = np.array([[float(v) for v in line.split()] for line in lines[1:]])
        return Contour(ctrl)
    except (ValueError, InvalidContour) as e:
        raise ContourFormatError(f"Malformed contour body: {e}") from e


def save_contour(contour: Contour, path: Union[str, Path]) -> Path:
    """
    Write a contour file, creating parent directories as needed.

    Args:
        contour: Contour to save
        path: Destination file

    Returns:
        Path of the written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(contour_to_text(contour), encoding='utf-8')
    logger.debug(f"Contour saved: {path}")
    return path


def load_contour(path: Union[str, Path]) -> Contour:
    """
    Read a "contour v1" file.

    Raises:
        FileNotFoundError: If the file does not exist
        ContourFormatError: If the contents are malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Contour file not found: {path}")
    return contour_from_text(path.read_text(encoding='utf-8'))


def circle_contour(center=(0.5, 0.5), radius: float = 0.25) -> Contour:
    """Canonical contour whose curve approximates a circle closely."""
    theta = -2.0 * np.pi * np.arange(N_DENSE) / N_DENSE + np.pi / 2
    loop = np.column_stack([center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta)])
    return fit_spline(loop).contour
