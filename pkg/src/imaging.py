"""
Imaging module for the Rivulet drop simulator.
Frames, binarization, contour tracing and color-gradient extraction.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Tuple, Union

import imageio.v3 as iio
import numpy as np
from scipy import ndimage
from skimage import filters, measure, morphology

from src.geometry import N_CTRL, Contour


logger = logging.getLogger(__name__)


MIN_FRAME_SIZE = 16
FRAME_PATTERN = "frame_{:06d}.pgm"
TRACE_SAMPLES = 256


class DataPrepError(Exception):
    """Base exception for data preparation errors."""
    pass


class InvalidFrame(DataPrepError, ValueError):
    """Raised when frame dimensions or intensities are out of range."""
    pass


class UniformImage(DataPrepError):
    """Raised when a frame has fewer than two distinct intensities."""
    pass


class OutOfBounds(DataPrepError, ValueError):
    """Raised when a Sobel query lies within one pixel of the border."""
    pass


@dataclass(frozen=True, eq=False)
class Frame:
    """
    One 8-bit grayscale video frame.

    Attributes:
        pixels: Array of shape (height, width) with intensities in [0, 255]
        timestamp: Frame index within its sequence
    """

    pixels: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2:
            raise InvalidFrame(f"Frame must be a 2D grayscale array, got shape {pixels.shape}")
        if min(pixels.shape) < MIN_FRAME_SIZE:
            raise InvalidFrame(f"Frame must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}, got {pixels.shape}")
        if pixels.size and (pixels.min() < 0 or pixels.max() > 255):
            raise InvalidFrame("Frame intensities must lie in [0, 255]")
        pixels = pixels.astype(np.uint8)
        pixels.setflags(write=False)
        object.__setattr__(self, 'pixels', pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def scale(self) -> int:
        """Pixels per scene unit (the larger frame dimension)."""
        return max(self.width, self.height)

    @cached_property
    def sobel_fields(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-pixel (d/dcol, d/drow) with 1/8-normalized 3x3 Sobel kernels."""
        img = self.pixels.astype(np.float64)
        return ndimage.sobel(img, axis=1) / 8.0, ndimage.sobel(img, axis=0) / 8.0


@dataclass(frozen=True, eq=False)
class GradientProfile:
    """Inward-normal color-gradient magnitudes at the 52 control points."""

    mags: np.ndarray

    def __post_init__(self):
        mags = np.array(self.mags, dtype=np.float64).reshape(-1)
        if mags.shape != (N_CTRL,):
            raise InvalidFrame(f"Gradient profile needs {N_CTRL} magnitudes, got {mags.shape}")
        if not np.all(np.isfinite(mags)) or np.any(mags < 0):
            raise InvalidFrame("Gradient magnitudes must be finite and non-negative")
        mags.setflags(write=False)
        object.__setattr__(self, 'mags', mags)

    def permuted(self, order: np.ndarray) -> 'GradientProfile':
        return GradientProfile(self.mags[np.asarray(order)])

    def scaled(self, factor: float) -> 'GradientProfile':
        return GradientProfile(self.mags * factor)

    @classmethod
    def zeros(cls) -> 'GradientProfile':
        return cls(np.zeros(N_CTRL))

    @classmethod
    def uniform(cls, value: float) -> 'GradientProfile':
        return cls(np.full(N_CTRL, float(value)))


def pixel_to_scene(cols: np.ndarray, rows: np.ndarray, scale: int) -> np.ndarray:
    """Pixel-centre coordinates to scene coordinates (y up)."""
    cols = np.asarray(cols, dtype=float)
    rows = np.asarray(rows, dtype=float)
    return np.column_stack([(cols + 0.5) / scale, 1.0 - (rows + 0.5) / scale])


def scene_to_pixel(points: np.ndarray, scale: int) -> Tuple[np.ndarray, np.ndarray]:
    """Scene coordinates to fractional (col, row) pixel coordinates."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return pts[:, 0] * scale - 0.5, (1.0 - pts[:, 1]) * scale - 0.5


def read_frame(path: Union[str, Path], timestamp: int = 0) -> Frame:
    """
    Read an 8-bit binary PGM frame.

    Raises:
        FileNotFoundError: If the file does not exist
        InvalidFrame: If the image is not 8-bit grayscale
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Frame not found: {path}")
    pixels = iio.imread(path)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise InvalidFrame(f"{path} is not an 8-bit grayscale image")
    return Frame(pixels, timestamp)


def write_frame(frame: Frame, path: Union[str, Path]) -> Path:
    """Write a frame as 8-bit binary PGM."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    iio.imwrite(path, frame.pixels, extension='.pgm')
    return path


def load_frames(directory: Union[str, Path]) -> List[Frame]:
    """Load every frame_%06d.pgm in a directory, ordered by index."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Frame directory not found: {directory}")
    paths = sorted(directory.glob("frame_*.pgm"))
    frames = [read_frame(p, int(p.stem.split('_')[1])) for p in paths]
    logger.info(f"Loaded {len(frames)} frames from {directory}")
    return frames


def otsu_threshold(frame: Frame) -> int:
    """
    Otsu threshold over the 256-bin histogram.

    Foreground is ``pixels > threshold``. Between-class variances are
    compared in exact integer arithmetic so the result is the exhaustive
    maximizer, ties going to the lowest threshold.

    Raises:
        UniformImage: If the frame has fewer than two distinct intensities
    """
    hist = np.bincount(frame.pixels.ravel(), minlength=256)
    if np.count_nonzero(hist) < 2:
        raise UniformImage(f"Frame {frame.timestamp} has a single intensity")

    counts = [int(v) for v in np.cumsum(hist)]
    sums = [int(v) for v in np.cumsum(hist * np.arange(256, dtype=np.int64))]
    total, total_sum = counts[-1], sums[-1]

    best_t, best_num, best_den = 0, -1, 1
    for t in range(255):
        n0 = counts[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (total * sums[t] - n0 * total_sum) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def binarize(frame: Frame, threshold: int) -> np.ndarray:
    return frame.pixels > threshold


def morph_open_close(mask: np.ndarray, radius: int) -> np.ndarray:
    """Opening then closing with a disc of the given radius."""
    if radius < 0:
        raise ValueError(f"Morphology radius must be >= 0, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    footprint = morphology.disk(radius)
    opened = morphology.binary_opening(mask, footprint=footprint)
    return morphology.binary_closing(opened, footprint=footprint)


def resample_loop(loop: np.ndarray, n: int) -> np.ndarray:
    """Resample a closed polyline to n points evenly spaced by arc length."""
    closed = np.vstack([loop, loop[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = arc[-1] * np.arange(n) / n
    return np.column_stack([np.interp(targets, arc, closed[:, 0]),
                            np.interp(targets, arc, closed[:, 1])])


def trace_contours(mask: np.ndarray, min_area: int = 16, sigma: float = 1.0) -> List[np.ndarray]:
    """
    Outer boundaries of the connected foreground components.

    Each component is smoothed and traced by marching squares at level 0.5;
    only its outermost loop is kept.

    Args:
        mask: Boolean image (rows top to bottom)
        min_area: Components with fewer pixels are discarded
        sigma: Gaussian smoothing of the component mask, in pixels

    Returns:
        Closed sample loops in scene coordinates, sorted by topmost point
    """
    mask = np.asarray(mask, dtype=bool)
    scale = max(mask.shape)
    labels = measure.label(mask, connectivity=2)
    loops = []

    for region in measure.regionprops(labels):
        if region.area < min_area:
            logger.debug(f"Discarding component {region.label} with area {region.area}")
            continue
        r0, c0, r1, c1 = region.bbox
        pad = int(np.ceil(3 * sigma)) + 2
        component = np.pad(labels[r0:r1, c0:c1] == region.label, pad).astype(float)
        field = filters.gaussian(component, sigma=sigma, preserve_range=True) if sigma > 0 else component
        candidates = measure.find_contours(field, 0.5)
        if not candidates:
            continue
        outer = max(candidates, key=lambda c: abs(np.dot(c[:, 0], np.roll(c[:, 1], -1))
                                                  - np.dot(np.roll(c[:, 0], -1), c[:, 1])))
        rows = outer[:, 0] + r0 - pad
        cols = outer[:, 1] + c0 - pad
        points = pixel_to_scene(cols, rows, scale)
        loops.append(resample_loop(points[:-1] if np.allclose(points[0], points[-1]) else points,
                                   TRACE_SAMPLES))

    loops.sort(key=lambda loop: (-loop[:, 1].max(), loop[:, 0].min()))
    logger.debug(f"Traced {len(loops)} contours")
    return loops


def sobel_at(frame: Frame, col: float, row: float) -> np.ndarray:
    """
    Bilinearly interpolated Sobel gradient at a pixel location.

    Args:
        frame: Source frame
        col, row: Fractional pixel coordinates

    Returns:
        (dI/dcol, dI/drow) in intensity per pixel

    Raises:
        OutOfBounds: If the location is within one pixel of the border
    """
    if not (1.0 <= col <= frame.width - 2 and 1.0 <= row <= frame.height - 2):
        raise OutOfBounds(f"Point ({col:.2f}, {row:.2f}) too close to the border of frame {frame.timestamp}")
    gx, gy = frame.sobel_fields
    coords = np.array([[row], [col]])
    return np.array([ndimage.map_coordinates(gx, coords, order=1)[0],
                     ndimage.map_coordinates(gy, coords, order=1)[0]])


def extract_gradient_profile(frame: Frame, contour: Contour) -> GradientProfile:
    """
    Inward-normal color-gradient magnitudes at the control-point locations.

    Gradients are converted to intensity per scene unit and clamped at 0.

    Raises:
        OutOfBounds: If any location is within one pixel of the border
    """
    anchors = contour.anchor_points()
    normals = contour.normals_at(np.arange(N_CTRL, dtype=float))
    cols, rows = scene_to_pixel(anchors, frame.scale)

    mags = np.empty(N_CTRL)
    for k in range(N_CTRL):
        g_col, g_row = sobel_at(frame, cols[k], rows[k])
        grad = frame.scale * np.array([g_col, -g_row])
        mags[k] = max(0.0, float(grad @ normals[k]))
    return GradientProfile(mags)


def touches_border(contour: Contour, frame: Frame, margin_px: float = 1.5) -> bool:
    """True when the dense samples come within ``margin_px`` of the frame edge."""
    cols, rows = scene_to_pixel(contour.dense, frame.scale)
    return bool(cols.min() < margin_px or rows.min() < margin_px
                or cols.max() > frame.width - 1 - margin_px
                or rows.max() > frame.height - 1 - margin_px)
