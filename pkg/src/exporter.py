"""
Exporter module for the Rivulet drop simulator.
Writes height-field meshes as OBJ files and the run logs as CSV tables.
"""

import csv
import logging
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import imageio.v3 as iio
import numpy as np

from src.reconstruct import ColorField, HeightField, ReconstructionError


logger = logging.getLogger(__name__)


MESH_PATTERN = "step_{:05d}_drop_{:03d}.obj"
TRAJECTORY_HEADER = ("step", "drop", "cx", "cy", "area", "volume", "event")
EVAL_HEADER = ("step", "drop", "err", "event")

PathLike = Union[str, Path]
TerrainFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class IoError(ReconstructionError, OSError):
    """Raised when an export file cannot be written."""
    pass


def _ensure_parent(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Failed to create directory {path.parent}: {e}")
        raise IoError(f"Could not create directory {path.parent}: {e}")


def _write_text(path: Path, text: str):
    _ensure_parent(path)
    try:
        path.write_text(text)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise IoError(f"Could not write {path}: {e}")


def mesh_arrays(heightfield: HeightField, terrain: Optional[TerrainFn] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vertices and triangles of a height-field mesh.

    One vertex per footprint cell at its centre with z = terrain + height;
    band cells carry zero height so the mesh rim sits on the terrain. Every
    grid quad whose four corners are footprint cells becomes two triangles,
    counter-clockwise seen from +z.

    Returns:
        (vertices (n, 3), zero-based faces (m, 3))
    """
    grid = heightfield.grid
    X, Y = grid.centers()
    mask = heightfield.mask
    base = np.zeros_like(X) if terrain is None else np.asarray(terrain(X, Y), dtype=float)

    cells = np.argwhere(mask)  # row-major (j, i) order
    index = -np.ones(mask.shape, dtype=np.int64)
    index[cells[:, 0], cells[:, 1]] = np.arange(len(cells))
    vertices = np.column_stack([
        X[cells[:, 0], cells[:, 1]],
        Y[cells[:, 0], cells[:, 1]],
        base[cells[:, 0], cells[:, 1]] + heightfield.values[cells[:, 0], cells[:, 1]],
    ])

    a = index[:-1, :-1]
    b = index[:-1, 1:]
    c = index[1:, 1:]
    d = index[1:, :-1]
    full = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
    a, b, c, d = a[full], b[full], c[full], d[full]
    faces = np.empty((2 * len(a), 3), dtype=np.int64)
    faces[0::2] = np.column_stack([a, b, c])
    faces[1::2] = np.column_stack([a, c, d])
    return vertices, faces


def export_mesh(heightfield: HeightField, path: PathLike, terrain: Optional[TerrainFn] = None) -> Path:
    """
    Write a height field as an OBJ triangle mesh.

    Args:
        heightfield: Field to export
        path: Destination .obj file
        terrain: Optional terrain height function z(x, y)

    Returns:
        Path of the written file

    Raises:
        IoError: If the file cannot be written
    """
    path = Path(path)
    vertices, faces = mesh_arrays(heightfield, terrain)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    lines += [f"f {p + 1} {q + 1} {r + 1}" for p, q, r in faces]
    _write_text(path, "\n".join(lines) + "\n")
    logger.debug(f"Mesh exported: {path} ({len(vertices)} vertices, {len(faces)} faces)")
    return path


def read_obj(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Read the v/f records of an OBJ file written by export_mesh."""
    vertices, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == 'v':
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == 'f':
            faces.append([int(p.split('/')[0]) - 1 for p in parts[1:4]])
    return np.array(vertices, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def dump_color_pgm(field: ColorField, path: PathLike) -> Path:
    """Write a color field as an 8-bit PGM, +y up, scaled to its own range."""
    path = Path(path)
    values = np.where(field.labels != 0, field.values, 0.0)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    image = np.round(255.0 * (values - lo) / span).astype(np.uint8)[::-1]
    _ensure_parent(path)
    try:
        iio.imwrite(path, image, extension='.pgm')
    except OSError as e:
        raise IoError(f"Could not write {path}: {e}")
    logger.debug(f"Color field dumped: {path}")
    return path


class TableWriter:
    """
    Appends rows to a CSV file with a fixed header.

    The header is written when the file is created; rows are flushed on
    every call so a crashed run leaves a readable log.
    """

    def __init__(self, path: PathLike, header: Sequence[str]):
        self.path = Path(path)
        self.header = tuple(header)
        _ensure_parent(self.path)
        try:
            with self.path.open('w', newline='') as handle:
                csv.writer(handle).writerow(self.header)
        except OSError as e:
            logger.error(f"Failed to create {self.path}: {e}")
            raise IoError(f"Could not create {self.path}: {e}")
        logger.info(f"Writing {self.path.name} ({', '.join(self.header)})")

    def write(self, rows: Iterable[Sequence]):
        """
        Append rows, formatting floats with 9 significant digits.

        Raises:
            ValueError: If a row does not have one field per header column
            IoError: If the file cannot be appended to
        """
        rows = list(rows)
        for row in rows:
            if len(row) != len(self.header):
                raise ValueError(f"Row {row} does not match header {self.header}")
        try:
            with self.path.open('a', newline='') as handle:
                csv.writer(handle).writerows([[_format(v) for v in row] for row in rows])
        except OSError as e:
            raise IoError(f"Could not append to {self.path}: {e}")


def _format(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return str(value)


def trajectory_writer(path: PathLike) -> TableWriter:
    """Table of per-step drop states: step,drop,cx,cy,area,volume,event."""
    return TableWriter(path, TRAJECTORY_HEADER)


def eval_writer(path: PathLike) -> TableWriter:
    """Table of per-step rollout errors: step,drop,err,event."""
    return TableWriter(path, EVAL_HEADER)


def write_loss_curve(losses: List[float], path: PathLike) -> Path:
    """Write per-epoch losses as CSV "epoch,loss" with epochs counted from 1."""
    writer = TableWriter(path, ("epoch", "loss"))
    writer.write([(epoch, float(loss)) for epoch, loss in enumerate(losses, start=1)])
    return writer.path


def read_table(path: PathLike) -> List[dict]:
    """Read a CSV table back as one dictionary of strings per row."""
    with Path(path).open(newline='') as handle:
        return list(csv.DictReader(handle))
