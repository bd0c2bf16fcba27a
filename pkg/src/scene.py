"""
Scene module for the Rivulet drop simulator.
Terrain, scene configuration, the per-step update of every drop, and the
scene and evaluation runners.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import imageio.v3 as iio
import numpy as np
from scipy import ndimage

from src.drops import (
    DegenerateChild,
    DegenerateIncline,
    DropState,
    InitDatabase,
    NetworkPredictor,
    NoOverlap,
    NonFinitePrediction,
    NoValidPair,
    Predictor,
    SimulationError,
    cold_start,
    init_drop,
    merge_drops,
    split_drop,
    step_drop,
)
from src.exporter import MESH_PATTERN, TableWriter, eval_writer, export_mesh, trajectory_writer
from src.geometry import Contour, GeometryError, SplitConfig, enclosed_area, load_contour, overlap_samples, points_in_contour
from src.reconstruct import ReconstructionError, reconstruct_drop
from src.tracking import TrackedSequence


logger = logging.getLogger(__name__)


FOOTPRINT_SAMPLES = 24


class InvalidScene(SimulationError, ValueError):
    """Raised when a scene configuration or terrain is invalid."""
    pass


class Terrain:
    """
    Solid surface under the drops.

    Either an inclined plane z = tan(theta) * y (flow toward -y) or a
    sampled height field with spacing ``h`` whose row 0 is the top (max y)
    edge, as stored in an image.
    """

    def __init__(self, incline: Optional[float] = None, heights: Optional[np.ndarray] = None,
                 h: float = 1.0, z_scale: float = 1.0):
        if (incline is None) == (heights is None):
            raise InvalidScene("Terrain needs exactly one of an incline or a height field")
        self.incline = incline
        self.h = h
        self.z_scale = z_scale
        if incline is not None:
            if not 0 < incline <= 90:
                raise InvalidScene(f"Plane incline must be in (0, 90] degrees, got {incline}")
            self.heights = None
            self.slopes = None
        else:
            if h <= 0:
                raise InvalidScene(f"Terrain spacing must be positive, got {h}")
            z = np.asarray(heights, dtype=float)[::-1] * z_scale  # row index grows with y
            gy, gx = np.gradient(z, h)
            self.heights = z
            self.slopes = np.degrees(np.arctan(np.hypot(gx, gy)))

    @classmethod
    def plane(cls, incline: float) -> 'Terrain':
        """Plane inclined by ``incline`` degrees, rising toward +y."""
        return cls(incline=incline)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'Terrain':
        """
        Load a 16-bit PGM height field and its JSON sidecar {h, z_scale}.

        Raises:
            InvalidScene: If either file is missing or malformed
        """
        path = Path(path)
        sidecar = path.with_suffix('.json')
        if not path.exists() or not sidecar.exists():
            raise InvalidScene(f"Terrain needs {path} and {sidecar}")
        try:
            meta = json.loads(sidecar.read_text(encoding='utf-8'))
            pixels = iio.imread(path, extension='.pgm')
            return cls(heights=np.asarray(pixels, dtype=float), h=float(meta['h']), z_scale=float(meta['z_scale']))
        except (OSError, ValueError, KeyError) as e:
            raise InvalidScene(f"Could not load terrain {path}: {e}") from e

    def _sample(self, grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        coords = np.array([np.ravel(y) / self.h - 0.5, np.ravel(x) / self.h - 0.5])
        return ndimage.map_coordinates(grid, coords, order=1, mode='nearest').reshape(np.shape(x))

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """
        Terrain height at scene points.

        Planes rise with y at the incline's slope; height fields are
        sampled bilinearly in scene units.

        Args:
            x: Scene x coordinates
            y: Scene y coordinates (same shape as x)

        Returns:
            Heights with the shape of ``x``
        """
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if self.heights is None:
            return np.tan(np.radians(self.incline)) * y
        return self._sample(self.heights, x, y)

    def incline_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Local slope angle in degrees."""
        x = np.asarray(x, dtype=float)
        if self.slopes is None:
            return np.full(x.shape, float(self.incline))
        return self._sample(self.slopes, x, np.asarray(y, dtype=float))

    def mean_incline(self, contour: Contour) -> float:
        """Average incline over a lattice of points inside the contour footprint."""
        if self.slopes is None:
            return float(self.incline)
        lo, hi = contour.dense.min(axis=0), contour.dense.max(axis=0)
        xs = np.linspace(lo[0], hi[0], FOOTPRINT_SAMPLES)
        ys = np.linspace(lo[1], hi[1], FOOTPRINT_SAMPLES)
        X, Y = np.meshgrid(xs, ys)
        points = np.column_stack([X.ravel(), Y.ravel()])
        inside = points[points_in_contour(contour, points)]
        if len(inside) == 0:
            inside = contour.centroid()[None]
        return float(np.mean(self.incline_at(inside[:, 0], inside[:, 1])))


@dataclass
class SceneConfig:
    """
    Scene description loaded from JSON.

    ``terrain`` is {"incline": degrees} or {"path": height-field PGM};
    each drop is {"contour": path, "volume": value}.
    """

    terrain: Dict = field(default_factory=lambda: {'incline': 30.0})
    drops: List[Dict] = field(default_factory=list)
    models: Dict[str, str] = field(default_factory=dict)
    init_db: str = ''
    K: int = 5
    dt: float = 1.0 / 240.0
    steps: int = 100
    seed: int = 0
    split_delta: float = -0.5
    min_separation: int = 6
    output_dir: str = './output/scene'
    export_meshes: bool = True
    smoothing_iters: int = 3
    solver: str = 'cg'
    workers: int = 1

    def validate(self) -> List[str]:
        errors = []
        if 'incline' in self.terrain:
            if not 0 < float(self.terrain['incline']) <= 90:
                errors.append(f"Plane incline must be in (0, 90], got {self.terrain['incline']}")
        elif 'path' not in self.terrain:
            errors.append("terrain needs 'incline' or 'path'")
        for k, drop in enumerate(self.drops):
            if 'contour' not in drop:
                errors.append(f"Drop {k} has no contour file")
            if not float(drop.get('volume', 0)) > 0:
                errors.append(f"Drop {k} needs a positive volume")
        missing = {'contour', 'gradient', 'breakage'} - set(self.models)
        if missing:
            errors.append(f"Missing model paths: {', '.join(sorted(missing))}")
        if self.K < 1:
            errors.append(f"K must be >= 1, got {self.K}")
        if not self.dt > 0:
            errors.append(f"dt must be positive, got {self.dt}")
        if self.steps < 1:
            errors.append(f"steps must be >= 1, got {self.steps}")
        if not -1.0 <= self.split_delta < 1.0:
            errors.append(f"split_delta must be in [-1, 1), got {self.split_delta}")
        if not 2 <= self.min_separation <= 25:
            errors.append(f"min_separation must be in [2, 25], got {self.min_separation}")
        if self.solver not in ('cg', 'direct'):
            errors.append(f"Unknown solver: {self.solver}")
        if self.workers < 1:
            errors.append(f"workers must be >= 1, got {self.workers}")
        return errors

    def split_config(self) -> SplitConfig:
        return SplitConfig(self.split_delta, self.min_separation)

    @classmethod
    def from_dict(cls, data: Dict, base_dir: Optional[Path] = None, defaults: Optional[Dict] = None) -> 'SceneConfig':
        """
        Build a scene from a JSON document; relative paths resolve against ``base_dir``.

        ``defaults`` fill keys the document leaves out, so environment
        settings apply to every scene that does not override them.

        Raises:
            InvalidScene: On unknown keys or failed validation
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidScene(f"Unknown scene keys: {', '.join(unknown)}")
        merged = {k: v for k, v in (defaults or {}).items() if k in known}
        merged.update(data)
        try:
            cfg = cls(**merged)
        except TypeError as e:
            raise InvalidScene(str(e)) from e
        errors = cfg.validate()
        if errors:
            raise InvalidScene("; ".join(errors))
        if base_dir is not None:
            cfg._resolve(Path(base_dir))
        return cfg

    def _resolve(self, base: Path):
        def resolve(p: str) -> str:
            return str(p if Path(p).is_absolute() else base / p)

        self.models = {k: resolve(v) for k, v in self.models.items()}
        self.drops = [dict(d, contour=resolve(d['contour'])) for d in self.drops]
        if 'path' in self.terrain:
            self.terrain = dict(self.terrain, path=resolve(self.terrain['path']))
        if self.init_db:
            self.init_db = resolve(self.init_db)

    @classmethod
    def from_file(cls, path: Union[str, Path], defaults: Optional[Dict] = None) -> 'SceneConfig':
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Scene config not found: {path}")
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise InvalidScene(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(data, base_dir=path.parent, defaults=defaults)

    def load_terrain(self) -> Terrain:
        if 'incline' in self.terrain:
            return Terrain.plane(float(self.terrain['incline']))
        return Terrain.from_file(self.terrain['path'])


@dataclass
class SceneState:
    drops: Dict[int, DropState] = field(default_factory=dict)
    step: int = 0
    splits: int = 0
    merges: int = 0
    failures: List[Tuple[int, int, str]] = field(default_factory=list)
    id_floor: int = 0

    @property
    def next_id(self) -> int:
        """Smallest id never handed to a drop of this scene."""
        return max(self.id_floor, max(self.drops, default=-1) + 1)

    def retire_ids(self):
        """Keep every id in use now from being reissued after its drop is gone."""
        self.id_floor = self.next_id

    def live(self) -> List[DropState]:
        return [self.drops[k] for k in sorted(self.drops)]

    def total_volume(self) -> float:
        return float(sum(d.volume for d in self.drops.values()))


def _advance(drop: DropState, predictor: Predictor, terrain: Terrain) -> str:
    try:
        theta = terrain.mean_incline(drop.current.contour)
        step_drop(drop, predictor, theta)
        return 'step'
    except DegenerateIncline:
        return 'frozen'
    except (NonFinitePrediction, GeometryError) as e:
        logger.error(f"Drop {drop.drop_id} failed: {e}")
        return 'failed'


def step_scene(scene: SceneState, predictor: Predictor, terrain: Terrain,
               split_cfg: Optional[SplitConfig] = None, workers: int = 1) -> Dict[int, str]:
    """
    Advance every drop one step, then resolve splits and merges.

    Drops are predicted independently (concurrently when ``workers`` > 1);
    splits and then merges are applied in ascending id order. Failed drops
    are removed and recorded without stopping the others.

    Returns:
        Event per drop id present after the step
    """
    scene.step += 1
    scene.retire_ids()
    drops = scene.live()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda d: _advance(d, predictor, terrain), drops))
    else:
        outcomes = [_advance(d, predictor, terrain) for d in drops]

    events: Dict[int, str] = {}
    for drop, outcome in zip(drops, outcomes):
        if outcome == 'failed':
            drop.alive = False
            del scene.drops[drop.drop_id]
            scene.failures.append((scene.step, drop.drop_id, 'prediction'))
        else:
            events[drop.drop_id] = outcome

    siblings = set()
    for drop in scene.live():
        if events.get(drop.drop_id) != 'step' or not predictor.breaks(drop):
            continue
        ids = (scene.next_id, scene.next_id + 1)
        try:
            a, b = split_drop(drop, ids, split_cfg)
        except (NoValidPair, DegenerateChild) as e:
            logger.warning(f"Step {scene.step}: split of drop {drop.drop_id} cancelled ({e})")
            events[drop.drop_id] = 'split_cancelled'
            continue
        drop.alive = False
        del scene.drops[drop.drop_id]
        events.pop(drop.drop_id)
        for child in (a, b):
            scene.drops[child.drop_id] = child
            events[child.drop_id] = 'split'
        scene.retire_ids()
        siblings.add(frozenset(ids))
        scene.splits += 1

    ids = sorted(scene.drops)
    for pos, ia in enumerate(ids):
        for ib in ids[pos + 1:]:
            a, b = scene.drops.get(ia), scene.drops.get(ib)
            # children of a split still share the cut chord this step
            if a is None or b is None or frozenset((ia, ib)) in siblings:
                continue
            hits = overlap_samples(a.current.contour, b.current.contour)
            if len(hits[0]) == 0 and len(hits[1]) == 0:
                continue
            new_id = scene.next_id
            try:
                merged = merge_drops(a, b, new_id)
            except (NoOverlap, GeometryError) as e:
                logger.warning(f"Step {scene.step}: merge of drops {ia} and {ib} deferred ({e})")
                continue
            for old in (a, b):
                old.alive = False
                del scene.drops[old.drop_id]
                events.pop(old.drop_id, None)
            scene.drops[new_id] = merged
            events[new_id] = 'merged'
            scene.retire_ids()
            scene.merges += 1
    return events


def export_scene_meshes(scene: SceneState, terrain: Terrain, out_dir: Path, smoothing_iters: int = 3,
                        solver: str = 'cg') -> List[Path]:
    """
    Reconstruct and export one OBJ per live drop for the current step.

    Drops whose reconstruction fails are logged and get no mesh.

    Returns:
        Paths of the meshes written
    """
    paths = []
    for drop in scene.live():
        snap = drop.current
        path = out_dir / MESH_PATTERN.format(scene.step, drop.drop_id)
        try:
            heights, _ = reconstruct_drop(snap.contour, snap.profile, drop.volume,
                                          smoothing_iters=smoothing_iters, solver=solver)
        except ReconstructionError as e:
            logger.warning(f"Step {scene.step}: no mesh for drop {drop.drop_id} ({e})")
            continue
        paths.append(export_mesh(heights, path, terrain.height))
    return paths


def trajectory_rows(scene: SceneState, events: Dict[int, str]) -> List[Tuple]:
    """
    Rows for the trajectory table, one per live drop in id order.

    Args:
        scene: Scene after the step
        events: Event per drop id; drops without one are reported as 'step'

    Returns:
        (step, drop, cx, cy, area, volume, event) tuples; the area is NaN
        when the outline is not simple
    """
    rows = []
    for drop in scene.live():
        snap = drop.current
        try:
            area = enclosed_area(snap.contour)
        except GeometryError:
            area = float('nan')
        rows.append((scene.step, drop.drop_id, float(snap.center[0]), float(snap.center[1]),
                     area, drop.volume, events.get(drop.drop_id, 'step')))
    return rows


def init_scene(cfg: SceneConfig, db: InitDatabase) -> SceneState:
    """Cold start every configured drop with ids in file order."""
    scene = SceneState()
    for k, entry in enumerate(cfg.drops):
        contour = load_contour(entry['contour'])
        scene.drops[k] = init_drop(k, contour, float(entry['volume']), db, cfg.K)
    scene.retire_ids()
    logger.info(f"Scene initialized with {len(scene.drops)} drops (total volume {scene.total_volume():.4e})")
    return scene


def run_scene(cfg: SceneConfig, predictor: Optional[Predictor] = None, db: Optional[InitDatabase] = None,
              on_step: Optional[Callable[[SceneState, Dict[int, str]], None]] = None) -> Dict:
    """
    Simulate a configured scene and write its outputs.

    Writes trajectory.csv, summary.json and (when enabled) one OBJ mesh per
    drop per step into ``cfg.output_dir``.

    Returns:
        Summary with step count, splits, merges, failures and timings
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    terrain = cfg.load_terrain()
    if predictor is None:
        predictor = NetworkPredictor.from_files(cfg.models['contour'], cfg.models['gradient'], cfg.models['breakage'])
    if db is None:
        db = InitDatabase.load(cfg.init_db) if cfg.init_db else InitDatabase()
    scene = init_scene(cfg, db)
    split_cfg = cfg.split_config()
    writer = trajectory_writer(out_dir / 'trajectory.csv')
    writer.write(trajectory_rows(scene, {k: 'init' for k in scene.drops}))

    timings = []
    for _ in range(cfg.steps):
        start = time.perf_counter()
        events = step_scene(scene, predictor, terrain, split_cfg, cfg.workers)
        elapsed = time.perf_counter() - start
        timings.append(elapsed)
        logger.debug(f"Step {scene.step}: {len(scene.drops)} drops in {elapsed:.3f}s "
                     f"({elapsed / max(len(scene.drops), 1):.4f}s per drop)")
        writer.write(trajectory_rows(scene, events))
        if cfg.export_meshes:
            export_scene_meshes(scene, terrain, out_dir, cfg.smoothing_iters, cfg.solver)
        if on_step is not None:
            on_step(scene, events)
        if not scene.drops:
            logger.warning(f"No drops left after step {scene.step}")
            break

    summary = {
        'steps': scene.step,
        'drops': len(scene.drops),
        'splits': scene.splits,
        'merges': scene.merges,
        'failures': [list(f) for f in scene.failures],
        'total_volume': scene.total_volume(),
        'mean_step_time': float(np.mean(timings)) if timings else 0.0,
        'config': asdict(cfg),
    }
    (out_dir / 'summary.json').write_text(json.dumps(summary, indent=2), encoding='utf-8')
    logger.info(f"Scene finished: {scene.step} steps, {scene.splits} splits, {scene.merges} merges, "
                f"{len(scene.failures)} failures")
    return summary


@dataclass
class EvalResult:
    rows: List[Tuple[int, int, float, str]]
    mean_error: float
    precision: float
    recall: float
    true_splits: int = 0
    false_splits: int = 0
    missed_splits: int = 0


def evaluate_sequence(seq: TrackedSequence, predictor: Predictor, K: int, theta: float = 30.0,
                      steps: Optional[int] = None) -> EvalResult:
    """
    Roll a cold-started drop forward against a ground-truth sequence.

    The error per step is the mean control-point distance to the true
    contour; split events are scored against the true split frame.
    """
    first = seq.entries[0]
    drop = cold_start(seq.seq_id, first.contour, first.profile, 1.0, K)
    horizon = len(seq) - 1 if steps is None else min(steps, len(seq) - 1)
    rows, errors = [], []
    tp = fp = fn = 0
    for t in range(1, horizon + 1):
        snap = step_drop(drop, predictor, theta)
        truth = seq.entries[t].contour
        err = float(np.mean(np.linalg.norm(snap.contour.ctrl - truth.ctrl, axis=1)))
        predicted = bool(predictor.breaks(drop))
        actual = seq.terminal_event == 'split' and seq.split_frame == t
        tp += predicted and actual
        fp += predicted and not actual
        fn += actual and not predicted
        errors.append(err)
        rows.append((t, seq.seq_id, err, 'split' if predicted else ''))

    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalResult(rows, float(np.mean(errors)) if errors else 0.0, precision, recall, tp, fp, fn)


def summarize_evaluation(results: List[EvalResult]) -> Dict:
    """
    Pool per-sequence results into overall error and split scores.

    Precision and recall are computed from the split counts summed over
    all sequences, not averaged per sequence.

    Args:
        results: One result per evaluated sequence

    Returns:
        Dictionary with sequences, steps, mean_error, split counts,
        precision and recall
    """
    errors = [row[2] for r in results for row in r.rows]
    tp = sum(r.true_splits for r in results)
    fp = sum(r.false_splits for r in results)
    fn = sum(r.missed_splits for r in results)
    return {
        'sequences': len(results),
        'steps': len(errors),
        'mean_error': float(np.mean(errors)) if errors else 0.0,
        'true_splits': tp,
        'false_splits': fp,
        'missed_splits': fn,
        'precision': tp / (tp + fp) if tp + fp else 0.0,
        'recall': tp / (tp + fn) if tp + fn else 0.0,
    }


def summary_path_for(path: Union[str, Path]) -> Path:
    """Summary file written next to an evaluation table."""
    return Path(path).with_suffix('.summary.json')


def write_evaluation(results: List[EvalResult], path: Union[str, Path]) -> TableWriter:
    """
    Write the per-step error table and its pooled summary.

    The summary goes next to the table as ``<stem>.summary.json``.

    Returns:
        The table writer
    """
    writer = eval_writer(path)
    for result in results:
        writer.write(result.rows)
    summary_path = summary_path_for(writer.path)
    summary_path.write_text(json.dumps(summarize_evaluation(results), indent=2), encoding='utf-8')
    return writer
