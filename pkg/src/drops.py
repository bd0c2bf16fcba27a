"""
Drop module for the Rivulet drop simulator.
Per-drop state, initialization from the gradient database, learned time
stepping, and the topology operations that split and merge drops.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, List, NamedTuple, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from src.dataset import decode_target, encode_shape, encode_window
from src.geometry import (
    N_CTRL,
    Contour,
    GeometryError,
    SplitConfig,
    arc_length_between,
    arc_length_matrix,
    canonical_order,
    canonicalize,
    cut_at_chord,
    enclosed_area,
    fit_spline,
    inward_normals,
    overlap_samples,
    union_outline,
)
from src.imaging import GradientProfile
from src.network import Model, load_model
from src.tracking import TrackedSequence


logger = logging.getLogger(__name__)


REFERENCE_INCLINE = 30.0
DEDUPE_DISTANCE = 1e-3
TIE_TOLERANCE = 1e-12
MIN_CHILD_FRACTION = 0.01
INIT_DB_FORMAT = "nd-initdb v1"


class SimulationError(Exception):
    """Base exception for simulation errors."""
    pass


class EmptyDatabase(SimulationError):
    """Raised when a gradient lookup is made on an empty database."""
    pass


class DegenerateIncline(SimulationError, ValueError):
    """Raised for a non-positive incline; the drop does not flow."""
    pass


class NonFinitePrediction(SimulationError):
    """Raised when a network produces NaN or infinite values."""
    pass


class NoValidPair(SimulationError):
    """Raised when no control-point pair satisfies the split constraints."""
    pass


class DegenerateChild(SimulationError):
    """Raised when a split would produce a vanishing or invalid child."""
    pass


class NoOverlap(SimulationError):
    """Raised when merging two drops that do not touch."""
    pass


class DropSnapshot(NamedTuple):
    contour: Contour
    profile: GradientProfile
    center: np.ndarray


@dataclass
class DropState:
    """
    One simulated drop.

    Attributes:
        drop_id: Scene-unique identifier
        history: The last K snapshots, newest last
        volume: Liquid volume in scene units cubed
        alive: False once the drop has split, merged or failed
    """

    drop_id: int
    history: Deque[DropSnapshot]
    volume: float
    alive: bool = True

    def __post_init__(self):
        if not self.volume > 0:
            raise ValueError(f"Drop {self.drop_id} needs a positive volume, got {self.volume}")
        if self.history.maxlen is None or len(self.history) != self.history.maxlen:
            raise ValueError(f"Drop {self.drop_id} history must be a full bounded deque")

    @property
    def K(self) -> int:
        return self.history.maxlen

    @property
    def current(self) -> DropSnapshot:
        return self.history[-1]

    def push(self, snapshot: DropSnapshot):
        self.history.append(snapshot)


def cold_start(drop_id: int, contour: Contour, profile: GradientProfile, volume: float, K: int) -> DropState:
    """A drop whose history repeats one state K times."""
    if K < 1:
        raise ValueError(f"History length must be >= 1, got {K}")
    snapshot = DropSnapshot(contour, profile, contour.centroid())
    return DropState(drop_id, deque([snapshot] * K, maxlen=K), float(volume))


def shape_key(contour: Contour) -> np.ndarray:
    """Mean-centred control points divided by their RMS radius, flattened."""
    rel = contour.ctrl - contour.control_mean()
    radius = np.sqrt(np.mean(np.sum(rel * rel, axis=1)))
    return (rel / radius).ravel() if radius > 0 else rel.ravel()


@dataclass
class InitDatabase:
    """Representative (contour, gradient profile) pairs for cold starts."""

    entries: List[Tuple[Contour, GradientProfile]] = field(default_factory=list)
    source: str = ''

    def __post_init__(self):
        entries, self.entries = self.entries, []
        self._keys: List[np.ndarray] = []
        for contour, profile in entries:
            self.add(contour, profile)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, contour: Contour, profile: GradientProfile) -> bool:
        """Add an entry unless an existing one lies within the dedupe distance."""
        key = shape_key(contour)
        if self._keys and np.min(np.linalg.norm(np.array(self._keys) - key, axis=1)) < DEDUPE_DISTANCE:
            return False
        self.entries.append((contour, profile))
        self._keys.append(key)
        return True

    def lookup(self, contour: Contour) -> Tuple[int, float]:
        """
        Nearest entry by shape-key distance, lowest index on ties.

        Raises:
            EmptyDatabase: If there are no entries
        """
        if not self.entries:
            raise EmptyDatabase("Initialization database has no entries")
        distances = np.linalg.norm(np.array(self._keys) - shape_key(contour), axis=1)
        index = int(np.argmin(distances))
        return index, float(distances[index])

    @classmethod
    def from_sequences(cls, sequences: Sequence[TrackedSequence], source: str = '') -> 'InitDatabase':
        db = cls(source=source)
        for seq in sequences:
            for entry in seq.entries:
                db.add(entry.contour, entry.profile)
        logger.info(f"Initialization database built with {len(db)} entries from {len(sequences)} sequences")
        return db

    def save(self, path: Union[str, Path]) -> Path:
        """Write the database as JSON tagged "nd-initdb v1"."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            'format': INIT_DB_FORMAT,
            'source': self.source,
            'entries': [{'ctrl': c.ctrl.tolist(), 'mags': p.mags.tolist()} for c, p in self.entries],
        }
        path.write_text(json.dumps(payload), encoding='utf-8')
        logger.info(f"Initialization database saved: {path} ({len(self)} entries)")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'InitDatabase':
        """
        Read a database written by ``save``.

        Raises:
            ValueError: If the file carries another format tag
        """
        data = json.loads(Path(path).read_text(encoding='utf-8'))
        if data.get('format') != INIT_DB_FORMAT:
            raise ValueError(f"{path} is not an '{INIT_DB_FORMAT}' file")
        entries = [(Contour(np.array(e['ctrl'])), GradientProfile(e['mags'])) for e in data['entries']]
        return cls(entries, data.get('source', ''))


def init_drop(drop_id: int, contour: Contour, volume: float, db: InitDatabase, K: int) -> DropState:
    """
    Cold start a drop, borrowing the gradient profile of the closest database shape.

    Raises:
        EmptyDatabase: If the database is empty
    """
    if not contour.is_canonical():
        contour = canonicalize(contour.ctrl)
    index, distance = db.lookup(contour)
    logger.debug(f"Drop {drop_id}: database entry {index} selected (distance {distance:.3e})")
    return cold_start(drop_id, contour, db.entries[index][1], volume, K)


def incline_scale(theta: float) -> float:
    """
    Size factor (sin theta)^(1/3) for an incline of ``theta`` degrees.

    Raises:
        DegenerateIncline: If theta <= 0
    """
    if theta <= 0:
        raise DegenerateIncline(f"Incline {theta} degrees does not drive flow")
    if theta > 90:
        raise ValueError(f"Incline must be at most 90 degrees, got {theta}")
    return float(np.sin(np.radians(theta)) ** (1.0 / 3.0))


def relative_scale(theta: float) -> float:
    """Incline scale relative to the incline the networks were trained on."""
    return incline_scale(theta) / incline_scale(REFERENCE_INCLINE)


class Predictor(Protocol):
    def predict(self, state: DropState, theta: float) -> DropSnapshot:
        ...

    def breaks(self, state: DropState) -> bool:
        ...


def predict_next(state: DropState, contour_model: Model, gradient_model: Model, theta: float,
                 gradient_scale: float = 1.0) -> DropSnapshot:
    """
    Predict the next snapshot of a drop from its history.

    History contours and gradients are scaled about their centres into the
    reference incline frame, run through both networks and scaled back.

    Raises:
        DegenerateIncline: If theta <= 0
        NonFinitePrediction: If either network output is not finite
    """
    s = relative_scale(theta)
    snapshots = list(state.history)
    centers = [snap.center for snap in snapshots]
    contours = [snap.contour.scaled(s, snap.center) for snap in snapshots]

    features = encode_window(contours, centers)[None]
    out = contour_model.predict(features)[0]
    mags_in = np.array([snap.profile.mags * s for snap in snapshots]) / gradient_scale
    mags = gradient_model.predict(mags_in[None])[0] * gradient_scale
    if not (np.all(np.isfinite(out)) and np.all(np.isfinite(mags))):
        raise NonFinitePrediction(f"Drop {state.drop_id}: network output is not finite")

    ctrl, center = decode_target(out, centers)
    ctrl = center + (ctrl - center) / s
    mags = np.maximum(mags, 0.0) / s
    order = canonical_order(ctrl)
    return DropSnapshot(Contour(ctrl[order]), GradientProfile(mags[order]), center)


def predict_breakage(state: DropState, model: Model) -> bool:
    """Breakage decision on the newest contour; strictly above one half."""
    p = float(model.predict(encode_shape(state.current.contour)[None])[0, 0])
    return p > 0.5


class NetworkPredictor:
    """Drives drops with the three trained networks."""

    def __init__(self, contour_model: Model, gradient_model: Model, breakage_model: Model):
        self.contour_model = contour_model
        self.gradient_model = gradient_model
        self.breakage_model = breakage_model
        self.gradient_scale = float(gradient_model.meta.get('gradient_scale', 1.0))

    @classmethod
    def from_files(cls, contour_path, gradient_path, breakage_path) -> 'NetworkPredictor':
        """Load the three trained networks from their model files."""
        return cls(load_model(contour_path), load_model(gradient_path), load_model(breakage_path))

    def predict(self, state: DropState, theta: float) -> DropSnapshot:
        return predict_next(state, self.contour_model, self.gradient_model, theta, self.gradient_scale)

    def breaks(self, state: DropState) -> bool:
        return predict_breakage(state, self.breakage_model)


def step_drop(state: DropState, predictor: Predictor, theta: float) -> DropSnapshot:
    """
    Advance a drop by one network step and push the result into its history.

    Raises:
        DegenerateIncline: If theta <= 0 (the drop should stay frozen)
        NonFinitePrediction: If the prediction is not finite
    """
    snapshot = predictor.predict(state, theta)
    if not (np.all(np.isfinite(snapshot.contour.ctrl)) and np.all(np.isfinite(snapshot.center))):
        raise NonFinitePrediction(f"Drop {state.drop_id}: predicted state is not finite")
    state.push(snapshot)
    return snapshot


def _split_candidates(contour: Contour, cfg: SplitConfig) -> Tuple[np.ndarray, np.ndarray]:
    points = contour.anchor_points()
    normals = inward_normals(contour)
    cost = np.linalg.norm(points[:, None] - points[None, :], axis=2) - arc_length_matrix(contour)
    idx = np.arange(N_CTRL)
    gap = np.abs(idx[:, None] - idx[None, :])
    gap = np.minimum(gap, N_CTRL - gap)
    valid = (normals @ normals.T < cfg.delta) & (gap >= cfg.min_separation) & (idx[:, None] < idx[None, :])
    return cost, valid


def _pick(pairs: List[Tuple[int, int]], costs: List[float]) -> Tuple[int, int]:
    best = min(costs)
    return min(p for p, c in zip(pairs, costs) if c <= best + TIE_TOLERANCE)


def find_split_pair(contour: Contour, cfg: Optional[SplitConfig] = None, cull: bool = True) -> Tuple[int, int]:
    """
    Control-point pair at the neck of a contour.

    Minimizes |x_i - x_j| - C(i, j) over pairs whose inward normals satisfy
    n_i . n_j < delta and whose cyclic index gap is at least
    ``min_separation``. Costs within 1e-12 of the minimum tie and the
    lexicographically smallest pair wins. ``cull=False`` scans pair by pair.

    Raises:
        NoValidPair: If no pair satisfies the constraints
    """
    cfg = cfg or SplitConfig()
    if cull:
        cost, valid = _split_candidates(contour, cfg)
        rows, cols = np.nonzero(valid)
        pairs = list(zip(rows.tolist(), cols.tolist()))
        costs = cost[rows, cols].tolist()
    else:
        points = contour.anchor_points()
        normals = inward_normals(contour)
        pairs, costs = [], []
        for i in range(N_CTRL):
            for j in range(i + 1, N_CTRL):
                if min(j - i, N_CTRL - (j - i)) < cfg.min_separation:
                    continue
                if float(np.dot(normals[i], normals[j])) >= cfg.delta:
                    continue
                pairs.append((i, j))
                costs.append(float(np.linalg.norm(points[i] - points[j])) - arc_length_between(contour, i, j))

    if not pairs:
        raise NoValidPair(f"No control-point pair satisfies delta={cfg.delta}, min_separation={cfg.min_separation}")
    return _pick(pairs, costs)


def transfer_profile(child: Contour, parents: Sequence[Tuple[Contour, GradientProfile, np.ndarray]]) -> GradientProfile:
    """
    Gradient magnitudes at a child's anchors.

    Each anchor takes the nearest surviving parent sample and interpolates
    that parent's magnitudes linearly by arc length.

    Args:
        child: New contour
        parents: (contour, profile, indices of surviving dense samples) triples
    """
    points, owner, arcs = [], [], []
    for k, (contour, _, keep) in enumerate(parents):
        points.append(contour.dense[keep])
        owner.append(np.full(len(keep), k))
        arcs.append(contour.dense_arc_lengths[keep])
    _, nearest = cKDTree(np.vstack(points)).query(child.anchor_points())
    owner = np.concatenate(owner)[nearest]
    arcs = np.concatenate(arcs)[nearest]

    mags = np.zeros(N_CTRL)
    for k, (contour, profile, _) in enumerate(parents):
        hit = owner == k
        mags[hit] = np.interp(arcs[hit], contour.anchor_arc_lengths, profile.mags, period=contour.perimeter)
    return GradientProfile(mags)


def split_drop(state: DropState, ids: Tuple[int, int], cfg: Optional[SplitConfig] = None,
               pair: Optional[Tuple[int, int]] = None) -> Tuple[DropState, DropState]:
    """
    Divide a drop along the chord at its neck, rewriting its whole history.

    Volume is shared in proportion to the child areas at the newest step.

    Raises:
        NoValidPair: If no split pair exists
        DegenerateChild: If a child is under 1% of the parent area or cannot be fitted
    """
    i, j = pair if pair is not None else find_split_pair(state.current.contour, cfg)
    everything = np.arange(state.current.contour.dense.shape[0])
    histories: Tuple[List[DropSnapshot], List[DropSnapshot]] = ([], [])
    try:
        for snap in state.history:
            for loop, history in zip(cut_at_chord(snap.contour, i, j), histories):
                child = fit_spline(loop).contour
                profile = transfer_profile(child, [(snap.contour, snap.profile, everything)])
                history.append(DropSnapshot(child, profile, child.centroid()))
        parent_area = enclosed_area(state.current.contour)
        areas = [enclosed_area(h[-1].contour) for h in histories]
    except GeometryError as e:
        raise DegenerateChild(f"Drop {state.drop_id}: split at ({i}, {j}) produced an invalid child ({e})") from e

    if min(areas) < MIN_CHILD_FRACTION * parent_area:
        raise DegenerateChild(f"Drop {state.drop_id}: child area {min(areas):.3e} is under "
                              f"{MIN_CHILD_FRACTION:.0%} of parent area {parent_area:.3e}")

    v_a = state.volume * areas[0] / (areas[0] + areas[1])
    v_b = state.volume - v_a
    K = state.K
    children = (DropState(ids[0], deque(histories[0], maxlen=K), v_a),
                DropState(ids[1], deque(histories[1], maxlen=K), v_b))
    logger.info(f"Drop {state.drop_id} split at ({i}, {j}) into {ids[0]} and {ids[1]} "
                f"(volumes {v_a:.4e}, {v_b:.4e})")
    return children


def merge_drops(a: DropState, b: DropState, new_id: int) -> DropState:
    """
    Combine two overlapping drops into a cold-started drop.

    Raises:
        NoOverlap: If the drops do not overlap
        StitchFailure: If their outline cannot be stitched unambiguously
    """
    ca, cb = a.current.contour, b.current.contour
    a_in_b, b_in_a = overlap_samples(ca, cb)
    if len(a_in_b) == 0 and len(b_in_a) == 0:
        raise NoOverlap(f"Drops {a.drop_id} and {b.drop_id} do not overlap")

    merged = fit_spline(union_outline(ca, cb)).contour
    a_keep = np.setdiff1d(np.arange(len(ca.dense)), a_in_b)
    b_keep = np.setdiff1d(np.arange(len(cb.dense)), b_in_a)
    if len(a_keep) + len(b_keep) == 0:
        a_keep, b_keep = np.arange(len(ca.dense)), np.arange(len(cb.dense))
    parents = [(ca, a.current.profile, a_keep), (cb, b.current.profile, b_keep)]
    profile = transfer_profile(merged, [p for p in parents if len(p[2])])

    state = cold_start(new_id, merged, profile, a.volume + b.volume, a.K)
    logger.info(f"Drops {a.drop_id} and {b.drop_id} merged into {new_id} (volume {state.volume:.4e})")
    return state
