"""
Tracking module for the Rivulet drop simulator.
Turns per-frame contours into tracked sequences with merge/split labels.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from src.geometry import Contour, GeometryError, fit_spline, overlap_samples
from src.imaging import (
    DataPrepError,
    Frame,
    GradientProfile,
    OutOfBounds,
    UniformImage,
    binarize,
    extract_gradient_profile,
    morph_open_close,
    otsu_threshold,
    touches_border,
    trace_contours,
)


logger = logging.getLogger(__name__)


TERMINAL_EVENTS = ('ends', 'leaves_view', 'merged', 'split')
EVENT_KINDS = ('continue', 'merge', 'split', 'new', 'ends')


class AmbiguousTopology(DataPrepError):
    """Raised when three or more contours overlap across one frame step."""

    def __init__(self, message: str, frame_index: Optional[int] = None):
        super().__init__(message if frame_index is None else f"{message} (frame {frame_index})")
        self.frame_index = frame_index


class InvalidSequence(DataPrepError, ValueError):
    """Raised when a tracked sequence violates its invariants."""
    pass


@dataclass(frozen=True)
class TrackEvent:
    """One frame-to-frame correspondence: indices into the prev and cur lists."""

    kind: str
    prev: Tuple[int, ...]
    cur: Tuple[int, ...]


@dataclass
class SequenceEntry:
    contour: Contour
    profile: GradientProfile
    center: np.ndarray
    frame: int


@dataclass
class TrackedSequence:
    """
    Contour history of one drop between its appearance and its terminal event.

    ``split_frame`` is the position (within ``entries``) of the last state
    before the contour divides; it is set only for split-terminated sequences.
    """

    seq_id: int
    entries: List[SequenceEntry] = field(default_factory=list)
    terminal_event: str = 'ends'
    split_frame: Optional[int] = None
    parents: List[int] = field(default_factory=list)
    children: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self) -> List[str]:
        errors = []
        if not self.entries:
            errors.append(f"Sequence {self.seq_id} has no entries")
        if self.terminal_event not in TERMINAL_EVENTS:
            errors.append(f"Sequence {self.seq_id} has unknown terminal event '{self.terminal_event}'")
        if self.terminal_event == 'split' and self.split_frame is None:
            errors.append(f"Sequence {self.seq_id} ends in a split without split_frame")
        for entry in self.entries:
            if not np.all((entry.center >= 0.0) & (entry.center <= 1.0)):
                errors.append(f"Sequence {self.seq_id} has a centre outside the unit domain at frame {entry.frame}")
                break
        return errors

    def to_dict(self) -> Dict:
        return {
            'seq_id': self.seq_id,
            'terminal_event': self.terminal_event,
            'split_frame': self.split_frame,
            'parents': list(self.parents),
            'children': list(self.children),
            'entries': [
                {
                    'frame': e.frame,
                    'ctrl': e.contour.ctrl.tolist(),
                    'mags': e.profile.mags.tolist(),
                    'center': [float(v) for v in e.center],
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TrackedSequence':
        try:
            entries = [
                SequenceEntry(Contour(np.array(e['ctrl'])), GradientProfile(e['mags']),
                              np.array(e['center'], dtype=float), int(e['frame']))
                for e in data['entries']
            ]
            seq = cls(int(data['seq_id']), entries, data['terminal_event'], data.get('split_frame'),
                      list(data.get('parents', [])), list(data.get('children', [])))
        except (KeyError, TypeError, ValueError, GeometryError) as e:
            raise InvalidSequence(f"Malformed sequence record: {e}") from e
        errors = seq.validate()
        if errors:
            raise InvalidSequence("; ".join(errors))
        return seq


@dataclass
class Detection:
    """A traced contour in one frame; ``profile`` is None when it touches the border."""

    contour: Contour
    profile: Optional[GradientProfile]
    center: np.ndarray
    frame: int
    at_border: bool = False


def overlap_score(a: Contour, b: Contour) -> int:
    """Larger of the two dense-sample containment counts."""
    a_in_b, b_in_a = overlap_samples(a, b)
    return max(len(a_in_b), len(b_in_a))


def track(prev: Sequence[Contour], cur: Sequence[Contour], threshold: int = 8,
          frame_index: Optional[int] = None) -> List[TrackEvent]:
    """
    Classify correspondences between the contours of two consecutive frames.

    Contours are linked when their overlap score reaches ``threshold``.
    Each connected group of links becomes one event: continue (1 to 1),
    merge (2 to 1), split (1 to 2), new (0 to 1) or ends (1 to 0).

    Raises:
        AmbiguousTopology: If a group involves three or more contours in
            any other arrangement
    """
    n_prev, n_cur = len(prev), len(cur)
    rows, cols = [], []
    for i, a in enumerate(prev):
        for j, b in enumerate(cur):
            if overlap_score(a, b) >= threshold:
                rows.append(i)
                cols.append(n_prev + j)

    n = n_prev + n_cur
    if n == 0:
        return []
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)

    events = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        p = tuple(int(m) for m in members if m < n_prev)
        c = tuple(int(m) - n_prev for m in members if m >= n_prev)
        shape = (len(p), len(c))
        if shape == (1, 1):
            kind = 'continue'
        elif shape == (2, 1):
            kind = 'merge'
        elif shape == (1, 2):
            kind = 'split'
        elif shape == (0, 1):
            kind = 'new'
        elif shape == (1, 0):
            kind = 'ends'
        else:
            raise AmbiguousTopology(f"{len(p)} previous and {len(c)} current contours overlap in one group",
                                    frame_index)
        events.append(TrackEvent(kind, p, c))

    events.sort(key=lambda e: (min(e.prev) if e.prev else n_prev + min(e.cur), e.cur))
    return events


def detect(frame: Frame, morph_radius: int = 1, min_area: int = 16) -> List[Detection]:
    """Threshold, clean, trace and fit every drop visible in a frame."""
    try:
        threshold = otsu_threshold(frame)
    except UniformImage:
        logger.debug(f"Frame {frame.timestamp} is uniform; no drops")
        return []

    mask = morph_open_close(binarize(frame, threshold), morph_radius)
    detections = []
    for loop in trace_contours(mask, min_area=min_area):
        try:
            contour = fit_spline(loop).contour
        except GeometryError as e:
            logger.warning(f"Frame {frame.timestamp}: skipping contour that could not be fitted ({e})")
            continue
        at_border = touches_border(contour, frame)
        try:
            profile = None if at_border else extract_gradient_profile(frame, contour)
        except OutOfBounds:
            profile, at_border = None, True
        detections.append(Detection(contour, profile, contour.centroid(), frame.timestamp, at_border))
    return detections


class SequenceBuilder:
    """Accumulates tracked sequences as frame-to-frame events arrive."""

    def __init__(self):
        self.sequences: List[TrackedSequence] = []
        self.active: Dict[int, TrackedSequence] = {}
        self.tallies: Counter = Counter()

    def _start(self, det: Detection, parents: Sequence[int] = ()) -> Optional[TrackedSequence]:
        if det.profile is None:
            return None
        seq = TrackedSequence(len(self.sequences), parents=list(parents))
        seq.entries.append(SequenceEntry(det.contour, det.profile, det.center, det.frame))
        self.sequences.append(seq)
        return seq

    @staticmethod
    def _finish(seq: Optional[TrackedSequence], event: str, last: Optional[Detection] = None):
        if seq is None:
            return
        if event == 'ends' and last is not None and last.at_border:
            event = 'leaves_view'
        seq.terminal_event = event
        if event == 'split':
            seq.split_frame = len(seq.entries) - 1

    def begin(self, detections: List[Detection]):
        self.active = {}
        for j, det in enumerate(detections):
            seq = self._start(det)
            if seq is not None:
                self.active[j] = seq

    def advance(self, prev: List[Detection], cur: List[Detection], events: List[TrackEvent]):
        next_active: Dict[int, TrackedSequence] = {}
        for event in events:
            self.tallies[event.kind] += 1
            olds = [self.active.get(i) for i in event.prev]

            if event.kind == 'continue':
                seq, det = olds[0], cur[event.cur[0]]
                if seq is None:
                    started = self._start(det)
                    if started is not None:
                        next_active[event.cur[0]] = started
                elif det.profile is None:
                    self._finish(seq, 'leaves_view')
                else:
                    seq.entries.append(SequenceEntry(det.contour, det.profile, det.center, det.frame))
                    next_active[event.cur[0]] = seq

            elif event.kind == 'merge':
                for seq in olds:
                    self._finish(seq, 'merged')
                child = self._start(cur[event.cur[0]], [s.seq_id for s in olds if s is not None])
                if child is not None:
                    next_active[event.cur[0]] = child
                    for seq in olds:
                        if seq is not None:
                            seq.children.append(child.seq_id)

            elif event.kind == 'split':
                parent = olds[0]
                self._finish(parent, 'split')
                for j in event.cur:
                    child = self._start(cur[j], [parent.seq_id] if parent is not None else [])
                    if child is not None:
                        next_active[j] = child
                        if parent is not None:
                            parent.children.append(child.seq_id)

            elif event.kind == 'new':
                seq = self._start(cur[event.cur[0]])
                if seq is not None:
                    next_active[event.cur[0]] = seq

            else:
                self._finish(olds[0], 'ends', prev[event.prev[0]])

        self.active = next_active

    def close(self, last: List[Detection]) -> List[TrackedSequence]:
        for j, seq in self.active.items():
            self._finish(seq, 'ends', last[j])
        self.active = {}
        return self.sequences


def extract_sequences(frames: Sequence[Frame], morph_radius: int = 1, min_area: int = 16,
                      overlap_threshold: int = 8) -> Tuple[List[TrackedSequence], Counter]:
    """
    Full extraction pipeline from frames to tracked sequences.

    Args:
        frames: Frames in temporal order
        morph_radius: Opening/closing disc radius in pixels
        min_area: Minimum component area in pixels
        overlap_threshold: Dense-sample overlap count linking two contours

    Returns:
        Tuple of (tracked sequences, event tallies)

    Raises:
        AmbiguousTopology: On three-way overlaps, naming the frame index
    """
    builder = SequenceBuilder()
    prev: List[Detection] = []

    for k, frame in enumerate(frames):
        cur = detect(frame, morph_radius, min_area)
        if k == 0:
            builder.begin(cur)
        else:
            events = track([d.contour for d in prev], [d.contour for d in cur],
                           overlap_threshold, frame.timestamp)
            builder.advance(prev, cur, events)
        prev = cur

    sequences = builder.close(prev)
    logger.info(f"Extracted {len(sequences)} sequences from {len(frames)} frames "
                f"(merges={builder.tallies['merge']}, splits={builder.tallies['split']})")
    return sequences, builder.tallies


def save_tracks(sequences: Sequence[TrackedSequence], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({'sequences': [s.to_dict() for s in sequences]}, f)
    logger.debug(f"Saved {len(sequences)} tracks to {path}")
    return path


def load_tracks(path: Union[str, Path]) -> List[TrackedSequence]:
    """
    Load ground-truth or extracted tracks.

    Raises:
        FileNotFoundError: If the file does not exist
        InvalidSequence: If any record is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Tracks file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidSequence(f"{path} is not valid JSON: {e}") from e
    return [TrackedSequence.from_dict(d) for d in data.get('sequences', [])]
