"""
Synthetic sequence generator for the Rivulet drop simulator.
Renders procedurally advected teardrop blobs with exact ground-truth tracks.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from shapely.geometry import Polygon

from src.geometry import N_CTRL, N_DENSE, Contour, fit_spline
from src.imaging import FRAME_PATTERN, DataPrepError, Frame, GradientProfile, pixel_to_scene, write_frame
from src.tracking import SequenceEntry, TrackedSequence, save_tracks


logger = logging.getLogger(__name__)


MANIFEST_FORMAT = "nd-manifest v1"
TRACKS_FILE = "tracks.json"
BORDER_MARGIN_PX = 3.0


class InvalidParams(DataPrepError, ValueError):
    """Raised when generator parameters are missing or out of range."""
    pass


@dataclass
class SynthParams:
    """
    Generator parameters.

    Speed follows v = alpha * area**beta (scene units per frame), capped
    at ``max_step``; elongation grows by ``elongation_rate`` per frame and a
    drop splits once it exceeds ``split_elongation``.
    """

    width: int = 128
    height: int = 128
    n_frames: int = 30
    n_drops: int = 2
    n_sequences: int = 1
    size_range: List[float] = field(default_factory=lambda: [0.05, 0.08])
    alpha: float = 0.15
    beta: float = 0.5
    elongation_rate: float = 0.03
    split_elongation: float = 2.2
    noise: float = 2.0
    max_step: float = 0.05
    background: int = 20
    edge: int = 40
    peak: int = 160

    def validate(self) -> List[str]:
        errors = []
        if self.width < 16 or self.height < 16:
            errors.append(f"Frame size must be at least 16x16, got {self.width}x{self.height}")
        if self.n_frames < 1:
            errors.append(f"n_frames must be >= 1, got {self.n_frames}")
        if self.n_drops < 0:
            errors.append(f"n_drops must be >= 0, got {self.n_drops}")
        if self.n_sequences < 1:
            errors.append(f"n_sequences must be >= 1, got {self.n_sequences}")
        if len(self.size_range) != 2 or not 0 < self.size_range[0] <= self.size_range[1] < 0.25:
            errors.append(f"size_range must be [lo, hi] with 0 < lo <= hi < 0.25, got {self.size_range}")
        if self.alpha < 0 or self.beta < 0:
            errors.append("alpha and beta must be non-negative")
        if self.elongation_rate < 0:
            errors.append(f"elongation_rate must be >= 0, got {self.elongation_rate}")
        if self.split_elongation <= 1.0:
            errors.append(f"split_elongation must be > 1, got {self.split_elongation}")
        if self.noise < 0:
            errors.append(f"noise must be >= 0, got {self.noise}")
        if self.max_step <= 0:
            errors.append(f"max_step must be > 0, got {self.max_step}")
        if self.background + self.edge + self.peak > 255 or min(self.background, self.edge, self.peak) < 0:
            errors.append("background + edge + peak must stay within [0, 255]")
        return errors

    @classmethod
    def from_dict(cls, data: Dict) -> 'SynthParams':
        """
        Build parameters from a JSON document, rejecting unknown names.

        Raises:
            InvalidParams: On unknown keys or failed validation
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidParams(f"Unknown generator parameters: {', '.join(unknown)}")
        try:
            params = cls(**data)
        except TypeError as e:
            raise InvalidParams(str(e)) from e
        errors = params.validate()
        if errors:
            raise InvalidParams("; ".join(errors))
        return params

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'SynthParams':
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Generator config not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise InvalidParams(f"{path} is not valid JSON: {e}") from e


@dataclass
class Blob:
    """
    Teardrop footprint: a half-disc head below a half-ellipse tail.

    The tail points up (against the flow) with semi-axis ``r * e``.
    """

    blob_id: int
    cx: float
    cy: float
    r: float
    e: float = 1.0

    def area(self) -> float:
        return 0.5 * np.pi * self.r ** 2 * (1.0 + self.e)

    def speed(self, params: SynthParams) -> float:
        return min(params.alpha * self.area() ** params.beta, params.max_step)

    def outline(self, n: int = N_DENSE) -> np.ndarray:
        phi = 2.0 * np.pi * np.arange(n) / n
        sin = np.sin(phi)
        stretch = np.where(sin > 0, self.e, 1.0)
        return np.column_stack([self.cx + self.r * np.cos(phi), self.cy + self.r * sin * stretch])

    def polygon(self) -> Polygon:
        return Polygon(self.outline())

    def rho2(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        u = x - self.cx
        v = y - self.cy
        stretch = np.where(v > 0, self.e, 1.0)
        return (u / self.r) ** 2 + (v / (self.r * stretch)) ** 2

    def intensity_gradient(self, points: np.ndarray, peak: float) -> np.ndarray:
        """Analytic gradient of the dome intensity, per scene unit."""
        u = points[:, 0] - self.cx
        v = points[:, 1] - self.cy
        stretch = np.where(v > 0, self.e, 1.0)
        return -peak * np.column_stack([2.0 * u / self.r ** 2, 2.0 * v / (self.r * stretch) ** 2])


@dataclass
class SynthEvent:
    frame: int
    kind: str
    parents: List[int]
    children: List[int]


@dataclass
class SynthResult:
    """One generated sequence: frames plus ground truth."""

    frames: List[Frame]
    sequences: List[TrackedSequence]
    events: List[SynthEvent]


class SynthGenerator:
    """
    Procedural replacement for a capture rig.

    Larger drops move faster, tails stretch until the drop splits, faster
    drops that catch slower ones merge, and drops leave through the bottom
    of the view.
    """

    def __init__(self, params: SynthParams):
        errors = params.validate()
        if errors:
            raise InvalidParams("; ".join(errors))
        self.params = params
        self.scale = max(params.width, params.height)
        rows, cols = np.mgrid[0:params.height, 0:params.width]
        centres = pixel_to_scene(cols.ravel(), rows.ravel(), self.scale)
        self._x = centres[:, 0].reshape(rows.shape)
        self._y = centres[:, 1].reshape(rows.shape)

    def random_blobs(self, rng: np.random.Generator) -> List[Blob]:
        p = self.params
        blobs: List[Blob] = []
        x_hi = p.width / self.scale
        y_lo = 1.0 - p.height / self.scale
        for attempt in range(100 * max(p.n_drops, 1)):
            if len(blobs) == p.n_drops:
                break
            r = rng.uniform(*p.size_range)
            cand = Blob(len(blobs), rng.uniform(r + 0.05, x_hi - r - 0.05),
                        rng.uniform(y_lo + 0.5 * (1.0 - y_lo), 1.0 - 2.5 * r), r)
            if all(cand.polygon().distance(b.polygon()) > 0.02 for b in blobs):
                blobs.append(cand)
        if len(blobs) < p.n_drops:
            logger.warning(f"Placed only {len(blobs)} of {p.n_drops} drops without overlap")
        return blobs

    def render(self, blobs: Sequence[Blob], timestamp: int, rng: np.random.Generator) -> Frame:
        p = self.params
        field_ = np.zeros_like(self._x)
        for blob in blobs:
            rho2 = blob.rho2(self._x, self._y)
            field_ = np.maximum(field_, np.where(rho2 < 1.0, p.edge + p.peak * (1.0 - rho2), 0.0))
        img = p.background + field_
        if p.noise > 0:
            img = img + rng.normal(0.0, p.noise, size=img.shape)
        return Frame(np.clip(np.rint(img), 0, 255).astype(np.uint8), timestamp)

    def _inside_view(self, blob: Blob) -> bool:
        outline = blob.outline()
        margin = BORDER_MARGIN_PX / self.scale
        return bool(outline[:, 0].min() >= margin
                    and outline[:, 0].max() <= self.params.width / self.scale - margin
                    and outline[:, 1].min() >= 1.0 - self.params.height / self.scale + margin
                    and outline[:, 1].max() <= 1.0 - margin)

    def _visible(self, blob: Blob) -> bool:
        return blob.cy + blob.r * blob.e > 1.0 - self.params.height / self.scale

    def ground_truth(self, blob: Blob, frame: int) -> SequenceEntry:
        contour = fit_spline(blob.outline()).contour
        anchors = contour.anchor_points()
        normals = contour.normals_at(np.arange(N_CTRL, dtype=float))
        grad = blob.intensity_gradient(anchors, self.params.peak)
        mags = np.maximum(0.0, np.einsum('ij,ij->i', grad, normals))
        return SequenceEntry(contour, GradientProfile(mags), contour.centroid(), frame)

    def _advance(self, blob: Blob) -> Blob:
        return Blob(blob.blob_id, blob.cx, blob.cy - blob.speed(self.params), blob.r,
                    blob.e + self.params.elongation_rate)

    def _split(self, blob: Blob, next_id: int) -> List[Blob]:
        head = Blob(next_id, blob.cx, blob.cy, 0.75 * blob.r)
        r_tail = 0.45 * blob.r
        tail = Blob(next_id + 1, blob.cx, blob.cy + blob.r * blob.e - r_tail, r_tail)
        return [head, tail]

    @staticmethod
    def _merge(a: Blob, b: Blob, new_id: int) -> Blob:
        area_a, area_b = a.area(), b.area()
        total = area_a + area_b
        cx = (a.cx * area_a + b.cx * area_b) / total
        cy = (a.cy * area_a + b.cy * area_b) / total
        return Blob(new_id, cx, cy, float(np.sqrt(total / np.pi)))

    def generate(self, seed: int, blobs: Optional[List[Blob]] = None) -> SynthResult:
        """
        Generate one sequence.

        Args:
            seed: Seed for placement and sensor noise
            blobs: Initial drops; random placement when omitted

        Returns:
            SynthResult with frames, ground-truth sequences and events
        """
        rng = np.random.default_rng(seed)
        blobs = [Blob(**asdict(b)) for b in blobs] if blobs is not None else self.random_blobs(rng)
        next_id = max((b.blob_id for b in blobs), default=-1) + 1

        tracks: Dict[int, TrackedSequence] = {b.blob_id: TrackedSequence(b.blob_id) for b in blobs}
        recording = {b.blob_id: True for b in blobs}
        frames: List[Frame] = []
        events: List[SynthEvent] = []

        for t in range(self.params.n_frames):
            frames.append(self.render(blobs, t, rng))
            for blob in blobs:
                if not recording[blob.blob_id]:
                    continue
                if self._inside_view(blob):
                    tracks[blob.blob_id].entries.append(self.ground_truth(blob, t))
                else:
                    recording[blob.blob_id] = False
                    tracks[blob.blob_id].terminal_event = 'leaves_view'

            if t == self.params.n_frames - 1:
                break

            moved: List[Blob] = []
            for blob in blobs:
                nxt = self._advance(blob)
                if nxt.e > self.params.split_elongation and recording[blob.blob_id]:
                    children = self._split(nxt, next_id)
                    next_id += 2
                    parent = tracks[blob.blob_id]
                    parent.terminal_event = 'split'
                    parent.split_frame = len(parent.entries) - 1
                    parent.children = [c.blob_id for c in children]
                    recording[blob.blob_id] = False
                    for child in children:
                        tracks[child.blob_id] = TrackedSequence(child.blob_id, parents=[blob.blob_id])
                        recording[child.blob_id] = True
                    events.append(SynthEvent(t, 'split', [blob.blob_id], parent.children))
                    moved.extend(children)
                elif self._visible(nxt):
                    moved.append(nxt)
                elif recording[blob.blob_id]:
                    recording[blob.blob_id] = False
                    tracks[blob.blob_id].terminal_event = 'leaves_view'

            blobs = self._resolve_merges(moved, t, tracks, recording, events, next_id)
            next_id = max([next_id] + [b.blob_id + 1 for b in blobs])

        result = SynthResult(frames, [s for s in sorted(tracks.values(), key=lambda s: s.seq_id) if s.entries],
                             events)
        logger.info(f"Generated {len(frames)} frames, {len(result.sequences)} ground-truth sequences, "
                    f"{sum(e.kind == 'split' for e in events)} splits, {sum(e.kind == 'merge' for e in events)} merges")
        return result

    def _resolve_merges(self, blobs: List[Blob], t: int, tracks: Dict[int, TrackedSequence],
                        recording: Dict[int, bool], events: List[SynthEvent], next_id: int) -> List[Blob]:
        blobs = sorted(blobs, key=lambda b: b.blob_id)
        merged = True
        while merged:
            merged = False
            for i in range(len(blobs)):
                for j in range(i + 1, len(blobs)):
                    a, b = blobs[i], blobs[j]
                    if not a.polygon().intersects(b.polygon()):
                        continue
                    child = self._merge(a, b, next_id)
                    next_id += 1
                    for parent in (a, b):
                        if recording.get(parent.blob_id):
                            tracks[parent.blob_id].terminal_event = 'merged'
                            tracks[parent.blob_id].children = [child.blob_id]
                        recording[parent.blob_id] = False
                    tracks[child.blob_id] = TrackedSequence(child.blob_id, parents=[a.blob_id, b.blob_id])
                    recording[child.blob_id] = True
                    events.append(SynthEvent(t, 'merge', [a.blob_id, b.blob_id], [child.blob_id]))
                    blobs = [x for x in blobs if x not in (a, b)] + [child]
                    merged = True
                    break
                if merged:
                    break
        return blobs


def write_sequence(result: SynthResult, directory: Union[str, Path]) -> Path:
    """
    Write one generated sequence: its frames and the ground-truth tracks.

    Args:
        result: Generated frames and tracks
        directory: Sequence directory, created if missing

    Returns:
        The sequence directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for frame in result.frames:
        write_frame(frame, directory / FRAME_PATTERN.format(frame.timestamp))
    save_tracks(result.sequences, directory / TRACKS_FILE)
    return directory


def synth_generate(params: SynthParams, seed: int, out_dir: Optional[Union[str, Path]] = None) -> List[SynthResult]:
    """
    Generate ``params.n_sequences`` independent sequences.

    When ``out_dir`` is given, each sequence is written to seq_%03d/ and a
    manifest.json listing them is written alongside.

    Raises:
        InvalidParams: If the parameters fail validation
    """
    generator = SynthGenerator(params)
    seeds = np.random.SeedSequence(seed).spawn(params.n_sequences)
    results = [generator.generate(int(s.generate_state(1)[0])) for s in seeds]

    if out_dir is not None:
        out_dir = Path(out_dir)
        names = []
        for k, result in enumerate(results):
            name = f"seq_{k:03d}"
            write_sequence(result, out_dir / name)
            names.append(name)
        manifest = {'format': MANIFEST_FORMAT, 'seed': seed, 'params': asdict(params), 'sequences': names}
        with open(out_dir / 'manifest.json', 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2)
        logger.info(f"Wrote {len(names)} sequences and manifest to {out_dir}")
    return results


def load_manifest(path: Union[str, Path]) -> Dict:
    """
    Read a generator manifest.

    Raises:
        FileNotFoundError: If the manifest does not exist
        InvalidParams: If the format tag is wrong
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    if manifest.get('format') != MANIFEST_FORMAT:
        raise InvalidParams(f"{path}: expected format '{MANIFEST_FORMAT}'")
    return manifest
