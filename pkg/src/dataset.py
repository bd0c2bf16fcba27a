"""
Dataset module for the Rivulet drop simulator.
Builds sliding-window training samples from tracked sequences.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from src.geometry import N_CTRL, Contour
from src.imaging import DataPrepError
from src.tracking import TrackedSequence


logger = logging.getLogger(__name__)


DATASET_FORMAT = "nd-dataset v1"
NORMALIZATION = "coords minus last-input centroid; centres minus first-input centre; unit-domain scale"
CONTOUR_DIM = 2 * N_CTRL
FEATURE_DIM = CONTOUR_DIM + 2


class WindowTooLong(DataPrepError):
    """Raised when a sequence is shorter than K+1 entries."""
    pass


class InvalidDataset(DataPrepError, ValueError):
    """Raised when a dataset file is malformed or violates feature bounds."""
    pass


@dataclass
class TrainingSample:
    """One K-step window and its step-K+1 targets."""

    seq_id: int
    t0: int
    inputs: np.ndarray        # (K, 106)
    target: np.ndarray        # (106,)
    grad_inputs: np.ndarray   # (K, 52)
    grad_target: np.ndarray   # (52,)
    shape: np.ndarray         # (104,)
    breakage: bool

    def to_dict(self) -> Dict:
        return {
            'seq_id': self.seq_id,
            't0': self.t0,
            'inputs': self.inputs.tolist(),
            'target': self.target.tolist(),
            'grad_inputs': self.grad_inputs.tolist(),
            'grad_target': self.grad_target.tolist(),
            'shape': self.shape.tolist(),
            'breakage': bool(self.breakage),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'TrainingSample':
        return cls(
            seq_id=int(data['seq_id']),
            t0=int(data['t0']),
            inputs=np.array(data['inputs'], dtype=float),
            target=np.array(data['target'], dtype=float),
            grad_inputs=np.array(data['grad_inputs'], dtype=float),
            grad_target=np.array(data['grad_target'], dtype=float),
            shape=np.array(data['shape'], dtype=float),
            breakage=bool(data['breakage']),
        )


@dataclass
class Dataset:
    """Training samples plus the header describing their encoding."""

    K: int
    gradient_scale: float = 1.0
    samples: List[TrainingSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def header(self) -> Dict:
        return {
            'format': DATASET_FORMAT,
            'K': self.K,
            'normalization': NORMALIZATION,
            'gradient_scale': self.gradient_scale,
            'count': len(self.samples),
        }

    def contour_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Inputs (n, K, 106) and targets (n, 106) for the contour net."""
        if not self.samples:
            return np.zeros((0, self.K, FEATURE_DIM)), np.zeros((0, FEATURE_DIM))
        return (np.stack([s.inputs for s in self.samples]),
                np.stack([s.target for s in self.samples]))

    def gradient_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.samples:
            return np.zeros((0, self.K, N_CTRL)), np.zeros((0, N_CTRL))
        return (np.stack([s.grad_inputs for s in self.samples]),
                np.stack([s.grad_target for s in self.samples]))

    def breakage_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.samples:
            return np.zeros((0, CONTOUR_DIM)), np.zeros(0)
        return (np.stack([s.shape for s in self.samples]),
                np.array([1.0 if s.breakage else 0.0 for s in self.samples]))

    def positives(self) -> int:
        return sum(1 for s in self.samples if s.breakage)


def encode_window(contours: Sequence[Contour], centers: Sequence[np.ndarray]) -> np.ndarray:
    """
    Network input features for K consecutive states.

    Coordinates are taken relative to the newest centre, centres relative to
    the oldest one.

    Returns:
        Array of shape (K, 106) laid out as [x_0..x_51, y_0..y_51, cx, cy]
    """
    centers = np.asarray(centers, dtype=float)
    ref = centers[-1]
    rows = []
    for contour, center in zip(contours, centers):
        rel = contour.ctrl - ref
        rows.append(np.concatenate([rel[:, 0], rel[:, 1], center - centers[0]]))
    return np.array(rows)


def encode_target(contour: Contour, center: np.ndarray, centers: Sequence[np.ndarray]) -> np.ndarray:
    centers = np.asarray(centers, dtype=float)
    rel = contour.ctrl - centers[-1]
    return np.concatenate([rel[:, 0], rel[:, 1], np.asarray(center, dtype=float) - centers[0]])


def decode_target(vector: np.ndarray, centers: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Invert ``encode_target``.

    Returns:
        (raw control points of shape (52, 2), absolute centre)
    """
    vector = np.asarray(vector, dtype=float)
    centers = np.asarray(centers, dtype=float)
    ctrl = np.column_stack([vector[:N_CTRL], vector[N_CTRL:CONTOUR_DIM]]) + centers[-1]
    return ctrl, centers[0] + vector[CONTOUR_DIM:FEATURE_DIM]


def encode_shape(contour: Contour) -> np.ndarray:
    """Mean-centred control coordinates, the breakage net input."""
    rel = contour.ctrl - contour.control_mean()
    return np.concatenate([rel[:, 0], rel[:, 1]])


def sequence_windows(seq: TrackedSequence, K: int, gradient_scale: float = 1.0) -> List[TrainingSample]:
    """
    Sliding windows over one sequence.

    Raises:
        WindowTooLong: If the sequence has fewer than K+1 entries
    """
    if len(seq) < K + 1:
        raise WindowTooLong(f"Sequence {seq.seq_id} has {len(seq)} entries, needs {K + 1}")

    samples = []
    for t0 in range(len(seq) - K):
        window = seq.entries[t0:t0 + K]
        nxt = seq.entries[t0 + K]
        centers = [e.center for e in window]
        samples.append(TrainingSample(
            seq_id=seq.seq_id,
            t0=t0,
            inputs=encode_window([e.contour for e in window], centers),
            target=encode_target(nxt.contour, nxt.center, centers),
            grad_inputs=np.array([e.profile.mags for e in window]) / gradient_scale,
            grad_target=nxt.profile.mags / gradient_scale,
            shape=encode_shape(nxt.contour),
            breakage=seq.terminal_event == 'split' and seq.split_frame == t0 + K,
        ))
    return samples


def build_dataset(sequences: Sequence[TrackedSequence], K: int, workers: int = 1) -> Dataset:
    """
    Sliding-window dataset over all sequences long enough for K.

    Records are ordered by (sequence id, window start) whatever the
    number of workers.

    Args:
        sequences: Tracked sequences
        K: Window length
        workers: Threads used to encode sequences

    Returns:
        Dataset with sum(max(0, L - K)) samples
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")

    mags = [e.profile.mags.max() for s in sequences for e in s.entries]
    peak = float(max(mags)) if mags else 0.0
    gradient_scale = peak if peak > 0 else 1.0

    def encode(seq: TrackedSequence) -> List[TrainingSample]:
        try:
            return sequence_windows(seq, K, gradient_scale)
        except WindowTooLong as e:
            logger.warning(f"Skipping sequence: {e}")
            return []

    ordered = sorted(sequences, key=lambda s: s.seq_id)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(encode, ordered))
    else:
        chunks = [encode(s) for s in ordered]

    dataset = Dataset(K, gradient_scale, [s for chunk in chunks for s in chunk])
    logger.info(f"Built dataset: {len(dataset)} samples, {dataset.positives()} breakage positives, K={K}")
    return dataset


def validate_sample(sample: TrainingSample, K: int) -> List[str]:
    errors = []
    if sample.inputs.shape != (K, FEATURE_DIM):
        errors.append(f"inputs shape {sample.inputs.shape} != ({K}, {FEATURE_DIM})")
    if sample.target.shape != (FEATURE_DIM,):
        errors.append(f"target shape {sample.target.shape}")
    if sample.grad_target.shape != (N_CTRL,) or sample.grad_inputs.shape != (K, N_CTRL):
        errors.append("gradient arrays have the wrong shape")
    if sample.inputs.size and np.abs(sample.inputs).max() > 1.0:
        errors.append("input coordinate features outside [-1, 1]")
    if np.any(sample.grad_target < 0) or np.any(sample.grad_inputs < 0):
        errors.append("negative gradient magnitudes")
    return errors


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Write the JSON-lines dataset: one header line, then one record per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(dataset.header()) + "\n")
        for sample in dataset.samples:
            f.write(json.dumps(sample.to_dict()) + "\n")
    logger.info(f"Dataset saved: {path} ({len(dataset)} records)")
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    """
    Read and validate a dataset file.

    Raises:
        FileNotFoundError: If the file does not exist
        InvalidDataset: On a wrong format header, inconsistent K, or
            features outside [-1, 1]
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")

    with open(path, 'r', encoding='utf-8') as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise InvalidDataset(f"{path} is empty")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise InvalidDataset(f"{path}: unreadable header: {e}") from e
    if header.get('format') != DATASET_FORMAT:
        raise InvalidDataset(f"{path}: expected format '{DATASET_FORMAT}', got '{header.get('format')}'")

    K = int(header['K'])
    dataset = Dataset(K, float(header.get('gradient_scale', 1.0)))
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            sample = TrainingSample.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise InvalidDataset(f"{path}:{lineno}: malformed record: {e}") from e
        errors = validate_sample(sample, K)
        if errors:
            raise InvalidDataset(f"{path}:{lineno}: " + "; ".join(errors))
        dataset.samples.append(sample)

    logger.info(f"Loaded dataset {path}: {len(dataset)} samples, K={K}")
    return dataset
