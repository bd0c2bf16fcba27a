"""
Unit tests for frame-to-frame tracking and sequence extraction.
"""

import numpy as np
import pytest

from src.geometry import circle_contour
from src.imaging import Frame, GradientProfile, pixel_to_scene
from src.tracking import (
    AmbiguousTopology,
    InvalidSequence,
    SequenceEntry,
    TrackedSequence,
    extract_sequences,
    load_tracks,
    overlap_score,
    save_tracks,
    track,
)


def render_discs(centers, radius=0.12, size=64, timestamp=0) -> Frame:
    """Bright domes on a dark background, one per centre."""
    rows, cols = np.mgrid[0:size, 0:size]
    pts = pixel_to_scene(cols.ravel(), rows.ravel(), size)
    image = np.full(size * size, 20.0)
    for c in centers:
        rho2 = np.sum((pts - np.asarray(c)) ** 2, axis=1) / radius ** 2
        image = np.maximum(image, np.where(rho2 < 1.0, 60.0 + 160.0 * (1.0 - rho2), 20.0))
    return Frame(np.rint(image).reshape(size, size).astype(np.uint8), timestamp)


class TestTrack:
    """Test correspondence classification between two frames."""

    def test_continue(self):
        c = circle_contour((0.5, 0.5), 0.1)
        events = track([c], [c.translated([0.0, -0.02])])
        assert [(e.kind, e.prev, e.cur) for e in events] == [('continue', (0,), (0,))]

    def test_merge(self):
        prev = [circle_contour((0.42, 0.5), 0.06), circle_contour((0.58, 0.5), 0.06)]
        cur = [circle_contour((0.5, 0.5), 0.15)]
        events = track(prev, cur)
        assert [(e.kind, e.prev, e.cur) for e in events] == [('merge', (0, 1), (0,))]

    def test_split(self):
        prev = [circle_contour((0.5, 0.5), 0.15)]
        cur = [circle_contour((0.42, 0.5), 0.06), circle_contour((0.58, 0.5), 0.06)]
        events = track(prev, cur)
        assert [(e.kind, e.prev, e.cur) for e in events] == [('split', (0,), (0, 1))]

    def test_new_and_ends(self):
        prev = [circle_contour((0.2, 0.8), 0.05)]
        cur = [circle_contour((0.8, 0.2), 0.05)]
        kinds = sorted(e.kind for e in track(prev, cur))
        assert kinds == ['ends', 'new']

    def test_empty_frames(self):
        assert track([], []) == []

    def test_three_way_overlap_is_ambiguous(self):
        """Test that a chained group of four contours is refused with its frame."""
        prev = [circle_contour((0.3, 0.5), 0.1), circle_contour((0.5, 0.5), 0.1)]
        cur = [circle_contour((0.4, 0.5), 0.1), circle_contour((0.6, 0.5), 0.1)]
        with pytest.raises(AmbiguousTopology) as excinfo:
            track(prev, cur, frame_index=7)
        assert excinfo.value.frame_index == 7
        assert "frame 7" in str(excinfo.value)

    def test_overlap_score(self):
        a = circle_contour((0.5, 0.5), 0.1)
        assert overlap_score(a, a.translated([0.5, 0.0])) == 0
        assert overlap_score(a, a) == 256


class TestExtractSequences:
    """Test the full extraction pipeline on rendered frames."""

    def test_single_moving_drop(self):
        """Test that a drop sliding down yields one sequence with every frame."""
        frames = [render_discs([(0.5, 0.7 - 0.03 * t)], timestamp=t) for t in range(5)]
        sequences, tallies = extract_sequences(frames)
        assert len(sequences) == 1
        seq = sequences[0]
        assert len(seq) == 5
        assert [e.frame for e in seq.entries] == [0, 1, 2, 3, 4]
        assert seq.terminal_event == 'ends'
        assert tallies['continue'] == 4
        centres = np.array([e.center for e in seq.entries])
        assert np.all(np.diff(centres[:, 1]) < 0)

    def test_empty_frames_give_no_sequences(self):
        frames = [Frame(np.full((32, 32), 10, dtype=np.uint8), t) for t in range(3)]
        sequences, _ = extract_sequences(frames)
        assert sequences == []


class TestTrackedSequence:
    """Test sequence validation and storage."""

    def setup_method(self):
        c = circle_contour((0.5, 0.5), 0.1)
        self.entries = [SequenceEntry(c.translated([0, -0.01 * t]), GradientProfile.uniform(2.0),
                                      c.translated([0, -0.01 * t]).centroid(), t) for t in range(3)]

    def test_split_needs_frame(self):
        seq = TrackedSequence(0, self.entries, 'split')
        assert any("split_frame" in e for e in seq.validate())

    def test_unknown_event(self):
        seq = TrackedSequence(0, self.entries, 'vanished')
        assert seq.validate()

    def test_save_load(self, tmp_path):
        seq = TrackedSequence(4, self.entries, 'split', split_frame=2, parents=[1], children=[5, 6])
        path = save_tracks([seq], tmp_path / "tracks.json")
        [restored] = load_tracks(path)
        assert restored.seq_id == 4
        assert restored.split_frame == 2
        assert restored.children == [5, 6]
        np.testing.assert_array_equal(restored.entries[1].contour.ctrl, seq.entries[1].contour.ctrl)

    def test_malformed_record(self):
        with pytest.raises(InvalidSequence):
            TrackedSequence.from_dict({'seq_id': 0, 'terminal_event': 'ends'})
