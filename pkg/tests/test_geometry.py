"""
Unit tests for the contour geometry module.
"""

import numpy as np
import pytest

from src.geometry import (
    N_CTRL,
    N_DENSE,
    Contour,
    ContourFormatError,
    DegenerateLoop,
    InsufficientSamples,
    InvalidContour,
    SplitConfig,
    StitchFailure,
    arc_length_between,
    arc_length_matrix,
    canonicalize,
    circle_contour,
    contour_from_text,
    contour_to_text,
    cut_at_chord,
    enclosed_area,
    fit_spline,
    inward_normals,
    load_contour,
    overlap_samples,
    point_in_contour,
    sample,
    save_contour,
    union_outline,
)


class TestContour:
    """Test the contour value type."""

    def test_rejects_wrong_shape(self):
        """Test that anything but 52 control points is refused."""
        with pytest.raises(InvalidContour):
            Contour(np.zeros((51, 2)))

    def test_rejects_non_finite(self):
        """Test that NaN coordinates are refused."""
        ctrl = np.zeros((N_CTRL, 2))
        ctrl[3, 1] = np.nan
        with pytest.raises(InvalidContour):
            Contour(ctrl)

    def test_control_points_are_read_only(self, circle):
        """Test that contours cannot be mutated in place."""
        with pytest.raises(ValueError):
            circle.ctrl[0, 0] = 1.0

    def test_flat_layout(self, circle):
        """Test the [x..., y...] flattening and its inverse."""
        flat = circle.flat()
        assert flat.shape == (2 * N_CTRL,)
        np.testing.assert_array_equal(flat[:N_CTRL], circle.ctrl[:, 0])
        np.testing.assert_array_equal(Contour.from_flat(flat).ctrl, circle.ctrl)

    def test_dense_has_256_samples(self, circle):
        """Test the dense polyline size."""
        assert circle.dense.shape == (N_DENSE, 2)

    def test_scaled_area(self, circle):
        """Test that scaling by s multiplies the area by s squared."""
        scaled = circle.scaled(0.5, np.array([0.5, 0.5]))
        assert enclosed_area(scaled) == pytest.approx(0.25 * enclosed_area(circle), rel=1e-9)


class TestFitSpline:
    """Test least-squares spline fitting."""

    def test_circle_fit(self):
        """Test that a finely sampled circle is reproduced closely."""
        theta = np.linspace(0, 2 * np.pi, 400, endpoint=False)
        loop = np.column_stack([0.5 + 0.25 * np.cos(theta), 0.5 + 0.25 * np.sin(theta)])
        fit = fit_spline(loop)
        assert fit.residual < 1e-4
        radii = np.linalg.norm(fit.contour.dense - 0.5, axis=1)
        assert np.max(np.abs(radii - 0.25)) < 1e-3

    def test_result_is_canonical(self):
        """Test clockwise orientation and topmost start for a counter-clockwise input."""
        theta = np.linspace(0, 2 * np.pi, 300, endpoint=False)
        loop = np.column_stack([0.5 + 0.2 * np.cos(theta), 0.5 + 0.1 * np.sin(theta)])
        contour = fit_spline(loop).contour
        assert contour.is_canonical()
        assert contour.signed_area < 0
        assert np.argmax(contour.ctrl[:, 1]) == 0

    def test_refit_of_own_samples(self, circle):
        """Test that fitting a contour's own parameter-uniform samples returns it."""
        refit = fit_spline(sample(circle, N_DENSE)).contour
        np.testing.assert_allclose(refit.ctrl, circle.ctrl, atol=1e-9)

    def test_too_few_samples(self):
        """Test that fewer than 52 samples are refused."""
        theta = np.linspace(0, 2 * np.pi, 40, endpoint=False)
        with pytest.raises(InsufficientSamples):
            fit_spline(np.column_stack([np.cos(theta), np.sin(theta)]))

    def test_collinear_samples(self):
        """Test that a loop enclosing no area is refused."""
        t = np.linspace(0.0, 1.0, 60)
        loop = np.column_stack([t, 2.0 * t])
        with pytest.raises(DegenerateLoop):
            fit_spline(loop)


class TestCanonicalOrder:
    """Test canonicalization of raw control points."""

    def test_reversal_and_rotation_invariant(self, make_peanut):
        """Test that reversed or rotated control points give the same contour."""
        ctrl = make_peanut((0.4, 0.6), 0.8).ctrl
        reference = canonicalize(ctrl)
        np.testing.assert_array_equal(canonicalize(ctrl[::-1]).ctrl, reference.ctrl)
        np.testing.assert_array_equal(canonicalize(np.roll(ctrl, 17, axis=0)).ctrl, reference.ctrl)

    def test_wrong_count(self):
        """Test that canonicalize checks its input shape."""
        with pytest.raises(InvalidContour):
            canonicalize(np.zeros((10, 2)))


class TestQueries:
    """Test area, normals, arc lengths and containment."""

    def test_circle_area(self, circle):
        """Test the shoelace area of a circle."""
        assert enclosed_area(circle) == pytest.approx(np.pi * 0.25 ** 2, rel=1e-3)

    def test_normals_point_inside(self, peanut):
        """Test that stepping along the normal enters the contour."""
        anchors = peanut.anchor_points()
        normals = inward_normals(peanut)
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-12)
        for p, n in zip(anchors, normals):
            assert point_in_contour(peanut, p + 1e-3 * n)
            assert not point_in_contour(peanut, p - 1e-3 * n)

    def test_arc_length_properties(self, peanut):
        """Test symmetry and the half-perimeter bound of the shorter arc."""
        matrix = arc_length_matrix(peanut)
        np.testing.assert_allclose(matrix, matrix.T)
        assert np.all(np.diag(matrix) == 0.0)
        assert matrix.max() <= peanut.perimeter / 2 + 1e-12
        assert arc_length_between(peanut, 3, 40) == pytest.approx(matrix[3, 40])

    def test_arc_length_index_check(self, circle):
        """Test that control indices outside [0, 52) are refused."""
        with pytest.raises(IndexError):
            arc_length_between(circle, 0, N_CTRL)

    def test_point_in_contour(self, circle):
        """Test containment of the centre and of a far point."""
        assert point_in_contour(circle, np.array([0.5, 0.5]))
        assert not point_in_contour(circle, np.array([0.9, 0.9]))

    def test_boundary_counts_as_inside(self, circle):
        """Test that dense samples themselves are inside."""
        assert point_in_contour(circle, circle.dense[10])

    def test_sample_sizes(self, circle):
        """Test uniform sampling sizes and the dense shortcut."""
        assert sample(circle, 100).shape == (100, 2)
        np.testing.assert_array_equal(sample(circle, N_DENSE), circle.dense)
        with pytest.raises(ValueError):
            sample(circle, 2)


class TestCutAndUnion:
    """Test chord cutting and outline stitching."""

    def test_cut_preserves_area(self, peanut):
        """Test that the two pieces of a cut add up to the parent area."""
        anchors = peanut.anchor_points()
        off_neck = np.abs(anchors[:, 0] - 0.5)
        top = int(np.argmin(np.where(anchors[:, 1] > 0.5, off_neck, np.inf)))
        bottom = int(np.argmin(np.where(anchors[:, 1] < 0.5, off_neck, np.inf)))
        first, second = cut_at_chord(peanut, top, bottom)
        areas = [enclosed_area(fit_spline(loop).contour) for loop in (first, second)]
        assert sum(areas) == pytest.approx(enclosed_area(peanut), rel=1e-2)
        assert areas[0] == pytest.approx(areas[1], rel=2e-2)

    def test_union_of_overlapping_circles(self):
        """Test that the union outline encloses more than either circle."""
        a = circle_contour((0.45, 0.5), 0.1)
        b = circle_contour((0.55, 0.5), 0.1)
        merged = fit_spline(union_outline(a, b)).contour
        area = enclosed_area(merged)
        assert enclosed_area(a) < area < enclosed_area(a) + enclosed_area(b)

    def test_union_of_disjoint_circles(self):
        """Test that stitching disjoint contours fails."""
        a = circle_contour((0.2, 0.5), 0.05)
        b = circle_contour((0.8, 0.5), 0.05)
        assert all(len(hits) == 0 for hits in overlap_samples(a, b))
        with pytest.raises(StitchFailure):
            union_outline(a, b)


class TestSplitConfig:
    """Test split constraint validation."""

    def test_defaults(self):
        cfg = SplitConfig()
        assert cfg.delta == -0.5
        assert cfg.min_separation == 6

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            SplitConfig(delta=1.5)
        with pytest.raises(ValueError):
            SplitConfig(min_separation=1)


class TestContourFiles:
    """Test the "contour v1" text format."""

    def test_save_load_exact(self, tmp_path, peanut):
        """Test that saved coordinates are restored bit for bit."""
        path = save_contour(peanut, tmp_path / "drop.txt")
        assert path.read_text().startswith("contour v1\n")
        np.testing.assert_array_equal(load_contour(path).ctrl, peanut.ctrl)

    def test_missing_header(self, circle):
        """Test that text without the header is refused."""
        body = contour_to_text(circle).split("\n", 1)[1]
        with pytest.raises(ContourFormatError):
            contour_from_text(body)

    def test_wrong_point_count(self, circle):
        """Test that a truncated body is refused."""
        text = "\n".join(contour_to_text(circle).splitlines()[:30])
        with pytest.raises(ContourFormatError):
            contour_from_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_contour(tmp_path / "absent.txt")
