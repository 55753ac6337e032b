"""Tests for epipolar geometry, triangulation and calibration files."""

import json

import numpy as np
import pytest

from sceneflow_mcp.geometry import (
    CalibrationError,
    CameraCalib,
    DegenerateGeometryError,
    TriangulationError,
    epipolar_angles,
    epipolar_direction,
    fundamental_from_projections,
    homogeneous,
    load_calibration,
    project,
    rig_frame,
    sampson_cost,
    save_calibration,
    scale_fundamental,
    triangulate_dlt,
    triangulate_dlt_batch,
)


def _rotation(yaw_degrees):
    a = np.radians(yaw_degrees)
    return np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])


@pytest.fixture
def wide_rig():
    """Rig with a 20 degree convergent second camera."""
    K = np.array([[60.0, 0.0, 32.0], [0.0, 60.0, 24.0], [0.0, 0.0, 1.0]])
    cam1 = CameraCalib(K=K, R=np.eye(3), t=np.zeros(3))
    R2 = _rotation(20.0)
    centre = np.array([1.0, 0.0, 0.2])
    cam2 = CameraCalib(K=K, R=R2, t=-R2 @ centre)
    return rig_frame(cam1, cam2)


class TestSampson:
    """Test cases for the Sampson distance."""

    def test_worked_example(self, rectified_F):
        """One row of disagreement over a unit denominator pair gives 0.5."""
        cost, degenerate = sampson_cost(rectified_F, (10, 5), (14, 6), 1.0)

        assert not degenerate
        assert cost == pytest.approx(0.5)

    def test_on_epipolar_line(self, rectified_F):
        """A point on the epipolar line costs nothing."""
        cost, _ = sampson_cost(rectified_F, (10, 5), (3, 5))

        assert cost == pytest.approx(0.0)

    def test_zero_weight(self, rectified_F):
        """w_E = 0 turns the term off."""
        cost, _ = sampson_cost(rectified_F, (10, 5), (14, 9), 0.0)

        assert cost == 0.0

    def test_degenerate_denominator(self):
        """A zero F reports a degenerate pair."""
        cost, degenerate = sampson_cost(np.zeros((3, 3)), (1, 1), (2, 2))

        assert degenerate
        assert cost == 0.0


class TestEpipolarLines:
    """Test cases for epipolar directions and orientation maps."""

    def test_rectified_direction(self, rectified_F):
        """Rectified rigs have horizontal epipolar lines."""
        direction = epipolar_direction(rectified_F, (12, 7), side=2)

        np.testing.assert_allclose(direction, [1.0, 0.0], atol=1e-12)

    def test_unit_norm(self, wide_rig):
        """Directions are unit vectors."""
        direction = epipolar_direction(wide_rig.F, (5, 40), side=1)

        assert np.linalg.norm(direction) == pytest.approx(1.0)

    def test_epipole_rejected(self):
        """The epipole has no epipolar line."""
        forward_motion = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])

        with pytest.raises(DegenerateGeometryError):
            epipolar_direction(forward_motion, (0.0, 0.0), side=2)

    def test_rectified_angles_zero(self, rectified_F):
        """Orientation maps of a rectified rig are zero."""
        angles = epipolar_angles(rectified_F, 10, 8, image=1)

        np.testing.assert_allclose(angles, 0.0, atol=1e-12)

    def test_angles_follow_lines(self, wide_rig):
        """The map of image 2 matches the direction of F x through projected points."""
        angles = epipolar_angles(wide_rig.F, 64, 48, image=2)
        X = np.array([0.3, -0.1, 4.0])
        y = project(wide_rig.cam2.P, X)
        x = project(wide_rig.cam1.P, X)
        direction = epipolar_direction(wide_rig.F, x, side=2)
        col, row = int(round(y[0])), int(round(y[1]))

        expected = np.arctan2(direction[1], direction[0])
        assert angles[row, col] == pytest.approx(expected, abs=0.05)


class TestTriangulation:
    """Test cases for DLT triangulation."""

    def test_projection_oracle(self, wide_rig):
        """Exact projections triangulate back to the point."""
        X = np.array([0.4, -0.3, 5.0])
        x = project(wide_rig.cam1.P, X)
        y = project(wide_rig.cam2.P, X)

        np.testing.assert_allclose(triangulate_dlt(wide_rig.cam1.P, wide_rig.cam2.P, x, y), X, atol=1e-6)

    def test_identical_rays(self, wide_rig):
        """Two identical cameras cannot triangulate."""
        P = wide_rig.cam1.P

        with pytest.raises(TriangulationError):
            triangulate_dlt(P, P, (10.0, 12.0), (10.0, 12.0))

    def test_perturbation_is_continuous(self, wide_rig):
        """Small pixel noise moves the point a little."""
        X = np.array([0.1, 0.2, 4.0])
        x = project(wide_rig.cam1.P, X)
        y = project(wide_rig.cam2.P, X)
        moved = triangulate_dlt(wide_rig.cam1.P, wide_rig.cam2.P, x + [0.01, 0.0], y)

        assert np.linalg.norm(moved - X) < 0.01

    def test_batch_matches_single(self, wide_rig):
        """The vectorised variant agrees with the scalar one."""
        points = np.array([[0.0, 0.0, 3.0], [0.5, 0.2, 6.0], [-0.4, 0.1, 4.5]])
        xs = project(wide_rig.cam1.P, points)
        ys = project(wide_rig.cam2.P, points)

        batch, valid = triangulate_dlt_batch(wide_rig.cam1.P, wide_rig.cam2.P, xs, ys)

        assert valid.all()
        np.testing.assert_allclose(batch, points, atol=1e-6)


class TestFundamental:
    """Test cases for F derived from projections."""

    def test_epipolar_constraint(self, wide_rig):
        """Projected correspondences satisfy y^T F x = 0."""
        rng = np.random.default_rng(2)
        points = np.column_stack([rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20), rng.uniform(3, 8, 20)])
        xs = project(wide_rig.cam1.P, points)
        ys = project(wide_rig.cam2.P, points)

        for x, y in zip(xs, ys):
            assert homogeneous(y) @ wide_rig.F @ homogeneous(x) == pytest.approx(0.0, abs=1e-9)

    def test_unit_frobenius_norm(self, wide_rig):
        """F is normalised."""
        assert np.linalg.norm(wide_rig.F) == pytest.approx(1.0)

    def test_shared_centre(self):
        """Cameras with one centre have no F."""
        K = np.eye(3)
        P = K @ np.hstack([np.eye(3), np.zeros((3, 1))])

        with pytest.raises(DegenerateGeometryError):
            fundamental_from_projections(P, P)

    def test_scaled_fundamental(self, wide_rig):
        """Scaling F keeps the constraint on scaled points."""
        X = np.array([0.2, -0.2, 5.0])
        x = project(wide_rig.cam1.P, X)
        y = project(wide_rig.cam2.P, X)
        sx, sy = 0.5, 0.5

        def scale(p):
            return np.array([(p[0] + 0.5) * sx - 0.5, (p[1] + 0.5) * sy - 0.5])

        F_small = scale_fundamental(wide_rig.F, sx, sy)

        residual = homogeneous(scale(y)) @ F_small @ homogeneous(scale(x))
        assert residual == pytest.approx(0.0, abs=1e-9)


class TestCalibrationFiles:
    """Test cases for calibration JSON."""

    def test_round_trip(self, tmp_path, wide_rig):
        """A two-frame document round trips."""
        path = tmp_path / "calibration.json"
        save_calibration(path, [wide_rig, wide_rig])

        frames = load_calibration(path, expected_frames=2)

        assert len(frames) == 2
        np.testing.assert_allclose(frames[1].cam2.P, wide_rig.cam2.P)
        np.testing.assert_allclose(frames[0].F, wide_rig.F)

    def test_derives_missing_F(self, tmp_path, wide_rig):
        """F is derived when the file omits it."""
        path = tmp_path / "calibration.json"
        save_calibration(path, [wide_rig], include_f=False)
        assert "F" not in json.loads(path.read_text())["frames"][0]

        frame = load_calibration(path)[0]
        X = np.array([0.3, 0.1, 4.0])
        x = project(frame.cam1.P, X)
        y = project(frame.cam2.P, X)
        assert homogeneous(y) @ frame.F @ homogeneous(x) == pytest.approx(0.0, abs=1e-9)

    def test_reflection_rejected(self, tmp_path, wide_rig):
        """det(R) = -1 is not a rotation."""
        path = tmp_path / "calibration.json"
        save_calibration(path, [wide_rig])
        document = json.loads(path.read_text())
        document["frames"][0]["cam2"]["R"] = [1, 0, 0, 0, 1, 0, 0, 0, -1]
        path.write_text(json.dumps(document))

        with pytest.raises(CalibrationError):
            load_calibration(path)

    def test_frame_count_mismatch(self, tmp_path, wide_rig):
        """The frame count must match when given."""
        path = tmp_path / "calibration.json"
        save_calibration(path, [wide_rig])

        with pytest.raises(CalibrationError):
            load_calibration(path, expected_frames=3)

    def test_schema_violation(self, tmp_path):
        """Short matrices are rejected."""
        path = tmp_path / "calibration.json"
        path.write_text(json.dumps({"frames": [{"cam1": {"K": [1], "R": [1], "t": [0]}}]}))

        with pytest.raises(CalibrationError):
            load_calibration(path)
