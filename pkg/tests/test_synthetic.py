"""Tests for synthetic scene rendering and dataset files."""

import numpy as np
import pytest

from sceneflow_mcp.geometry import load_calibration
from sceneflow_mcp.imagecore import invalid_mask, read_flo, read_image, read_mask, read_pfm
from sceneflow_mcp.models import ColourTransformModel, SceneGeometry, SyntheticSpec
from sceneflow_mcp.synthetic import (
    SyntheticSceneError,
    build_rigs,
    ground_truth_files,
    make_synthetic,
    render_synthetic,
)


class TestRigs:
    """Test cases for the synthetic camera rig."""

    def test_baseline_and_principal_point(self, plane_spec):
        """Camera 2 sits one baseline along x; K is centred."""
        rig = build_rigs(plane_spec)[0]

        np.testing.assert_allclose(rig.cam2.centre, [0.2, 0.0, 0.0], atol=1e-12)
        assert rig.cam1.K[0, 2] == pytest.approx(19.5)
        assert rig.cam1.K[1, 2] == pytest.approx(14.5)

    def test_one_rig_per_frame(self, plane_spec):
        """Every frame gets a calibration."""
        assert len(build_rigs(plane_spec.model_copy(update={"num_frames": 3}))) == 3


class TestPlaneScene:
    """Test cases for the static fronto-parallel plane."""

    def test_disparity(self, plane_spec):
        """Disparity is f B / Z = 60 * 0.2 / 4 = 3 pixels to the left."""
        scene = render_synthetic(plane_spec)

        np.testing.assert_allclose(scene.disparity[0], 3.0, atol=1e-5)
        np.testing.assert_allclose(scene.stereo[0][:, :, 0], -3.0, atol=1e-5)
        np.testing.assert_allclose(scene.depth[0], 4.0, atol=1e-5)

    def test_static_temporal_flows(self, plane_spec):
        """Nothing moves, so u1, u3 and the second view's flow vanish."""
        scene = render_synthetic(plane_spec)

        np.testing.assert_allclose(scene.u1[0], 0.0, atol=1e-6)
        np.testing.assert_allclose(scene.u3[0], 0.0, atol=1e-6)
        np.testing.assert_allclose(scene.flow2[0], 0.0, atol=1e-6)
        np.testing.assert_allclose(scene.motion[0], 0.0)

    def test_left_border_occluded(self, plane_spec):
        """Pixels whose match leaves camera 2 are occluded."""
        occluded = render_synthetic(plane_spec).stereo_occlusion[0]

        assert occluded[:, :3].all()
        assert not occluded[:, 4:].any()

    def test_reproducible(self, plane_spec):
        """Equal seeds render equal images."""
        a = render_synthetic(plane_spec)
        b = render_synthetic(plane_spec)

        np.testing.assert_array_equal(a.camera1[0], b.camera1[0])
        np.testing.assert_array_equal(a.camera2[1], b.camera2[1])

    def test_stereo_flow_valid_everywhere(self, plane_spec):
        """Stereo ground truth is defined even where occluded."""
        assert not invalid_mask(render_synthetic(plane_spec).stereo[0]).any()


class TestTwoLayerScene:
    """Test cases for the moving foreground layer."""

    def test_foreground_motion(self, two_layer_spec):
        """The centre moves f dX / Z = 60 * 0.05 / 2.5 = 1.2 pixels."""
        scene = render_synthetic(two_layer_spec)

        np.testing.assert_allclose(scene.u1[0][17, 23], [1.2, 0.0], atol=1e-4)
        assert scene.disparity[0][17, 23] == pytest.approx(4.8, abs=1e-4)
        np.testing.assert_allclose(scene.u1[0][0, 0], [0.0, 0.0], atol=1e-6)

    def test_foreground_occludes_background(self, two_layer_spec):
        """The near layer hides background from camera 2 away from the border."""
        scene = render_synthetic(two_layer_spec)

        assert scene.stereo_occlusion[0][:, 4:].any()
        assert np.all(scene.occlusion[0][scene.stereo_occlusion[0]])

    def test_layer_order_validated(self):
        """The foreground must be in front of the background."""
        with pytest.raises(ValueError):
            SyntheticSpec(geometry=SceneGeometry.TWO_LAYER, near_depth=5.0, plane_depth=4.0)

    def test_camera_facing_away(self, plane_spec):
        """Rays that miss the background are rejected."""
        spec = plane_spec.model_copy(update={"camera2_yaw_degrees": 100.0})

        with pytest.raises(SyntheticSceneError):
            render_synthetic(spec)


class TestContamination:
    """Test cases for the camera 2 colour transform."""

    def test_applied_to_camera2_only(self, plane_spec):
        """Contamination maps camera 2 colours and leaves camera 1 alone."""
        model = ColourTransformModel(A=[0.8, 0, 0, 0, 0.9, 0, 0, 0, 1.0], a=[0.05, 0.0, 0.0])
        clean = render_synthetic(plane_spec)
        dirty = render_synthetic(plane_spec.model_copy(update={"contamination": model}))

        np.testing.assert_array_equal(dirty.camera1[0], clean.camera1[0])
        expected = np.clip(clean.camera2[0] * np.array([0.8, 0.9, 1.0]) + np.array([0.05, 0.0, 0.0]), 0, 1)
        np.testing.assert_allclose(dirty.camera2[0], expected, atol=1e-6)


class TestDatasetFiles:
    """Test cases for the written dataset."""

    def test_layout(self, tmp_path, plane_spec):
        """Images, calibration, spec and ground truth land where expected."""
        make_synthetic(plane_spec, tmp_path)

        assert (tmp_path / "frames" / "cam1_0000.png").exists()
        assert (tmp_path / "frames" / "cam2_0001.png").exists()
        assert (tmp_path / "spec.json").exists()
        assert len(load_calibration(tmp_path / "calibration.json", expected_frames=2)) == 2
        files = ground_truth_files(tmp_path / "gt", 0)
        assert all(path.exists() for path in files.values())
        assert not (tmp_path / "gt" / "u1_0001.flo").exists()

    def test_contents(self, tmp_path, plane_spec):
        """Written files read back as the rendered arrays."""
        scene = make_synthetic(plane_spec, tmp_path)
        files = ground_truth_files(tmp_path / "gt", 0)

        np.testing.assert_array_equal(read_flo(files["stereo"]), scene.stereo[0])
        np.testing.assert_array_equal(read_pfm(files["depth"])[:, :, 0], scene.depth[0])
        np.testing.assert_array_equal(read_mask(files["occ_stereo"]), scene.stereo_occlusion[0])
        np.testing.assert_allclose(read_image(tmp_path / "frames" / "cam1_0000.png"), scene.camera1[0], atol=1.0 / 65535)

    def test_spec_saved(self, tmp_path, plane_spec):
        """The spec JSON reproduces the scene description."""
        make_synthetic(plane_spec, tmp_path)

        assert SyntheticSpec.model_validate_json((tmp_path / "spec.json").read_text()) == plane_spec
