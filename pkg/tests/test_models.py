"""Tests for Pydantic models."""

import json
import logging
from pathlib import Path

import pytest
from pydantic import ValidationError

from sceneflow_mcp.models import (
    ArtifactManifest,
    ColourTransformModel,
    DaisyParams,
    FillParams,
    MatchParams,
    PipelineConfig,
    SceneFlowParams,
    StageName,
)


class TestParameterModels:
    """Test cases for algorithm parameters."""

    def test_daisy_presets(self):
        """Test the stereo and flow descriptor footprints."""
        stereo = DaisyParams.stereo_preset()
        flow = DaisyParams.flow_preset()

        assert (stereo.radius, stereo.rings) == (10.0, 2)
        assert (flow.radius, flow.rings) == (15.0, 3)
        assert stereo.descriptor_length == (1 + 2 * 8) * 8

    def test_sceneflow_defaults(self):
        """Test the refinement defaults."""
        params = SceneFlowParams()

        assert params.alphas == (10.0, 10.0)
        assert params.betas == (31.0, 60.0, 200.0)
        assert params.eta == 0.9
        assert params.psi_epsilon == 1e-6
        assert params.intensity_scale == 255.0

    def test_fill_defaults(self):
        """Test occlusion and fill defaults."""
        params = FillParams()

        assert params.fb_threshold == 3.0
        assert params.lam == 5.0
        assert params.closing_radius == 0

    def test_window_fixed(self):
        """Test that only 3x3 matting windows are accepted."""
        with pytest.raises(ValidationError):
            FillParams(window=5)

    def test_particles_positive(self):
        """Test that at least one particle is required."""
        with pytest.raises(ValidationError):
            MatchParams(particles=0)

    def test_colour_transform_identity(self):
        """Test the default colour transform."""
        model = ColourTransformModel()

        assert model.A == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        assert model.a == [0.0, 0.0, 0.0]

    def test_colour_transform_length(self):
        """Test that a short matrix is rejected."""
        with pytest.raises(ValidationError):
            ColourTransformModel(A=[1.0, 0.0])


class TestPipelineConfig:
    """Test cases for the pipeline configuration."""

    def test_default_stages(self):
        """Test that every stage runs by default, in order."""
        assert PipelineConfig().stages == list(StageName)

    def test_stages_ordered(self):
        """Test that stages are deduplicated and sorted into execution order."""
        config = PipelineConfig(stages=["eval", "match", "sync", "match"])

        assert config.stages == [StageName.SYNC, StageName.MATCH, StageName.EVAL]

    def test_unknown_stage(self):
        """Test that unknown stage names are rejected."""
        with pytest.raises(ValidationError):
            PipelineConfig(stages=["render"])

    def test_frame_path(self, tmp_path):
        """Test frame path patterns resolve against the input directory."""
        config = PipelineConfig(input_dir=str(tmp_path))

        assert config.frame_path(2, 3) == tmp_path / "frames" / "cam2_0003.png"
        assert config.resolve("/abs/calib.json") == Path("/abs/calib.json")

    def test_validate_paths(self, tmp_path):
        """Test that missing inputs are listed."""
        config = PipelineConfig(input_dir=str(tmp_path))

        with pytest.raises(ValueError, match="cam1_0000.png"):
            config.validate_paths(2)

    def test_from_file_logs_overrides(self, tmp_path, caplog):
        """Test that changed constants are logged when a config is loaded."""
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 4, "sceneflow": {"alpha1": 5.0}}))

        with caplog.at_level(logging.INFO, logger="sceneflow_mcp.models"):
            config = PipelineConfig.from_file(str(path))

        assert config.seed == 4
        assert config.sceneflow.alpha1 == 5.0
        assert "Overriding sceneflow.alpha1: 10.0 -> 5.0" in caplog.text
        assert "alpha2" not in caplog.text


class TestArtifactManifest:
    """Test cases for the run manifest."""

    def test_add_relative_sorted(self, tmp_path):
        """Test that artifacts are stored relative, sorted and once."""
        manifest = ArtifactManifest(seed=0)

        manifest.add("match", tmp_path / "match" / "b.flo", tmp_path)
        manifest.add("match", tmp_path / "match" / "a.flo", tmp_path)
        manifest.add("match", tmp_path / "match" / "a.flo", tmp_path)

        assert manifest.artifacts["match"] == ["match/a.flo", "match/b.flo"]
