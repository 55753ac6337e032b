"""Tests for the command-line interface."""

import json
import shutil

import pytest

from sceneflow_mcp.cli import build_parser, load_config, main
from sceneflow_mcp.models import StageName


class TestParser:
    """Test cases for argument parsing."""

    def test_pipeline_stages(self):
        """Test that --stages takes a comma list."""
        args = build_parser().parse_args(["pipeline", "--stages", "match,sync"])

        assert args.stages == [StageName.MATCH, StageName.SYNC]

    def test_bad_stage(self):
        """Test that unknown stages exit with a usage error."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["pipeline", "--stages", "render"])

    def test_env_defaults(self, monkeypatch):
        """Test that environment variables provide defaults."""
        monkeypatch.setenv("SCENEFLOW_SEED", "11")
        monkeypatch.setenv("SCENEFLOW_OUTPUT", "/tmp/sf")

        args = build_parser().parse_args(["fill"])

        assert args.seed == 11
        assert args.output == "/tmp/sf"


class TestLoadConfig:
    """Test cases for config overrides."""

    def test_overrides(self, monkeypatch, tmp_path):
        """Test that flags override the defaults and the stages are ordered."""
        monkeypatch.delenv("SCENEFLOW_CONFIG", raising=False)
        args = build_parser().parse_args(
            [
                "pipeline",
                "--input",
                str(tmp_path),
                "--seed",
                "4",
                "--no-visualize",
                "--stages",
                "eval,match",
            ]
        )

        config = load_config(args)

        assert config.input_dir == str(tmp_path)
        assert config.seed == 4
        assert config.visualize is False
        assert config.stages == [StageName.MATCH, StageName.EVAL]


class TestMain:
    """Test cases for the entry point."""

    def test_make_synthetic(self, tmp_path):
        """Test rendering a dataset from the command line."""
        with pytest.raises(SystemExit) as excinfo:
            main(["make-synthetic", str(tmp_path / "data"), "--geometry", "plane", "--seed", "2"])

        assert excinfo.value.code == 0
        assert (tmp_path / "data" / "calibration.json").exists()
        assert (tmp_path / "data" / "gt" / "stereo_0001.flo").exists()

    def test_eval_without_ground_truth(self, tmp_path):
        """Test that a failing stage exits with status 1."""
        (tmp_path / "gt").mkdir()

        with pytest.raises(SystemExit) as excinfo:
            main(["eval", str(tmp_path / "out"), str(tmp_path / "gt")])

        assert excinfo.value.code == 1

    def test_eval_with_images_adds_fill_diagnostics(self, tmp_path):
        """Test that --input adds fill diagnostics to the report."""
        data = tmp_path / "data"
        with pytest.raises(SystemExit):
            main(["make-synthetic", str(data), "--geometry", "plane", "--seed", "2"])
        est = tmp_path / "out"
        (est / "match").mkdir(parents=True)
        for frame in range(2):
            shutil.copy(data / "gt" / f"stereo_{frame:04d}.flo", est / "match" / f"stereo_{frame:04d}_fwd.flo")

        with pytest.raises(SystemExit) as excinfo:
            main(["eval", str(est), str(data / "gt"), "--input", str(data)])

        assert excinfo.value.code == 0
        report = json.loads((est / "eval" / "report.json").read_text())
        assert [item["frame"] for item in report["fill_diagnostics"]] == [0, 1]
