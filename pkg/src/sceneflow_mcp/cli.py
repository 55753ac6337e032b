"""Command-line entry point: ``sceneflow <subcommand>``."""

import argparse
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from .imagecore import Raster, read_image
from .models import PipelineConfig, SceneGeometry, StageName, SyntheticSpec
from .pipeline import PipelineStageError, eval_command, run_pipeline, run_single_stage
from .synthetic import SyntheticSceneError, make_synthetic

logger = logging.getLogger(__name__)

STAGE_COMMANDS = {
    "match": StageName.MATCH,
    "occlusion": StageName.OCCLUSION,
    "fill": StageName.FILL,
    "sceneflow": StageName.SCENEFLOW,
}


def _parse_stages(value: str) -> List[StageName]:
    try:
        return [StageName(name.strip()) for name in value.split(",") if name.strip()]
    except ValueError:
        choices = ", ".join(stage.value for stage in StageName)
        raise argparse.ArgumentTypeError(f"stages must be a comma list of: {choices}")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        default=os.getenv("SCENEFLOW_CONFIG"),
        help="Pipeline configuration JSON (default: $SCENEFLOW_CONFIG)",
    )
    parser.add_argument(
        "--input",
        default=None,
        help="Input directory holding frames/ and calibration.json",
    )
    parser.add_argument(
        "--output",
        default=os.getenv("SCENEFLOW_OUTPUT"),
        help="Output directory (default: $SCENEFLOW_OUTPUT or config value)",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=int(os.environ["SCENEFLOW_SEED"]) if "SCENEFLOW_SEED" in os.environ else None,
        help="Random seed (default: $SCENEFLOW_SEED or config value)",
    )
    parser.add_argument(
        "--jobs",
        type=int,
        default=int(os.environ["SCENEFLOW_JOBS"]) if "SCENEFLOW_JOBS" in os.environ else None,
        help="Frame pairs processed concurrently (default: $SCENEFLOW_JOBS or 1)",
    )
    parser.add_argument("--frames", type=int, default=None, help="Number of frames to process")
    parser.add_argument(
        "--no-visualize", action="store_true", help="Skip flow visualization PNGs"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sceneflow", description="Wide-baseline scene flow pipeline"
    )
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default=os.getenv("LOG_LEVEL", "INFO"),
        help="Logging level (default: INFO)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synthetic = commands.add_parser("make-synthetic", help="Render a synthetic dataset")
    synthetic.add_argument("out_dir", help="Dataset directory")
    synthetic.add_argument("--spec", default=None, help="SyntheticSpec JSON file")
    synthetic.add_argument("--seed", type=int, default=None, help="Texture and noise seed")
    synthetic.add_argument("--frames", type=int, default=None, help="Frames per camera")
    synthetic.add_argument(
        "--geometry", choices=[g.value for g in SceneGeometry], default=None, help="Scene layout"
    )

    pipeline = commands.add_parser("pipeline", help="Run the configured stages in order")
    _add_run_options(pipeline)
    pipeline.add_argument(
        "--stages", type=_parse_stages, default=None, help="Comma list of stages to run"
    )
    pipeline.add_argument("--ground-truth", default=None, help="Ground truth directory")

    for name in STAGE_COMMANDS:
        _add_run_options(commands.add_parser(name, help=f"Run the {name} stage only"))

    evaluate = commands.add_parser("eval", help="Evaluate results against ground truth")
    evaluate.add_argument("est_dir", help="Pipeline output directory")
    evaluate.add_argument("gt_dir", help="Ground truth directory")
    evaluate.add_argument(
        "--input",
        default=None,
        help="Input directory with frames/; adds fill diagnostics to the report",
    )
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file (or defaults) with command-line overrides applied."""
    config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides: Dict[str, Any] = {}
    if args.input is not None:
        overrides["input_dir"] = args.input
    if args.output is not None:
        overrides["output_dir"] = args.output
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.frames is not None:
        overrides["num_frames"] = args.frames
    if args.no_visualize:
        overrides["visualize"] = False
    if getattr(args, "stages", None):
        overrides["stages"] = args.stages
    if getattr(args, "ground_truth", None):
        overrides["ground_truth_dir"] = args.ground_truth
    if not overrides:
        return config
    return PipelineConfig.model_validate({**config.model_dump(), **overrides})


def _synthetic_spec(args: argparse.Namespace) -> SyntheticSpec:
    data: Dict[str, Any] = {}
    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.frames is not None:
        data["num_frames"] = args.frames
    if args.geometry is not None:
        data["geometry"] = args.geometry
    return SyntheticSpec.model_validate(data)


def _view1_loader(input_dir: str) -> Callable[[int], Raster]:
    frames = PipelineConfig(input_dir=input_dir)

    def load(frame: int) -> Raster:
        return read_image(frames.frame_path(1, frame))

    return load


def run(args: argparse.Namespace) -> int:
    if args.command == "make-synthetic":
        scene = make_synthetic(_synthetic_spec(args), args.out_dir)
        logger.info(f"Wrote {scene.spec.num_frames} synthetic frames to {args.out_dir}")
        return 0

    if args.command == "eval":
        loader = _view1_loader(args.input) if args.input else None
        report = eval_command(args.est_dir, args.gt_dir, loader)
        logger.info(
            f"Evaluated {len(report.frames)} frames, stages {report.stages}, "
            f"{len(report.fill_diagnostics)} fill diagnostics"
        )
        return 0

    config = load_config(args)
    if args.command == "pipeline":
        manifest = run_pipeline(config)
    else:
        manifest = run_single_stage(config, STAGE_COMMANDS[args.command])
    logger.info(f"Finished stages {manifest.stages_run}; outputs in {config.output_dir}")
    return 0


def main(argv: Optional[List[str]] = None) -> None:
    """Main entry point for the command-line tool."""
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    try:
        code = run(args)
    except PipelineStageError as e:
        logger.error(str(e))
        code = 1
    except (ValidationError, SyntheticSceneError, ValueError, OSError) as e:
        logger.error(f"Error: {e}")
        code = 1
    sys.exit(code)


if __name__ == "__main__":
    main()
