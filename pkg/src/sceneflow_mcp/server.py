"""FastMCP server exposing the scene flow pipeline."""

import argparse
import asyncio
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from types import FrameType
from typing import Annotated, List, Optional

import numpy as np
from fastmcp import Context, FastMCP
from fastmcp.exceptions import ToolError
from pydantic import Field

from .imagecore import invalid_mask, read_flo
from .models import (
    ColourTransformModel,
    EvalResponse,
    FlowStatistics,
    PipelineConfig,
    PipelineResponse,
    Response,
    SceneGeometry,
    StageName,
    SyntheticSpec,
    SystemInfo,
)
from .occlusion import cholmod_available, sparse_solver
from .pipeline import eval_command, run_pipeline
from .synthetic import make_synthetic

logger = logging.getLogger(__name__)

# Global state
_server_start_time = datetime.now()
_last_command: Optional[str] = None
_last_command_time: Optional[datetime] = None

# Colour shift applied to camera 2 when a contaminated dataset is requested
CONTAMINATION = ColourTransformModel(
    A=[0.85, 0.05, 0.0, 0.0, 1.0, 0.05, 0.0, 0.05, 1.15],
    a=[0.04, -0.02, 0.0],
)


def _mark(command: str) -> None:
    global _last_command, _last_command_time
    _last_command = command
    _last_command_time = datetime.now()


def create_server() -> FastMCP:
    """Create and configure the FastMCP server."""

    mcp: FastMCP = FastMCP(
        name="sceneflow-mcp",
    )

    @mcp.tool(
        name="generate_synthetic_dataset",
        description="Render a synthetic four-frame dataset with analytic ground truth",
        annotations={
            "title": "Generate Synthetic Dataset",
            "readOnlyHint": False,
            "destructiveHint": False,
        },
    )
    async def generate_synthetic_dataset(
        out_dir: Annotated[str, Field(description="Dataset directory")],
        geometry: Annotated[
            SceneGeometry, Field(description="Scene layout")
        ] = SceneGeometry.TWO_LAYER,
        num_frames: Annotated[int, Field(description="Frames per camera", ge=2)] = 2,
        noise_sigma: Annotated[float, Field(description="Image noise", ge=0)] = 0.0,
        contaminate: Annotated[
            bool, Field(description="Apply a colour shift to camera 2")
        ] = False,
        seed: Annotated[int, Field(description="Random seed", ge=0)] = 0,
        ctx: Optional[Context] = None,
    ) -> Response:
        """Render a synthetic dataset."""
        _mark("generate_synthetic_dataset")

        spec = SyntheticSpec(
            geometry=geometry,
            num_frames=num_frames,
            noise_sigma=noise_sigma,
            contamination=CONTAMINATION if contaminate else None,
            seed=seed,
        )
        if ctx:
            await ctx.info(f"Rendering {num_frames} {geometry.value} frames to {out_dir}")

        try:
            await asyncio.to_thread(make_synthetic, spec, out_dir)
            files = sorted(
                str(path.relative_to(out_dir)) for path in Path(out_dir).rglob("*") if path.is_file()
            )
            message = f"Synthetic dataset written to {out_dir}"
            if ctx:
                await ctx.info(message)
            return Response(
                success=True,
                message=message,
                data={"files": files, "ground_truth_dir": str(Path(out_dir) / "gt")},
            )

        except Exception as e:
            error_msg = f"Synthetic dataset generation failed: {str(e)}"
            if ctx:
                await ctx.error(error_msg)
            raise ToolError(error_msg)

    @mcp.tool(
        name="run_scene_flow_pipeline",
        description="Run matching, occlusion filling and scene flow refinement",
        annotations={
            "title": "Run Scene Flow Pipeline",
            "readOnlyHint": False,
            "destructiveHint": False,
        },
    )
    async def run_scene_flow_pipeline(
        input_dir: Annotated[str, Field(description="Directory with frames/ and calibration.json")],
        output_dir: Annotated[str, Field(description="Output directory")],
        config_path: Annotated[
            Optional[str], Field(description="Pipeline configuration JSON")
        ] = None,
        stages: Annotated[
            Optional[List[StageName]], Field(description="Stages to run (default: all)")
        ] = None,
        ground_truth_dir: Annotated[
            Optional[str], Field(description="Ground truth directory for evaluation")
        ] = None,
        seed: Annotated[int, Field(description="Random seed", ge=0)] = 0,
        jobs: Annotated[int, Field(description="Concurrent frame pairs", ge=1)] = 1,
        ctx: Optional[Context] = None,
    ) -> PipelineResponse:
        """Run the scene flow pipeline."""
        _mark("run_scene_flow_pipeline")

        try:
            base = PipelineConfig.from_file(config_path) if config_path else PipelineConfig()
            update = {
                "input_dir": input_dir,
                "output_dir": output_dir,
                "seed": seed,
                "jobs": jobs,
                "ground_truth_dir": ground_truth_dir,
            }
            if stages:
                update["stages"] = stages
            config = PipelineConfig.model_validate({**base.model_dump(), **update})

            if ctx:
                await ctx.info(f"Running stages {[s.value for s in config.stages]}")
                await ctx.report_progress(10, 100)

            manifest = await asyncio.to_thread(run_pipeline, config)

            if ctx:
                await ctx.report_progress(100, 100)
            message = f"Pipeline finished: {', '.join(manifest.stages_run)}"
            if ctx:
                await ctx.info(message)
            return PipelineResponse(success=True, message=message, manifest=manifest)

        except Exception as e:
            error_msg = f"Pipeline failed: {str(e)}"
            if ctx:
                await ctx.error(error_msg)
            raise ToolError(error_msg)

    @mcp.tool(
        name="evaluate_results",
        description="Compute per-frame error statistics against ground truth",
        annotations={
            "title": "Evaluate Results",
            "readOnlyHint": False,
            "destructiveHint": False,
        },
    )
    async def evaluate_results(
        est_dir: Annotated[str, Field(description="Pipeline output directory")],
        gt_dir: Annotated[str, Field(description="Ground truth directory")],
        ctx: Optional[Context] = None,
    ) -> EvalResponse:
        """Evaluate pipeline outputs."""
        _mark("evaluate_results")

        try:
            report = await asyncio.to_thread(eval_command, est_dir, gt_dir)
            message = f"Evaluated {len(report.frames)} frames"
            if ctx:
                await ctx.info(message)
            return EvalResponse(success=True, message=message, report=report)

        except Exception as e:
            error_msg = f"Evaluation failed: {str(e)}"
            if ctx:
                await ctx.error(error_msg)
            raise ToolError(error_msg)

    @mcp.tool(
        name="flow_statistics",
        description="Summarise a Middlebury .flo file",
        annotations={
            "title": "Flow Statistics",
            "readOnlyHint": True,
            "destructiveHint": False,
        },
    )
    async def flow_statistics(
        path: Annotated[str, Field(description="Path to a .flo file")],
        ctx: Optional[Context] = None,
    ) -> FlowStatistics:
        """Read a flow field and report its size and magnitudes."""
        _mark("flow_statistics")

        try:
            flow = await asyncio.to_thread(read_flo, path)
            valid = ~invalid_mask(flow)
            magnitude = np.hypot(flow[:, :, 0], flow[:, :, 1])[valid]
            return FlowStatistics(
                width=flow.shape[1],
                height=flow.shape[0],
                valid_fraction=float(valid.mean()),
                mean_magnitude=float(magnitude.mean()) if magnitude.size else 0.0,
                max_magnitude=float(magnitude.max()) if magnitude.size else 0.0,
            )

        except Exception as e:
            error_msg = f"Failed to read flow: {str(e)}"
            if ctx:
                await ctx.error(error_msg)
            raise ToolError(error_msg)

    @mcp.tool(
        name="get_system_info",
        description="Get MCP server and solver information",
        annotations={
            "title": "Get System Info",
            "readOnlyHint": True,
            "destructiveHint": False,
        },
    )
    async def get_system_info(ctx: Optional[Context] = None) -> SystemInfo:
        """Get system information."""
        try:
            from . import __version__

            uptime = (datetime.now() - _server_start_time).total_seconds()

            return SystemInfo(
                server_version=__version__,
                cholmod_available=cholmod_available(),
                sparse_solver=sparse_solver(),
                uptime=uptime,
                last_command=_last_command,
                last_command_time=_last_command_time,
            )

        except Exception as e:
            error_msg = f"Failed to get system info: {str(e)}"
            if ctx:
                await ctx.error(error_msg)
            raise ToolError(error_msg)

    return mcp


def main() -> None:
    """Main entry point for the MCP server."""
    import signal

    def signal_handler(sig: int, frame: Optional[FrameType]) -> None:
        logger.info("Shutting down...")
        sys.exit(0)

    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    parser = argparse.ArgumentParser(description="Scene flow MCP Server")
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        default=os.getenv("LOG_LEVEL", "INFO"),
        help="Logging level (default: INFO)",
    )
    args = parser.parse_args()

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    mcp = create_server()

    logger.info(f"Starting scene flow MCP server (sparse solver: {sparse_solver().value})")
    try:
        mcp.run()
    except Exception as e:
        logger.error(f"Server error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
