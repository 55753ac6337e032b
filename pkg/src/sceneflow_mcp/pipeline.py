"""Stage orchestration: sync, match, occlusion, fill, sceneflow and eval.

Every stage reads and writes documented file formats under the output
directory, so stages can run independently (one CLI subcommand each) or in
sequence via :func:`run_pipeline`.

Output layout (``f`` = frame, ``t`` = time step, both ``{:04d}``)::

    match/stereo_f_{fwd,bwd}.flo   match/colour_f.json
    match/flow1_t_{fwd,bwd}.flo    match/flow2_t_{fwd,bwd}.flo
    occlusion/stereo_f.pgm         occlusion/flow1_t.pgm   occlusion/flow2_t.pgm
    fill/stereo_f.flo
    sceneflow/u{1,2,3}_t.flo       sceneflow/occ_t.pgm
    sceneflow/depth_t.pfm          sceneflow/sceneflow_t.ply
    eval/report.csv                eval/report.json
    vis/*.png                      manifest.json
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TypeVar, Union

import numpy as np

from .geometry import StereoRigFrame, load_calibration
from .imagecore import (
    BitMask,
    FlowField,
    Raster,
    flow_to_color,
    invalid_mask,
    read_flo,
    read_image,
    read_mask,
    read_pfm,
    write_flo,
    write_mask,
    write_pfm,
    write_png,
)
from .matcher import ColourTransform, match_bidirectional
from .metrics import (
    MetricsError,
    aae_sceneflow,
    flow2d_errors,
    mae_disparity,
    rmse_sceneflow,
    sceneflow_tuple,
    write_report_csv,
    write_report_json,
)
from .models import (
    ArtifactManifest,
    ColourTransformModel,
    EvalReport,
    FillDiagnostics,
    FillParams,
    FrameMetrics,
    MatchKind,
    PipelineConfig,
    StageName,
)
from .occlusion import (
    fill_comparison,
    forward_backward_mask,
    laplacian_fill,
    local_linearity_report,
    morphological_close,
    sparse_solver,
)
from .sceneflow import FourFrameFlows, init_u3, refine, triangulate_scene_flow, write_ply
from .synthetic import ground_truth_files

logger = logging.getLogger(__name__)

T = TypeVar("T")

STAGE_INDEX = {stage: index for index, stage in enumerate(StageName)}
_DIRECTION = {"stereo": 0, "flow1": 1, "flow2": 2}


class PipelineStageError(RuntimeError):
    """A stage failed; carries the stage and frame for diagnostics."""

    def __init__(self, stage: StageName, frame: Optional[int], message: str):
        self.stage = stage
        self.frame = frame
        where = f"{stage.value}" if frame is None else f"{stage.value} (frame {frame})"
        super().__init__(f"Stage {where} failed: {message}")


@dataclass
class PipelineContext:
    """Shared state of one pipeline run."""

    config: PipelineConfig
    rigs: List[StereoRigFrame]
    num_frames: int
    output: Path
    manifest: ArtifactManifest
    _images: Dict[tuple, Raster] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def image(self, camera: int, frame: int) -> Raster:
        key = (camera, frame)
        with self._lock:
            cached = self._images.get(key)
        if cached is None:
            cached = read_image(self.config.frame_path(camera, frame))
            with self._lock:
                self._images[key] = cached
        return cached

    def path(self, stage: str, name: str) -> Path:
        directory = self.output / stage
        directory.mkdir(parents=True, exist_ok=True)
        return directory / name

    def record(self, stage: StageName, path: Path) -> None:
        with self._lock:
            self.manifest.add(stage.value, path, self.output)

    def seed(self, stage: StageName, frame: int, direction: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            [self.config.seed, STAGE_INDEX[stage], frame, _DIRECTION[direction]]
        )

    def visualize(self, name: str, flow: FlowField) -> None:
        if not self.config.visualize:
            return
        path = self.path("vis", f"{name}.png")
        write_png(path, flow_to_color(flow), bit_depth=8)
        with self._lock:
            self.manifest.add("vis", path, self.output)


def prepare_context(config: PipelineConfig) -> PipelineContext:
    """Load calibration and fix the frame count."""
    output = Path(config.output_dir)
    output.mkdir(parents=True, exist_ok=True)
    rigs = load_calibration(config.resolve(config.calibration))
    num_frames = config.num_frames or len(rigs)
    if num_frames > len(rigs):
        raise PipelineStageError(
            StageName.SYNC, None, f"{num_frames} frames requested, calibration has {len(rigs)}"
        )
    return PipelineContext(
        config=config,
        rigs=rigs,
        num_frames=num_frames,
        output=output,
        manifest=ArtifactManifest(seed=config.seed),
    )


def _map_frames(
    ctx: PipelineContext, stage: StageName, frames: Sequence[int], work: Callable[[int], T]
) -> List[T]:
    """Run ``work`` per frame, concurrently when jobs > 1, wrapping failures."""

    def guarded(frame: int) -> T:
        try:
            return work(frame)
        except PipelineStageError:
            raise
        except Exception as e:
            raise PipelineStageError(stage, frame, str(e)) from e

    if ctx.config.jobs > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=ctx.config.jobs) as pool:
            return list(pool.map(guarded, frames))
    return [guarded(frame) for frame in frames]


def _read_required(stage: StageName, frame: int, path: Path, reader: Callable[[Path], T]) -> T:
    if not path.exists():
        raise PipelineStageError(stage, frame, f"missing input {path}")
    return reader(path)


def run_sync_stage(ctx: PipelineContext) -> None:
    """Validate that both cameras and the calibration cover the same frames."""
    try:
        ctx.config.validate_paths(ctx.num_frames)
    except ValueError as e:
        raise PipelineStageError(StageName.SYNC, None, str(e)) from e
    for frame in range(ctx.num_frames):
        shape1 = ctx.image(1, frame).shape
        shape2 = ctx.image(2, frame).shape
        if shape1 != shape2:
            raise PipelineStageError(
                StageName.SYNC, frame, f"camera images differ in size: {shape1} vs {shape2}"
            )
    logger.info(f"Sync: {ctx.num_frames} synchronised frames per camera")


def run_match_stage(ctx: PipelineContext) -> None:
    """Bidirectional stereo flows per frame and optical flows per view and step."""
    params = ctx.config.match

    def stereo(frame: int) -> None:
        result = match_bidirectional(
            MatchKind.STEREO,
            ctx.image(1, frame),
            ctx.image(2, frame),
            F=ctx.rigs[frame].F,
            params=params,
            seed=ctx.seed(StageName.MATCH, frame, "stereo"),
            parallel=ctx.config.jobs > 1,
        )
        for direction, flow in (("fwd", result.forward), ("bwd", result.backward)):
            path = ctx.path("match", f"stereo_{frame:04d}_{direction}.flo")
            write_flo(path, flow)
            ctx.record(StageName.MATCH, path)
        colour = ctx.path("match", f"colour_{frame:04d}.json")
        colour.write_text(result.transform.to_model().model_dump_json(indent=2))
        ctx.record(StageName.MATCH, colour)
        ctx.visualize(f"stereo_{frame:04d}", result.forward)

    def optical(step: int) -> None:
        for view in (1, 2):
            name = f"flow{view}"
            result = match_bidirectional(
                MatchKind.FLOW,
                ctx.image(view, step),
                ctx.image(view, step + 1),
                params=params,
                seed=ctx.seed(StageName.MATCH, step, name),
                parallel=ctx.config.jobs > 1,
            )
            for direction, flow in (("fwd", result.forward), ("bwd", result.backward)):
                path = ctx.path("match", f"{name}_{step:04d}_{direction}.flo")
                write_flo(path, flow)
                ctx.record(StageName.MATCH, path)
            ctx.visualize(f"{name}_{step:04d}", result.forward)

    _map_frames(ctx, StageName.MATCH, range(ctx.num_frames), stereo)
    _map_frames(ctx, StageName.MATCH, range(ctx.num_frames - 1), optical)


def run_occlusion_stage(ctx: PipelineContext) -> None:
    """Forward-backward masks of every matcher flow, optionally closed."""
    fill = ctx.config.fill

    def masks(kind: str, frame: int) -> None:
        fwd = _read_required(
            StageName.OCCLUSION, frame, ctx.output / "match" / f"{kind}_{frame:04d}_fwd.flo", read_flo
        )
        bwd = _read_required(
            StageName.OCCLUSION, frame, ctx.output / "match" / f"{kind}_{frame:04d}_bwd.flo", read_flo
        )
        mask = morphological_close(
            forward_backward_mask(fwd, bwd, fill.fb_threshold), fill.closing_radius
        )
        path = ctx.path("occlusion", f"{kind}_{frame:04d}.pgm")
        write_mask(path, mask)
        ctx.record(StageName.OCCLUSION, path)
        logger.info(f"Occlusion {kind} frame {frame}: {mask.mean() * 100:.1f}% occluded")

    _map_frames(ctx, StageName.OCCLUSION, range(ctx.num_frames), lambda f: masks("stereo", f))
    for view in ("flow1", "flow2"):
        _map_frames(
            ctx, StageName.OCCLUSION, range(ctx.num_frames - 1), lambda t, v=view: masks(v, t)
        )


def run_fill_stage(ctx: PipelineContext) -> None:
    """Matting-Laplacian fill of occluded stereo flows."""

    def fill(frame: int) -> None:
        flow = _read_required(
            StageName.FILL, frame, ctx.output / "match" / f"stereo_{frame:04d}_fwd.flo", read_flo
        )
        mask = _read_required(
            StageName.FILL, frame, ctx.output / "occlusion" / f"stereo_{frame:04d}.pgm", read_mask
        )
        filled = laplacian_fill(flow, mask, ctx.image(1, frame), ctx.config.fill)
        path = ctx.path("fill", f"stereo_{frame:04d}.flo")
        write_flo(path, filled)
        ctx.record(StageName.FILL, path)
        ctx.visualize(f"filled_{frame:04d}", filled)

    solver = sparse_solver().value
    logger.info(f"Fill: {ctx.num_frames} frames, sparse solver {solver}")
    ctx.manifest.notes.append(f"fill: sparse solver {solver}")
    _map_frames(ctx, StageName.FILL, range(ctx.num_frames), fill)


def _colour_transform(ctx: PipelineContext, frame: int) -> ColourTransform:
    path = ctx.output / "match" / f"colour_{frame:04d}.json"
    if not path.exists():
        return ColourTransform.identity()
    return ColourTransform.from_model(ColourTransformModel.model_validate_json(path.read_text()))


def run_sceneflow_stage(ctx: PipelineContext) -> None:
    """Variational refinement and triangulation per time step."""
    match_dir = ctx.output / "match"
    filled_dir = ctx.output / "fill"

    def step(t: int) -> None:
        stage = StageName.SCENEFLOW
        stereo_path = filled_dir / f"stereo_{t:04d}.flo"
        if not stereo_path.exists():
            stereo_path = match_dir / f"stereo_{t:04d}_fwd.flo"
            logger.info(f"Scene flow step {t}: no filled stereo flow, using matcher output")
        u2 = _read_required(stage, t, stereo_path, read_flo)
        u1 = _read_required(stage, t, match_dir / f"flow1_{t:04d}_fwd.flo", read_flo)
        flow2 = _read_required(stage, t, match_dir / f"flow2_{t:04d}_fwd.flo", read_flo)
        u3 = init_u3(u1, u2, flow2)

        occluded = invalid_mask(u3)
        for name in (f"stereo_{t:04d}.pgm", f"flow1_{t:04d}.pgm"):
            mask_path = ctx.output / "occlusion" / name
            if mask_path.exists():
                occluded |= read_mask(mask_path)

        images = [ctx.image(1, t), ctx.image(2, t), ctx.image(1, t + 1), ctx.image(2, t + 1)]
        refined = refine(
            FourFrameFlows(u1=u1, u2=u2, u3=u3),
            images,
            ctx.rigs[t].F,
            ctx.rigs[t + 1].F,
            occluded,
            _colour_transform(ctx, t),
            ctx.config.sceneflow,
        )
        for name, flow in (("u1", refined.u1), ("u2", refined.u2), ("u3", refined.u3)):
            path = ctx.path("sceneflow", f"{name}_{t:04d}.flo")
            write_flo(path, flow)
            ctx.record(stage, path)
        mask_path = ctx.path("sceneflow", f"occ_{t:04d}.pgm")
        write_mask(mask_path, occluded)
        ctx.record(stage, mask_path)

        output = triangulate_scene_flow(refined, ctx.rigs[t], ctx.rigs[t + 1], occluded)
        depth_path = ctx.path("sceneflow", f"depth_{t:04d}.pfm")
        write_pfm(depth_path, output.depth)
        ply_path = ctx.path("sceneflow", f"sceneflow_{t:04d}.ply")
        count = write_ply(ply_path, output, ctx.image(1, t))
        ctx.record(stage, depth_path)
        ctx.record(stage, ply_path)
        ctx.visualize(f"refined_u2_{t:04d}", refined.u2)
        logger.info(f"Scene flow step {t}: {count} valid points")

    _map_frames(ctx, StageName.SCENEFLOW, range(ctx.num_frames - 1), step)


def _frames_in(gt_dir: Path) -> List[int]:
    frames = sorted(int(path.stem.split("_")[1]) for path in gt_dir.glob("stereo_*.flo"))
    if not frames:
        raise PipelineStageError(StageName.EVAL, None, f"no ground truth found in {gt_dir}")
    return frames


def _stage_paths(est_dir: Path, frame: int) -> Dict[str, Path]:
    return {
        "matcher": est_dir / "match" / f"stereo_{frame:04d}_fwd.flo",
        "filled": est_dir / "fill" / f"stereo_{frame:04d}.flo",
        "refined": est_dir / "sceneflow" / f"u2_{frame:04d}.flo",
    }


def _fill_diagnostics(
    frame: int,
    gt_stereo: FlowField,
    occ_stereo: BitMask,
    image: Raster,
    params: Optional[FillParams],
) -> Optional[FillDiagnostics]:
    if not occ_stereo.any():
        return None
    params = params or FillParams()
    try:
        linearity = local_linearity_report(gt_stereo, image, params.epsilon)
        comparison = fill_comparison(gt_stereo, occ_stereo, image, params)
    except ValueError as e:
        logger.warning(f"Frame {frame}: fill diagnostics skipped ({e})")
        return None
    logger.info(
        f"Frame {frame}: fill MEE {comparison.laplacian_mee:.3f} (Laplacian) vs "
        f"{comparison.diffusion_mee:.3f} (diffusion)"
    )
    return FillDiagnostics(
        frame=frame,
        occluded_pixels=int(occ_stereo.sum()),
        linearity_mee=linearity.mee,
        linearity_aae=linearity.aae,
        laplacian_mee=comparison.laplacian_mee,
        laplacian_aae=comparison.laplacian_aae,
        diffusion_mee=comparison.diffusion_mee,
        diffusion_aae=comparison.diffusion_aae,
    )


def eval_command(
    est_dir: Union[str, Path],
    gt_dir: Union[str, Path],
    image_loader: Optional[Callable[[int], Raster]] = None,
    fill_params: Optional[FillParams] = None,
) -> EvalReport:
    """Per-frame metrics of every stage found on disk, written as CSV and JSON.

    With ``image_loader`` (frame -> view-1 image) the report also carries
    fill diagnostics computed on the ground-truth stereo flow.
    """
    est_dir = Path(est_dir)
    gt_dir = Path(gt_dir)
    frames = _frames_in(gt_dir)
    steps = frames[:-1]
    stages = [
        name
        for name in ("matcher", "filled", "refined")
        if any(_stage_paths(est_dir, f)[name].exists() for f in frames)
    ]
    for name in stages:
        expected = steps if name == "refined" else frames
        missing = [f for f in expected if not _stage_paths(est_dir, f)[name].exists()]
        if missing:
            raise PipelineStageError(
                StageName.EVAL, missing[0], f"stage '{name}' is missing frames {missing}"
            )

    report = EvalReport(stages=stages)
    for frame in frames:
        truth = ground_truth_files(gt_dir, frame)
        disparity = read_pfm(truth["disparity"])
        occ_stereo = read_mask(truth["occ_stereo"])
        metrics = FrameMetrics(frame=frame, pixel_count=int((~occ_stereo).sum()))
        paths = _stage_paths(est_dir, frame)
        for name in stages:
            if paths[name].exists():
                metrics.mae_d[name] = mae_disparity(read_flo(paths[name]), disparity, occ_stereo)

        if "filled" in stages and occ_stereo.any():
            gt_stereo = read_flo(truth["stereo"])
            metrics.mee, metrics.aae_2d = flow2d_errors(
                read_flo(paths["filled"]), gt_stereo, evaluate=occ_stereo
            )

        refined = est_dir / "sceneflow"
        if (refined / f"u1_{frame:04d}.flo").exists() and truth["u1"].exists():
            est = sceneflow_tuple(
                read_flo(refined / f"u1_{frame:04d}.flo"),
                read_flo(refined / f"u2_{frame:04d}.flo"),
                read_flo(refined / f"u3_{frame:04d}.flo"),
            )
            gt = sceneflow_tuple(
                read_flo(truth["u1"]),
                read_flo(truth["stereo"]),
                read_flo(truth["u3"]),
            )
            occ = read_mask(truth["occ"])
            try:
                metrics.rmse = rmse_sceneflow(est, gt, occ)
                metrics.aae = aae_sceneflow(est, gt, occ)
            except MetricsError as e:
                logger.warning(f"Frame {frame}: scene flow metrics skipped ({e})")
        report.frames.append(metrics)

        if image_loader is not None:
            diagnostics = _fill_diagnostics(
                frame, read_flo(truth["stereo"]), occ_stereo, image_loader(frame), fill_params
            )
            if diagnostics is not None:
                report.fill_diagnostics.append(diagnostics)

    eval_dir = est_dir / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, eval_dir / "report.csv")
    write_report_json(report, eval_dir / "report.json")
    return report


def run_eval_stage(ctx: PipelineContext) -> None:
    gt_dir = ctx.config.ground_truth_dir
    if not gt_dir:
        ctx.manifest.notes.append("eval: no ground truth directory configured")
        logger.info("No ground truth configured; skipping evaluation")
        return
    try:
        eval_command(ctx.output, gt_dir, lambda frame: ctx.image(1, frame), ctx.config.fill)
    except PipelineStageError:
        raise
    except Exception as e:
        raise PipelineStageError(StageName.EVAL, None, str(e)) from e
    for name in ("report.csv", "report.json"):
        ctx.record(StageName.EVAL, ctx.output / "eval" / name)


STAGES: Dict[StageName, Callable[[PipelineContext], None]] = {
    StageName.SYNC: run_sync_stage,
    StageName.MATCH: run_match_stage,
    StageName.OCCLUSION: run_occlusion_stage,
    StageName.FILL: run_fill_stage,
    StageName.SCENEFLOW: run_sceneflow_stage,
    StageName.EVAL: run_eval_stage,
}


def _clear_stale_fill(ctx: PipelineContext) -> int:
    """Remove filled stereo flows left by an earlier run into the same output."""
    stale = sorted((ctx.output / "fill").glob("stereo_*.flo"))
    for path in stale:
        path.unlink()
    if stale:
        logger.warning(f"Fill skipped: removed {len(stale)} stale filled stereo flows")
        ctx.manifest.notes.append(f"fill skipped: removed {len(stale)} stale outputs")
    return len(stale)


def write_manifest(ctx: PipelineContext) -> Path:
    path = ctx.output / "manifest.json"
    path.write_text(ctx.manifest.model_dump_json(indent=2))
    return path


def run_pipeline(config: PipelineConfig) -> ArtifactManifest:
    """Run the configured stages in order; the manifest is written even on failure."""
    ctx = prepare_context(config)
    skipped = [stage for stage in StageName if stage not in config.stages]
    ctx.manifest.stages_skipped = [stage.value for stage in skipped]
    if StageName.FILL in skipped and StageName.SCENEFLOW in config.stages:
        ctx.manifest.notes.append(
            "fill skipped: scene flow initialised from unfilled matcher stereo flows"
        )
    if StageName.FILL in skipped and any(
        stage in config.stages
        for stage in (StageName.MATCH, StageName.OCCLUSION, StageName.SCENEFLOW)
    ):
        _clear_stale_fill(ctx)
    logger.info(
        f"Running stages {[s.value for s in config.stages]} on {ctx.num_frames} frames "
        f"(seed {config.seed}, jobs {config.jobs})"
    )
    try:
        for stage in config.stages:
            logger.info(f"Stage {stage.value} started")
            try:
                STAGES[stage](ctx)
            except PipelineStageError:
                raise
            except Exception as e:
                raise PipelineStageError(stage, None, str(e)) from e
            ctx.manifest.stages_run.append(stage.value)
            logger.info(f"Stage {stage.value} finished")
    finally:
        write_manifest(ctx)
    return ctx.manifest


def run_single_stage(config: PipelineConfig, stage: StageName) -> ArtifactManifest:
    """Run one stage against artifacts already on disk."""
    single = config.model_copy(update={"stages": [stage]})
    ctx = prepare_context(single)
    try:
        STAGES[stage](ctx)
        ctx.manifest.stages_run.append(stage.value)
    finally:
        write_manifest(ctx)
    return ctx.manifest
