"""Pydantic models for the wide-baseline scene flow pipeline."""

import json
import logging
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

logger = logging.getLogger(__name__)


class DescriptorNormalization(str, Enum):
    """DAISY histogram normalization mode."""

    PARTIAL = "partial"
    FULL = "full"
    NONE = "none"


class MatchKind(str, Enum):
    """Correspondence type computed by the matcher."""

    STEREO = "stereo"
    FLOW = "flow"


class EpipolarForm(str, Enum):
    """Residual used by the variational epipolar terms."""

    ALGEBRAIC = "algebraic"
    SAMPSON = "sampson"


class StageName(str, Enum):
    """Pipeline stages in execution order."""

    SYNC = "sync"
    MATCH = "match"
    OCCLUSION = "occlusion"
    FILL = "fill"
    SCENEFLOW = "sceneflow"
    EVAL = "eval"


class SceneGeometry(str, Enum):
    """Synthetic scene layouts."""

    PLANE = "plane"
    TWO_LAYER = "two_layer"


class SparseSolver(str, Enum):
    """Backend factorising the fill systems."""

    CHOLMOD = "cholmod"
    SPLU = "splu"


class DaisyParams(BaseModel):
    """DAISY descriptor footprint."""

    radius: float = Field(15.0, gt=0, description="Outer ring radius in pixels")
    rings: int = Field(3, ge=1, description="Number of rings Q")
    points_per_ring: int = Field(8, ge=1, description="Sample points per ring T")
    orientations: int = Field(8, ge=1, description="Gradient orientations H")
    normalization: DescriptorNormalization = Field(
        DescriptorNormalization.PARTIAL, description="Histogram normalization"
    )

    @property
    def descriptor_length(self) -> int:
        """Length (1 + Q*T) * H of one descriptor."""
        return (1 + self.rings * self.points_per_ring) * self.orientations

    @classmethod
    def stereo_preset(cls) -> "DaisyParams":
        """Two rings of radius 10 px, used for stereo correspondences."""
        return cls(radius=10.0, rings=2, points_per_ring=8, orientations=8)

    @classmethod
    def flow_preset(cls) -> "DaisyParams":
        """Reference footprint used for optical flow."""
        return cls(radius=15.0, rings=3, points_per_ring=8, orientations=8)


class MatchWeights(BaseModel):
    """Weights of the matching cost and the pairwise term."""

    w_d: float = Field(1.0, ge=0, description="DAISY term weight")
    w_c: float = Field(1.0, ge=0, description="Colour term weight")
    w_e: float = Field(1.0, ge=0, description="Epipolar term weight")
    w_p: float = Field(0.01, ge=0, description="Pairwise smoothness weight")
    tau_p: float = Field(50.0, gt=0, description="Pairwise truncation threshold")


class PassConfig(BaseModel):
    """One matching pass."""

    weights: MatchWeights = Field(..., description="Cost weights for this pass")
    iterations: int = Field(..., ge=1, description="PMBP iterations")
    refit_colour: bool = Field(
        True, description="Re-estimate the colour transform after this pass"
    )
    dense_descriptors: bool = Field(
        False, description="Precompute target-image descriptors for all pixels"
    )


class PassSchedule(BaseModel):
    """Ordered matching passes."""

    passes: List[PassConfig] = Field(..., min_length=1, description="Passes")


class MatchParams(BaseModel):
    """PMBP matcher configuration."""

    particles: int = Field(2, ge=1, description="Particles per pixel K")
    stereo_search_fraction: float = Field(
        0.25, gt=0, description="Stereo search range as a fraction of width"
    )
    flow_search_fraction: float = Field(
        0.125, gt=0, description="Optical flow search range as a fraction of width"
    )
    search_range: Optional[float] = Field(
        None, gt=0, description="Absolute search range in pixels (overrides fractions)"
    )
    stereo_daisy: DaisyParams = Field(
        default_factory=DaisyParams.stereo_preset, description="Stereo DAISY"
    )
    flow_daisy: DaisyParams = Field(
        default_factory=DaisyParams.flow_preset, description="Optical flow DAISY"
    )
    stereo_schedule: Optional[PassSchedule] = Field(
        None, description="Stereo pass schedule (default: four passes)"
    )
    flow_schedule: Optional[PassSchedule] = Field(
        None, description="Optical flow pass schedule (default: two passes)"
    )
    colour_samples: int = Field(
        50000, ge=4, description="Maximum pixels used to fit the colour transform"
    )
    colour_regularization: float = Field(
        1e-4, ge=0, description="Ridge weight per pair pulling A towards identity"
    )
    fb_threshold: float = Field(
        3.0, gt=0, description="Consistency threshold for colour fitting pixels"
    )


class FillParams(BaseModel):
    """Occlusion detection and Laplacian filling parameters."""

    fb_threshold: float = Field(3.0, gt=0, description="Forward-backward threshold")
    window: Literal[3] = Field(3, description="Matting window size")
    epsilon: float = Field(1e-4, gt=0, description="Matting regulariser")
    lam: float = Field(5.0, gt=0, description="Soft constraint weight lambda")
    closing_radius: int = Field(0, ge=0, description="Morphological closing radius")


class SceneFlowParams(BaseModel):
    """Variational scene flow refinement parameters."""

    alpha1: float = Field(10.0, gt=0, description="Epipolar weight at time t")
    alpha2: float = Field(10.0, gt=0, description="Epipolar weight at time t+1")
    beta1: float = Field(31.0, gt=0, description="Smoothness weight of u1")
    beta2: float = Field(60.0, gt=0, description="Smoothness weight of u2")
    beta3: float = Field(200.0, gt=0, description="Smoothness weight of u3")
    psi_epsilon: float = Field(1e-6, gt=0, description="Penaliser regulariser")
    eta: float = Field(0.9, gt=0, lt=1, description="Pyramid scale factor")
    start_scale: float = Field(
        0.25, gt=0, le=1, description="Resolution of the coarsest level"
    )
    warps: int = Field(5, ge=1, description="Warps per level")
    inner_iterations: int = Field(5, ge=1, description="Lagged fixed-point iterations")
    sor_omega: float = Field(1.9, gt=0, lt=2, description="SOR relaxation")
    sor_iterations: int = Field(30, ge=1, description="SOR sweeps per fixed point")
    gamma: float = Field(1.0, gt=0, description="Gradient constancy weight")
    intensity_scale: float = Field(
        255.0, gt=0, description="Intensity range the data terms are evaluated on"
    )
    epipolar_form: EpipolarForm = Field(
        EpipolarForm.ALGEBRAIC, description="Epipolar residual form"
    )
    min_level_size: int = Field(8, ge=4, description="Smallest pyramid side")

    @property
    def alphas(self) -> Tuple[float, float]:
        return (self.alpha1, self.alpha2)

    @property
    def betas(self) -> Tuple[float, float, float]:
        return (self.beta1, self.beta2, self.beta3)


class CameraCalibModel(BaseModel):
    """Row-major camera calibration entry."""

    K: List[float] = Field(..., min_length=9, max_length=9, description="Intrinsics")
    R: List[float] = Field(..., min_length=9, max_length=9, description="Rotation")
    t: List[float] = Field(..., min_length=3, max_length=3, description="Translation")


class CalibrationFrameModel(BaseModel):
    """Calibration of one time step."""

    cam1: CameraCalibModel
    cam2: CameraCalibModel
    F: Optional[List[float]] = Field(
        None, min_length=9, max_length=9, description="Fundamental matrix"
    )


class CalibrationDocument(BaseModel):
    """Calibration file."""

    frames: List[CalibrationFrameModel] = Field(..., min_length=1)


class ColourTransformModel(BaseModel):
    """Serialized affine colour transform."""

    A: List[float] = Field(
        default_factory=lambda: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        min_length=9,
        max_length=9,
        description="Row-major 3x3 matrix",
    )
    a: List[float] = Field(
        default_factory=lambda: [0.0, 0.0, 0.0],
        min_length=3,
        max_length=3,
        description="RGB offset",
    )


class CameraMotion(BaseModel):
    """Per-step rigid camera translation."""

    translation: Tuple[float, float, float] = Field(
        (0.0, 0.0, 0.0), description="Translation per time step (scene units)"
    )
    yaw_degrees: float = Field(0.0, description="Yaw change per time step")


class SyntheticSpec(BaseModel):
    """Synthetic four-frame scene description."""

    width: int = Field(64, ge=8, description="Image width")
    height: int = Field(48, ge=8, description="Image height")
    focal: float = Field(60.0, gt=0, description="Focal length in pixels")
    baseline: float = Field(0.2, description="Rig baseline along x")
    camera2_yaw_degrees: float = Field(0.0, description="Yaw of camera 2")
    geometry: SceneGeometry = Field(SceneGeometry.TWO_LAYER, description="Layout")
    plane_depth: float = Field(4.0, gt=0, description="Background plane depth")
    near_depth: float = Field(2.5, gt=0, description="Foreground layer depth")
    near_extent: Tuple[float, float, float, float] = Field(
        (-0.35, 0.35, -0.3, 0.3),
        description="Foreground rectangle (x0, x1, y0, y1) in scene units",
    )
    background_motion: Tuple[float, float, float] = Field(
        (0.0, 0.0, 0.0), description="Background motion per step"
    )
    foreground_motion: Tuple[float, float, float] = Field(
        (0.0, 0.0, 0.0), description="Foreground motion per step"
    )
    camera1_motion: CameraMotion = Field(default_factory=CameraMotion)
    camera2_motion: CameraMotion = Field(default_factory=CameraMotion)
    texture_path: Optional[str] = Field(None, description="Texture image path")
    texture_scale: float = Field(
        40.0, gt=0, description="Texture pixels per scene unit"
    )
    contamination: Optional[ColourTransformModel] = Field(
        None, description="Colour transform applied to camera 2 images"
    )
    noise_sigma: float = Field(0.0, ge=0, description="Gaussian image noise")
    num_frames: int = Field(2, ge=2, description="Frames per camera")
    seed: int = Field(0, ge=0, description="Texture and noise seed")

    @model_validator(mode="after")
    def _check_layers(self) -> "SyntheticSpec":
        if self.geometry == SceneGeometry.TWO_LAYER and self.near_depth >= self.plane_depth:
            raise ValueError("near_depth must be smaller than plane_depth")
        return self


class PipelineConfig(BaseModel):
    """Full pipeline configuration."""

    input_dir: str = Field(".", description="Base directory of the inputs")
    camera1_pattern: str = Field(
        "frames/cam1_{frame:04d}.png", description="Camera 1 frame pattern"
    )
    camera2_pattern: str = Field(
        "frames/cam2_{frame:04d}.png", description="Camera 2 frame pattern"
    )
    calibration: str = Field("calibration.json", description="Calibration file")
    output_dir: str = Field("output", description="Output directory")
    ground_truth_dir: Optional[str] = Field(
        None, description="Ground truth directory for evaluation"
    )
    num_frames: Optional[int] = Field(
        None, ge=2, description="Frames per camera (default: calibration length)"
    )
    stages: List[StageName] = Field(
        default_factory=lambda: list(StageName), description="Stages to run"
    )
    match: MatchParams = Field(default_factory=MatchParams)
    fill: FillParams = Field(default_factory=FillParams)
    sceneflow: SceneFlowParams = Field(default_factory=SceneFlowParams)
    seed: int = Field(0, ge=0, description="Random seed")
    jobs: int = Field(1, ge=1, description="Frame pairs processed concurrently")
    visualize: bool = Field(True, description="Write flow visualizations")

    @field_validator("stages")
    @classmethod
    def _order_stages(cls, stages: List[StageName]) -> List[StageName]:
        order = list(StageName)
        return sorted(set(stages), key=order.index)

    def resolve(self, path: str) -> Path:
        """Resolve an input path against input_dir."""
        candidate = Path(path)
        return candidate if candidate.is_absolute() else Path(self.input_dir) / candidate

    def frame_path(self, camera: int, frame: int) -> Path:
        pattern = self.camera1_pattern if camera == 1 else self.camera2_pattern
        return self.resolve(pattern.format(frame=frame))

    def validate_paths(self, num_frames: int) -> None:
        """Check that calibration and all frames exist."""
        missing: List[str] = []
        calibration = self.resolve(self.calibration)
        if not calibration.exists():
            missing.append(str(calibration))
        for frame in range(num_frames):
            for camera in (1, 2):
                path = self.frame_path(camera, frame)
                if not path.exists():
                    missing.append(str(path))
        if self.ground_truth_dir and not Path(self.ground_truth_dir).is_dir():
            missing.append(self.ground_truth_dir)
        if missing:
            raise ValueError(f"Missing input files: {', '.join(missing)}")

    def log_overrides(self) -> None:
        """Log every parameter that differs from its default."""
        defaults = PipelineConfig().model_dump(mode="json")
        current = self.model_dump(mode="json")
        for block in ("match", "fill", "sceneflow"):
            for name, value in _flatten(current[block], block).items():
                default = _flatten(defaults[block], block).get(name)
                if value != default:
                    logger.info(f"Overriding {name}: {default} -> {value}")

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        """Load a JSON configuration document."""
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
        config = cls.model_validate(data)
        config.log_overrides()
        return config


def _flatten(value: Any, prefix: str) -> Dict[str, Any]:
    if isinstance(value, dict):
        out: Dict[str, Any] = {}
        for key, item in value.items():
            out.update(_flatten(item, f"{prefix}.{key}"))
        return out
    return {prefix: value}


class FrameMetrics(BaseModel):
    """Error statistics of one frame pair."""

    frame: int = Field(..., ge=0, description="Frame index t")
    mae_d: Dict[str, float] = Field(
        default_factory=dict, description="MAE of disparity per stage"
    )
    rmse: Optional[float] = Field(None, ge=0, description="Scene flow RMSE")
    aae: Optional[float] = Field(None, ge=0, description="Scene flow AAE in degrees")
    mee: Optional[float] = Field(None, ge=0, description="Stereo endpoint error")
    aae_2d: Optional[float] = Field(None, ge=0, description="Stereo angular error")
    pixel_count: int = Field(0, ge=0, description="Evaluated pixels")


class FillDiagnostics(BaseModel):
    """Fill quality of one frame, measured by re-filling the ground-truth stereo flow."""

    frame: int = Field(..., ge=0, description="Frame index")
    occluded_pixels: int = Field(..., ge=0, description="Occluded stereo pixels")
    linearity_mee: float = Field(..., ge=0, description="Endpoint error of per-window affine colour fits")
    linearity_aae: float = Field(..., ge=0, description="Angular error of per-window affine colour fits")
    laplacian_mee: float = Field(..., ge=0, description="Matting-Laplacian fill endpoint error")
    laplacian_aae: float = Field(..., ge=0, description="Matting-Laplacian fill angular error")
    diffusion_mee: float = Field(..., ge=0, description="Diffusion fill endpoint error")
    diffusion_aae: float = Field(..., ge=0, description="Diffusion fill angular error")


class EvalReport(BaseModel):
    """Per-frame evaluation report."""

    stages: List[str] = Field(default_factory=list, description="Evaluated stages")
    frames: List[FrameMetrics] = Field(default_factory=list)
    fill_diagnostics: List[FillDiagnostics] = Field(
        default_factory=list, description="Fill quality on ground truth, when images are available"
    )

    def csv_header(self) -> List[str]:
        return (
            ["frame"]
            + [f"MAE_d_{stage}" for stage in self.stages]
            + ["RMSE", "AAE", "MEE", "AAE_2D", "pixels"]
        )

    def csv_rows(self) -> List[List[str]]:
        rows = []
        for item in self.frames:
            row = [str(item.frame)]
            row += [_fmt(item.mae_d.get(stage)) for stage in self.stages]
            row += [
                _fmt(item.rmse),
                _fmt(item.aae),
                _fmt(item.mee),
                _fmt(item.aae_2d),
                str(item.pixel_count),
            ]
            rows.append(row)
        return rows


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


class ArtifactManifest(BaseModel):
    """Record of a pipeline run."""

    seed: int = Field(..., description="Random seed of the run")
    stages_run: List[str] = Field(default_factory=list)
    stages_skipped: List[str] = Field(default_factory=list)
    artifacts: Dict[str, List[str]] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)

    def add(self, stage: str, path: Path, root: Path) -> None:
        entry = self.artifacts.setdefault(stage, [])
        relative = str(path.relative_to(root))
        if relative not in entry:
            entry.append(relative)
            entry.sort()


class Response(BaseModel):
    """Generic tool response."""

    success: bool = Field(..., description="Operation success status")
    message: str = Field(..., description="Response message")
    data: Optional[Dict[str, Any]] = Field(default=None, description="Response data")
    error: Optional[str] = Field(default=None, description="Error message if failed")
    timestamp: datetime = Field(
        default_factory=datetime.now, description="Response timestamp"
    )


class PipelineResponse(Response):
    """Pipeline run response."""

    manifest: Optional[ArtifactManifest] = Field(None, description="Run manifest")


class EvalResponse(Response):
    """Evaluation response."""

    report: Optional[EvalReport] = Field(None, description="Evaluation report")


class FlowStatistics(BaseModel):
    """Summary of a flow field."""

    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    valid_fraction: float = Field(..., ge=0, le=1)
    mean_magnitude: float = Field(..., ge=0)
    max_magnitude: float = Field(..., ge=0)


class SystemInfo(BaseModel):
    """Server information."""

    server_version: str = Field(..., description="Server version")
    cholmod_available: bool = Field(..., description="CHOLMOD factorisation available")
    sparse_solver: SparseSolver = Field(..., description="Sparse solver used by the fill stage")
    uptime: float = Field(..., description="Server uptime in seconds")
    last_command: Optional[str] = Field(None, description="Last executed command")
    last_command_time: Optional[datetime] = Field(
        None, description="Last command execution time"
    )
