"""Synthetic two-camera sequences with analytic ground truth.

Scenes are fronto-parallel textured planes: a background plane and an
optional foreground rectangle, each translating rigidly per frame. Both
cameras are pinholes sharing intrinsics; camera 2 sits at the baseline
along x with an optional yaw. Images are ray-cast with bilinear texture
lookup, so every ground-truth field follows from projecting the hit points.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from .geometry import CameraCalib, StereoRigFrame, project, rig_frame, save_calibration
from .imagecore import (
    UNKNOWN_FLOW,
    BitMask,
    FlowField,
    Raster,
    read_image,
    write_flo,
    write_mask,
    write_pfm,
    write_png,
)
from .models import SceneGeometry, SyntheticSpec

logger = logging.getLogger(__name__)

TEXTURE_SIZE = 256


class SyntheticSceneError(ValueError):
    """Raised when the camera setup cannot see the scene."""

    pass


@dataclass(frozen=True)
class _Layer:
    depth: float
    motion: npt.NDArray[np.float64]
    texture: npt.NDArray[np.float32]
    extent: Optional[Tuple[float, float, float, float]] = None

    def z(self, frame: int) -> float:
        return self.depth + frame * float(self.motion[2])

    def contains(self, points: npt.NDArray[np.float64], frame: int) -> npt.NDArray[np.bool_]:
        if self.extent is None:
            return np.ones(points.shape[0], dtype=bool)
        x0, x1, y0, y1 = self.extent
        ox, oy = frame * self.motion[0], frame * self.motion[1]
        px = points[:, 0] - ox
        py = points[:, 1] - oy
        return (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)


@dataclass
class SyntheticScene:
    """Rendered images, calibration and ground truth of a synthetic sequence.

    Per-frame fields (index f) cover every frame; per-step fields (index t)
    describe the four-frame configuration (t, t+1).
    """

    spec: SyntheticSpec
    rigs: List[StereoRigFrame]
    camera1: List[Raster]
    camera2: List[Raster]
    stereo: List[FlowField] = field(default_factory=list)
    disparity: List[npt.NDArray[np.float32]] = field(default_factory=list)
    depth: List[npt.NDArray[np.float32]] = field(default_factory=list)
    stereo_occlusion: List[BitMask] = field(default_factory=list)
    u1: List[FlowField] = field(default_factory=list)
    u3: List[FlowField] = field(default_factory=list)
    flow2: List[FlowField] = field(default_factory=list)
    occlusion: List[BitMask] = field(default_factory=list)
    motion: List[npt.NDArray[np.float64]] = field(default_factory=list)


def _rotation_y(degrees: float) -> npt.NDArray[np.float64]:
    angle = math.radians(degrees)
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _camera(K: npt.NDArray[np.float64], centre: npt.NDArray[np.float64], yaw: float) -> CameraCalib:
    R = _rotation_y(yaw).T
    return CameraCalib(K=K, R=R, t=-R @ centre)


def build_rigs(spec: SyntheticSpec) -> List[StereoRigFrame]:
    """Per-frame rig calibration following both camera trajectories."""
    K = np.array(
        [
            [spec.focal, 0.0, (spec.width - 1) / 2.0],
            [0.0, spec.focal, (spec.height - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    rigs = []
    for frame in range(spec.num_frames):
        c1 = frame * np.asarray(spec.camera1_motion.translation, dtype=np.float64)
        c2 = np.array([spec.baseline, 0.0, 0.0]) + frame * np.asarray(
            spec.camera2_motion.translation, dtype=np.float64
        )
        cam1 = _camera(K, c1, frame * spec.camera1_motion.yaw_degrees)
        cam2 = _camera(K, c2, spec.camera2_yaw_degrees + frame * spec.camera2_motion.yaw_degrees)
        rigs.append(rig_frame(cam1, cam2))
    return rigs


def procedural_texture(rng: np.random.Generator, tint: Tuple[float, float, float]) -> npt.NDArray[np.float32]:
    """Tileable band-limited noise in [0, 1], two octaves, tinted per channel."""
    fine = ndimage.gaussian_filter(rng.random((TEXTURE_SIZE, TEXTURE_SIZE, 3)), (2.0, 2.0, 0.0), mode="wrap")
    coarse = ndimage.gaussian_filter(rng.random((TEXTURE_SIZE, TEXTURE_SIZE, 3)), (6.0, 6.0, 0.0), mode="wrap")
    texture = fine + 0.5 * coarse
    low = texture.min(axis=(0, 1), keepdims=True)
    high = texture.max(axis=(0, 1), keepdims=True)
    texture = 0.1 + 0.8 * (texture - low) / np.maximum(high - low, 1e-12)
    return (texture * np.asarray(tint)).astype(np.float32)


def _texture_lookup(
    texture: npt.NDArray[np.float32], X: npt.NDArray[np.float64], Y: npt.NDArray[np.float64], scale: float
) -> npt.NDArray[np.float32]:
    rows = Y * scale + texture.shape[0] / 2.0
    cols = X * scale + texture.shape[1] / 2.0
    out = np.empty((X.size, 3), dtype=np.float32)
    for c in range(3):
        out[:, c] = ndimage.map_coordinates(
            texture[:, :, c], np.stack([rows, cols]), order=1, mode="grid-wrap"
        )
    return out


def _layers(spec: SyntheticSpec, rng: np.random.Generator) -> List[_Layer]:
    """Scene layers, nearest first."""
    if spec.texture_path:
        background_texture = read_image(spec.texture_path)
        if background_texture.shape[2] == 1:
            background_texture = np.repeat(background_texture, 3, axis=2)
    else:
        background_texture = procedural_texture(rng, (1.0, 1.0, 1.0))
    layers = []
    if spec.geometry == SceneGeometry.TWO_LAYER:
        layers.append(
            _Layer(
                depth=spec.near_depth,
                motion=np.asarray(spec.foreground_motion, dtype=np.float64),
                texture=procedural_texture(rng, (1.0, 0.55, 0.3)),
                extent=spec.near_extent,
            )
        )
    layers.append(
        _Layer(
            depth=spec.plane_depth,
            motion=np.asarray(spec.background_motion, dtype=np.float64),
            texture=background_texture,
        )
    )
    return layers


def _pixel_rays(
    camera: CameraCalib, height: int, width: int
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    pixels = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)], axis=1)
    directions = pixels @ np.linalg.inv(camera.K).T @ camera.R
    return camera.centre, directions


def _ray_cast(
    layers: List[_Layer], camera: CameraCalib, frame: int, height: int, width: int
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.int64]]:
    """First hit point and layer index of every pixel ray."""
    centre, directions = _pixel_rays(camera, height, width)
    n = directions.shape[0]
    best = np.full(n, np.inf)
    points = np.full((n, 3), np.nan)
    layer_ids = np.full(n, -1, dtype=np.int64)
    for index, layer in enumerate(layers):
        dz = directions[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (layer.z(frame) - centre[2]) / dz
        hit_points = centre + s[:, None] * directions
        hit = (dz > 1e-9) & (s > 0) & layer.contains(hit_points, frame) & (s < best)
        best[hit] = s[hit]
        points[hit] = hit_points[hit]
        layer_ids[hit] = index
    if np.any(layer_ids < 0):
        raise SyntheticSceneError(
            f"Frame {frame}: {int((layer_ids < 0).sum())} pixel rays miss the background plane "
            "(camera edge-on or facing away)"
        )
    return points, layer_ids


def _render(
    layers: List[_Layer], points: npt.NDArray[np.float64], layer_ids: npt.NDArray[np.int64],
    frame: int, spec: SyntheticSpec,
) -> Raster:
    colours = np.zeros((points.shape[0], 3), dtype=np.float32)
    for index, layer in enumerate(layers):
        selected = layer_ids == index
        if not selected.any():
            continue
        rest = points[selected] - frame * layer.motion
        colours[selected] = _texture_lookup(layer.texture, rest[:, 0], rest[:, 1], spec.texture_scale)
    return colours.reshape(spec.height, spec.width, 3)


def _visible(
    layers: List[_Layer], points: npt.NDArray[np.float64], layer_ids: npt.NDArray[np.int64],
    camera: CameraCalib, frame: int, spec: SyntheticSpec,
) -> Tuple[npt.NDArray[np.bool_], npt.NDArray[np.float64]]:
    """Whether each point is seen by ``camera`` at ``frame``, and its projection."""
    pixels = project(camera.P, points)
    depth = camera.to_camera(points)[:, 2]
    visible = (
        (depth > 0)
        & (pixels[:, 0] >= 0)
        & (pixels[:, 0] <= spec.width - 1)
        & (pixels[:, 1] >= 0)
        & (pixels[:, 1] <= spec.height - 1)
    )
    centre = camera.centre
    for index, layer in enumerate(layers):
        behind = layer_ids > index
        if not behind.any():
            continue
        delta = points - centre
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (layer.z(frame) - centre[2]) / delta[:, 2]
        crossing = centre + s[:, None] * delta
        blocked = behind & (s > 0) & (s < 1 - 1e-9) & layer.contains(crossing, frame)
        visible &= ~blocked
    return visible, pixels


def _flow(target: npt.NDArray[np.float64], base: npt.NDArray[np.float64], valid: npt.NDArray[np.bool_], spec: SyntheticSpec) -> FlowField:
    flow = (target - base).astype(np.float32)
    flow[~valid] = UNKNOWN_FLOW
    return flow.reshape(spec.height, spec.width, 2)


def _contaminate(image: Raster, spec: SyntheticSpec) -> Raster:
    if spec.contamination is None:
        return image
    A = np.asarray(spec.contamination.A, dtype=np.float64).reshape(3, 3)
    a = np.asarray(spec.contamination.a, dtype=np.float64)
    return np.clip(image.astype(np.float64) @ A.T + a, 0.0, 1.0).astype(np.float32)


def render_synthetic(spec: SyntheticSpec) -> SyntheticScene:
    """Render all frames of both cameras and compute the analytic ground truth."""
    texture_seed, noise_seed = np.random.SeedSequence(spec.seed).spawn(2)
    layers = _layers(spec, np.random.default_rng(texture_seed))
    noise = np.random.default_rng(noise_seed)
    rigs = build_rigs(spec)
    height, width = spec.height, spec.width
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    base = np.stack([xs.ravel(), ys.ravel()], axis=1)

    casts = []
    scene = SyntheticScene(spec=spec, rigs=rigs, camera1=[], camera2=[])
    for frame, rig in enumerate(rigs):
        hit1 = _ray_cast(layers, rig.cam1, frame, height, width)
        hit2 = _ray_cast(layers, rig.cam2, frame, height, width)
        casts.append((hit1, hit2))
        image1 = _render(layers, *hit1, frame, spec)
        image2 = _contaminate(_render(layers, *hit2, frame, spec), spec)
        if spec.noise_sigma > 0:
            image1 = np.clip(image1 + noise.normal(0.0, spec.noise_sigma, image1.shape), 0, 1)
            image2 = np.clip(image2 + noise.normal(0.0, spec.noise_sigma, image2.shape), 0, 1)
        scene.camera1.append(image1.astype(np.float32))
        scene.camera2.append(image2.astype(np.float32))

        points, ids = hit1
        seen2, pixels2 = _visible(layers, points, ids, rig.cam2, frame, spec)
        stereo = _flow(pixels2, base, np.ones(base.shape[0], dtype=bool), spec)
        scene.stereo.append(stereo)
        scene.disparity.append(np.hypot(stereo[:, :, 0], stereo[:, :, 1]).astype(np.float32))
        scene.depth.append(rig.cam1.to_camera(points)[:, 2].reshape(height, width).astype(np.float32))
        scene.stereo_occlusion.append(~seen2.reshape(height, width))

    for t in range(spec.num_frames - 1):
        (points, ids), (points2, ids2) = casts[t]
        rig_next = rigs[t + 1]
        rig_now = rigs[t]
        motion = np.stack([layers[i].motion for i in ids])
        moved = points + motion
        seen_c1, p1 = _visible(layers, moved, ids, rig_next.cam1, t + 1, spec)
        seen_c2, q = _visible(layers, moved, ids, rig_next.cam2, t + 1, spec)
        seen_stereo, p2 = _visible(layers, points, ids, rig_now.cam2, t, spec)
        everywhere = np.ones(base.shape[0], dtype=bool)
        u1 = _flow(p1, base, everywhere, spec)
        scene.u1.append(u1)
        scene.u3.append(_flow(q, p1 + p2 - base, everywhere, spec))
        scene.occlusion.append(~(seen_c1 & seen_c2 & seen_stereo).reshape(height, width))
        scene.motion.append(motion.reshape(height, width, 3))

        motion2 = np.stack([layers[i].motion for i in ids2])
        q2 = project(rig_next.cam2.P, points2 + motion2)
        scene.flow2.append(_flow(q2, base, everywhere, spec))

    logger.info(
        f"Rendered {spec.num_frames} frames of a {spec.geometry.value} scene "
        f"at {width}x{height}"
    )
    return scene


def make_synthetic(spec: SyntheticSpec, out_dir: Union[str, Path]) -> SyntheticScene:
    """Render ``spec`` and write images, calibration and ground truth under ``out_dir``.

    Layout: ``frames/cam{1,2}_{f:04d}.png`` (16-bit), ``calibration.json``,
    ``spec.json`` and ``gt/`` with ``stereo``, ``disparity``, ``depth`` and
    ``occ_stereo`` per frame plus ``u1``, ``u3``, ``flow2`` and ``occ`` per step.
    """
    scene = render_synthetic(spec)
    root = Path(out_dir)
    frames_dir = root / "frames"
    gt_dir = root / "gt"
    frames_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)

    for frame in range(spec.num_frames):
        write_png(frames_dir / f"cam1_{frame:04d}.png", scene.camera1[frame])
        write_png(frames_dir / f"cam2_{frame:04d}.png", scene.camera2[frame])
        write_flo(gt_dir / f"stereo_{frame:04d}.flo", scene.stereo[frame])
        write_pfm(gt_dir / f"disparity_{frame:04d}.pfm", scene.disparity[frame])
        write_pfm(gt_dir / f"depth_{frame:04d}.pfm", scene.depth[frame])
        write_mask(gt_dir / f"occ_stereo_{frame:04d}.pgm", scene.stereo_occlusion[frame])
    for t in range(spec.num_frames - 1):
        write_flo(gt_dir / f"u1_{t:04d}.flo", scene.u1[t])
        write_flo(gt_dir / f"u3_{t:04d}.flo", scene.u3[t])
        write_flo(gt_dir / f"flow2_{t:04d}.flo", scene.flow2[t])
        write_mask(gt_dir / f"occ_{t:04d}.pgm", scene.occlusion[t])

    save_calibration(root / "calibration.json", scene.rigs)
    (root / "spec.json").write_text(spec.model_dump_json(indent=2))
    logger.info(f"Wrote synthetic dataset to {root}")
    return scene


def ground_truth_files(gt_dir: Union[str, Path], frame: int) -> Dict[str, Path]:
    """Paths of the ground-truth files of frame/step ``frame``."""
    root = Path(gt_dir)
    return {
        "stereo": root / f"stereo_{frame:04d}.flo",
        "disparity": root / f"disparity_{frame:04d}.pfm",
        "depth": root / f"depth_{frame:04d}.pfm",
        "occ_stereo": root / f"occ_stereo_{frame:04d}.pgm",
        "u1": root / f"u1_{frame:04d}.flo",
        "u3": root / f"u3_{frame:04d}.flo",
        "flow2": root / f"flow2_{frame:04d}.flo",
        "occ": root / f"occ_{frame:04d}.pgm",
    }
