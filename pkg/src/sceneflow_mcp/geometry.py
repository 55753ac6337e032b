"""Camera calibration containers, epipolar algebra and DLT triangulation."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import ValidationError

from .models import (
    CalibrationDocument,
    CalibrationFrameModel,
    CameraCalibModel,
)

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]

SAMPSON_DEGENERATE = 1e-12
POINT_AT_INFINITY = 1e-12


class CalibrationError(ValueError):
    """Raised when a calibration document violates the schema or invariants."""

    pass


class DegenerateGeometryError(ValueError):
    """Raised when an epipolar construction is undefined (e.g. at the epipole)."""

    pass


class TriangulationError(ValueError):
    """Raised when two rays do not define a finite 3D point."""

    pass


@dataclass(frozen=True)
class CameraCalib:
    """Pinhole camera P = K [R | t]."""

    K: Matrix
    R: Matrix
    t: Matrix

    @property
    def P(self) -> Matrix:
        return self.K @ np.hstack([self.R, self.t.reshape(3, 1)])

    @property
    def centre(self) -> Matrix:
        return -self.R.T @ self.t

    def to_camera(self, points: Matrix) -> Matrix:
        """World points (..., 3) in camera coordinates."""
        return points @ self.R.T + self.t

    def validate(self, name: str = "camera") -> None:
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise CalibrationError(f"{name}: R is not orthonormal")
        if np.linalg.det(self.R) < 0:
            raise CalibrationError(f"{name}: det(R) = -1, not a rotation")
        if not np.allclose(np.tril(self.K, -1), 0.0):
            raise CalibrationError(f"{name}: K is not upper-triangular")
        if np.any(np.diag(self.K) <= 0):
            raise CalibrationError(f"{name}: K has a non-positive diagonal")


@dataclass(frozen=True)
class StereoRigFrame:
    """Calibration of both views at one time step."""

    cam1: CameraCalib
    cam2: CameraCalib
    F: Matrix


def homogeneous(point: Sequence[float]) -> Matrix:
    p = np.asarray(point, dtype=np.float64).ravel()
    if p.size == 2:
        return np.array([p[0], p[1], 1.0])
    return p


def skew(v: Matrix) -> Matrix:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def sampson_cost(
    F: Matrix, x: Sequence[float], y: Sequence[float], w_e: float = 1.0
) -> Tuple[float, bool]:
    """Weighted Sampson distance of the pair (x in image 1, y in image 2).

    Returns ``(cost, degenerate)``; a vanishing denominator yields ``(0, True)``.
    """
    F = np.asarray(F, dtype=np.float64)
    xh = homogeneous(x)
    yh = homogeneous(y)
    fx = F @ xh
    fty = F.T @ yh
    denominator = fx[0] ** 2 + fx[1] ** 2 + fty[0] ** 2 + fty[1] ** 2
    if denominator < SAMPSON_DEGENERATE:
        return 0.0, True
    numerator = float(yh @ fx) ** 2
    return w_e * numerator / denominator, False


def _line_direction(l1: npt.ArrayLike, l2: npt.ArrayLike) -> Tuple[Matrix, Matrix]:
    """Unit direction perpendicular to the normal (l1, l2), sign-normalised."""
    l1 = np.asarray(l1, dtype=np.float64)
    l2 = np.asarray(l2, dtype=np.float64)
    norm = np.hypot(l1, l2)
    safe = np.where(norm > 0, norm, 1.0)
    dx = l2 / safe
    dy = -l1 / safe
    flip = (dx < 0) | ((dx == 0) & (dy < 0))
    dx = np.where(flip, -dx, dx)
    dy = np.where(flip, -dy, dy)
    return dx + 0.0, dy + 0.0


def epipolar_direction(F: Matrix, point: Sequence[float], side: int) -> Matrix:
    """Unit direction of an epipolar line.

    ``side=2``: ``point`` is x in image 1 and the line l = F x lives in image 2.
    ``side=1``: ``point`` is y in image 2 and the line l = F^T y lives in image 1.
    """
    F = np.asarray(F, dtype=np.float64)
    p = homogeneous(point)
    if side == 2:
        line = F @ p
    elif side == 1:
        line = F.T @ p
    else:
        raise ValueError(f"side must be 1 or 2, got {side}")
    if np.hypot(line[0], line[1]) < SAMPSON_DEGENERATE:
        raise DegenerateGeometryError(f"Point {p[:2]} is the epipole")
    dx, dy = _line_direction(line[0], line[1])
    return np.array([float(dx), float(dy)])


def epipoles(F: Matrix) -> Tuple[Matrix, Matrix]:
    """Right (image 1) and left (image 2) null vectors of F."""
    _, _, vt = np.linalg.svd(F)
    e1 = vt[-1]
    _, _, vt = np.linalg.svd(F.T)
    e2 = vt[-1]
    return e1, e2


def epipolar_angles(F: Matrix, width: int, height: int, image: int) -> Matrix:
    """Per-pixel orientation (radians) of the epipolar line through each pixel.

    The line through pixel x of ``image`` is the join of x with that image's
    epipole, which equals l = F^T y (image 1) or l = F x (image 2) for any
    corresponding point. Pixels at the epipole get angle 0.
    """
    e1, e2 = epipoles(np.asarray(F, dtype=np.float64))
    e = e1 if image == 1 else e2
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    # l = e x (x, y, 1)
    l1 = e[1] * 1.0 - e[2] * ys
    l2 = e[2] * xs - e[0] * 1.0
    dx, dy = _line_direction(l1, l2)
    degenerate = np.hypot(l1, l2) < SAMPSON_DEGENERATE
    angles = np.arctan2(dy, dx)
    angles[degenerate] = 0.0
    return angles


def project(P: Matrix, points: Matrix) -> Matrix:
    """Project world points (..., 3) to pixels (..., 2)."""
    points = np.asarray(points, dtype=np.float64)
    homog = points @ P[:, :3].T + P[:, 3]
    return homog[..., :2] / homog[..., 2:3]


def triangulate_dlt(
    P1: Matrix, P2: Matrix, x: Sequence[float], y: Sequence[float]
) -> Matrix:
    """Linear triangulation of one correspondence via SVD of the 4x4 DLT system."""
    A = np.array(
        [
            x[0] * P1[2] - P1[0],
            x[1] * P1[2] - P1[1],
            y[0] * P2[2] - P2[0],
            y[1] * P2[2] - P2[1],
        ],
        dtype=np.float64,
    )
    _, s, vt = np.linalg.svd(A)
    if s[2] <= POINT_AT_INFINITY * s[0]:
        raise TriangulationError("Rays are identical; the point is undetermined")
    X = vt[-1]
    if abs(X[3]) < POINT_AT_INFINITY:
        raise TriangulationError("Triangulated point lies at infinity")
    return X[:3] / X[3]


def triangulate_dlt_batch(
    P1: Matrix, P2: Matrix, xs: Matrix, ys: Matrix
) -> Tuple[Matrix, npt.NDArray[np.bool_]]:
    """Vectorised :func:`triangulate_dlt` over (N, 2) point arrays.

    Returns ``(points, valid)``; degenerate rows are NaN and invalid.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 2)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1, 2)
    A = np.stack(
        [
            xs[:, 0:1] * P1[2] - P1[0],
            xs[:, 1:2] * P1[2] - P1[1],
            ys[:, 0:1] * P2[2] - P2[0],
            ys[:, 1:2] * P2[2] - P2[1],
        ],
        axis=1,
    )
    _, s, vt = np.linalg.svd(A)
    X = vt[:, -1, :]
    valid = (s[:, 2] > POINT_AT_INFINITY * s[:, 0]) & (np.abs(X[:, 3]) >= POINT_AT_INFINITY)
    points = np.full((xs.shape[0], 3), np.nan)
    points[valid] = X[valid, :3] / X[valid, 3:4]
    return points, valid


def fundamental_from_projections(P1: Matrix, P2: Matrix) -> Matrix:
    """F = [e2]_x P2 P1^+ with e2 = P2 C1, normalised to unit Frobenius norm."""
    _, _, vt = np.linalg.svd(P1)
    centre = vt[-1]
    e2 = P2 @ centre
    F = skew(e2) @ P2 @ np.linalg.pinv(P1)
    norm = np.linalg.norm(F)
    if norm == 0:
        raise DegenerateGeometryError("Cameras share a centre; F is undefined")
    return F / norm


def _camera_from_model(model: CameraCalibModel, name: str) -> CameraCalib:
    K = np.array(model.K, dtype=np.float64).reshape(3, 3)
    R = np.array(model.R, dtype=np.float64).reshape(3, 3)
    t = np.array(model.t, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise CalibrationError(f"{name}: K is not invertible")
    camera = CameraCalib(K=K, R=R, t=t)
    camera.validate(name)
    return camera


def load_calibration(
    path: Union[str, Path], expected_frames: Optional[int] = None
) -> List[StereoRigFrame]:
    """Load per-frame rig calibration, deriving F from the projections if absent."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            document = CalibrationDocument.model_validate(json.load(handle))
    except ValidationError as e:
        raise CalibrationError(f"{path}: schema violation: {e}") from e
    except json.JSONDecodeError as e:
        raise CalibrationError(f"{path}: invalid JSON: {e}") from e

    if expected_frames is not None and len(document.frames) != expected_frames:
        raise CalibrationError(
            f"{path}: {len(document.frames)} calibration frames, expected {expected_frames}"
        )

    frames = []
    for index, entry in enumerate(document.frames):
        cam1 = _camera_from_model(entry.cam1, f"frame {index} cam1")
        cam2 = _camera_from_model(entry.cam2, f"frame {index} cam2")
        if entry.F is not None:
            F = np.array(entry.F, dtype=np.float64).reshape(3, 3)
        else:
            F = fundamental_from_projections(cam1.P, cam2.P)
        frames.append(StereoRigFrame(cam1=cam1, cam2=cam2, F=F))
    logger.info(f"Loaded calibration for {len(frames)} frames from {path}")
    return frames


def save_calibration(
    path: Union[str, Path], frames: Sequence[StereoRigFrame], include_f: bool = True
) -> None:
    """Write frames in the calibration JSON schema."""

    def camera_model(camera: CameraCalib) -> CameraCalibModel:
        return CameraCalibModel(
            K=camera.K.ravel().tolist(),
            R=camera.R.ravel().tolist(),
            t=camera.t.ravel().tolist(),
        )

    document = CalibrationDocument(
        frames=[
            CalibrationFrameModel(
                cam1=camera_model(frame.cam1),
                cam2=camera_model(frame.cam2),
                F=frame.F.ravel().tolist() if include_f else None,
            )
            for frame in frames
        ]
    )
    Path(path).write_text(document.model_dump_json(indent=2, exclude_none=True))


def rig_frame(cam1: CameraCalib, cam2: CameraCalib) -> StereoRigFrame:
    """Rig frame with F derived from the two projections."""
    return StereoRigFrame(cam1=cam1, cam2=cam2, F=fundamental_from_projections(cam1.P, cam2.P))


def scale_fundamental(F: Matrix, scale_x: float, scale_y: float) -> Matrix:
    """F for images resampled by (scale_x, scale_y) with aligned pixel centres."""
    H = np.array(
        [
            [scale_x, 0.0, 0.5 * scale_x - 0.5],
            [0.0, scale_y, 0.5 * scale_y - 0.5],
            [0.0, 0.0, 1.0],
        ]
    )
    H_inv = np.linalg.inv(H)
    return H_inv.T @ F @ H_inv
