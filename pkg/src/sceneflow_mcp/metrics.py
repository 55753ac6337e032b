"""Error metrics for stereo, optical and scene flow, and report writers."""

import csv
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from .imagecore import BitMask, FlowField, Raster, as_flow, as_raster, invalid_mask
from .models import EvalReport

logger = logging.getLogger(__name__)

SceneFlowTuple = npt.NDArray[np.float64]


class MetricsError(ValueError):
    """Raised when a metric has nothing to evaluate or inputs disagree in size."""

    pass


def _evaluated(shape: Tuple[int, int], excluded: Optional[BitMask]) -> BitMask:
    if excluded is None:
        return np.ones(shape, dtype=bool)
    excluded = np.asarray(excluded, dtype=bool)
    if excluded.shape != shape:
        raise MetricsError(f"Mask {excluded.shape} does not match {shape}")
    return ~excluded


def _require(selected: BitMask, metric: str) -> None:
    if not selected.any():
        raise MetricsError(f"{metric}: no evaluable pixels")


def _angle_degrees(a: npt.NDArray[np.float64], b: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Angle between row vectors, arccos argument clamped to [-1, 1]."""
    dot = np.sum(a * b, axis=-1)
    norms = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    cosine = np.clip(dot / norms, -1.0, 1.0)
    return np.degrees(np.arccos(cosine))


def disparity_magnitude(u2: FlowField) -> npt.NDArray[np.float64]:
    """d = ||u2||."""
    u2 = as_flow(u2).astype(np.float64)
    return np.hypot(u2[:, :, 0], u2[:, :, 1])


def mae_disparity(
    u2: FlowField, gt_disparity: Raster, occluded: Optional[BitMask] = None
) -> float:
    """Mean |‖u2‖ - d_gt| over non-occluded pixels."""
    d = disparity_magnitude(u2)
    gt = as_raster(gt_disparity)[:, :, 0].astype(np.float64)
    if gt.shape != d.shape:
        raise MetricsError(f"Disparity {gt.shape} does not match flow {d.shape}")
    selected = _evaluated(d.shape, occluded) & ~invalid_mask(as_flow(u2)) & np.isfinite(gt)
    _require(selected, "MAE_d")
    return float(np.mean(np.abs(d[selected] - gt[selected])))


def sceneflow_tuple(u1: FlowField, u2: FlowField, u3: FlowField) -> SceneFlowTuple:
    """Per-pixel (u, v, d, p) with d = ||u2|| and p = ||u2 + u3|| - ||u2||."""
    u1 = as_flow(u1).astype(np.float64)
    u2 = as_flow(u2).astype(np.float64)
    u3 = as_flow(u3).astype(np.float64)
    if not (u1.shape == u2.shape == u3.shape):
        raise MetricsError("Scene flow components differ in size")
    d = np.hypot(u2[:, :, 0], u2[:, :, 1])
    p = np.hypot(u2[:, :, 0] + u3[:, :, 0], u2[:, :, 1] + u3[:, :, 1]) - d
    return np.stack([u1[:, :, 0], u1[:, :, 1], d, p], axis=2)


def _tuple_pair(
    est: SceneFlowTuple, gt: SceneFlowTuple, occluded: Optional[BitMask], metric: str
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 3 or est.shape[2] != 4:
        raise MetricsError(f"{metric}: tuple fields must share shape (h, w, 4)")
    selected = _evaluated(est.shape[:2], occluded)
    selected &= np.all(np.isfinite(est) & (np.abs(est) < 1e9), axis=2)
    selected &= np.all(np.isfinite(gt) & (np.abs(gt) < 1e9), axis=2)
    _require(selected, metric)
    return est[selected], gt[selected]


def rmse_sceneflow(
    est: SceneFlowTuple, gt: SceneFlowTuple, occluded: Optional[BitMask] = None
) -> float:
    """sqrt(mean ||(u, v, d, p) - (u, v, d, p)_gt||^2)."""
    a, b = _tuple_pair(est, gt, occluded, "RMSE")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def aae_sceneflow(
    est: SceneFlowTuple, gt: SceneFlowTuple, occluded: Optional[BitMask] = None
) -> float:
    """Mean angle (degrees) between (u, v, p, 1) and its ground truth."""
    a, b = _tuple_pair(est, gt, occluded, "AAE")
    ones = np.ones((a.shape[0], 1))
    a4 = np.hstack([a[:, [0, 1, 3]], ones])
    b4 = np.hstack([b[:, [0, 1, 3]], ones])
    return float(np.mean(_angle_degrees(a4, b4)))


def flow2d_errors(
    est: FlowField, gt: FlowField, evaluate: Optional[BitMask] = None
) -> Tuple[float, float]:
    """(MEE, AAE_2D) over ``evaluate`` (all pixels when None)."""
    est = as_flow(est).astype(np.float64)
    gt = as_flow(gt).astype(np.float64)
    if est.shape != gt.shape:
        raise MetricsError(f"Flow dimensions differ: {est.shape} vs {gt.shape}")
    if evaluate is None:
        selected = np.ones(est.shape[:2], dtype=bool)
    else:
        selected = np.asarray(evaluate, dtype=bool)
        if selected.shape != est.shape[:2]:
            raise MetricsError(f"Mask {selected.shape} does not match {est.shape[:2]}")
    selected = selected & ~invalid_mask(gt) & ~invalid_mask(est)
    _require(selected, "flow2d_errors")
    a = est[selected]
    b = gt[selected]
    mee = float(np.mean(np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1])))
    ones = np.ones((a.shape[0], 1))
    aae = float(np.mean(_angle_degrees(np.hstack([a, ones]), np.hstack([b, ones]))))
    return mee, aae


def write_report_csv(report: EvalReport, path: Union[str, Path]) -> None:
    """Per-frame CSV: frame, MAE_d per stage, RMSE, AAE, MEE, AAE_2D, pixels."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(report.csv_header())
        writer.writerows(report.csv_rows())
    logger.info(f"Wrote evaluation CSV with {len(report.frames)} rows to {path}")


def write_report_json(report: EvalReport, path: Union[str, Path]) -> None:
    Path(path).write_text(report.model_dump_json(indent=2))
