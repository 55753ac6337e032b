"""Dense DAISY descriptors with epipolar-aligned sampling grids."""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import numpy.typing as npt
from numba import njit
from scipy import ndimage

from .imagecore import Raster, to_luma
from .models import DaisyParams, DescriptorNormalization

logger = logging.getLogger(__name__)

Descriptor = npt.NDArray[np.float64]

NORM_PARTIAL = 0
NORM_FULL = 1
NORM_NONE = 2

_NORM_CODES = {
    DescriptorNormalization.PARTIAL: NORM_PARTIAL,
    DescriptorNormalization.FULL: NORM_FULL,
    DescriptorNormalization.NONE: NORM_NONE,
}


@dataclass(frozen=True)
class OrientationPyramid:
    """Half-rectified directional gradients at Q+1 smoothing scales.

    ``layers`` has shape (Q + 1, H, height, width).
    """

    layers: npt.NDArray[np.float32]
    params: DaisyParams

    @property
    def height(self) -> int:
        return int(self.layers.shape[2])

    @property
    def width(self) -> int:
        return int(self.layers.shape[3])

    @property
    def norm_code(self) -> int:
        return _NORM_CODES[self.params.normalization]


def layer_sigma(params: DaisyParams, layer: int) -> float:
    """Cumulative smoothing of ``layer``: 0.5 * R * s / Q."""
    return 0.5 * params.radius * layer / params.rings


def build_orientation_pyramid(image: Raster, params: DaisyParams) -> OrientationPyramid:
    """Orientation maps max(0, d_o I) smoothed incrementally per ring."""
    luma = to_luma(image)
    height, width = luma.shape
    if height < 2 or width < 2:
        raise ValueError(f"DAISY needs at least a 2x2 image, got {width}x{height}")
    grad_y, grad_x = np.gradient(luma)

    n_layers = params.rings + 1
    layers = np.empty((n_layers, params.orientations, height, width), dtype=np.float32)
    for o in range(params.orientations):
        angle = 2.0 * math.pi * o / params.orientations
        directional = math.cos(angle) * grad_x + math.sin(angle) * grad_y
        current = np.maximum(directional, 0.0)
        layers[0, o] = current
        for s in range(1, n_layers):
            increment = math.sqrt(layer_sigma(params, s) ** 2 - layer_sigma(params, s - 1) ** 2)
            current = ndimage.gaussian_filter(current, increment, mode="nearest", truncate=4.0)
            layers[s, o] = current
    return OrientationPyramid(layers=layers, params=params)


@njit(cache=True, nogil=True)
def _sample_histogram(layers, s, px, py, out, offset):
    n_orient = layers.shape[1]
    height = layers.shape[2]
    width = layers.shape[3]
    if px < 0.0:
        px = 0.0
    elif px > width - 1.0:
        px = width - 1.0
    if py < 0.0:
        py = 0.0
    elif py > height - 1.0:
        py = height - 1.0
    x0 = int(math.floor(px))
    y0 = int(math.floor(py))
    x1 = min(x0 + 1, width - 1)
    y1 = min(y0 + 1, height - 1)
    fx = px - x0
    fy = py - y0
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    for o in range(n_orient):
        out[offset + o] = (
            w00 * layers[s, o, y0, x0]
            + w01 * layers[s, o, y0, x1]
            + w10 * layers[s, o, y1, x0]
            + w11 * layers[s, o, y1, x1]
        )


@njit(cache=True, nogil=True)
def _normalize(out, n_orient, norm_code):
    if norm_code == NORM_PARTIAL:
        for start in range(0, out.shape[0], n_orient):
            total = 0.0
            for k in range(start, start + n_orient):
                total += out[k] * out[k]
            if total > 0.0:
                scale = 1.0 / math.sqrt(total)
                for k in range(start, start + n_orient):
                    out[k] *= scale
    elif norm_code == NORM_FULL:
        total = 0.0
        for k in range(out.shape[0]):
            total += out[k] * out[k]
        if total > 0.0:
            scale = 1.0 / math.sqrt(total)
            for k in range(out.shape[0]):
                out[k] *= scale


@njit(cache=True, nogil=True)
def descriptor_into(layers, x, y, theta, radius, rings, points, norm_code, out):
    """Fill ``out`` with the descriptor at (x, y) rotated by ``theta``."""
    n_orient = layers.shape[1]
    _sample_histogram(layers, 0, x, y, out, 0)
    offset = n_orient
    for q in range(1, rings + 1):
        r = radius * q / rings
        for t in range(points):
            angle = theta + 2.0 * math.pi * t / points
            _sample_histogram(
                layers, q, x + r * math.cos(angle), y + r * math.sin(angle), out, offset
            )
            offset += n_orient
    _normalize(out, n_orient, norm_code)


@njit(cache=True, nogil=True)
def _dense(layers, angles, radius, rings, points, norm_code, out):
    height = out.shape[0]
    width = out.shape[1]
    buffer = np.empty(out.shape[2], dtype=np.float64)
    for y in range(height):
        for x in range(width):
            descriptor_into(
                layers, float(x), float(y), angles[y, x], radius, rings, points, norm_code, buffer
            )
            for k in range(out.shape[2]):
                out[y, x, k] = buffer[k]


def daisy_descriptor(
    pyramid: OrientationPyramid, x: float, y: float, theta: float = 0.0
) -> Descriptor:
    """Descriptor at the continuous pixel (x, y) with grid orientation ``theta``."""
    p = pyramid.params
    out = np.empty(p.descriptor_length, dtype=np.float64)
    descriptor_into(
        pyramid.layers,
        float(x),
        float(y),
        float(theta),
        float(p.radius),
        p.rings,
        p.points_per_ring,
        pyramid.norm_code,
        out,
    )
    return out


def dense_descriptors(
    pyramid: OrientationPyramid, angles: Optional[npt.NDArray[np.float64]] = None
) -> npt.NDArray[np.float32]:
    """Descriptors at every pixel, shape (height, width, length)."""
    p = pyramid.params
    if angles is None:
        angles = np.zeros((pyramid.height, pyramid.width), dtype=np.float64)
    out = np.empty((pyramid.height, pyramid.width, p.descriptor_length), dtype=np.float32)
    _dense(
        pyramid.layers,
        np.ascontiguousarray(angles, dtype=np.float64),
        float(p.radius),
        p.rings,
        p.points_per_ring,
        pyramid.norm_code,
        out,
    )
    return out


def descriptor_cost(d1: npt.ArrayLike, d2: npt.ArrayLike, w_d: float = 1.0) -> float:
    """w_D * ||d1 - d2||^2."""
    a = np.asarray(d1, dtype=np.float64)
    b = np.asarray(d2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Descriptor length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(w_d * np.dot(diff, diff))
