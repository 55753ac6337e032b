"""Raster and flow containers, resampling, file formats and flow visualization.

Rasters are ``numpy`` arrays of shape ``(height, width, channels)`` holding
float32 samples (colour in [0, 1], flow in pixels, depth in scene units).
Flow fields are 2-channel rasters; a component with magnitude above
``UNKNOWN_FLOW_THRESHOLD`` marks the pixel as unknown. Bit masks are boolean
``(height, width)`` arrays with True meaning occluded or invalid.
"""

import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import numpy.typing as npt
from scipy import ndimage

logger = logging.getLogger(__name__)

Raster = npt.NDArray[np.float32]
FlowField = npt.NDArray[np.float32]
BitMask = npt.NDArray[np.bool_]
PathLike = Union[str, Path]

FLO_TAG = 202021.25
UNKNOWN_FLOW_THRESHOLD = 1e9
UNKNOWN_FLOW = 1e10


class FlowFormatError(ValueError):
    """Raised when a .flo file is malformed."""

    pass


class ImageFormatError(ValueError):
    """Raised when an image, PFM or mask file cannot be decoded."""

    pass


def as_raster(data: npt.ArrayLike) -> Raster:
    """Return ``data`` as a float32 (height, width, channels) raster."""
    array = np.asarray(data, dtype=np.float32)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError(f"Raster must be 2D or 3D, got shape {array.shape}")
    height, width, channels = array.shape
    if height < 1 or width < 1:
        raise ValueError(f"Raster dimensions must be positive, got {width}x{height}")
    if channels not in (1, 2, 3):
        raise ValueError(f"Raster must have 1-3 channels, got {channels}")
    return np.ascontiguousarray(array)


def as_flow(data: npt.ArrayLike) -> FlowField:
    """Return ``data`` as a 2-channel flow field."""
    flow = as_raster(data)
    if flow.shape[2] != 2:
        raise ValueError(f"Flow field must have 2 channels, got {flow.shape[2]}")
    return flow


def invalid_mask(flow: FlowField) -> BitMask:
    """Pixels whose flow is unknown (sentinel or non-finite)."""
    magnitude = np.abs(flow)
    return np.any(~np.isfinite(flow) | (magnitude > UNKNOWN_FLOW_THRESHOLD), axis=2)


def mark_invalid(flow: FlowField, mask: BitMask) -> FlowField:
    """Copy of ``flow`` with the sentinel written at ``mask``."""
    out = np.array(flow, dtype=np.float32, copy=True)
    out[mask] = UNKNOWN_FLOW
    return out


def read_flo(path: PathLike) -> FlowField:
    """Read a Middlebury .flo file."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    tag = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if tag != np.float32(FLO_TAG):
        raise FlowFormatError(f"{path}: bad magic tag {tag}")
    width, height = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if width <= 0 or height <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(raw) < expected:
        raise FlowFormatError(
            f"{path}: truncated payload ({len(raw)} of {expected} bytes)"
        )
    data = np.frombuffer(raw, dtype="<f4", count=2 * width * height, offset=12)
    return data.reshape(height, width, 2).astype(np.float32)


def write_flo(path: PathLike, flow: FlowField) -> None:
    """Write a Middlebury .flo file."""
    flow = as_flow(flow)
    height, width, _ = flow.shape
    header = np.array([FLO_TAG], dtype="<f4").tobytes()
    header += np.array([width, height], dtype="<i4").tobytes()
    Path(path).write_bytes(header + flow.astype("<f4").tobytes())


def bilinear_sample(raster: Raster, point: Sequence[float]) -> npt.NDArray[np.float64]:
    """Interpolate all channels at the continuous pixel ``point = (x, y)``."""
    xs = np.array([point[0]], dtype=np.float64)
    ys = np.array([point[1]], dtype=np.float64)
    return sample_many(raster, xs, ys)[0]


def sample_many(
    raster: Raster, xs: npt.ArrayLike, ys: npt.ArrayLike
) -> npt.NDArray[np.float64]:
    """Bilinear samples at arrays of coordinates, clamped to the border.

    Returns an array of shape ``xs.shape + (channels,)``.
    """
    raster = as_raster(raster)
    height, width, channels = raster.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, width - 1.0)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, height - 1.0)
    coords = np.stack([ys.ravel(), xs.ravel()])
    out = np.empty((coords.shape[1], channels), dtype=np.float64)
    for c in range(channels):
        out[:, c] = ndimage.map_coordinates(
            raster[:, :, c].astype(np.float64), coords, order=1, mode="nearest"
        )
    return out.reshape(xs.shape + (channels,))


def warp_positions(flow: FlowField) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Target coordinates x + u(x) of every pixel."""
    height, width, _ = flow.shape
    grid_y, grid_x = np.mgrid[0:height, 0:width].astype(np.float64)
    return grid_x + flow[:, :, 0], grid_y + flow[:, :, 1]


def in_domain(xs: npt.ArrayLike, ys: npt.ArrayLike, width: int, height: int) -> BitMask:
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    return (xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1)


def downsample(raster: Raster, factor: int, is_flow: bool = False) -> Raster:
    """Area-average pooling over factor x factor blocks (floor-truncated)."""
    if factor < 1:
        raise ValueError(f"Downsampling factor must be >= 1, got {factor}")
    raster = as_raster(raster)
    if factor == 1:
        return raster.copy()
    height, width, channels = raster.shape
    out_h, out_w = height // factor, width // factor
    if out_h < 1 or out_w < 1:
        raise ValueError(f"Factor {factor} too large for {width}x{height} raster")
    blocks = raster[: out_h * factor, : out_w * factor].astype(np.float64)
    pooled = blocks.reshape(out_h, factor, out_w, factor, channels).mean(axis=(1, 3))
    if is_flow:
        pooled /= factor
    return pooled.astype(np.float32)


def resize(raster: Raster, height: int, width: int, is_flow: bool = False) -> Raster:
    """Resample to an arbitrary size with Gaussian pre-smoothing when shrinking.

    Pixel centres are aligned; flow vectors are rescaled per axis.
    """
    raster = as_raster(raster)
    src_h, src_w, channels = raster.shape
    if (src_h, src_w) == (height, width):
        return raster.copy()
    scale_y = height / src_h
    scale_x = width / src_w
    sigma_y = 0.5 * np.sqrt(1.0 / scale_y**2 - 1.0) if scale_y < 1 else 0.0
    sigma_x = 0.5 * np.sqrt(1.0 / scale_x**2 - 1.0) if scale_x < 1 else 0.0
    source = raster.astype(np.float64)
    if sigma_x > 0 or sigma_y > 0:
        source = ndimage.gaussian_filter(
            source, sigma=(sigma_y, sigma_x, 0.0), mode="nearest"
        )
    ys = (np.arange(height) + 0.5) / scale_y - 0.5
    xs = (np.arange(width) + 0.5) / scale_x - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = sample_many(source.astype(np.float32), grid_x, grid_y)
    if is_flow:
        out[:, :, 0] *= scale_x
        out[:, :, 1] *= scale_y
    return out.astype(np.float32)


def resize_mask(mask: BitMask, height: int, width: int) -> BitMask:
    """Resample a mask by majority vote."""
    weights = resize(mask.astype(np.float32), height, width)[:, :, 0]
    return weights > 0.5


def _colour_wheel() -> npt.NDArray[np.float64]:
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel / 255.0


def flow_to_color(flow: FlowField, max_magnitude: Optional[float] = None) -> Raster:
    """Render a flow field with the standard optical-flow colour wheel.

    ``max_magnitude=None`` uses the 99th percentile of valid magnitudes.
    Invalid pixels are black.
    """
    flow = as_flow(flow)
    invalid = invalid_mask(flow)
    u = np.where(invalid, 0.0, flow[:, :, 0]).astype(np.float64)
    v = np.where(invalid, 0.0, flow[:, :, 1]).astype(np.float64)
    magnitude = np.hypot(u, v)
    if max_magnitude is None:
        valid = magnitude[~invalid]
        max_magnitude = float(np.percentile(valid, 99)) if valid.size else 0.0
        if max_magnitude <= 0:
            max_magnitude = 1.0
    elif max_magnitude <= 0:
        raise ValueError(f"max_magnitude must be positive, got {max_magnitude}")

    wheel = _colour_wheel()
    ncols = wheel.shape[0]
    radius = np.minimum(magnitude / max_magnitude, 1.0)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    frac = (fk - k0)[:, :, None]
    colour = (1 - frac) * wheel[k0] + frac * wheel[k1]
    colour = 1.0 - radius[:, :, None] * (1.0 - colour)
    colour[invalid] = 0.0
    return colour.astype(np.float32)


def read_image(path: PathLike) -> Raster:
    """Read an 8/16-bit PNG or binary PPM/PGM, mapped linearly to [0, 1] RGB."""
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise ImageFormatError(f"Cannot decode image {path}")
    if data.dtype == np.uint8:
        scaled = data.astype(np.float32) / 255.0
    elif data.dtype == np.uint16:
        scaled = data.astype(np.float32) / 65535.0
    else:
        raise ImageFormatError(f"{path}: unsupported sample type {data.dtype}")
    if scaled.ndim == 3:
        scaled = scaled[:, :, :3][:, :, ::-1]
    return as_raster(scaled)


def write_png(path: PathLike, raster: Raster, bit_depth: int = 16) -> None:
    """Write a [0, 1] raster as an 8- or 16-bit PNG."""
    raster = as_raster(raster)
    peak = {8: 255.0, 16: 65535.0}[bit_depth]
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    data = np.round(np.clip(raster, 0.0, 1.0) * peak).astype(dtype)
    if data.shape[2] == 3:
        data = np.ascontiguousarray(data[:, :, ::-1])
    elif data.shape[2] == 1:
        data = data[:, :, 0]
    else:
        raise ImageFormatError("PNG output needs 1 or 3 channels")
    if not cv2.imwrite(str(path), data):
        raise ImageFormatError(f"Cannot write {path}")


def write_pfm(path: PathLike, raster: Raster) -> None:
    """Write a little-endian PFM (scale -1), rows stored bottom to top."""
    raster = as_raster(raster)
    height, width, channels = raster.shape
    if channels == 2:
        raise ImageFormatError("PFM stores 1 or 3 channels")
    kind = b"PF" if channels == 3 else b"Pf"
    header = kind + b"\n" + f"{width} {height}\n".encode() + b"-1.0\n"
    payload = np.flipud(raster).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_pfm(path: PathLike) -> Raster:
    """Read a PFM file of either endianness."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"PF", b"Pf"):
        raise ImageFormatError(f"{path}: not a PFM file")
    channels = 3 if parts[0].strip() == b"PF" else 1
    try:
        width, height = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as e:
        raise ImageFormatError(f"{path}: bad PFM header") from e
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    if len(parts[3]) < 4 * count:
        raise ImageFormatError(f"{path}: truncated PFM payload")
    data = np.frombuffer(parts[3], dtype=dtype, count=count)
    return as_raster(np.flipud(data.reshape(height, width, channels)))


def write_mask(path: PathLike, mask: BitMask) -> None:
    """Write a mask as PGM (0 = visible, 255 = occluded)."""
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    if not cv2.imwrite(str(path), data):
        raise ImageFormatError(f"Cannot write {path}")


def read_mask(path: PathLike) -> BitMask:
    """Read a PGM mask written by :func:`write_mask`."""
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise ImageFormatError(f"Cannot decode mask {path}")
    if data.ndim == 3:
        data = data[:, :, 0]
    return np.asarray(data > 127)


def to_luma(image: Raster) -> npt.NDArray[np.float64]:
    """Rec. 601 luma of an RGB raster (identity for single-channel rasters)."""
    image = as_raster(image).astype(np.float64)
    if image.shape[2] == 1:
        return image[:, :, 0]
    return image[:, :, 0] * 0.299 + image[:, :, 1] * 0.587 + image[:, :, 2] * 0.114
