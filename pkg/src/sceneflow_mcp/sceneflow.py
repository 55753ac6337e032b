"""Four-frame variational scene flow refinement and triangulation.

Three 2D fields on the view-1 grid describe the scene flow: ``u1`` (optical
flow of view 1 from t to t+1), ``u2`` (stereo flow at t) and ``u3`` (the
correction that closes the loop x -> x+u1 -> x+u1+u2+u3 <- x+u2). The
energy combines four brightness/gradient constancy terms, two epipolar
terms and three smoothness terms, all under the regularised L1 penaliser
Psi(s^2) = sqrt(s^2 + eps). It is minimised coarse to fine with lagged
nonlinearities and a pointwise-coupled red-black SOR solver. The data terms
see intensities scaled by ``intensity_scale`` (0-255 by default), the range
the default weights are tuned for.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from .geometry import StereoRigFrame, scale_fundamental, triangulate_dlt_batch
from .imagecore import (
    UNKNOWN_FLOW,
    BitMask,
    FlowField,
    Raster,
    as_flow,
    as_raster,
    in_domain,
    invalid_mask,
    resize,
    resize_mask,
    sample_many,
    warp_positions,
)
from .matcher import ColourTransform
from .models import EpipolarForm, SceneFlowParams

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]

# Image stack: 0 = view 1 at t, 1 = view 2 at t, 2 = view 1 at t+1, 3 = view 2 at t+1.
# Data term k compares image TERM_A[k] at x + SEL_A[k].(u1, u2, u3) with
# image TERM_B[k] at x + SEL_B[k].(u1, u2, u3).
TERM_A = (2, 3, 1, 3)
TERM_B = (0, 1, 0, 2)
SEL_A = ((1, 0, 0), (1, 1, 1), (0, 1, 0), (1, 1, 1))
SEL_B = ((0, 0, 0), (0, 1, 0), (0, 0, 0), (1, 0, 0))


class SceneFlowDivergedError(RuntimeError):
    """Raised when the energy becomes non-finite during refinement."""

    pass


class PlyFormatError(ValueError):
    """Raised when a PLY file cannot be parsed."""

    pass


def psi(s2: npt.ArrayLike, epsilon: float = 1e-6) -> npt.NDArray[np.float64]:
    """Regularised L1 penaliser sqrt(s^2 + epsilon)."""
    return np.sqrt(np.asarray(s2, dtype=np.float64) + epsilon)


def psi_prime(s2: npt.ArrayLike, epsilon: float = 1e-6) -> npt.NDArray[np.float64]:
    """d Psi / d(s^2) = 0.5 / sqrt(s^2 + epsilon)."""
    return 0.5 / np.sqrt(np.asarray(s2, dtype=np.float64) + epsilon)


@dataclass
class FourFrameFlows:
    """u1, u2 and u3 on the view-1 grid."""

    u1: FlowField
    u2: FlowField
    u3: FlowField

    def __post_init__(self) -> None:
        self.u1 = as_flow(self.u1)
        self.u2 = as_flow(self.u2)
        self.u3 = as_flow(self.u3)
        if not (self.u1.shape == self.u2.shape == self.u3.shape):
            raise ValueError(
                f"Flow fields differ in size: {self.u1.shape}, {self.u2.shape}, {self.u3.shape}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.u1.shape[0]), int(self.u1.shape[1]))

    def stack(self) -> npt.NDArray[np.float64]:
        """(h, w, 6) array [u1x, u1y, u2x, u2y, u3x, u3y]."""
        return np.concatenate([self.u1, self.u2, self.u3], axis=2).astype(np.float64)

    @classmethod
    def from_stack(cls, stack: npt.NDArray[np.float64]) -> "FourFrameFlows":
        return cls(
            u1=stack[:, :, 0:2].astype(np.float32),
            u2=stack[:, :, 2:4].astype(np.float32),
            u3=stack[:, :, 4:6].astype(np.float32),
        )

    def invalid(self) -> BitMask:
        return invalid_mask(self.u1) | invalid_mask(self.u2) | invalid_mask(self.u3)


@dataclass
class EnergyBreakdown:
    """Energy of a four-frame configuration.

    ``data``, ``epipolar`` and ``smoothness`` are unweighted sums;
    ``total`` applies the alpha and beta weights.
    """

    total: float
    data: float
    epipolar: float
    smoothness: float
    epipolar_weighted: float
    smoothness_weighted: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.total, self.data, self.epipolar, self.smoothness)


@dataclass
class EnergyGradient:
    """Per-pixel gradients (h, w, 6) of the energy families."""

    total: npt.NDArray[np.float64]
    data: npt.NDArray[np.float64]
    epipolar: npt.NDArray[np.float64]
    smoothness: npt.NDArray[np.float64]


@dataclass
class _Frames:
    """Colour-corrected images and their gradient images at one resolution."""

    images: npt.NDArray[np.float64]
    grads: npt.NDArray[np.float64]

    @property
    def shape(self) -> Tuple[int, int]:
        return (int(self.images.shape[1]), int(self.images.shape[2]))


def _with_gradients(images: npt.NDArray[np.float64]) -> _Frames:
    grads = np.empty(images.shape[:3] + (2 * images.shape[3],), dtype=np.float64)
    channels = images.shape[3]
    for index in range(images.shape[0]):
        gy, gx = np.gradient(images[index], axis=(0, 1))
        grads[index, :, :, :channels] = gx
        grads[index, :, :, channels:] = gy
    return _Frames(images=images, grads=grads)


def _prepare(
    images: Sequence[Raster], transform: Optional[ColourTransform], scale: float
) -> _Frames:
    """Colour-correct view 1 and lift the frames from [0, 1] to the data-term range."""
    if len(images) != 4:
        raise ValueError(f"Expected four images, got {len(images)}")
    rasters = [as_raster(image) for image in images]
    if any(r.shape != rasters[0].shape for r in rasters):
        raise ValueError("The four images differ in size")
    if transform is not None and rasters[0].shape[2] == 3:
        rasters[0] = transform.apply(rasters[0])
        rasters[2] = transform.apply(rasters[2])
    return _with_gradients(np.stack(rasters).astype(np.float64) * scale)


def _resize_frames(frames: _Frames, height: int, width: int) -> _Frames:
    images = np.stack(
        [resize(image.astype(np.float32), height, width) for image in frames.images]
    ).astype(np.float64)
    return _with_gradients(images)


def _sample(
    image: npt.NDArray[np.float64], px: npt.NDArray[np.float64], py: npt.NDArray[np.float64]
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Bilinear values and exact interpolant derivatives d/dx, d/dy."""
    height, width = image.shape[:2]
    x = np.clip(px, 0.0, width - 1.0)
    y = np.clip(py, 0.0, height - 1.0)
    x0 = np.clip(np.floor(x), 0, max(width - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    value = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 + fx * fy * v11
    d_dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    d_dy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    return value, d_dx, d_dy


@dataclass
class _DataTerm:
    r: npt.NDArray[np.float64]
    J: npt.NDArray[np.float64]
    rg: npt.NDArray[np.float64]
    Jg: npt.NDArray[np.float64]
    valid: npt.NDArray[np.bool_]


@dataclass
class _Linearization:
    """Residuals and Jacobians of all point terms around the current flows."""

    data: List[_DataTerm]
    e: npt.NDArray[np.float64]
    g: npt.NDArray[np.float64]
    denominator: npt.NDArray[np.float64]


def _shift(u: npt.NDArray[np.float64], select: Tuple[int, int, int]) -> npt.NDArray[np.float64]:
    out = np.zeros((u.shape[0], 2))
    for i in range(3):
        if select[i]:
            out += u[:, 2 * i : 2 * i + 2]
    return out


def _linearize(
    stack: npt.NDArray[np.float64],
    frames: _Frames,
    F_t: Matrix,
    F_t1: Matrix,
    occluded: BitMask,
    params: SceneFlowParams,
) -> _Linearization:
    height, width = stack.shape[:2]
    n = height * width
    u = stack.reshape(n, 6)
    grid_y, grid_x = np.mgrid[0:height, 0:width]
    X = np.stack([grid_x.ravel(), grid_y.ravel()], axis=1).astype(np.float64)
    visible = ~occluded.ravel()

    terms = []
    for k in range(4):
        pa = X + _shift(u, SEL_A[k])
        pb = X + _shift(u, SEL_B[k])
        va, ax, ay = _sample(frames.images[TERM_A[k]], pa[:, 0], pa[:, 1])
        vb, bx, by = _sample(frames.images[TERM_B[k]], pb[:, 0], pb[:, 1])
        ga, gax, gay = _sample(frames.grads[TERM_A[k]], pa[:, 0], pa[:, 1])
        gb, gbx, gby = _sample(frames.grads[TERM_B[k]], pb[:, 0], pb[:, 1])
        J = np.zeros((n, va.shape[1], 6))
        Jg = np.zeros((n, ga.shape[1], 6))
        for i in range(3):
            J[:, :, 2 * i] = SEL_A[k][i] * ax - SEL_B[k][i] * bx
            J[:, :, 2 * i + 1] = SEL_A[k][i] * ay - SEL_B[k][i] * by
            Jg[:, :, 2 * i] = SEL_A[k][i] * gax - SEL_B[k][i] * gbx
            Jg[:, :, 2 * i + 1] = SEL_A[k][i] * gay - SEL_B[k][i] * gby
        valid = (
            visible
            & in_domain(pa[:, 0], pa[:, 1], width, height)
            & in_domain(pb[:, 0], pb[:, 1], width, height)
        )
        terms.append(_DataTerm(r=va - vb, J=J, rg=ga - gb, Jg=Jg, valid=valid))

    ones = np.ones((n, 1))
    xh = np.hstack([X, ones])
    yh = np.hstack([X + u[:, 2:4], ones])
    ph = np.hstack([X + u[:, 0:2], ones])
    qh = np.hstack([X + u[:, 0:2] + u[:, 2:4] + u[:, 4:6], ones])
    Fx = xh @ F_t.T
    Fty = yh @ F_t
    Fp = ph @ F_t1.T
    Ftq = qh @ F_t1

    e = np.stack([np.sum(yh * Fx, axis=1), np.sum(qh * Fp, axis=1)], axis=1)
    g = np.zeros((n, 2, 6))
    g[:, 0, 2:4] = Fx[:, :2]
    g[:, 1, 0:2] = Ftq[:, :2] + Fp[:, :2]
    g[:, 1, 2:4] = Fp[:, :2]
    g[:, 1, 4:6] = Fp[:, :2]

    if params.epipolar_form == EpipolarForm.SAMPSON:
        d1 = Fx[:, 0] ** 2 + Fx[:, 1] ** 2 + Fty[:, 0] ** 2 + Fty[:, 1] ** 2
        d2 = Fp[:, 0] ** 2 + Fp[:, 1] ** 2 + Ftq[:, 0] ** 2 + Ftq[:, 1] ** 2
        denominator = np.stack([d1, d2], axis=1)
        denominator = np.where(denominator < 1e-12, np.inf, denominator)
    else:
        denominator = np.ones((n, 2))
    return _Linearization(data=terms, e=e, g=g, denominator=denominator)


def _forward_differences(
    field: npt.NDArray[np.float64],
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    dx = np.zeros_like(field)
    dy = np.zeros_like(field)
    dx[:, :-1] = field[:, 1:] - field[:, :-1]
    dy[:-1] = field[1:] - field[:-1]
    return dx, dy


def _smoothness_s2(stack: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """||grad u_i||^2 per pixel, shape (h, w, 3)."""
    dx, dy = _forward_differences(stack)
    squared = dx**2 + dy**2
    return squared[:, :, 0::2] + squared[:, :, 1::2]


def _neighbour_sum(
    field: npt.NDArray[np.float64], wr: npt.NDArray[np.float64], wd: npt.NDArray[np.float64]
) -> npt.NDArray[np.float64]:
    """Sum over 4-neighbours of edge weight times neighbour value.

    ``wr[y, x]`` weighs the edge to (y, x+1) and ``wd[y, x]`` the edge to (y+1, x).
    """
    out = np.zeros_like(field)
    out[:, :-1] += wr[:, :-1, None] * field[:, 1:]
    out[:, 1:] += wr[:, :-1, None] * field[:, :-1]
    out[:-1] += wd[:-1, :, None] * field[1:]
    out[1:] += wd[:-1, :, None] * field[:-1]
    return out


def _edge_weights(
    s2: npt.NDArray[np.float64], params: SceneFlowParams, weighted: bool
) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Per-component lagged diffusivities on right and down edges, shape (h, w, 3)."""
    phi = psi_prime(s2, params.psi_epsilon)
    if weighted:
        phi = phi * np.asarray(params.betas)[None, None, :]
    wr = phi.copy()
    wd = phi.copy()
    wr[:, -1] = 0.0
    wd[-1] = 0.0
    return wr, wd


def _smoothness_operator(
    field: npt.NDArray[np.float64], wr: npt.NDArray[np.float64], wd: npt.NDArray[np.float64]
) -> npt.NDArray[np.float64]:
    """sum_e w_e (v_x - v_o) per pixel for a (h, w, 6) field."""
    out = np.empty_like(field)
    for i in range(3):
        part = field[:, :, 2 * i : 2 * i + 2]
        weight_sum = _neighbour_sum(np.ones_like(part[:, :, :1]), wr[:, :, i], wd[:, :, i])
        out[:, :, 2 * i : 2 * i + 2] = weight_sum * part - _neighbour_sum(part, wr[:, :, i], wd[:, :, i])
    return out


def _energy(
    stack: npt.NDArray[np.float64],
    frames: _Frames,
    F_t: Matrix,
    F_t1: Matrix,
    occluded: BitMask,
    params: SceneFlowParams,
) -> EnergyBreakdown:
    lin = _linearize(stack, frames, F_t, F_t1, occluded, params)
    eps = params.psi_epsilon
    data = 0.0
    for term in lin.data:
        value = psi(np.sum(term.r**2, axis=1), eps) + params.gamma * psi(np.sum(term.rg**2, axis=1), eps)
        data += float(np.sum(value[term.valid]))
    epi = np.sum(psi(lin.e**2 / lin.denominator, eps), axis=0)
    smooth = np.sum(psi(_smoothness_s2(stack), eps), axis=(0, 1))
    epi_w = float(params.alpha1 * epi[0] + params.alpha2 * epi[1])
    smooth_w = float(np.dot(params.betas, smooth))
    return EnergyBreakdown(
        total=data + epi_w + smooth_w,
        data=data,
        epipolar=float(epi.sum()),
        smoothness=float(smooth.sum()),
        epipolar_weighted=epi_w,
        smoothness_weighted=smooth_w,
    )


def _check_inputs(
    flows: FourFrameFlows, frames: _Frames, occluded: Optional[BitMask]
) -> BitMask:
    if frames.shape != flows.shape:
        raise ValueError(f"Images {frames.shape} do not match flows {flows.shape}")
    if occluded is None:
        return np.zeros(flows.shape, dtype=bool)
    occluded = np.asarray(occluded, dtype=bool)
    if occluded.shape != flows.shape:
        raise ValueError(f"Occlusion mask {occluded.shape} does not match flows {flows.shape}")
    return occluded


def _sanitized(flows: FourFrameFlows) -> npt.NDArray[np.float64]:
    stack = flows.stack()
    stack[~np.isfinite(stack) | (np.abs(stack) > 1e9)] = 0.0
    return stack


def _fundamental(F: Matrix, name: str) -> Matrix:
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got {F.shape}")
    return F


def energy_eval(
    flows: FourFrameFlows,
    images: Sequence[Raster],
    F_t: Matrix,
    F_t1: Matrix,
    occluded: Optional[BitMask] = None,
    transform: Optional[ColourTransform] = None,
    params: Optional[SceneFlowParams] = None,
) -> EnergyBreakdown:
    """Discretised energy of ``flows``.

    Data terms are disabled at occluded pixels and wherever a warp leaves the
    image; view-1 images are colour-corrected with ``transform`` first.
    """
    params = params or SceneFlowParams()
    frames = _prepare(images, transform, params.intensity_scale)
    occluded = _check_inputs(flows, frames, occluded)
    return _energy(
        _sanitized(flows), frames, _fundamental(F_t, "F_t"), _fundamental(F_t1, "F_t1"),
        occluded, params,
    )


def energy_gradient(
    flows: FourFrameFlows,
    images: Sequence[Raster],
    F_t: Matrix,
    F_t1: Matrix,
    occluded: Optional[BitMask] = None,
    transform: Optional[ColourTransform] = None,
    params: Optional[SceneFlowParams] = None,
) -> EnergyGradient:
    """Analytic gradient of each energy family with respect to (u1, u2, u3).

    Epipolar and smoothness families are unweighted, matching
    :func:`energy_eval`. The Sampson form holds its denominator fixed.
    """
    params = params or SceneFlowParams()
    frames = _prepare(images, transform, params.intensity_scale)
    occluded = _check_inputs(flows, frames, occluded)
    stack = _sanitized(flows)
    height, width = flows.shape
    n = height * width
    F_t = _fundamental(F_t, "F_t")
    F_t1 = _fundamental(F_t1, "F_t1")
    lin = _linearize(stack, frames, F_t, F_t1, occluded, params)
    eps = params.psi_epsilon

    data = np.zeros((n, 6))
    for term in lin.data:
        w = psi_prime(np.sum(term.r**2, axis=1), eps) * term.valid
        wg = params.gamma * psi_prime(np.sum(term.rg**2, axis=1), eps) * term.valid
        data += 2.0 * w[:, None] * np.einsum("nc,nck->nk", term.r, term.J)
        data += 2.0 * wg[:, None] * np.einsum("nc,nck->nk", term.rg, term.Jg)

    s = lin.e**2 / lin.denominator
    w_e = psi_prime(s, eps) / lin.denominator
    per_term = 2.0 * (w_e * lin.e)[:, :, None] * lin.g
    epipolar = per_term.sum(axis=1)
    epipolar_w = params.alpha1 * per_term[:, 0] + params.alpha2 * per_term[:, 1]

    s2 = _smoothness_s2(stack)
    wr, wd = _edge_weights(s2, params, weighted=False)
    smoothness = 2.0 * _smoothness_operator(stack, wr, wd)
    wr_b, wd_b = _edge_weights(s2, params, weighted=True)
    smoothness_w = 2.0 * _smoothness_operator(stack, wr_b, wd_b)

    shape = (height, width, 6)
    return EnergyGradient(
        total=data.reshape(shape) + epipolar_w.reshape(shape) + smoothness_w,
        data=data.reshape(shape),
        epipolar=epipolar.reshape(shape),
        smoothness=smoothness,
    )


def _solve_increment(
    stack: npt.NDArray[np.float64],
    lin: _Linearization,
    params: SceneFlowParams,
) -> npt.NDArray[np.float64]:
    """Lagged fixed-point iterations of the linearised Euler-Lagrange system."""
    height, width = stack.shape[:2]
    n = height * width
    eps = params.psi_epsilon
    alphas = np.asarray(params.alphas)
    du = np.zeros((height, width, 6))
    parity = (np.add.outer(np.arange(height), np.arange(width)) % 2).astype(bool)
    colours = (~parity, parity)

    for _ in range(params.inner_iterations):
        flat = du.reshape(n, 6)
        A = np.zeros((n, 6, 6))
        b = np.zeros((n, 6))
        for term in lin.data:
            r = term.r + np.einsum("nck,nk->nc", term.J, flat)
            rg = term.rg + np.einsum("nck,nk->nc", term.Jg, flat)
            w = psi_prime(np.sum(r**2, axis=1), eps) * term.valid
            wg = params.gamma * psi_prime(np.sum(rg**2, axis=1), eps) * term.valid
            A += w[:, None, None] * np.einsum("nck,ncl->nkl", term.J, term.J)
            A += wg[:, None, None] * np.einsum("nck,ncl->nkl", term.Jg, term.Jg)
            b += w[:, None] * np.einsum("nc,nck->nk", term.r, term.J)
            b += wg[:, None] * np.einsum("nc,nck->nk", term.rg, term.Jg)

        e = lin.e + np.einsum("nik,nk->ni", lin.g, flat)
        w_e = alphas[None, :] * psi_prime(e**2 / lin.denominator, eps) / lin.denominator
        A += np.einsum("ni,nik,nil->nkl", w_e, lin.g, lin.g)
        b += np.einsum("ni,ni,nik->nk", w_e, lin.e, lin.g)

        wr, wd = _edge_weights(_smoothness_s2(stack + du), params, weighted=True)
        for i in range(3):
            weight_sum = _neighbour_sum(np.ones((height, width, 1)), wr[:, :, i], wd[:, :, i])
            for c in range(2):
                A[:, 2 * i + c, 2 * i + c] += weight_sum.ravel()
        system_inv = np.linalg.inv(A).reshape(height, width, 6, 6)
        base = -b.reshape(height, width, 6) - _smoothness_operator(stack, wr, wd)

        for _ in range(params.sor_iterations):
            for colour in colours:
                coupling = np.empty_like(du)
                for i in range(3):
                    coupling[:, :, 2 * i : 2 * i + 2] = _neighbour_sum(
                        du[:, :, 2 * i : 2 * i + 2], wr[:, :, i], wd[:, :, i]
                    )
                rhs = base[colour] + coupling[colour]
                solution = np.einsum("nkl,nl->nk", system_inv[colour], rhs)
                du[colour] = (1.0 - params.sor_omega) * du[colour] + params.sor_omega * solution
    return du


def pyramid_shapes(height: int, width: int, params: SceneFlowParams) -> List[Tuple[int, int]]:
    """Level sizes from the start level (nearest start_scale) to full resolution."""
    levels = int(round(math.log(params.start_scale) / math.log(params.eta)))
    shapes = []
    for level in range(levels, -1, -1):
        scale = params.eta**level
        h = max(1, int(round(height * scale)))
        w = max(1, int(round(width * scale)))
        if level > 0 and min(h, w) < params.min_level_size:
            continue
        if shapes and shapes[-1] == (h, w):
            continue
        shapes.append((h, w))
    return shapes


def _refine_level(
    stack: npt.NDArray[np.float64],
    frames: _Frames,
    F_t: Matrix,
    F_t1: Matrix,
    occluded: BitMask,
    params: SceneFlowParams,
) -> npt.NDArray[np.float64]:
    current = _energy(stack, frames, F_t, F_t1, occluded, params).total
    if not math.isfinite(current):
        raise SceneFlowDivergedError(f"Non-finite energy at level {frames.shape}")
    for warp in range(params.warps):
        lin = _linearize(stack, frames, F_t, F_t1, occluded, params)
        du = _solve_increment(stack, lin, params)
        if not np.all(np.isfinite(du)):
            raise SceneFlowDivergedError(f"Non-finite increment at level {frames.shape}, warp {warp}")
        accepted = False
        for step in (1.0, 0.5, 0.25):
            candidate = stack + step * du
            energy = _energy(candidate, frames, F_t, F_t1, occluded, params).total
            if not math.isfinite(energy):
                raise SceneFlowDivergedError(
                    f"Non-finite energy at level {frames.shape}, warp {warp}"
                )
            if energy <= current:
                stack, current, accepted = candidate, energy, True
                break
        if not accepted:
            logger.debug(f"Level {frames.shape}: no descent at warp {warp}, stopping")
            break
    logger.debug(f"Level {frames.shape[1]}x{frames.shape[0]}: energy {current:.4f}")
    return stack


def refine(
    flows_init: FourFrameFlows,
    images: Sequence[Raster],
    F_t: Matrix,
    F_t1: Matrix,
    occluded: Optional[BitMask] = None,
    transform: Optional[ColourTransform] = None,
    params: Optional[SceneFlowParams] = None,
) -> FourFrameFlows:
    """Coarse-to-fine minimisation of the four-frame energy.

    Starts at the pyramid level nearest ``start_scale`` with the initial flows
    resampled to it. The result never has higher full-resolution energy than
    the (sanitised) initialisation.
    """
    params = params or SceneFlowParams()
    full = _prepare(images, transform, params.intensity_scale)
    occluded = _check_inputs(flows_init, full, occluded)
    F_t = _fundamental(F_t, "F_t")
    F_t1 = _fundamental(F_t1, "F_t1")
    height, width = flows_init.shape
    init_stack = _sanitized(flows_init)
    initial_energy = _energy(init_stack, full, F_t, F_t1, occluded, params).total
    if not math.isfinite(initial_energy):
        raise SceneFlowDivergedError("Initial energy is not finite")

    shapes = pyramid_shapes(height, width, params)
    logger.info(
        f"Refining {width}x{height} scene flow over {len(shapes)} levels, "
        f"initial energy {initial_energy:.4f}"
    )
    stack = None
    for h, w in shapes:
        if (h, w) == (height, width):
            frames = full
            level_occ = occluded
        else:
            frames = _resize_frames(full, h, w)
            level_occ = resize_mask(occluded, h, w)
        if stack is None:
            source = init_stack
        else:
            source = stack
        stack = np.concatenate(
            [
                resize(source[:, :, 2 * i : 2 * i + 2].astype(np.float32), h, w, is_flow=True)
                for i in range(3)
            ],
            axis=2,
        ).astype(np.float64)
        sx, sy = w / width, h / height
        stack = _refine_level(
            stack,
            frames,
            scale_fundamental(F_t, sx, sy),
            scale_fundamental(F_t1, sx, sy),
            level_occ,
            params,
        )
    assert stack is not None

    final_energy = _energy(stack, full, F_t, F_t1, occluded, params).total
    if not math.isfinite(final_energy):
        raise SceneFlowDivergedError("Final energy is not finite")
    if final_energy > initial_energy:
        logger.warning(
            f"Refinement raised the energy ({initial_energy:.4f} -> {final_energy:.4f}); "
            "keeping the initialisation"
        )
        stack = init_stack
    else:
        logger.info(f"Refinement energy {initial_energy:.4f} -> {final_energy:.4f}")
    return FourFrameFlows.from_stack(stack)


def init_u3(u1: FlowField, u2: FlowField, flow2: FlowField) -> FlowField:
    """u3(x) = flow2(x + u2(x)) - u1(x), unknown where x + u2 leaves the image."""
    u1 = as_flow(u1)
    u2 = as_flow(u2)
    flow2 = as_flow(flow2)
    height, width, _ = u1.shape
    if u2.shape != u1.shape:
        raise ValueError(f"u1 {u1.shape} and u2 {u2.shape} differ in size")
    if flow2.shape != u1.shape:
        flow2 = resize(flow2, height, width, is_flow=True)
    unknown = invalid_mask(u1) | invalid_mask(u2)
    safe_u2 = np.where(unknown[:, :, None], 0.0, u2)
    tx, ty = warp_positions(safe_u2)
    sampled = sample_many(flow2, tx, ty)
    unknown |= ~in_domain(tx, ty, width, height)
    unknown |= np.any(~np.isfinite(sampled) | (np.abs(sampled) > 1e9), axis=2)
    u3 = (sampled - u1).astype(np.float32)
    u3[unknown] = UNKNOWN_FLOW
    return u3


@dataclass
class SceneFlowOutput:
    """Triangulated 3D positions at t and motion to t+1 per view-1 pixel."""

    positions: npt.NDArray[np.float64]
    motion: npt.NDArray[np.float64]
    valid: BitMask
    depth: npt.NDArray[np.float32]


def triangulate_scene_flow(
    flows: FourFrameFlows,
    rig_t: StereoRigFrame,
    rig_t1: StereoRigFrame,
    occluded: Optional[BitMask] = None,
) -> SceneFlowOutput:
    """X_t from (x, x+u2), X_t+1 from (x+u1, x+u1+u2+u3); motion is their difference."""
    height, width = flows.shape
    stack = flows.stack()
    invalid = flows.invalid()
    if occluded is not None:
        invalid |= np.asarray(occluded, dtype=bool)
    stack[invalid] = 0.0

    grid_y, grid_x = np.mgrid[0:height, 0:width].astype(np.float64)
    x = np.stack([grid_x, grid_y], axis=2).reshape(-1, 2)
    u = stack.reshape(-1, 6)
    X_t, ok_t = triangulate_dlt_batch(rig_t.cam1.P, rig_t.cam2.P, x, x + u[:, 2:4])
    p = x + u[:, 0:2]
    X_t1, ok_t1 = triangulate_dlt_batch(rig_t1.cam1.P, rig_t1.cam2.P, p, p + u[:, 2:4] + u[:, 4:6])

    valid = (ok_t & ok_t1 & ~invalid.ravel()).reshape(height, width)
    positions = X_t.reshape(height, width, 3)
    motion = (X_t1 - X_t).reshape(height, width, 3)
    positions[~valid] = np.nan
    motion[~valid] = np.nan
    depth = np.full((height, width), np.nan, dtype=np.float32)
    camera = rig_t.cam1.to_camera(positions[valid])
    depth[valid] = camera[:, 2]
    logger.info(f"Triangulated {int(valid.sum())} of {height * width} pixels")
    return SceneFlowOutput(positions=positions, motion=motion, valid=valid, depth=depth)


_PLY_TYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "int": "<i4",
    "int32": "<i4",
}

_VERTEX_FIELDS = ("x", "y", "z", "dx", "dy", "dz")


def write_ply(
    path: Union[str, Path], output: SceneFlowOutput, colours: Optional[Raster] = None
) -> int:
    """Binary little-endian PLY of valid points with motion vectors and view-1 colour."""
    valid = output.valid
    dtype = [(name, "<f4") for name in _VERTEX_FIELDS]
    dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vertices = np.zeros(int(valid.sum()), dtype=dtype)
    for index, name in enumerate(("x", "y", "z")):
        vertices[name] = output.positions[valid][:, index]
        vertices["d" + name] = output.motion[valid][:, index]
    if colours is not None:
        rgb = as_raster(colours)
        if rgb.shape[2] == 1:
            rgb = np.repeat(rgb, 3, axis=2)
        rgb8 = np.round(np.clip(rgb[valid], 0.0, 1.0) * 255).astype(np.uint8)
        vertices["red"] = rgb8[:, 0]
        vertices["green"] = rgb8[:, 1]
        vertices["blue"] = rgb8[:, 2]

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {vertices.size}"]
    header += [f"property float {name}" for name in _VERTEX_FIELDS]
    header += ["property uchar red", "property uchar green", "property uchar blue", "end_header"]
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + vertices.tobytes())
    return int(vertices.size)


def read_ply(path: Union[str, Path]) -> Dict[str, npt.NDArray]:
    """Read the vertex element of a binary little-endian PLY into named arrays."""
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    end = raw.find(marker)
    if not raw.startswith(b"ply") or end < 0:
        raise PlyFormatError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise PlyFormatError(f"{path}: only binary little-endian PLY is supported")
    count = None
    dtype = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property" and count is not None:
            if parts[1] not in _PLY_TYPES:
                raise PlyFormatError(f"{path}: unsupported property type {parts[1]}")
            dtype.append((parts[2], _PLY_TYPES[parts[1]]))
    if count is None:
        raise PlyFormatError(f"{path}: no vertex element")
    payload = raw[end + len(marker) :]
    record = np.dtype(dtype)
    if len(payload) < count * record.itemsize:
        raise PlyFormatError(f"{path}: truncated vertex data")
    vertices = np.frombuffer(payload, dtype=record, count=count)
    return {name: np.array(vertices[name]) for name in record.names}
