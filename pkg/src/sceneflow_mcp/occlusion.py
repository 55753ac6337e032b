"""Occlusion detection and filling of occluded flow.

Occluded pixels are found with a forward-backward consistency check. Their
flow is filled by a soft-constrained solve with the matting Laplacian of the
reference image, which propagates flow along colour-coherent regions; a
harmonic (diffusion) fill is kept as a baseline.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import numpy.typing as npt
import scipy.sparse as sps
from numpy.lib.stride_tricks import as_strided
from scipy import ndimage
from scipy.sparse.linalg import splu

from .imagecore import (
    BitMask,
    FlowField,
    Raster,
    as_flow,
    as_raster,
    in_domain,
    invalid_mask,
    sample_many,
    warp_positions,
)
from .metrics import flow2d_errors
from .models import FillParams, SparseSolver

logger = logging.getLogger(__name__)

try:
    from sksparse import cholmod

    _has_cholmod = True
except ImportError:
    _has_cholmod = False

WINDOW = 3
DIAGONAL_SHIFT = 1e-9


class FillError(ValueError):
    """Raised when an occlusion fill has no visible pixels to propagate from."""

    pass


class FactorizationError(FillError):
    """Raised when the sparse factorisation fails even after shifting."""

    pass


def cholmod_available() -> bool:
    return _has_cholmod


def sparse_solver() -> SparseSolver:
    """Backend :class:`SparseFactorization` uses in this environment."""
    return SparseSolver.CHOLMOD if _has_cholmod else SparseSolver.SPLU


def forward_backward_mask(fwd: FlowField, bwd: FlowField, threshold: float) -> BitMask:
    """Pixels failing the forward-backward check.

    x is occluded iff ||fwd(x) + bwd(x + fwd(x))|| > threshold, x + fwd(x)
    leaves the image, or fwd(x) is unknown.
    """
    fwd = as_flow(fwd)
    bwd = as_flow(bwd)
    if fwd.shape != bwd.shape:
        raise ValueError(f"Flow dimensions differ: {fwd.shape} vs {bwd.shape}")
    height, width, _ = fwd.shape
    unknown = invalid_mask(fwd)
    safe = np.where(unknown[:, :, None], 0.0, fwd)
    tx, ty = warp_positions(safe)
    outside = ~in_domain(tx, ty, width, height)
    back = sample_many(bwd, tx, ty)
    residual = np.hypot(safe[:, :, 0] + back[:, :, 0], safe[:, :, 1] + back[:, :, 1])
    occluded = unknown | outside | ~np.isfinite(residual) | (residual > threshold)
    logger.debug(f"Forward-backward check: {occluded.mean() * 100:.1f}% occluded")
    return occluded


def morphological_close(mask: BitMask, radius: int) -> BitMask:
    """Dilation followed by erosion with a (2r+1)^2 square; r = 0 is identity."""
    if radius < 0:
        raise ValueError(f"Closing radius must be >= 0, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    size = 2 * radius + 1
    closed = ndimage.grey_closing(mask.astype(np.uint8), size=(size, size), mode="nearest")
    return closed.astype(bool)


@dataclass
class SparseSym:
    """Symmetric sparse matrix with an optional cached factorisation."""

    matrix: sps.csr_matrix
    factor: Optional["SparseFactorization"] = field(default=None, repr=False)

    @property
    def dimension(self) -> int:
        return int(self.matrix.shape[0])

    def factorize(self) -> "SparseFactorization":
        if self.factor is None:
            self.factor = SparseFactorization(self.matrix)
        return self.factor

    def __add__(self, other: Any) -> "SparseSym":
        return SparseSym(matrix=(self.matrix + other).tocsr())


def build_matting_laplacian(image: Raster, epsilon: float = 1e-4) -> SparseSym:
    """Matting Laplacian over all 3x3 windows fully inside the image."""
    rgb = as_raster(image).astype(np.float64)
    if rgb.shape[2] == 1:
        rgb = np.repeat(rgb, 3, axis=2)
    height, width, channels = rgb.shape
    if height < WINDOW or width < WINDOW:
        raise ValueError(f"Image {width}x{height} is smaller than the {WINDOW}x{WINDOW} window")
    size = WINDOW * WINDOW

    idx = np.arange(height * width).reshape(height, width)
    shape = (height - WINDOW + 1, width - WINDOW + 1, WINDOW, WINDOW)
    win_idx = as_strided(idx, shape=shape, strides=idx.strides + idx.strides).reshape(-1, size)

    win_colour = rgb.reshape(-1, channels)[win_idx]
    win_mu = win_colour.mean(axis=1, keepdims=True)
    centred = win_colour - win_mu
    win_cov = np.einsum("nji,njk->nik", centred, centred) / size
    inv = np.linalg.inv(win_cov + (epsilon / size) * np.eye(channels))

    X = np.einsum("nij,njk->nik", centred, inv)
    X = np.einsum("nij,nkj->nik", X, centred)
    values = np.eye(size) - (1.0 + X) / size

    rows = np.repeat(win_idx, size).ravel()
    cols = np.tile(win_idx, size).ravel()
    n = height * width
    matrix = sps.coo_matrix((values.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    # drop round-off asymmetry of the per-window inverses
    matrix = (0.5 * (matrix + matrix.T)).tocsr()
    logger.debug(f"Matting Laplacian: {n} unknowns, {win_idx.shape[0]} windows, {matrix.nnz} nonzeros")
    return SparseSym(matrix=matrix)


class SparseFactorization:
    """Factorisation of a symmetric positive definite matrix.

    Uses a CHOLMOD Cholesky factor when scikit-sparse is installed and a
    SuperLU factorisation (LU, not Cholesky) with a symmetric minimum-degree
    ordering otherwise; ``solver`` records which one ran. A failed
    factorisation is retried once with a small diagonal shift.
    """

    def __init__(self, matrix: sps.spmatrix):
        self.dimension = int(matrix.shape[0])
        self.solver = sparse_solver()
        csc = sps.csc_matrix(matrix)
        try:
            self._solve = self._factorize(csc)
        except (RuntimeError, ValueError) as e:
            logger.warning(f"Factorisation failed ({e}); retrying with diagonal shift {DIAGONAL_SHIFT}")
            shifted = (csc + DIAGONAL_SHIFT * sps.identity(self.dimension, format="csc")).tocsc()
            try:
                self._solve = self._factorize(shifted)
            except (RuntimeError, ValueError) as e2:
                raise FactorizationError(f"Sparse {self.solver.value} factorisation failed: {e2}") from e2

    @staticmethod
    def _factorize(matrix: sps.csc_matrix) -> Any:
        if _has_cholmod:
            try:
                factor = cholmod.cholesky(matrix)
            except cholmod.CholmodError as e:
                raise RuntimeError(str(e)) from e
            return factor
        lu = splu(
            matrix,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
        return lu.solve

    def solve(self, rhs: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
        """Solve for one or several right-hand sides (columns)."""
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape[0] != self.dimension:
            raise ValueError(f"Right-hand side has {rhs.shape[0]} rows, expected {self.dimension}")
        solution = np.asarray(self._solve(rhs))
        if not np.all(np.isfinite(solution)):
            raise FactorizationError("Sparse solve produced non-finite values")
        return solution.reshape(rhs.shape)


@dataclass
class FillSystem:
    """(L + lambda D_C) U = lambda U_C for one flow field."""

    matrix: SparseSym
    rhs: npt.NDArray[np.float64]
    visible: BitMask


def fill_system(
    flow: FlowField, mask: BitMask, image: Raster, params: Optional[FillParams] = None
) -> FillSystem:
    """Assemble the soft-constrained fill system; unknown flow counts as occluded."""
    params = params or FillParams()
    flow = as_flow(flow)
    image = as_raster(image)
    mask = np.asarray(mask, dtype=bool)
    height, width, _ = flow.shape
    if mask.shape != (height, width) or image.shape[:2] != (height, width):
        raise ValueError(
            f"Fill inputs differ in size: flow {flow.shape[:2]}, mask {mask.shape}, image {image.shape[:2]}"
        )
    visible = ~(mask | invalid_mask(flow))
    if not visible.any():
        raise FillError("All pixels are occluded; nothing to fill from")

    laplacian = build_matting_laplacian(image, params.epsilon)
    weights = params.lam * visible.ravel().astype(np.float64)
    values = np.where(visible[:, :, None], flow, 0.0).reshape(-1, 2).astype(np.float64)
    system = laplacian + sps.diags(weights)
    return FillSystem(matrix=system, rhs=weights[:, None] * values, visible=visible)


def laplacian_fill(
    flow: FlowField, mask: BitMask, image: Raster, params: Optional[FillParams] = None
) -> FlowField:
    """Fill occluded flow with one factorisation and a solve per component.

    The soft constraints also smooth visible pixels; the whole field is
    replaced by the solution.
    """
    system = fill_system(flow, mask, image, params)
    height, width = system.visible.shape
    logger.info(
        f"Laplacian fill: {int((~system.visible).sum())} of {height * width} pixels occluded"
    )
    solution = system.matrix.factorize().solve(system.rhs)
    return solution.reshape(height, width, 2).astype(np.float32)


def _path_laplacian(n: int) -> sps.csr_matrix:
    if n == 1:
        return sps.csr_matrix((1, 1))
    degree = np.full(n, 2.0)
    degree[[0, -1]] = 1.0
    off = -np.ones(n - 1)
    return sps.diags([off, degree, off], [-1, 0, 1], format="csr")


def grid_laplacian(height: int, width: int) -> sps.csr_matrix:
    """4-neighbour unit-weight graph Laplacian of a height x width grid."""
    return (
        sps.kron(sps.identity(height), _path_laplacian(width))
        + sps.kron(_path_laplacian(height), sps.identity(width))
    ).tocsr()


def diffusion_fill(flow: FlowField, mask: BitMask) -> FlowField:
    """Harmonic interpolation of occluded flow with visible pixels held fixed."""
    flow = as_flow(flow)
    mask = np.asarray(mask, dtype=bool)
    height, width, _ = flow.shape
    if mask.shape != (height, width):
        raise ValueError(f"Mask {mask.shape} does not match flow {flow.shape[:2]}")
    unknown = (mask | invalid_mask(flow)).ravel()
    if unknown.all():
        raise FillError("All pixels are occluded; nothing to fill from")
    out = flow.copy()
    if not unknown.any():
        return out

    laplacian = grid_laplacian(height, width)
    inner = laplacian[unknown][:, unknown]
    boundary = laplacian[unknown][:, ~unknown]
    known = flow.reshape(-1, 2)[~unknown].astype(np.float64)
    rhs = -(boundary @ known)
    solution = SparseFactorization(inner).solve(rhs)
    filled = out.reshape(-1, 2)
    filled[unknown] = solution.astype(np.float32)
    logger.info(f"Diffusion fill: {int(unknown.sum())} of {height * width} pixels filled")
    return filled.reshape(height, width, 2)


@dataclass
class LinearityReport:
    """Quality of per-window affine colour-to-flow fits."""

    mee: float
    aae: float
    windows: int


def local_linearity_report(
    flow: FlowField, image: Raster, epsilon: float = 1e-4
) -> LinearityReport:
    """Fit u ~ B I + b in every 3x3 window (ridge penalty epsilon on B) and score the fit."""
    flow = as_flow(flow).astype(np.float64)
    rgb = as_raster(image).astype(np.float64)
    if rgb.shape[:2] != flow.shape[:2]:
        raise ValueError("Flow and image differ in size")
    height, width, channels = rgb.shape
    if height < WINDOW or width < WINDOW:
        raise ValueError(f"Image {width}x{height} is smaller than the {WINDOW}x{WINDOW} window")
    size = WINDOW * WINDOW
    idx = np.arange(height * width).reshape(height, width)
    shape = (height - WINDOW + 1, width - WINDOW + 1, WINDOW, WINDOW)
    win_idx = as_strided(idx, shape=shape, strides=idx.strides + idx.strides).reshape(-1, size)

    colour = rgb.reshape(-1, channels)[win_idx]
    target = flow.reshape(-1, 2)[win_idx]
    colour_c = colour - colour.mean(axis=1, keepdims=True)
    target_mu = target.mean(axis=1, keepdims=True)
    cov = np.einsum("nji,njk->nik", colour_c, colour_c) / size
    cross = np.einsum("nji,njk->nik", colour_c, target - target_mu) / size
    B_t = np.linalg.solve(cov + (epsilon / size) * np.eye(channels), cross)
    predicted = target_mu + np.einsum("nij,njk->nik", colour_c, B_t)

    mee, aae = flow2d_errors(predicted.astype(np.float32), target.astype(np.float32))
    return LinearityReport(mee=mee, aae=aae, windows=int(win_idx.shape[0]))


@dataclass
class FillComparison:
    """Errors of both fills at the occluded pixels."""

    laplacian_mee: float
    laplacian_aae: float
    diffusion_mee: float
    diffusion_aae: float


def fill_comparison(
    ground_truth: FlowField,
    mask: BitMask,
    image: Raster,
    params: Optional[FillParams] = None,
) -> FillComparison:
    """Occlude ``ground_truth`` at ``mask``, fill it both ways, and score the holes."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise FillError("Comparison needs at least one occluded pixel")
    laplacian = laplacian_fill(ground_truth, mask, image, params)
    diffusion = diffusion_fill(ground_truth, mask)
    l_mee, l_aae = flow2d_errors(laplacian, ground_truth, evaluate=mask)
    d_mee, d_aae = flow2d_errors(diffusion, ground_truth, evaluate=mask)
    logger.info(
        f"Fill comparison: laplacian MEE {l_mee:.3f}px, diffusion MEE {d_mee:.3f}px"
    )
    return FillComparison(
        laplacian_mee=l_mee, laplacian_aae=l_aae, diffusion_mee=d_mee, diffusion_aae=d_aae
    )
