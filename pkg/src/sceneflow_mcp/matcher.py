"""DAISY + PMBP correspondence finding.

The matching cost combines a DAISY descriptor difference, an affine colour
consistency term and (for stereo) the Sampson epipolar distance. PatchMatch
belief propagation minimises the sum of these unary costs and truncated
quadratic pairwise terms over 4-connected neighbours, with K continuous
particles per pixel.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt
from numba import njit

from .daisy import OrientationPyramid, build_orientation_pyramid, descriptor_into, dense_descriptors
from .geometry import epipolar_angles
from .imagecore import FlowField, Raster, as_raster, invalid_mask, sample_many, warp_positions
from .models import (
    ColourTransformModel,
    DaisyParams,
    MatchKind,
    MatchParams,
    MatchWeights,
    PassConfig,
    PassSchedule,
)
from .occlusion import forward_backward_mask

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, np.random.SeedSequence]

# left, right, up, down; the opposite of direction d is d ^ 1
_DX = np.array([-1, 1, 0, 0], dtype=np.int64)
_DY = np.array([0, 0, -1, 1], dtype=np.int64)


class MatchingError(ValueError):
    """Raised for inconsistent matcher inputs."""

    pass


@dataclass(frozen=True)
class ColourTransform:
    """Affine RGB transform c -> A c + a."""

    A: npt.NDArray[np.float64]
    a: npt.NDArray[np.float64]

    @classmethod
    def identity(cls) -> "ColourTransform":
        return cls(A=np.eye(3), a=np.zeros(3))

    def apply(self, image: Raster) -> Raster:
        """Transform every pixel of an RGB raster."""
        rgb = as_raster(image).astype(np.float64)
        return (rgb @ self.A.T + self.a).astype(np.float32)

    def to_model(self) -> ColourTransformModel:
        return ColourTransformModel(A=self.A.ravel().tolist(), a=self.a.tolist())

    @classmethod
    def from_model(cls, model: ColourTransformModel) -> "ColourTransform":
        return cls(
            A=np.array(model.A, dtype=np.float64).reshape(3, 3),
            a=np.array(model.a, dtype=np.float64),
        )


def stereo_schedule() -> PassSchedule:
    """Four passes of two iterations with increasing smoothness."""
    w_p_values = (0.01, 0.02, 0.1, 1.0)
    passes = []
    for index, w_p in enumerate(w_p_values):
        w_c = 1.0 if index == 0 else 10.0
        passes.append(
            PassConfig(
                weights=MatchWeights(w_d=1.0, w_c=w_c, w_e=1.0, w_p=w_p, tau_p=50.0),
                iterations=2,
            )
        )
    return PassSchedule(passes=passes)


def flow_schedule() -> PassSchedule:
    """Two passes of 6 and 4 iterations; pass 1 uses dense descriptors."""
    weights = MatchWeights(w_d=1.0, w_c=20.0, w_e=0.0, w_p=0.01, tau_p=50.0)
    return PassSchedule(
        passes=[
            PassConfig(weights=weights, iterations=6, dense_descriptors=True),
            PassConfig(weights=weights, iterations=4),
        ]
    )


@dataclass
class MatchingProblem:
    """Images, orientation pyramids and epipolar orientation maps of one direction."""

    img1: npt.NDArray[np.float64]
    img2: npt.NDArray[np.float64]
    pyr1: OrientationPyramid
    pyr2: OrientationPyramid
    F: Optional[npt.NDArray[np.float64]] = None
    theta1: npt.NDArray[np.float64] = field(init=False)
    theta2: npt.NDArray[np.float64] = field(init=False)

    def __post_init__(self) -> None:
        if self.img1.shape != self.img2.shape:
            raise MatchingError(
                f"Image dimensions differ: {self.img1.shape} vs {self.img2.shape}"
            )
        height, width = self.img1.shape[:2]
        if self.F is None:
            self.theta1 = np.zeros((height, width))
            self.theta2 = np.zeros((height, width))
        else:
            self.theta1 = epipolar_angles(self.F, width, height, image=1)
            self.theta2 = epipolar_angles(self.F, width, height, image=2)

    @property
    def height(self) -> int:
        return int(self.img1.shape[0])

    @property
    def width(self) -> int:
        return int(self.img1.shape[1])

    def reversed(self) -> "MatchingProblem":
        """The problem of matching image 2 to image 1."""
        return MatchingProblem(
            img1=self.img2,
            img2=self.img1,
            pyr1=self.pyr2,
            pyr2=self.pyr1,
            F=None if self.F is None else self.F.T.copy(),
        )


def prepare_problem(
    img1: Raster,
    img2: Raster,
    daisy: DaisyParams,
    F: Optional[npt.NDArray[np.float64]] = None,
) -> MatchingProblem:
    """Build pyramids and orientation maps for matching img1 to img2."""
    rgb1 = _rgb(img1)
    rgb2 = _rgb(img2)
    if rgb1.shape != rgb2.shape:
        raise MatchingError(f"Image dimensions differ: {rgb1.shape} vs {rgb2.shape}")
    return MatchingProblem(
        img1=rgb1,
        img2=rgb2,
        pyr1=build_orientation_pyramid(rgb1, daisy),
        pyr2=build_orientation_pyramid(rgb2, daisy),
        F=None if F is None else np.asarray(F, dtype=np.float64),
    )


def _rgb(image: Raster) -> npt.NDArray[np.float64]:
    data = as_raster(image).astype(np.float64)
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    return np.ascontiguousarray(data)


# Numba kernels


@njit(cache=True, nogil=True)
def _bilinear_rgb(img, x, y, out):
    height = img.shape[0]
    width = img.shape[1]
    x = min(max(x, 0.0), width - 1.0)
    y = min(max(y, 0.0), height - 1.0)
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    x1 = min(x0 + 1, width - 1)
    y1 = min(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    for c in range(3):
        top = img[y0, x0, c] + fx * (img[y0, x1, c] - img[y0, x0, c])
        bottom = img[y1, x0, c] + fx * (img[y1, x1, c] - img[y1, x0, c])
        out[c] = top + fy * (bottom - top)


@njit(cache=True, nogil=True)
def _colour_cost(c1, c2, A, a, w_c):
    total = 0.0
    for r in range(3):
        value = A[r, 0] * c1[0] + A[r, 1] * c1[1] + A[r, 2] * c1[2] + a[r] - c2[r]
        total += value * value
    return w_c * math.sqrt(total)


@njit(cache=True, nogil=True)
def _sampson(F, x, y, tx, ty, w_e):
    fx0 = F[0, 0] * x + F[0, 1] * y + F[0, 2]
    fx1 = F[1, 0] * x + F[1, 1] * y + F[1, 2]
    fx2 = F[2, 0] * x + F[2, 1] * y + F[2, 2]
    ft0 = F[0, 0] * tx + F[1, 0] * ty + F[2, 0]
    ft1 = F[0, 1] * tx + F[1, 1] * ty + F[2, 1]
    denominator = fx0 * fx0 + fx1 * fx1 + ft0 * ft0 + ft1 * ft1
    if denominator < 1e-12:
        return 0.0
    numerator = tx * fx0 + ty * fx1 + fx2
    return w_e * numerator * numerator / denominator


@njit(cache=True, nogil=True)
def _pairwise(ax, ay, bx, by, w_p, tau_p):
    dx = ax - bx
    dy = ay - by
    return min(tau_p, w_p * (dx * dx + dy * dy))


@njit(cache=True, nogil=True)
def _unary_terms(
    x, y, ux, uy, d1, img1, img2, desc2, use_dense2, layers2, theta2,
    radius, rings, points, norm_code, F, use_f, A, a, w_d, w_c, w_e, buf, rgb,
):
    height = img2.shape[0]
    width = img2.shape[1]
    tx = x + ux
    ty = y + uy
    ix = min(max(int(math.floor(tx + 0.5)), 0), width - 1)
    iy = min(max(int(math.floor(ty + 0.5)), 0), height - 1)

    c_d = 0.0
    if w_d > 0.0:
        if use_dense2:
            for k in range(d1.shape[0]):
                diff = d1[k] - desc2[iy, ix, k]
                c_d += diff * diff
        else:
            descriptor_into(layers2, tx, ty, theta2[iy, ix], radius, rings, points, norm_code, buf)
            for k in range(d1.shape[0]):
                diff = d1[k] - buf[k]
                c_d += diff * diff
        c_d *= w_d

    c_c = 0.0
    if w_c > 0.0:
        _bilinear_rgb(img2, tx, ty, rgb)
        c_c = _colour_cost(img1[int(y), int(x)], rgb, A, a, w_c)

    c_e = 0.0
    if use_f and w_e > 0.0:
        c_e = _sampson(F, x, y, tx, ty, w_e)
    return c_d, c_c, c_e


@njit(cache=True, nogil=True)
def _incoming_message(particles, unary, messages, jy, jx, back, lx, ly, w_p, tau_p):
    best = np.inf
    n_particles = particles.shape[2]
    for k in range(n_particles):
        h = unary[jy, jx, k]
        for n in range(4):
            if n != back:
                h += messages[jy, jx, n, k]
        h += _pairwise(lx, ly, particles[jy, jx, k, 0], particles[jy, jx, k, 1], w_p, tau_p)
        if h < best:
            best = h
    return best


@njit(cache=True, nogil=True)
def _clamp_flow(x, y, ux, uy, width, height):
    tx = min(max(x + ux, 0.0), width - 1.0)
    ty = min(max(y + uy, 0.0), height - 1.0)
    return tx - x, ty - y


@njit(cache=True, nogil=True)
def _initialize(
    particles, unary, belief, messages, init, has_init, draws, search_range,
    desc1, img1, img2, desc2, use_dense2, layers2, theta2,
    radius, rings, points, norm_code, F, use_f, A, a, w_d, w_c, w_e,
):
    height = particles.shape[0]
    width = particles.shape[1]
    n_particles = particles.shape[2]
    buf = np.empty(desc1.shape[2], dtype=np.float64)
    rgb = np.empty(3, dtype=np.float64)
    for y in range(height):
        for x in range(width):
            for k in range(n_particles):
                if k == 0 and has_init and abs(init[y, x, 0]) < 1e9 and abs(init[y, x, 1]) < 1e9:
                    ux = init[y, x, 0]
                    uy = init[y, x, 1]
                else:
                    ux = (2.0 * draws[y, x, k, 0] - 1.0) * search_range
                    uy = (2.0 * draws[y, x, k, 1] - 1.0) * search_range
                ux, uy = _clamp_flow(x, y, ux, uy, width, height)
                particles[y, x, k, 0] = ux
                particles[y, x, k, 1] = uy
                c_d, c_c, c_e = _unary_terms(
                    float(x), float(y), ux, uy, desc1[y, x], img1, img2, desc2, use_dense2,
                    layers2, theta2, radius, rings, points, norm_code, F, use_f, A, a,
                    w_d, w_c, w_e, buf, rgb,
                )
                unary[y, x, k] = c_d + c_c + c_e
                belief[y, x, k] = unary[y, x, k]
                for d in range(4):
                    messages[y, x, d, k] = 0.0


@njit(cache=True, nogil=True)
def _sweep(
    particles, unary, belief, messages, draws, search_range, forward,
    desc1, img1, img2, desc2, use_dense2, layers2, theta2,
    radius, rings, points, norm_code, F, use_f, A, a, w_d, w_c, w_e, w_p, tau_p,
):
    height = particles.shape[0]
    width = particles.shape[1]
    n_particles = particles.shape[2]
    n_radii = draws.shape[2]
    n_candidates = 5 * n_particles + n_radii
    candidates = np.empty((n_candidates, 2), dtype=np.float64)
    cur_u = np.empty(n_particles, dtype=np.float64)
    cur_b = np.empty(n_particles, dtype=np.float64)
    cur_m = np.empty((n_particles, 4), dtype=np.float64)
    cur_p = np.empty((n_particles, 2), dtype=np.float64)
    msg = np.empty(4, dtype=np.float64)
    buf = np.empty(desc1.shape[2], dtype=np.float64)
    rgb = np.empty(3, dtype=np.float64)
    total = height * width

    for step in range(total):
        index = step if forward else total - 1 - step
        y = index // width
        x = index - y * width
        fx = float(x)
        fy = float(y)

        # candidate labels: own particles, neighbour particles, random search
        count = 0
        for k in range(n_particles):
            candidates[count, 0] = particles[y, x, k, 0]
            candidates[count, 1] = particles[y, x, k, 1]
            count += 1
        for d in range(4):
            nx = x + _DX[d]
            ny = y + _DY[d]
            if nx < 0 or nx >= width or ny < 0 or ny >= height:
                continue
            for k in range(n_particles):
                ux, uy = _clamp_flow(fx, fy, particles[ny, nx, k, 0], particles[ny, nx, k, 1], width, height)
                candidates[count, 0] = ux
                candidates[count, 1] = uy
                count += 1
        k_best = 0
        for k in range(1, n_particles):
            if belief[y, x, k] < belief[y, x, k_best]:
                k_best = k
        bx = particles[y, x, k_best, 0]
        by = particles[y, x, k_best, 1]
        r = search_range
        for i in range(n_radii):
            angle = 2.0 * math.pi * draws[y, x, i, 0]
            rad = r * math.sqrt(draws[y, x, i, 1])
            ux, uy = _clamp_flow(fx, fy, bx + rad * math.cos(angle), by + rad * math.sin(angle), width, height)
            candidates[count, 0] = ux
            candidates[count, 1] = uy
            count += 1
            r *= 0.5

        for c in range(count):
            lx = candidates[c, 0]
            ly = candidates[c, 1]
            if c >= n_particles:
                duplicate = False
                for k in range(n_particles):
                    if cur_p[k, 0] == lx and cur_p[k, 1] == ly:
                        duplicate = True
                        break
                if duplicate:
                    continue
                c_d, c_c, c_e = _unary_terms(
                    fx, fy, lx, ly, desc1[y, x], img1, img2, desc2, use_dense2, layers2,
                    theta2, radius, rings, points, norm_code, F, use_f, A, a,
                    w_d, w_c, w_e, buf, rgb,
                )
                u_value = c_d + c_c + c_e
            else:
                u_value = unary[y, x, c]

            b_value = u_value
            for d in range(4):
                nx = x + _DX[d]
                ny = y + _DY[d]
                if nx < 0 or nx >= width or ny < 0 or ny >= height:
                    msg[d] = 0.0
                else:
                    msg[d] = _incoming_message(
                        particles, unary, messages, ny, nx, d ^ 1, lx, ly, w_p, tau_p
                    )
                b_value += msg[d]

            if c < n_particles:
                slot = c
            else:
                slot = 0
                for k in range(1, n_particles):
                    if cur_b[k] > cur_b[slot]:
                        slot = k
                if not b_value < cur_b[slot]:
                    continue
            cur_p[slot, 0] = lx
            cur_p[slot, 1] = ly
            cur_u[slot] = u_value
            cur_b[slot] = b_value
            for d in range(4):
                cur_m[slot, d] = msg[d]

        for d in range(4):
            lowest = np.inf
            for k in range(n_particles):
                lowest = min(lowest, cur_m[k, d])
            for k in range(n_particles):
                messages[y, x, d, k] = cur_m[k, d] - lowest
        for k in range(n_particles):
            particles[y, x, k, 0] = cur_p[k, 0]
            particles[y, x, k, 1] = cur_p[k, 1]
            unary[y, x, k] = cur_u[k]
            b_value = cur_u[k]
            for d in range(4):
                b_value += messages[y, x, d, k]
            belief[y, x, k] = b_value


@njit(cache=True, nogil=True)
def _select(particles, belief):
    height = particles.shape[0]
    width = particles.shape[1]
    chosen = np.zeros((height, width), dtype=np.int64)
    flow = np.empty((height, width, 2), dtype=np.float64)
    for y in range(height):
        for x in range(width):
            best = 0
            for k in range(1, particles.shape[2]):
                if belief[y, x, k] < belief[y, x, best]:
                    best = k
            chosen[y, x] = best
            flow[y, x, 0] = particles[y, x, best, 0]
            flow[y, x, 1] = particles[y, x, best, 1]
    return chosen, flow


@njit(cache=True, nogil=True)
def _labeling_energy(flow, unary, chosen, w_p, tau_p):
    height = flow.shape[0]
    width = flow.shape[1]
    energy = 0.0
    for y in range(height):
        for x in range(width):
            energy += unary[y, x, chosen[y, x]]
            for d in range(4):
                nx = x + _DX[d]
                ny = y + _DY[d]
                if nx < 0 or nx >= width or ny < 0 or ny >= height:
                    continue
                energy += _pairwise(flow[y, x, 0], flow[y, x, 1], flow[ny, nx, 0], flow[ny, nx, 1], w_p, tau_p)
    return energy


# Public cost terms


def colour_cost(
    c1: Sequence[float], c2: Sequence[float], transform: ColourTransform, w_c: float
) -> float:
    """w_C * ||A c1 + a - c2|| (unsquared)."""
    return float(
        _colour_cost(
            np.asarray(c1, dtype=np.float64),
            np.asarray(c2, dtype=np.float64),
            transform.A,
            transform.a,
            float(w_c),
        )
    )


def pairwise_cost(
    x1: Sequence[float],
    y1: Sequence[float],
    x2: Sequence[float],
    y2: Sequence[float],
    w_p: float,
    tau_p: float,
) -> float:
    """min(tau_p, w_p * ||(y1 - x1) - (y2 - x2)||^2)."""
    u1 = np.asarray(y1, dtype=np.float64) - np.asarray(x1, dtype=np.float64)
    u2 = np.asarray(y2, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
    return float(_pairwise(u1[0], u1[1], u2[0], u2[1], float(w_p), float(tau_p)))


def unary_terms(
    x: Sequence[int],
    y: Sequence[float],
    problem: MatchingProblem,
    transform: ColourTransform,
    weights: MatchWeights,
) -> Tuple[float, float, float]:
    """(c_D, c_C, c_E) for pixel x of image 1 matched to point y of image 2."""
    px, py = int(x[0]), int(x[1])
    p = problem.pyr1.params
    d1 = np.empty(p.descriptor_length, dtype=np.float64)
    descriptor_into(
        problem.pyr1.layers, float(px), float(py), problem.theta1[py, px],
        float(p.radius), p.rings, p.points_per_ring, problem.pyr1.norm_code, d1,
    )
    F = problem.F if problem.F is not None else np.zeros((3, 3))
    terms = _unary_terms(
        float(px), float(py), float(y[0]) - px, float(y[1]) - py, d1,
        problem.img1, problem.img2, np.zeros((1, 1, 1), dtype=np.float32), False,
        problem.pyr2.layers, problem.theta2, float(p.radius), p.rings,
        p.points_per_ring, problem.pyr2.norm_code, F, problem.F is not None,
        transform.A, transform.a, weights.w_d, weights.w_c, weights.w_e,
        np.empty(p.descriptor_length, dtype=np.float64), np.empty(3, dtype=np.float64),
    )
    return float(terms[0]), float(terms[1]), float(terms[2])


def unary_cost(
    x: Sequence[int],
    y: Sequence[float],
    problem: MatchingProblem,
    transform: ColourTransform,
    weights: MatchWeights,
) -> float:
    """c_D + c_C + c_E; the epipolar term is zero without F."""
    return float(sum(unary_terms(x, y, problem, transform, weights)))


def estimate_colour_transform(
    c1: npt.ArrayLike, c2: npt.ArrayLike, regularization: float = 1e-4
) -> ColourTransform:
    """Ridge least-squares fit of c2 ~ A c1 + a.

    Minimises sum ||A c1 + a - c2||^2 + rho (||A - I||_F^2 + ||a||^2) with
    rho = regularization * (pair count).
    """
    src = np.asarray(c1, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(c2, dtype=np.float64).reshape(-1, 3)
    if src.shape[0] != dst.shape[0]:
        raise MatchingError("Colour pair arrays differ in length")
    if src.shape[0] < 4:
        raise MatchingError(f"Need at least 4 colour pairs, got {src.shape[0]}")
    rho = regularization * src.shape[0]
    X = np.hstack([src, np.ones((src.shape[0], 1))])
    prior = np.vstack([np.eye(3), np.zeros((1, 3))])
    normal = X.T @ X + rho * np.eye(4)
    rhs = X.T @ dst + rho * prior
    if rho > 0:
        M = np.linalg.solve(normal, rhs)
    else:
        M = np.linalg.pinv(normal) @ rhs
    return ColourTransform(A=M[:3].T.copy(), a=M[3].copy())


def fit_colour_from_flow(
    img1: Raster,
    img2: Raster,
    flow: FlowField,
    valid: npt.NDArray[np.bool_],
    max_samples: int = 50000,
    regularization: float = 1e-4,
) -> Optional[ColourTransform]:
    """Fit the colour transform on consistent pixels (uniform stride subsample)."""
    valid = valid & ~invalid_mask(flow)
    ys, xs = np.nonzero(valid)
    if ys.size < 4:
        return None
    stride = max(1, int(math.ceil(ys.size / max_samples)))
    ys = ys[::stride]
    xs = xs[::stride]
    tx, ty = warp_positions(flow)
    c1 = _rgb(img1)[ys, xs]
    c2 = sample_many(_rgb(img2).astype(np.float32), tx[ys, xs], ty[ys, xs])
    return estimate_colour_transform(c1, c2, regularization)


# PMBP


@dataclass
class PMBPResult:
    """Output of :func:`pmbp_optimize`."""

    flow: FlowField
    energies: List[float]


def _generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _radius_count(search_range: float) -> int:
    count = 1
    r = search_range
    while r * 0.5 >= 0.5:
        r *= 0.5
        count += 1
    return count


def pmbp_optimize(
    problem: MatchingProblem,
    schedule: PassSchedule,
    particles: int = 2,
    init: Optional[FlowField] = None,
    search_range: Optional[float] = None,
    transform: Optional[ColourTransform] = None,
    seed: SeedLike = 0,
) -> PMBPResult:
    """Minimise the matching energy with PatchMatch belief propagation.

    Each pass seeds particle 0 from the current flow (when available) and the
    others randomly, then alternates forward and backward scanline sweeps.
    Returns the minimum-belief labeling and the energy after every pass.
    """
    if particles < 1:
        raise MatchingError(f"Need at least one particle, got {particles}")
    height, width = problem.height, problem.width
    if init is not None and init.shape[:2] != (height, width):
        raise MatchingError(
            f"Initial flow {init.shape[:2]} does not match images {(height, width)}"
        )
    transform = transform or ColourTransform.identity()
    rng = _generator(seed)
    if search_range is None:
        search_range = width / 8.0
    n_radii = _radius_count(search_range)

    p1 = problem.pyr1.params
    use_f = problem.F is not None
    F = problem.F if use_f else np.zeros((3, 3))
    desc1 = dense_descriptors(problem.pyr1, problem.theta1)

    part = np.zeros((height, width, particles, 2), dtype=np.float64)
    unary = np.zeros((height, width, particles), dtype=np.float64)
    belief = np.zeros((height, width, particles), dtype=np.float64)
    messages = np.zeros((height, width, 4, particles), dtype=np.float64)

    current = None if init is None else np.ascontiguousarray(init, dtype=np.float64)
    energies: List[float] = []
    for index, pass_cfg in enumerate(schedule.passes):
        w = pass_cfg.weights
        if pass_cfg.dense_descriptors:
            desc2 = dense_descriptors(problem.pyr2, problem.theta2)
        else:
            desc2 = np.zeros((1, 1, 1), dtype=np.float32)
        common = (
            desc1, problem.img1, problem.img2, desc2, pass_cfg.dense_descriptors,
            problem.pyr2.layers, problem.theta2, float(p1.radius), p1.rings,
            p1.points_per_ring, problem.pyr2.norm_code, F, use_f,
            transform.A, transform.a, w.w_d, w.w_c, w.w_e,
        )
        draws = rng.random((height, width, particles, 2))
        has_init = current is not None
        seed_flow = current if has_init else np.zeros((height, width, 2))
        _initialize(part, unary, belief, messages, seed_flow, has_init, draws, float(search_range), *common)

        for iteration in range(pass_cfg.iterations):
            draws = rng.random((height, width, n_radii, 2))
            _sweep(
                part, unary, belief, messages, draws, float(search_range),
                iteration % 2 == 0, *common, w.w_p, w.tau_p,
            )
        chosen, current = _select(part, belief)
        energy = float(_labeling_energy(current, unary, chosen, w.w_p, w.tau_p))
        energies.append(energy)
        logger.info(
            f"PMBP pass {index + 1}/{len(schedule.passes)}: "
            f"{pass_cfg.iterations} iterations, energy {energy:.4f}"
        )
    assert current is not None
    return PMBPResult(flow=current.astype(np.float32), energies=energies)


@dataclass
class MatchResult:
    """Bidirectional correspondences of one image pair."""

    forward: FlowField
    backward: FlowField
    transform: ColourTransform
    backward_transform: ColourTransform
    forward_energies: List[float]
    backward_energies: List[float]


def match_bidirectional(
    kind: MatchKind,
    img1: Raster,
    img2: Raster,
    F: Optional[npt.NDArray[np.float64]] = None,
    params: Optional[MatchParams] = None,
    prior: Optional[Tuple[FlowField, FlowField]] = None,
    seed: SeedLike = 0,
    parallel: bool = False,
) -> MatchResult:
    """Forward and backward correspondences with the pass schedule of ``kind``.

    The colour transform of each direction is re-fitted after every pass that
    asks for it, from forward-backward consistent pixels.
    """
    params = params or MatchParams()
    if kind == MatchKind.STEREO:
        if F is None:
            raise MatchingError("Stereo matching requires a fundamental matrix")
        schedule = params.stereo_schedule or stereo_schedule()
        daisy = params.stereo_daisy
        fraction = params.stereo_search_fraction
    else:
        schedule = params.flow_schedule or flow_schedule()
        daisy = params.flow_daisy
        fraction = params.flow_search_fraction
        F = None

    forward_problem = prepare_problem(img1, img2, daisy, F)
    backward_problem = forward_problem.reversed()
    search_range = params.search_range or forward_problem.width * fraction

    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(
        seed if isinstance(seed, int) else int(_generator(seed).integers(2**63))
    )
    rng_fwd, rng_bwd = (np.random.default_rng(s) for s in sequence.spawn(2))

    fwd_flow, bwd_flow = prior if prior is not None else (None, None)
    t_fwd = ColourTransform.identity()
    t_bwd = ColourTransform.identity()
    energies_fwd: List[float] = []
    energies_bwd: List[float] = []

    logger.info(
        f"Matching {kind.value} pair {forward_problem.width}x{forward_problem.height}, "
        f"{len(schedule.passes)} passes, search range {search_range:.1f}px"
    )
    for index, pass_cfg in enumerate(schedule.passes):
        single = PassSchedule(passes=[pass_cfg])
        jobs = (
            (forward_problem, fwd_flow, t_fwd, rng_fwd),
            (backward_problem, bwd_flow, t_bwd, rng_bwd),
        )

        def run(job: Tuple) -> PMBPResult:
            problem, init, transform, rng = job
            return pmbp_optimize(
                problem, single, params.particles, init, search_range, transform, rng
            )

        if parallel:
            with ThreadPoolExecutor(max_workers=2) as pool:
                res_fwd, res_bwd = list(pool.map(run, jobs))
        else:
            res_fwd, res_bwd = run(jobs[0]), run(jobs[1])
        fwd_flow, bwd_flow = res_fwd.flow, res_bwd.flow
        energies_fwd += res_fwd.energies
        energies_bwd += res_bwd.energies

        if pass_cfg.refit_colour:
            occluded_fwd = forward_backward_mask(fwd_flow, bwd_flow, params.fb_threshold)
            occluded_bwd = forward_backward_mask(bwd_flow, fwd_flow, params.fb_threshold)
            fitted_fwd = fit_colour_from_flow(
                forward_problem.img1, forward_problem.img2, fwd_flow, ~occluded_fwd,
                params.colour_samples, params.colour_regularization,
            )
            fitted_bwd = fit_colour_from_flow(
                backward_problem.img1, backward_problem.img2, bwd_flow, ~occluded_bwd,
                params.colour_samples, params.colour_regularization,
            )
            if fitted_fwd is None or fitted_bwd is None:
                logger.warning(
                    f"Pass {index + 1}: too few consistent pixels, keeping colour transform"
                )
            else:
                t_fwd, t_bwd = fitted_fwd, fitted_bwd
                logger.debug(f"Pass {index + 1}: colour transform A={t_fwd.A.tolist()}")

    assert fwd_flow is not None and bwd_flow is not None
    return MatchResult(
        forward=fwd_flow,
        backward=bwd_flow,
        transform=t_fwd,
        backward_transform=t_bwd,
        forward_energies=energies_fwd,
        backward_energies=energies_bwd,
    )
