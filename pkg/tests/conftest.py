"""Test configuration and fixtures."""

from unittest.mock import AsyncMock

import numpy as np
import pytest
from scipy import ndimage

from sceneflow_mcp.geometry import CameraCalib, rig_frame
from sceneflow_mcp.models import (
    MatchParams,
    MatchWeights,
    PassConfig,
    PassSchedule,
    PipelineConfig,
    SceneFlowParams,
    SceneGeometry,
    SyntheticSpec,
)


def smooth_texture(height: int, width: int, seed: int = 0, sigma: float = 1.5) -> np.ndarray:
    """Band-limited RGB noise in [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.random((height, width, 3)), (sigma, sigma, 0.0))
    low = noise.min(axis=(0, 1), keepdims=True)
    high = noise.max(axis=(0, 1), keepdims=True)
    return (0.1 + 0.8 * (noise - low) / (high - low)).astype(np.float32)


@pytest.fixture
def make_texture():
    """Factory for band-limited textures."""
    return smooth_texture


@pytest.fixture
def textured_image():
    """32x40 RGB texture."""
    return smooth_texture(32, 40)


@pytest.fixture
def rectified_F():
    """Fundamental matrix of a rectified rig: horizontal epipolar lines."""
    return np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


@pytest.fixture
def rectified_rig():
    """Two identical pinholes 0.2 units apart along x."""
    K = np.array([[50.0, 0.0, 20.0], [0.0, 50.0, 15.0], [0.0, 0.0, 1.0]])
    cam1 = CameraCalib(K=K, R=np.eye(3), t=np.zeros(3))
    cam2 = CameraCalib(K=K, R=np.eye(3), t=np.array([-0.2, 0.0, 0.0]))
    return rig_frame(cam1, cam2)


@pytest.fixture
def plane_spec():
    """Small static fronto-parallel plane."""
    return SyntheticSpec(width=40, height=30, geometry=SceneGeometry.PLANE, seed=3)


@pytest.fixture
def two_layer_spec():
    """Small two-layer scene with a moving foreground."""
    return SyntheticSpec(
        width=48,
        height=36,
        geometry=SceneGeometry.TWO_LAYER,
        foreground_motion=(0.05, 0.0, 0.0),
        seed=5,
    )


@pytest.fixture
def fast_match_params():
    """Short pass schedules so pipeline tests stay quick."""
    stereo = PassSchedule(
        passes=[
            PassConfig(weights=MatchWeights(w_c=1.0, w_p=0.01), iterations=2),
            PassConfig(weights=MatchWeights(w_c=10.0, w_p=0.1), iterations=2),
        ]
    )
    flow = PassSchedule(
        passes=[
            PassConfig(
                weights=MatchWeights(w_c=20.0, w_e=0.0, w_p=0.01),
                iterations=4,
                dense_descriptors=True,
            )
        ]
    )
    return MatchParams(stereo_schedule=stereo, flow_schedule=flow, search_range=6.0)


@pytest.fixture
def fast_sceneflow_params():
    """Few warps and sweeps."""
    return SceneFlowParams(warps=2, inner_iterations=2, sor_iterations=10, start_scale=0.5)


@pytest.fixture
def pipeline_config(tmp_path, plane_spec, fast_match_params, fast_sceneflow_params):
    """Config pointing at a freshly rendered plane dataset."""
    from sceneflow_mcp.synthetic import make_synthetic

    data_dir = tmp_path / "data"
    make_synthetic(plane_spec, data_dir)
    return PipelineConfig(
        input_dir=str(data_dir),
        output_dir=str(tmp_path / "out"),
        ground_truth_dir=str(data_dir / "gt"),
        match=fast_match_params,
        sceneflow=fast_sceneflow_params,
        seed=7,
        visualize=False,
    )


@pytest.fixture
def mock_context():
    """Mock FastMCP Context."""
    context = AsyncMock()
    context.info = AsyncMock()
    context.warning = AsyncMock()
    context.error = AsyncMock()
    context.debug = AsyncMock()
    context.report_progress = AsyncMock()
    return context
