"""Tests for DAISY orientation pyramids and descriptors."""

import math

import numpy as np
import pytest

from sceneflow_mcp.daisy import (
    build_orientation_pyramid,
    daisy_descriptor,
    dense_descriptors,
    descriptor_cost,
    layer_sigma,
)
from sceneflow_mcp.models import DaisyParams, DescriptorNormalization


class TestOrientationPyramid:
    """Test cases for the gradient orientation maps."""

    def test_constant_image(self):
        """No gradient, no response."""
        pyramid = build_orientation_pyramid(np.full((16, 16, 3), 0.5), DaisyParams.stereo_preset())

        assert pyramid.layers.shape == (3, 8, 16, 16)
        assert not pyramid.layers.any()

    def test_step_edge_orientations(self):
        """A dark-to-bright step along x excites only maps facing +x."""
        image = np.zeros((12, 12), dtype=np.float32)
        image[:, 6:] = 1.0
        params = DaisyParams.stereo_preset()

        layers = build_orientation_pyramid(image, params).layers[0]

        for o in range(params.orientations):
            c = math.cos(2.0 * math.pi * o / params.orientations)
            if c > 0.5:
                assert layers[o].max() > 0.3
            elif c < -0.1:
                assert layers[o].max() == 0.0

    def test_smoothing_preserves_mass(self):
        """Gaussian layers keep the total response of interior content."""
        ys, xs = np.mgrid[0:64, 0:64]
        blob = np.exp(-((xs - 32.0) ** 2 + (ys - 32.0) ** 2) / (2 * 4.0**2))
        pyramid = build_orientation_pyramid(blob, DaisyParams.flow_preset())

        base = pyramid.layers[0, 0].sum()
        assert pyramid.layers[1, 0].sum() == pytest.approx(base, rel=0.01)

    def test_layer_sigma(self):
        """Layer s is smoothed by R * s / (2 Q)."""
        params = DaisyParams(radius=15.0, rings=3)

        assert layer_sigma(params, 0) == 0.0
        assert layer_sigma(params, 3) == pytest.approx(7.5)


class TestDescriptor:
    """Test cases for descriptor sampling and comparison."""

    def test_stereo_length(self):
        """Two rings of eight points with eight orientations give 136 values."""
        assert DaisyParams.stereo_preset().descriptor_length == 136
        assert DaisyParams.flow_preset().descriptor_length == 200

    def test_constant_image_descriptor(self):
        """Flat images give zero descriptors after normalisation."""
        pyramid = build_orientation_pyramid(np.full((20, 20), 0.3), DaisyParams.stereo_preset())

        assert not daisy_descriptor(pyramid, 10.0, 10.0).any()

    def test_rotation_periodicity(self, textured_image):
        """theta and theta + 2 pi sample the same grid."""
        pyramid = build_orientation_pyramid(textured_image, DaisyParams.stereo_preset())

        a = daisy_descriptor(pyramid, 17.3, 12.8, 0.0)
        b = daisy_descriptor(pyramid, 17.3, 12.8, 2.0 * math.pi)

        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_partial_normalisation(self, textured_image):
        """Each histogram has unit norm."""
        params = DaisyParams.stereo_preset()
        pyramid = build_orientation_pyramid(textured_image, params)

        blocks = daisy_descriptor(pyramid, 20.0, 16.0).reshape(-1, params.orientations)

        np.testing.assert_allclose(np.linalg.norm(blocks, axis=1), 1.0, atol=1e-9)

    def test_full_normalisation(self, textured_image):
        """Full normalisation makes the whole vector unit length."""
        params = DaisyParams(normalization=DescriptorNormalization.FULL)
        pyramid = build_orientation_pyramid(textured_image, params)

        assert np.linalg.norm(daisy_descriptor(pyramid, 20.0, 16.0)) == pytest.approx(1.0)

    def test_dense_matches_pointwise(self, textured_image):
        """Dense descriptors equal single-pixel evaluation."""
        pyramid = build_orientation_pyramid(textured_image, DaisyParams.stereo_preset())
        angles = np.full((pyramid.height, pyramid.width), 0.3)

        dense = dense_descriptors(pyramid, angles)

        assert dense.shape == (32, 40, 136)
        np.testing.assert_allclose(dense[7, 11], daisy_descriptor(pyramid, 11, 7, 0.3), rtol=1e-5, atol=1e-6)


class TestDescriptorCost:
    """Test cases for the squared descriptor distance."""

    def test_equal(self):
        """Identical descriptors cost nothing."""
        d = np.arange(8, dtype=float)

        assert descriptor_cost(d, d) == 0.0

    def test_orthogonal_units(self):
        """Two orthogonal unit vectors are at squared distance 2."""
        d1 = np.zeros(8)
        d2 = np.zeros(8)
        d1[0] = 1.0
        d2[1] = 1.0

        assert descriptor_cost(d1, d2, 1.0) == pytest.approx(2.0)

    def test_linear_in_weight(self):
        """Doubling w_D doubles the cost."""
        rng = np.random.default_rng(4)
        d1, d2 = rng.random(16), rng.random(16)

        assert descriptor_cost(d1, d2, 2.0) == pytest.approx(2.0 * descriptor_cost(d1, d2, 1.0))

    def test_length_mismatch(self):
        """Descriptors must have equal length."""
        with pytest.raises(ValueError):
            descriptor_cost(np.zeros(3), np.zeros(4))
