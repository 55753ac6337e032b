"""Tests for matching costs, colour fitting and PMBP."""

import numpy as np
import pytest

from sceneflow_mcp.daisy import daisy_descriptor, descriptor_cost
from sceneflow_mcp.geometry import sampson_cost
from sceneflow_mcp.matcher import (
    ColourTransform,
    MatchingError,
    colour_cost,
    estimate_colour_transform,
    fit_colour_from_flow,
    flow_schedule,
    match_bidirectional,
    pairwise_cost,
    pmbp_optimize,
    prepare_problem,
    stereo_schedule,
    unary_cost,
    unary_terms,
)
from sceneflow_mcp.models import DaisyParams, MatchKind, MatchParams, MatchWeights


class TestCostTerms:
    """Test cases for the unary and pairwise costs."""

    def test_colour_identity_equal(self):
        """Equal colours under the identity cost nothing."""
        assert colour_cost((0.2, 0.4, 0.6), (0.2, 0.4, 0.6), ColourTransform.identity(), 10) == 0.0

    def test_colour_unit_difference(self):
        """A unit colour difference costs w_C."""
        cost = colour_cost((1, 0, 0), (0, 0, 0), ColourTransform.identity(), 10)

        assert cost == pytest.approx(10.0)

    def test_colour_linear_in_weight(self):
        """The colour term scales with w_C."""
        t = ColourTransform(A=np.diag([0.9, 1.1, 1.0]), a=np.array([0.05, 0.0, -0.02]))
        c1, c2 = (0.3, 0.5, 0.7), (0.2, 0.6, 0.1)

        assert colour_cost(c1, c2, t, 3.0) == pytest.approx(3.0 * colour_cost(c1, c2, t, 1.0))

    def test_pairwise_equal_flows(self):
        """Equal flows cost nothing."""
        assert pairwise_cost((0, 0), (3, 1), (1, 0), (4, 1), 1.0, 50.0) == 0.0

    def test_pairwise_truncated(self):
        """Large differences saturate at tau_p."""
        assert pairwise_cost((0, 0), (100, 0), (1, 0), (1, 0), 1.0, 50.0) == pytest.approx(50.0)

    def test_pairwise_quadratic(self):
        """A (1, 1) difference with w_p = 0.01 costs 0.02."""
        assert pairwise_cost((0, 0), (1, 1), (1, 0), (1, 0), 0.01, 50.0) == pytest.approx(0.02)


class TestUnaryCost:
    """Test cases for the combined matching cost."""

    def test_identical_images_zero(self, textured_image, rectified_F):
        """Matching a pixel to itself in the same image is free."""
        problem = prepare_problem(textured_image, textured_image, DaisyParams.stereo_preset(), rectified_F)

        cost = unary_cost((12, 9), (12, 9), problem, ColourTransform.identity(), MatchWeights())

        assert cost == pytest.approx(0.0, abs=1e-12)

    def test_colour_only(self, textured_image, make_texture, rectified_F):
        """Zero descriptor and epipolar weights leave the colour term."""
        other = make_texture(32, 40, seed=9)
        problem = prepare_problem(textured_image, other, DaisyParams.stereo_preset(), rectified_F)
        weights = MatchWeights(w_d=0.0, w_c=5.0, w_e=0.0)

        cost = unary_cost((10, 8), (14, 11), problem, ColourTransform.identity(), weights)

        expected = colour_cost(textured_image[8, 10], other[11, 14], ColourTransform.identity(), 5.0)
        assert cost == pytest.approx(expected, abs=1e-9)

    def test_sum_of_terms(self, textured_image, make_texture, rectified_F):
        """The cost equals the three terms evaluated independently."""
        other = make_texture(32, 40, seed=11)
        problem = prepare_problem(textured_image, other, DaisyParams.stereo_preset(), rectified_F)
        transform = ColourTransform(A=np.diag([1.1, 0.9, 1.0]), a=np.array([0.0, 0.02, -0.01]))
        weights = MatchWeights(w_d=1.0, w_c=10.0, w_e=1.0)
        x, y = (15, 12), (19, 14)

        d1 = daisy_descriptor(problem.pyr1, x[0], x[1], problem.theta1[x[1], x[0]])
        d2 = daisy_descriptor(problem.pyr2, y[0], y[1], problem.theta2[y[1], y[0]])
        expected = (
            descriptor_cost(d1, d2, 1.0)
            + colour_cost(textured_image[x[1], x[0]], other[y[1], y[0]], transform, 10.0)
            + sampson_cost(rectified_F, x, y, 1.0)[0]
        )

        assert unary_cost(x, y, problem, transform, weights) == pytest.approx(expected, abs=1e-9)
        _, _, c_e = unary_terms(x, y, problem, transform, weights)
        assert c_e == pytest.approx(2.0)


class TestColourTransform:
    """Test cases for the affine colour fit."""

    def test_recovers_known_map(self):
        """Pairs from a known affine map recover it."""
        rng = np.random.default_rng(0)
        A = np.array([[0.9, 0.1, 0.0], [0.05, 1.1, 0.0], [0.0, -0.1, 0.8]])
        a = np.array([0.05, -0.03, 0.1])
        c1 = rng.random((300, 3))
        c2 = c1 @ A.T + a

        fitted = estimate_colour_transform(c1, c2)

        np.testing.assert_allclose(fitted.A, A, atol=1e-3)
        np.testing.assert_allclose(fitted.a, a, atol=1e-3)

    def test_identity_pairs(self):
        """Unchanged colours give the identity."""
        c1 = np.random.default_rng(1).random((100, 3))

        fitted = estimate_colour_transform(c1, c1)

        np.testing.assert_allclose(fitted.A, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(fitted.a, 0.0, atol=1e-9)

    def test_degenerate_colours(self):
        """One repeated colour still gives a finite fit reproducing the offset."""
        c1 = np.full((50, 3), 0.5)
        c2 = c1 + np.array([0.1, 0.0, -0.1])

        fitted = estimate_colour_transform(c1, c2)

        assert np.all(np.isfinite(fitted.A))
        np.testing.assert_allclose(fitted.A @ c1[0] + fitted.a, c2[0], atol=1e-3)

    def test_too_few_pairs(self):
        """At least four pairs are needed."""
        with pytest.raises(MatchingError):
            estimate_colour_transform(np.zeros((3, 3)), np.zeros((3, 3)))

    def test_fit_needs_valid_pixels(self, textured_image):
        """Fitting without consistent pixels yields nothing."""
        flow = np.zeros((32, 40, 2), dtype=np.float32)
        valid = np.zeros((32, 40), dtype=bool)

        assert fit_colour_from_flow(textured_image, textured_image, flow, valid) is None

    def test_apply_and_model(self):
        """Transforms apply per pixel and survive serialisation."""
        t = ColourTransform(A=np.diag([2.0, 1.0, 0.5]), a=np.array([0.0, 0.1, 0.0]))
        image = np.full((1, 1, 3), 0.4, dtype=np.float32)

        np.testing.assert_allclose(t.apply(image)[0, 0], [0.8, 0.5, 0.2], atol=1e-6)
        restored = ColourTransform.from_model(t.to_model())
        np.testing.assert_array_equal(restored.A, t.A)


class TestSchedules:
    """Test cases for the default pass schedules."""

    def test_stereo_schedule(self):
        """Four passes of two iterations with rising smoothness."""
        passes = stereo_schedule().passes

        assert [p.iterations for p in passes] == [2, 2, 2, 2]
        assert [p.weights.w_p for p in passes] == [0.01, 0.02, 0.1, 1.0]
        assert [p.weights.w_c for p in passes] == [1.0, 10.0, 10.0, 10.0]
        assert all(p.weights.w_d == 1.0 and p.weights.w_e == 1.0 for p in passes)
        assert all(p.weights.tau_p == 50.0 for p in passes)

    def test_flow_schedule(self):
        """Two passes of (1, 20, 0, 0.01) with 6 then 4 iterations."""
        passes = flow_schedule().passes

        assert [p.iterations for p in passes] == [6, 4]
        for p in passes:
            w = p.weights
            assert (w.w_d, w.w_c, w.w_e, w.w_p) == (1.0, 20.0, 0.0, 0.01)
        assert passes[0].dense_descriptors


class TestPMBP:
    """Test cases for PatchMatch belief propagation."""

    def test_zero_flow_is_kept(self, textured_image):
        """On identical images a zero initialisation is a global optimum."""
        problem = prepare_problem(textured_image, textured_image, DaisyParams.stereo_preset())
        init = np.zeros((32, 40, 2), dtype=np.float32)

        result = pmbp_optimize(problem, flow_schedule(), init=init, search_range=5.0, seed=0)

        np.testing.assert_array_equal(result.flow, 0.0)
        assert result.energies[-1] == pytest.approx(0.0, abs=1e-9)

    def test_translation_recovered(self, make_texture):
        """A texture shifted by (5, 0) is matched to that shift."""
        base = make_texture(48, 80, seed=21)
        img1 = base[:, 10:74]
        img2 = base[:, 5:69]
        problem = prepare_problem(img1, img2, DaisyParams.flow_preset())

        result = pmbp_optimize(problem, flow_schedule(), particles=2, search_range=8.0, seed=3)

        interior = result.flow[8:-8, 8:-8]
        error = np.hypot(interior[:, :, 0] - 5.0, interior[:, :, 1])
        assert np.mean(error < 1.0) >= 0.9
        assert result.energies[-1] <= result.energies[0]

    @pytest.mark.parametrize(
        "seed, shift", enumerate([(5, 0), (0, 7), (-3, 4), (6, -6), (12, 0)])
    )
    def test_translation_suite(self, make_texture, seed, shift):
        """128x128 translations are recovered under the optical flow schedule."""
        dx, dy = shift
        pad = 16
        base = make_texture(128 + 2 * pad, 128 + 2 * pad, seed=40 + seed)
        img1 = base[pad : pad + 128, pad : pad + 128]
        img2 = base[pad - dy : pad - dy + 128, pad - dx : pad - dx + 128]
        problem = prepare_problem(img1, img2, DaisyParams.flow_preset())

        result = pmbp_optimize(problem, flow_schedule(), particles=2, seed=seed)

        interior = result.flow[pad:-pad, pad:-pad]
        error = np.hypot(interior[:, :, 0] - dx, interior[:, :, 1] - dy)
        assert np.mean(error < 1.0) >= 0.95
        for before, after in zip(result.energies, result.energies[1:]):
            assert after <= before + 1e-6 * abs(before)

    def test_init_shape_checked(self, textured_image):
        """The initial flow must match the images."""
        problem = prepare_problem(textured_image, textured_image, DaisyParams.stereo_preset())

        with pytest.raises(MatchingError):
            pmbp_optimize(problem, flow_schedule(), init=np.zeros((4, 4, 2)))


class TestMatchBidirectional:
    """Test cases for two-direction matching."""

    def test_identical_pair(self, textured_image):
        """Identical images match to zero flow with an identity colour fit."""
        params = MatchParams(search_range=4.0)

        result = match_bidirectional(MatchKind.FLOW, textured_image, textured_image, params=params, seed=1)

        for flow in (result.forward, result.backward):
            assert np.median(np.hypot(flow[:, :, 0], flow[:, :, 1])) < 0.5
        np.testing.assert_allclose(result.transform.A, np.eye(3), atol=0.05)
        assert len(result.forward_energies) == 2

    def test_stereo_needs_F(self, textured_image):
        """Stereo matching is epipolar-constrained."""
        with pytest.raises(MatchingError):
            match_bidirectional(MatchKind.STEREO, textured_image, textured_image)

    def test_seed_reproducible(self, textured_image, rectified_F):
        """Equal seeds give equal flows."""
        other = np.roll(textured_image, -2, axis=1)
        params = MatchParams(search_range=4.0, stereo_schedule=None)

        a = match_bidirectional(MatchKind.STEREO, textured_image, other, F=rectified_F, params=params, seed=5)
        b = match_bidirectional(MatchKind.STEREO, textured_image, other, F=rectified_F, params=params, seed=5)

        np.testing.assert_array_equal(a.forward, b.forward)
        np.testing.assert_array_equal(a.backward, b.backward)
