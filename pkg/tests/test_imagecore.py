"""Tests for rasters, flow files and image I/O."""

import struct

import numpy as np
import pytest

from sceneflow_mcp.imagecore import (
    FLO_TAG,
    UNKNOWN_FLOW,
    FlowFormatError,
    ImageFormatError,
    as_raster,
    bilinear_sample,
    downsample,
    flow_to_color,
    invalid_mask,
    mark_invalid,
    read_flo,
    read_image,
    read_mask,
    read_pfm,
    resize,
    resize_mask,
    to_luma,
    write_flo,
    write_mask,
    write_pfm,
    write_png,
)


class TestFlowFiles:
    """Test cases for the Middlebury .flo codec."""

    def test_single_pixel_layout(self, tmp_path):
        """A 1x1 field is five little-endian words starting with the magic tag."""
        path = tmp_path / "one.flo"
        write_flo(path, np.array([[[3.0, -2.0]]], dtype=np.float32))

        raw = path.read_bytes()
        assert len(raw) == 20
        assert struct.unpack("<f", raw[0:4])[0] == pytest.approx(202021.25)
        assert struct.unpack("<ii", raw[4:12]) == (1, 1)
        assert struct.unpack("<ff", raw[12:20]) == (3.0, -2.0)

    def test_round_trip_values(self, tmp_path):
        """Values survive a write and read."""
        flow = np.random.default_rng(1).normal(size=(5, 7, 2)).astype(np.float32)
        path = tmp_path / "f.flo"
        write_flo(path, flow)

        np.testing.assert_array_equal(read_flo(path), flow)

    def test_sentinel_reads_back_invalid(self, tmp_path):
        """The unknown-flow sentinel is preserved."""
        flow = np.zeros((2, 3, 2), dtype=np.float32)
        flow[1, 2, 0] = UNKNOWN_FLOW
        path = tmp_path / "s.flo"
        write_flo(path, flow)

        mask = invalid_mask(read_flo(path))
        assert mask[1, 2]
        assert mask.sum() == 1

    def test_bad_magic(self, tmp_path):
        """A wrong tag is rejected."""
        path = tmp_path / "bad.flo"
        path.write_bytes(struct.pack("<fii", 1.0, 1, 1) + b"\x00" * 8)

        with pytest.raises(FlowFormatError):
            read_flo(path)

    def test_truncated_payload(self, tmp_path):
        """A short payload is rejected."""
        path = tmp_path / "short.flo"
        path.write_bytes(struct.pack("<fii", FLO_TAG, 4, 4) + b"\x00" * 8)

        with pytest.raises(FlowFormatError):
            read_flo(path)

    def test_mark_invalid(self):
        """mark_invalid writes the sentinel only where asked."""
        flow = np.ones((2, 2, 2), dtype=np.float32)
        mask = np.array([[True, False], [False, False]])

        marked = mark_invalid(flow, mask)

        np.testing.assert_array_equal(invalid_mask(marked), mask)
        assert flow[0, 0, 0] == 1.0


class TestSampling:
    """Test cases for interpolation and resampling."""

    def test_integer_coordinate(self):
        """Sampling at a pixel centre returns that pixel."""
        raster = np.arange(12, dtype=np.float32).reshape(3, 4)

        assert bilinear_sample(raster, (2.0, 1.0))[0] == pytest.approx(6.0)

    def test_midpoint(self):
        """Halfway between 0 and 1 gives 0.5."""
        raster = np.array([[0.0, 1.0]], dtype=np.float32)

        assert bilinear_sample(raster, (0.5, 0.0))[0] == pytest.approx(0.5)

    def test_clamped_outside(self):
        """Coordinates outside the image clamp to the border."""
        raster = np.array([[7.0, 1.0], [2.0, 3.0]], dtype=np.float32)

        assert bilinear_sample(raster, (-5.0, -5.0))[0] == pytest.approx(7.0)

    def test_downsample_identity(self):
        """Factor 1 leaves the raster unchanged."""
        raster = np.random.default_rng(0).random((4, 6, 3)).astype(np.float32)

        np.testing.assert_array_equal(downsample(raster, 1), raster)

    def test_downsample_block_mean(self):
        """A 2x2 block {0, 1, 2, 3} averages to 1.5."""
        raster = np.array([[0.0, 1.0], [2.0, 3.0]], dtype=np.float32)

        out = downsample(raster, 2)

        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(1.5)

    def test_downsample_scales_flow(self):
        """Flow vectors shrink with the grid."""
        flow = np.full((4, 4, 2), 4.0, dtype=np.float32)

        np.testing.assert_allclose(downsample(flow, 2, is_flow=True), 2.0)

    def test_resize_constant_flow(self):
        """Resizing rescales flow per axis."""
        flow = np.zeros((20, 30, 2), dtype=np.float32)
        flow[:, :, 0] = 3.0
        flow[:, :, 1] = -2.0

        out = resize(flow, 10, 20, is_flow=True)

        assert out.shape == (10, 20, 2)
        np.testing.assert_allclose(out[:, :, 0], 2.0, atol=1e-5)
        np.testing.assert_allclose(out[:, :, 1], -1.0, atol=1e-5)

    def test_resize_mask_majority(self):
        """A fully set mask stays set."""
        assert resize_mask(np.ones((8, 8), dtype=bool), 5, 5).all()

    def test_rejects_four_channels(self):
        """Rasters carry at most three channels."""
        with pytest.raises(ValueError):
            as_raster(np.zeros((2, 2, 4)))


class TestFlowColour:
    """Test cases for flow visualisation."""

    def test_zero_flow_is_white(self):
        """The wheel centre is white."""
        colour = flow_to_color(np.zeros((2, 2, 2), dtype=np.float32), max_magnitude=1.0)

        np.testing.assert_allclose(colour, 1.0)

    def test_positive_x_is_red(self):
        """Full-magnitude flow along +x hits wheel angle 0."""
        flow = np.array([[[2.0, 0.0]]], dtype=np.float32)

        colour = flow_to_color(flow, max_magnitude=2.0)

        np.testing.assert_allclose(colour[0, 0], [1.0, 0.0, 0.0], atol=1e-6)

    def test_invalid_is_black(self):
        """Unknown flow renders black."""
        flow = np.zeros((1, 2, 2), dtype=np.float32)
        flow[0, 1] = UNKNOWN_FLOW

        colour = flow_to_color(flow)

        np.testing.assert_array_equal(colour[0, 1], 0.0)


class TestImageFiles:
    """Test cases for PNG, PFM and PGM files."""

    def test_png_16bit_round_trip(self, tmp_path, textured_image):
        """16-bit PNGs keep values within quantisation."""
        path = tmp_path / "img.png"
        write_png(path, textured_image)

        np.testing.assert_allclose(read_image(path), textured_image, atol=1.0 / 65535)

    def test_png_8bit(self, tmp_path):
        """8-bit PNGs map 255 to 1."""
        path = tmp_path / "grey.png"
        write_png(path, np.ones((3, 3), dtype=np.float32), bit_depth=8)

        np.testing.assert_allclose(read_image(path), 1.0)

    def test_unreadable_image(self, tmp_path):
        """Garbage input raises ImageFormatError."""
        path = tmp_path / "junk.png"
        path.write_bytes(b"not an image")

        with pytest.raises(ImageFormatError):
            read_image(path)

    def test_pfm_round_trip(self, tmp_path):
        """PFM keeps float values and row order."""
        depth = np.arange(12, dtype=np.float32).reshape(3, 4)
        path = tmp_path / "d.pfm"
        write_pfm(path, depth)

        np.testing.assert_array_equal(read_pfm(path)[:, :, 0], depth)

    def test_mask_round_trip(self, tmp_path):
        """Masks survive as PGM."""
        mask = np.zeros((4, 5), dtype=bool)
        mask[1:3, 2] = True
        path = tmp_path / "m.pgm"
        write_mask(path, mask)

        np.testing.assert_array_equal(read_mask(path), mask)

    def test_luma_of_grey(self):
        """Grey pixels keep their value."""
        grey = np.full((2, 2, 3), 0.4, dtype=np.float32)

        np.testing.assert_allclose(to_luma(grey), 0.4, atol=1e-6)
