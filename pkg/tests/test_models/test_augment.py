import numpy as np
import pytest
from models.augment import AugmentParams, apply, sample_params
from tests.data import random_slice
from utils.errors import InvalidParameterError, ShapeError
from utils.rng import RngStream


def _pair(gen, side=16):
    image = gen.normal(size=(side, side)).astype(np.float32)
    mask = (gen.random((side, side)) < 0.3).astype(np.uint8)
    return image, mask


class TestAugmentParams:
    """Test suite for drawing augmentation parameters"""

    def test_ranges_and_rates(self):
        """Test 10,000 draws: flip rate near 1/2, scale mean near 1, angles in range"""
        draws = [sample_params(RngStream(21).split(i)) for i in range(10000)]
        hflip_rate = np.mean([p.hflip for p in draws])
        vflip_rate = np.mean([p.vflip for p in draws])
        scales = np.array([p.scale for p in draws])
        angles = np.array([p.angle for p in draws])
        assert 0.47 <= hflip_rate <= 0.53
        assert 0.47 <= vflip_rate <= 0.53
        assert 0.98 <= scales.mean() <= 1.02
        assert scales.min() >= 0.5 and scales.max() <= 1.5
        assert angles.min() >= -180.0 and angles.max() <= 180.0

    def test_same_stream_same_params(self):
        assert sample_params(RngStream(5, [2, 7])) == sample_params(RngStream(5, [2, 7]))
        assert sample_params(RngStream(5, [2, 7])) != sample_params(RngStream(5, [2, 8]))

    @pytest.mark.parametrize("kwargs", [{"scale": 2.0}, {"scale": 0.25}, {"angle": 200.0}])
    def test_out_of_range_rejected(self, kwargs):
        with pytest.raises(InvalidParameterError):
            AugmentParams(**kwargs)


class TestApply:
    """Test suite for the paired geometric transform"""

    def test_identity_params(self, gen):
        image, mask = _pair(gen)
        out_image, out_mask = apply(image, mask, AugmentParams())
        np.testing.assert_array_equal(out_image, image)
        np.testing.assert_array_equal(out_mask, mask)
        assert out_image is not image

    def test_hflip_twice_is_identity(self, gen):
        image, mask = _pair(gen)
        flip = AugmentParams(hflip=True)
        once = apply(image, mask, flip)
        np.testing.assert_array_equal(once[0], image[:, ::-1])
        twice = apply(*once, flip)
        np.testing.assert_array_equal(twice[0], image)
        np.testing.assert_array_equal(twice[1], mask)

    def test_vflip_mirrors_rows(self, gen):
        image, mask = _pair(gen)
        out_image, out_mask = apply(image, mask, AugmentParams(vflip=True))
        np.testing.assert_array_equal(out_image, image[::-1, :])
        np.testing.assert_array_equal(out_mask, mask[::-1, :])

    def test_half_scale_quarters_the_area(self):
        """Test zooming a full mask by 0.5 keeps about a quarter of it"""
        ones = np.ones((64, 64), dtype=np.uint8)
        _, out_mask = apply(ones.astype(np.float32), ones, AugmentParams(scale=0.5))
        assert abs(out_mask.mean() - 0.25) <= 0.02

    def test_quarter_turn_matches_rot90(self, gen):
        """Test a 90 degree turn lands on the pixel grid for image and mask alike"""
        image, mask = _pair(gen)
        out_image, out_mask = apply(image, mask, AugmentParams(angle=90.0))
        matches = [k for k in (1, -1) if np.allclose(out_image, np.rot90(image, k), atol=1e-4)]
        assert len(matches) == 1
        np.testing.assert_array_equal(out_mask, np.rot90(mask, matches[0]))

    def test_mask_stays_binary(self, gen):
        image, mask = _pair(gen, 32)
        for i in range(20):
            out_image, out_mask = apply(image, mask, sample_params(RngStream(3).split(i)))
            assert out_mask.dtype == np.uint8
            assert set(np.unique(out_mask)) <= {0, 1}
            assert out_image.shape == image.shape

    def test_image_is_interpolated(self, gen):
        """Test an off-grid rotation produces values not present in a two-valued image"""
        image = np.zeros((16, 16), dtype=np.float64)
        image[:, 8:] = 1.0
        out_image, _ = apply(image, (image > 0).astype(np.uint8), AugmentParams(angle=30.0))
        assert np.any((out_image > 0.01) & (out_image < 0.99))

    def test_same_params_same_output(self, gen):
        image, mask = _pair(gen)
        params = sample_params(RngStream(8))
        first, second = apply(image, mask, params), apply(image, mask, params)
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])

    def test_shape_mismatch(self, gen):
        image, _ = _pair(gen)
        with pytest.raises(ShapeError):
            apply(image, np.zeros((8, 8), dtype=np.uint8), AugmentParams())


def _disk(side, radius):
    center = (side - 1) / 2.0
    rows, cols = np.indices((side, side))
    return (((rows - center) ** 2 + (cols - center) ** 2) <= radius ** 2).astype(np.uint8)


class TestAugmentProperties:
    """Test suite for identity, involution and area properties over 100 random slices"""

    N_SLICES = 100

    def test_identity_and_flip_involutions(self, gen):
        for i in range(self.N_SLICES):
            s = random_slice(gen, (32, 32), slice_index=i)
            identity = apply(s.image, s.target_mask, AugmentParams())
            np.testing.assert_array_equal(identity[0], s.image)
            np.testing.assert_array_equal(identity[1], s.target_mask)
            for params in (AugmentParams(hflip=True), AugmentParams(vflip=True),
                           AugmentParams(hflip=True, vflip=True)):
                twice = apply(*apply(s.image, s.target_mask, params), params)
                np.testing.assert_array_equal(twice[0], s.image)
                np.testing.assert_array_equal(twice[1], s.target_mask)
            both = apply(s.image, s.target_mask, AugmentParams(hflip=True, vflip=True))
            np.testing.assert_array_equal(both[1], np.rot90(s.target_mask, 2))
            assert both[1].sum() == s.target_mask.sum()

    def test_sampled_transforms_stay_in_range(self, gen):
        """Test masks stay binary and bilinear images stay within the input range plus zero padding"""
        for i in range(self.N_SLICES):
            s = random_slice(gen, (32, 32), slice_index=i)
            image = s.image.astype(np.float64)
            out_image, out_mask = apply(image, s.target_mask, sample_params(RngStream(17).split(i)))
            assert set(np.unique(out_mask)) <= {0, 1}
            assert out_image.min() >= min(image.min(), 0.0) - 1e-9
            assert out_image.max() <= max(image.max(), 0.0) + 1e-9

    def test_centered_disk_area_scales_quadratically(self, gen):
        """Test a centered disk keeps about scale^2 of its area under any sampled transform"""
        side = 64
        for i in range(self.N_SLICES):
            mask = _disk(side, float(gen.uniform(12.0, 20.0)))
            image = gen.uniform(-1000.0, 400.0, size=(side, side)).astype(np.float32)
            params = sample_params(RngStream(23).split(i))
            _, out_mask = apply(image, mask, params)
            ratio = out_mask.sum() / (mask.sum() * params.scale ** 2)
            assert abs(ratio - 1.0) <= 0.2, (params, ratio)
