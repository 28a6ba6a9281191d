"""Histogram, patch sampling, augmentation, resize, and codec contracts."""

import numpy as np
import pytest

from visattr.errors import DegeneracyWarning, DimensionError
from visattr.imageops import (AugmentConfig, PatchSpec, augment,
                              compute_histogram, load_image, resize_bilinear,
                              sample_shapeless_patch, save_ppm, to_grayscale,
                              WHITE_BACKGROUND_MIN)


def histogram_oracle(image, n_bins, exclude_background):
    """Scalar-loop bin counting, independent of the vectorized path."""
    counts = np.zeros((3, n_bins))
    kept = 0
    for row in image.reshape(-1, 3):
        if exclude_background and min(row) >= WHITE_BACKGROUND_MIN:
            continue
        kept += 1
        for c in range(3):
            b = int(row[c] * n_bins)
            counts[c, min(b, n_bins - 1)] += 1
    if kept == 0:
        return np.full((3, n_bins), 1.0 / n_bins), True
    return counts / kept, False


class TestHistogram:
    def test_all_black_single_bin(self):
        hist = compute_histogram(np.zeros((4, 4, 3)), n_bins=10)
        expected = np.zeros(10)
        expected[0] = 1.0
        for channel in (hist.h_r, hist.h_g, hist.h_b):
            np.testing.assert_array_equal(channel, expected)

    def test_all_white_excluded_gives_uniform_flagged(self):
        with pytest.warns(DegeneracyWarning):
            hist = compute_histogram(np.ones((3, 3, 3)), n_bins=10, exclude_background=True)
        assert hist.degenerate
        np.testing.assert_allclose(hist.values, 0.1)

    def test_two_pixel_bin_assignment(self):
        image = np.array([[[0.0, 0.0, 0.0], [0.55, 0.55, 0.55]]])
        hist = compute_histogram(image, n_bins=10, exclude_background=False)
        expected = np.array([0.5, 0, 0, 0, 0, 0.5, 0, 0, 0, 0])
        for channel in hist.values:
            np.testing.assert_array_equal(channel, expected)

    def test_top_bin_closed_at_one(self):
        image = np.full((2, 2, 3), 1.0)
        hist = compute_histogram(image, n_bins=10, exclude_background=False)
        assert hist.values[0][9] == 1.0

    def test_background_threshold_boundary(self):
        below = np.full((1, 1, 3), 249.0 / 255.0)
        at = np.full((1, 2, 3), 1.0)
        at[0, 0] = 249.0 / 255.0
        hist = compute_histogram(np.concatenate([below, below], axis=0), n_bins=4)
        assert not hist.degenerate
        hist2 = compute_histogram(at, n_bins=4)
        # the exactly-white pixel is excluded, only the near-white one counts
        assert hist2.values[0].sum() == 1.0 and hist2.values[0][3] == 1.0

    def test_matches_scalar_oracle(self, rng):
        for _ in range(50):
            image = rng.random((5, 4, 3))
            if rng.random() < 0.5:  # plant some background pixels
                image[rng.random(image.shape[:2]) < 0.3] = 1.0
            for exclude in (False, True):
                expected, degenerate = histogram_oracle(image, 8, exclude)
                if degenerate:
                    continue
                hist = compute_histogram(image, 8, exclude)
                np.testing.assert_array_equal(hist.values, expected)

    def test_mass_conservation(self, rng):
        for _ in range(20):
            hist = compute_histogram(rng.random((6, 6, 3)), n_bins=7, exclude_background=True)
            np.testing.assert_allclose(hist.values.sum(axis=1), 1.0, atol=1e-9)

    def test_spatial_permutation_invariance(self, rng):
        image = rng.random((8, 8, 3))
        flat = image.reshape(-1, 3)
        shuffled = flat[rng.permutation(flat.shape[0])].reshape(8, 8, 3)
        a = compute_histogram(image, 10)
        b = compute_histogram(shuffled, 10)
        np.testing.assert_array_equal(a.values, b.values)

    def test_rejects_few_bins(self):
        with pytest.raises(DimensionError):
            compute_histogram(np.zeros((2, 2, 3)), n_bins=1)


class TestPatches:
    def test_full_ratio_returns_whole_image(self, rng):
        image = rng.random((12, 12, 3))
        patch = sample_shapeless_patch(image, PatchSpec((1.0, 1.0)),
                                       np.random.default_rng(0))
        np.testing.assert_array_equal(patch, image)

    def test_side_formula_at_r005(self):
        image = np.zeros((64, 64, 3))
        patch = sample_shapeless_patch(image, PatchSpec((0.05, 0.05)),
                                       np.random.default_rng(1))
        assert patch.shape == (14, 14, 3)  # floor(sqrt(0.05 * 4096)) = 14

    def test_deterministic_given_seed(self, rng):
        image = rng.random((32, 32, 3))
        a = sample_shapeless_patch(image, PatchSpec(), np.random.default_rng(42))
        b = sample_shapeless_patch(image, PatchSpec(), np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    def test_area_ratio_bound(self, rng):
        image = np.zeros((48, 40, 3))
        lo, hi = 0.05, 0.15
        spec = PatchSpec((lo, hi))
        area = 48 * 40
        for _ in range(10_000):
            patch = sample_shapeless_patch(image, spec, rng)
            ratio = patch.shape[0] * patch.shape[1] / area
            assert lo * 0.8 <= ratio <= hi * 1.05

    def test_resize_to_out_side(self, rng):
        image = rng.random((32, 32, 3))
        patch = sample_shapeless_patch(image, PatchSpec(), np.random.default_rng(5),
                                       out_side=16)
        assert patch.shape == (16, 16, 3)

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            PatchSpec((0.0, 0.5))
        with pytest.raises(ValueError):
            PatchSpec((0.6, 0.5))


class TestAugment:
    def test_all_disabled_is_identity(self, rng):
        image = rng.random((16, 16, 3))
        cfg = AugmentConfig(flip=False, crop_ratio_range=None, color_distortion=False)
        out = augment(image, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(out, image)

    def test_grayscale_branch_luminance(self, rng):
        image = rng.random((8, 8, 3))
        gray = to_grayscale(image)
        assert np.array_equal(gray[:, :, 0], gray[:, :, 1])
        assert np.array_equal(gray[:, :, 1], gray[:, :, 2])
        expected = 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
        np.testing.assert_allclose(gray[:, :, 0], expected, rtol=1e-12)

    def test_output_always_in_unit_range(self, rng):
        cfg = AugmentConfig(flip=True, crop_ratio_range=(0.2, 1.0), color_distortion=True)
        for trial in range(1000):
            image = rng.random((10, 10, 3))
            out = augment(image, cfg, np.random.default_rng(trial))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic_given_seed(self, rng):
        image = rng.random((16, 16, 3))
        cfg = AugmentConfig(color_distortion=True)
        a = augment(image, cfg, np.random.default_rng(9))
        b = augment(image, cfg, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


class TestResize:
    def test_same_size_is_identity(self, rng):
        image = rng.random((9, 9, 3))
        np.testing.assert_allclose(resize_bilinear(image, 9), image, atol=1e-9)

    def test_constant_stays_constant(self):
        image = np.full((5, 7, 3), 0.42)
        out = resize_bilinear(image, 11)
        np.testing.assert_allclose(out, 0.42, atol=1e-12)

    def test_checkerboard_average(self):
        image = np.zeros((2, 2, 3))
        image[0, 1] = 1.0
        image[1, 0] = 1.0
        out = resize_bilinear(image, 1)
        np.testing.assert_allclose(out, 0.5, atol=1e-12)

    def test_values_stay_in_range(self, rng):
        out = resize_bilinear(rng.random((7, 13, 3)), 32)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestCodecs:
    def test_ppm_roundtrip(self, tmp_path, rng):
        image = np.round(rng.random((6, 5, 3)) * 255) / 255.0
        path = tmp_path / "img.ppm"
        save_ppm(path, image)
        loaded = load_image(path)
        np.testing.assert_allclose(loaded, image, atol=1e-9)

    def test_ppm_with_comment_header(self, tmp_path):
        body = bytes(range(18))
        path = tmp_path / "img.ppm"
        path.write_bytes(b"P6\n# a comment\n3 2\n255\n" + body)
        image = load_image(path)
        assert image.shape == (2, 3, 3)

    def test_png_decoding(self, tmp_path, rng):
        from PIL import Image

        pixels = (rng.random((4, 4, 3)) * 255).astype(np.uint8)
        path = tmp_path / "img.png"
        Image.fromarray(pixels, "RGB").save(path)
        loaded = load_image(path)
        np.testing.assert_allclose(loaded, pixels / 255.0, atol=1e-9)

    def test_load_with_resize(self, tmp_path, rng):
        path = tmp_path / "img.ppm"
        save_ppm(path, rng.random((10, 10, 3)))
        assert load_image(path, side=4).shape == (4, 4, 3)

    def test_unknown_extension(self, tmp_path):
        path = tmp_path / "img.gif"
        path.write_bytes(b"GIF89a")
        with pytest.raises(ValueError, match="unsupported"):
            load_image(path)
