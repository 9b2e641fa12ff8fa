from __future__ import annotations

import numpy as np
import pytest

from slidenuc.slide_io import render_synthetic
from slidenuc.stainlab import (
    DEFAULT_STAIN_MATRIX,
    AugmentationParams,
    StainMatrix,
    StainMatrixError,
    apply_augmentations,
    compute_tissue_mask,
    elastic_warp,
    gaussian_blur,
    hed_augment,
    hed_to_rgb,
    hflip,
    optical_density,
    resized_crop,
    rgb_to_hed,
    rotate90,
    vflip,
)


def od_pixel(density_vec: np.ndarray) -> np.ndarray:
    """Float RGB whose optical density equals density_vec @ M (independent
    of the module: straight exponentiation, no epsilon shift baked in)."""
    od = np.asarray(density_vec) @ DEFAULT_STAIN_MATRIX.rows
    return 255.0 * np.power(10.0, -od) - 1.0


class TestStainMatrix:
    def test_default_rows_unit_norm(self):
        norms = np.linalg.norm(DEFAULT_STAIN_MATRIX.rows, axis=1)
        assert np.allclose(norms, 1.0, atol=1e-12)

    def test_rejects_non_unit_rows(self):
        with pytest.raises(StainMatrixError):
            StainMatrix(rows=np.array([[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]]))

    def test_rejects_singular(self):
        row = np.array([1.0, 0.0, 0.0])
        with pytest.raises(StainMatrixError):
            StainMatrix.from_rows(np.stack([row, row, row]))


class TestRgbHedRoundTrip:
    def test_white_pixel_near_zero_density(self):
        img = np.full((1, 1, 3), 255, dtype=np.uint8)
        d = rgb_to_hed(img).densities[0, 0]
        assert np.all(np.abs(d) < 5e-3)

    def test_pure_hematoxylin_pixel(self):
        img = od_pixel(np.array([1.0, 0.0, 0.0]))[None, None, :]
        d = rgb_to_hed(img).densities[0, 0]
        assert d == pytest.approx([1.0, 0.0, 0.0], abs=1e-9)

    def test_black_pixel_finite(self):
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        d = rgb_to_hed(img).densities
        assert np.all(np.isfinite(d))

    def test_unit_density_maps_back_to_stain_color(self):
        rgb = hed_to_rgb(np.array([[[1.0, 0.0, 0.0]]]))
        expect = np.rint(np.clip(od_pixel(np.array([1.0, 0.0, 0.0])), 0, 255))
        assert np.array_equal(rgb[0, 0], expect.astype(np.uint8))

    def test_zero_densities_white(self):
        rgb = hed_to_rgb(np.zeros((2, 2, 3)))
        assert np.all(rgb == 254)  # 255*10^0 - eps, rounded

    def test_round_trip_error_bound(self):
        rng = np.random.default_rng(0)
        img = rng.integers(8, 248, size=(100, 100, 3), dtype=np.uint8)
        back = hed_to_rgb(rgb_to_hed(img))
        err = np.abs(back.astype(np.int64) - img.astype(np.int64))
        assert err.max() <= 2

    def test_od_linearity(self):
        rng = np.random.default_rng(1)
        d1 = rng.uniform(0, 0.5, size=(5, 5, 3))
        d2 = rng.uniform(0, 0.5, size=(5, 5, 3))
        px = lambda d: 255.0 * np.power(10.0, -(d @ DEFAULT_STAIN_MATRIX.rows)) - 1.0
        got = rgb_to_hed(px(d1)).densities + rgb_to_hed(px(d2)).densities
        want = rgb_to_hed(px(d1 + d2)).densities
        assert np.allclose(got, want, atol=1e-6)

    def test_optical_density_definition(self):
        img = np.array([[[127, 63, 255]]], dtype=np.uint8)
        od = optical_density(img)[0, 0]
        assert od == pytest.approx(-np.log10((np.array([127, 63, 255]) + 1) / 255))


class TestTissueMask:
    def test_all_white_thumb_empty_mask(self):
        thumb = np.full((32, 32, 3), 255, dtype=np.uint8)
        mask = compute_tissue_mask(thumb)
        assert not mask.grid.any()

    def test_synthetic_thumb_covers_centroids(self, small_slide):
        _, _, raster, ann = small_slide
        from PIL import Image

        scale = 4.0
        tw, th = raster.shape[1] // 4, raster.shape[0] // 4
        thumb = np.asarray(Image.fromarray(raster).resize((tw, th), Image.BILINEAR))
        mask = compute_tissue_mask(thumb, scale=scale)
        mx = np.clip((ann.cx / scale).astype(int), 0, tw - 1)
        my = np.clip((ann.cy / scale).astype(int), 0, th - 1)
        assert mask.grid[my, mx].mean() >= 0.95

    def test_zero_thresholds_all_true_on_stained_thumb(self, small_slide):
        _, _, raster, _ = small_slide
        mask = compute_tissue_mask(raster[:64, :64], thresholds=(0.0, 0.0, 0.0),
                                   open_radius=0, close_radius=0)
        assert mask.grid.all()

    def test_threshold_monotonicity(self, small_slide):
        _, _, raster, _ = small_slide
        thumb = raster[:128, :128]
        rng = np.random.default_rng(2)
        for _ in range(10):
            lo = rng.uniform(0, 0.3, size=3)
            bump = lo + rng.uniform(0, 0.2, size=3) * (rng.integers(0, 2, size=3))
            m_lo = compute_tissue_mask(thumb, lo, open_radius=0, close_radius=0).grid
            m_hi = compute_tissue_mask(thumb, bump, open_radius=0, close_radius=0).grid
            assert not np.any(m_hi & ~m_lo)

    def test_mask_area(self):
        grid = np.zeros((10, 10), dtype=bool)
        grid[:5] = True
        from slidenuc.stainlab import TissueMask

        mask = TissueMask(grid=grid, scale=8.0)
        assert mask.area_mm2(0.25) == pytest.approx(50 * (8 * 0.25) ** 2 / 1e6)


class TestHedAugment:
    def test_zero_alpha_beta_is_round_trip_identity(self):
        rng = np.random.default_rng(3)
        img = rng.integers(8, 248, size=(32, 32, 3), dtype=np.uint8)
        out = hed_augment(img, 0.0, 0.0, np.random.default_rng(0))
        base = hed_to_rgb(rgb_to_hed(img))
        assert np.array_equal(out, base)
        assert np.abs(out.astype(int) - img.astype(int)).max() <= 2

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(4)
        img = rng.integers(30, 220, size=(16, 16, 3), dtype=np.uint8)
        a = hed_augment(img, 0.04, 0.04, np.random.default_rng(42))
        b = hed_augment(img, 0.04, 0.04, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_default_strength_deviation_bound(self):
        alpha = beta = 0.04
        rng = np.random.default_rng(5)
        img = rng.integers(40, 200, size=(24, 24, 3), dtype=np.uint8)
        out = hed_augment(img, alpha, beta, np.random.default_rng(9)).astype(np.float64)
        # independent worst case: |delta OD_j| <= sum_k (alpha*|d_k| + beta)*|M_kj|
        od = -np.log10((img.astype(np.float64) + 1.0) / 255.0)
        dens = od @ np.linalg.inv(DEFAULT_STAIN_MATRIX.rows)
        delta_od = (alpha * np.abs(dens) + beta) @ np.abs(DEFAULT_STAIN_MATRIX.rows)
        base = 255.0 * np.power(10.0, -od)
        bound = base * (np.power(10.0, delta_od) - 1.0) + 1.0  # +1 for rounding
        base_rgb = hed_to_rgb(rgb_to_hed(img)).astype(np.float64)
        assert np.all(np.abs(out - base_rgb) <= bound + 1e-9)


class TestGeometricOps:
    def test_hflip_box_formula(self):
        img = np.zeros((128, 256, 3), dtype=np.uint8)
        boxes = np.array([[10.0, 20.0, 4.0, 6.0, 2.0]])
        _, out = hflip(img, boxes)
        assert out[0].tolist() == [246.0, 20.0, 4.0, 6.0, 2.0]

    def test_vflip_box_formula(self):
        img = np.zeros((128, 256, 3), dtype=np.uint8)
        _, out = vflip(img, np.array([[10.0, 20.0, 4.0, 6.0, 0.0]]))
        assert out[0].tolist() == [10.0, 108.0, 4.0, 6.0, 0.0]

    def test_flip_moves_pixels_with_boxes(self):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 255, size=(32, 48, 3), dtype=np.uint8)
        img[10, 20] = (9, 9, 9)
        out, boxes = hflip(img, np.array([[20.5, 10.5, 2.0, 2.0, 0.0]]))
        # the marked pixel's center (20.5, 10.5) maps to x = 48 - 20.5
        assert tuple(out[10, int(boxes[0, 0] - 0.5)]) == (9, 9, 9)

    def test_rotate_four_times_identity(self):
        rng = np.random.default_rng(7)
        img = rng.integers(0, 255, size=(32, 48, 3), dtype=np.uint8)
        boxes = np.array([[5.0, 7.0, 3.0, 4.0, 1.0], [40.0, 30.0, 2.0, 2.0, 0.0]])
        out_img, out_boxes = img, boxes
        for _ in range(4):
            out_img, out_boxes = rotate90(out_img, out_boxes, 1)
        assert np.array_equal(out_img, img)
        assert np.allclose(out_boxes, boxes)

    def test_rotate_k_equals_repeated(self):
        rng = np.random.default_rng(8)
        img = rng.integers(0, 255, size=(16, 24, 3), dtype=np.uint8)
        boxes = np.array([[5.0, 7.0, 3.0, 4.0, 1.0]])
        once = rotate90(*rotate90(img, boxes, 1), 1)
        direct = rotate90(img, boxes, 2)
        assert np.array_equal(once[0], direct[0])
        assert np.allclose(once[1], direct[1])

    def test_rotate_tracks_pixel(self):
        img = np.zeros((8, 12, 3), dtype=np.uint8)
        img[2, 9] = (200, 0, 0)
        out, boxes = rotate90(img, np.array([[9.5, 2.5, 1.0, 1.0, 0.0]]), 1)
        x, y = boxes[0, 0], boxes[0, 1]
        assert tuple(out[int(y - 0.5), int(x - 0.5)]) == (200, 0, 0)

    def test_resized_crop_identity(self):
        rng = np.random.default_rng(9)
        img = rng.integers(0, 255, size=(64, 64, 3), dtype=np.uint8)
        boxes = np.array([[10.0, 12.0, 4.0, 4.0, 0.0]])
        out, out_boxes = resized_crop(img, boxes, (0, 0, 64, 64), 64)
        assert np.array_equal(out, img)
        assert np.allclose(out_boxes, boxes)

    def test_resized_crop_drops_outside_boxes(self):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        boxes = np.array([[8.0, 8.0, 4.0, 4.0, 0.0], [60.0, 60.0, 4.0, 4.0, 1.0]])
        out, out_boxes = resized_crop(img, boxes, (0, 0, 32, 32), 32)
        assert out.shape == (32, 32, 3)
        assert len(out_boxes) == 1 and out_boxes[0, 4] == 0.0

    def test_resized_crop_scales_boxes(self):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        out, out_boxes = resized_crop(img, np.array([[16.0, 24.0, 8.0, 4.0, 0.0]]), (8, 8, 32, 32), 64)
        assert out_boxes[0].tolist() == [16.0, 32.0, 16.0, 8.0, 0.0]


class TestBlurAndElastic:
    def test_blur_matches_direct_convolution(self):
        rng = np.random.default_rng(10)
        img = rng.integers(0, 255, size=(12, 10, 3), dtype=np.uint8)
        sigma = 0.8
        out = gaussian_blur(img, sigma, kernel=9)
        offs = np.arange(-4, 5, dtype=np.float64)
        w = np.exp(-(offs**2) / (2 * sigma**2))
        w /= w.sum()
        k2d = np.outer(w, w)
        # scipy's "reflect" duplicates the edge sample (numpy's "symmetric")
        padded = np.pad(img.astype(np.float64), ((4, 4), (4, 4), (0, 0)), mode="symmetric")
        ref = np.empty_like(img, dtype=np.float64)
        for y in range(img.shape[0]):
            for x in range(img.shape[1]):
                patch = padded[y : y + 9, x : x + 9]
                ref[y, x] = np.tensordot(k2d, patch, axes=([0, 1], [0, 1]))
        assert np.abs(out.astype(np.int64) - np.rint(np.clip(ref, 0, 255))).max() <= 1

    def test_blur_requires_odd_kernel(self):
        with pytest.raises(ValueError):
            gaussian_blur(np.zeros((4, 4, 3), dtype=np.uint8), 0.5, kernel=8)

    def test_elastic_zero_alpha_identity(self):
        rng = np.random.default_rng(11)
        img = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
        boxes = np.array([[8.0, 8.0, 4.0, 4.0, 0.0]])
        out, out_boxes = elastic_warp(img, boxes, 0.0, 0.25, np.random.default_rng(0))
        assert np.array_equal(out, img)
        assert np.allclose(out_boxes, boxes)

    def test_elastic_deterministic(self):
        rng = np.random.default_rng(12)
        img = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
        boxes = np.array([[8.0, 8.0, 4.0, 4.0, 0.0]])
        a = elastic_warp(img, boxes, 0.5, 0.25, np.random.default_rng(5))
        b = elastic_warp(img, boxes, 0.5, 0.25, np.random.default_rng(5))
        assert np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1])


class TestApplyAugmentations:
    def test_all_probability_zero_is_identity(self):
        rng = np.random.default_rng(13)
        img = rng.integers(0, 255, size=(64, 64, 3), dtype=np.uint8)
        boxes = np.array([[10.0, 12.0, 4.0, 6.0, 1.0]])
        params = AugmentationParams(
            elastic_p=0, hflip_p=0, vflip_p=0, rotate_p=0, blur_p=0, hed_p=0, crop_p=0
        )
        out, out_boxes = apply_augmentations(img, boxes, params, np.random.default_rng(1))
        assert np.array_equal(out, img)
        assert np.allclose(out_boxes, boxes)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(14)
        img = rng.integers(20, 230, size=(64, 64, 3), dtype=np.uint8)
        boxes = np.array([[10.0, 12.0, 4.0, 6.0, 1.0], [40.0, 50.0, 8.0, 8.0, 3.0]])
        params = AugmentationParams()
        a = apply_augmentations(img, boxes, params, np.random.default_rng(77))
        b = apply_augmentations(img, boxes, params, np.random.default_rng(77))
        assert np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1])

    def test_probabilities_validated(self):
        with pytest.raises(ValueError):
            AugmentationParams(hflip_p=1.5)
