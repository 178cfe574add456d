import numpy as np
import pytest

from lumafeat.detector import (
    DetectorFailure,
    SupersetConfig,
    accumulate_adapted_response,
    build_feature_superset,
    detect_corners,
    nms_points,
    sample_adaptation_homography,
    structure_tensor_response,
    warp_image,
)
from lumafeat.geometry import Homography, warp_pixel


def corner_image(cx=40, cy=30, size=96):
    """One ideal dark/bright L-corner at (cx, cy)."""
    img = np.full((size, size), 0.2)
    img[cy:, cx:] = 0.9
    return img


def checker_image(cell=12, size=96):
    ys, xs = np.mgrid[0:size, 0:size]
    return 0.15 + 0.7 * (((xs // cell) + (ys // cell)) % 2)


class TestStructureTensor:
    def test_flat_image_no_response(self):
        response = structure_tensor_response(np.ones((32, 32)) * 0.5)
        assert np.abs(response).max() < 1e-12

    def test_pure_edge_has_low_min_eigenvalue(self):
        img = np.zeros((64, 64))
        img[:, 32:] = 1.0
        response = structure_tensor_response(img)
        corner = structure_tensor_response(corner_image())
        assert corner.max() > 5 * response.max()

    def test_rejects_rgb(self):
        with pytest.raises(DetectorFailure):
            structure_tensor_response(np.zeros((8, 8, 3)))


class TestDetectCorners:
    def test_finds_ideal_corner(self):
        pixels, scores = detect_corners(corner_image(40, 30))
        assert len(pixels) >= 1
        best = pixels[0]
        assert np.hypot(best[0] - 40, best[1] - 30) <= 2.0
        assert np.all(np.diff(scores) <= 0)

    def test_nms_spacing(self):
        pixels, _ = detect_corners(checker_image(), nms_radius=4)
        assert len(pixels) > 4
        d = np.abs(pixels[:, None] - pixels[None])
        cheb = d.max(axis=-1) + np.eye(len(pixels)) * 1e9
        assert cheb.min() > 4

    def test_max_points_cap(self):
        pixels, _ = detect_corners(checker_image(), max_points=5)
        assert len(pixels) <= 5


class TestNmsPoints:
    def test_close_detections_suppressed(self):
        response = np.zeros((32, 32))
        response[10, 10] = 1.0
        response[10, 11] = 0.9  # 1 px away, must lose
        pixels, scores = nms_points(response, threshold=0.1, radius=4, border=0)
        assert len(pixels) == 1
        assert tuple(pixels[0]) == (10.0, 10.0)


class TestWarp:
    def test_identity_warp(self):
        img = checker_image()
        warped, valid = warp_image(img, Homography.identity())
        assert np.allclose(warped, img, atol=1e-12)
        assert valid.min() == 1.0

    def test_translation_moves_content(self):
        img = np.zeros((32, 32))
        img[10, 10] = 1.0
        warped, _ = warp_image(img, Homography.translation(5.0, 3.0))
        assert warped[13, 15] == pytest.approx(1.0)

    def test_adaptation_homography_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            h = sample_adaptation_homography(rng, 96, 96)
            center = warp_pixel((47.5, 47.5), h)
            # center cannot fly far: rotation/scale about center + <=0.1*min(H,W)
            assert np.hypot(center[0] - 47.5, center[1] - 47.5) < 96 * 0.25


class TestSuperset:
    def test_single_identity_equals_plain_detection(self):
        img = checker_image()
        config = SupersetConfig(n_homographies=1, max_points=50)
        (pixels, scores), = build_feature_superset([img], seed=0, config=config)
        exp_pixels, exp_scores = detect_corners(
            img, threshold_quantile=config.threshold_quantile,
            nms_radius=config.nms_radius, max_points=config.max_points)
        assert np.array_equal(pixels, exp_pixels)
        assert np.allclose(scores, exp_scores)

    def test_ideal_corner_recovered(self):
        img = corner_image(40, 30)
        config = SupersetConfig(n_homographies=8, max_points=20)
        (pixels, _), = build_feature_superset([img], seed=3, config=config)
        dist = np.hypot(pixels[:, 0] - 40, pixels[:, 1] - 30)
        assert dist.min() <= 2.0

    def test_deterministic_given_seed(self):
        img = checker_image()
        config = SupersetConfig(n_homographies=5)
        a = build_feature_superset([img], seed=7, config=config)
        b = build_feature_superset([img], seed=7, config=config)
        assert np.array_equal(a[0][0], b[0][0])
        c = build_feature_superset([img], seed=8, config=config)
        assert not np.array_equal(a[0][0], c[0][0])

    def test_accumulated_response_monotone_in_warps(self):
        # response-accumulation oracle: on a fixed warp list, adding warps
        # never decreases the accumulated (pre-average) response at a corner
        img = corner_image(40, 30)
        rng = np.random.default_rng(5)
        warps = [Homography.identity()] + [
            sample_adaptation_homography(rng, *img.shape[::-1]) for _ in range(6)
        ]
        prev = None
        for k in range(1, len(warps) + 1):
            total, _ = accumulate_adapted_response(img, warps[:k])
            value = total[28:33, 38:43].max()
            if prev is not None:
                assert value >= prev - 1e-12
            prev = value

    def test_multiple_images(self):
        imgs = [checker_image(), corner_image()]
        results = build_feature_superset(imgs, seed=0,
                                         config=SupersetConfig(n_homographies=3))
        assert len(results) == 2
        assert all(len(px) > 0 for px, _ in results)
