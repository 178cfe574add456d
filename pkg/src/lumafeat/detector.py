"""Classical corner detection and homography-adaptation keypoint supersets.

The bootstrap detector is a structure-tensor (gradient outer product)
minimum-eigenvalue response; it replaces a pretrained network so the
pipeline stays self-contained and deterministic. Supersets accumulate the
response over random projective warps of the image (warp, detect, unwarp,
average), which stabilizes corner evidence before thresholding and NMS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import Homography, homography_from_correspondences, warp_pixels


class DetectorFailure(RuntimeError):
    pass


def structure_tensor_response(image: np.ndarray, window_sigma: float = 1.5) -> np.ndarray:
    """Shi-Tomasi style corner response: smaller eigenvalue of the smoothed
    gradient outer-product matrix at every pixel."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DetectorFailure(f"expected a grayscale image, got shape {image.shape}")
    gx = ndimage.sobel(image, axis=1, mode="reflect") / 8.0
    gy = ndimage.sobel(image, axis=0, mode="reflect") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, window_sigma, mode="reflect")
    syy = ndimage.gaussian_filter(gy * gy, window_sigma, mode="reflect")
    sxy = ndimage.gaussian_filter(gx * gy, window_sigma, mode="reflect")
    trace = sxx + syy
    root = np.sqrt(np.maximum((sxx - syy) ** 2 + 4.0 * sxy ** 2, 0.0))
    return 0.5 * (trace - root)


def nms_points(response: np.ndarray, threshold: float, radius: int = 4,
               border: int = 4, max_points: int | None = None):
    """Local maxima of a response map above ``threshold``.

    Square (2*radius+1) suppression window; image borders are masked.
    Returns pixels (K,2) as float (x, y) and their scores, sorted by score
    descending with deterministic tie-breaking on (y, x).
    """
    footprint = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    is_max = response == ndimage.maximum_filter(response, footprint=footprint,
                                                mode="constant", cval=-np.inf)
    keep = is_max & (response > threshold)
    if border > 0:
        keep[:border] = keep[-border:] = False
        keep[:, :border] = keep[:, -border:] = False
    ys, xs = np.nonzero(keep)
    scores = response[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    xs, ys, scores = xs[order], ys[order], scores[order]
    # a plateau can yield two maxima within the suppression radius; greedily
    # drop later (lower-score) points that sit too close to a kept one
    kept = []
    for i in range(len(xs)):
        ok = True
        for j in kept:
            if abs(xs[i] - xs[j]) <= radius and abs(ys[i] - ys[j]) <= radius:
                ok = False
                break
        if ok:
            kept.append(i)
            if max_points is not None and len(kept) >= max_points:
                break
    kept = np.asarray(kept, dtype=int)
    pixels = np.stack([xs[kept], ys[kept]], axis=1).astype(np.float64)
    return pixels, scores[kept]


def detect_corners(image, threshold_quantile=0.95, nms_radius=4,
                   max_points=None, window_sigma=1.5):
    """Plain single-image corner detection (no adaptation)."""
    response = structure_tensor_response(image, window_sigma)
    threshold = np.quantile(response, threshold_quantile)
    return nms_points(response, threshold, radius=nms_radius, max_points=max_points)


def sample_adaptation_homography(rng, width, height, max_rotation_deg=25.0,
                                 scale_range=(0.8, 1.25),
                                 perspective_frac=0.1) -> Homography:
    """Random rotation + scale + perspective warp for adaptation.

    Built from perturbed image corners: rotate/scale about the center, then
    shift each corner by up to ``perspective_frac * min(W, H)``.
    """
    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0],
                        [width - 1.0, height - 1.0], [0.0, height - 1.0]])
    center = np.array([(width - 1.0) / 2.0, (height - 1.0) / 2.0])
    angle = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg))
    scale = rng.uniform(*scale_range)
    rot = scale * np.array([[np.cos(angle), -np.sin(angle)],
                            [np.sin(angle), np.cos(angle)]])
    warped = (corners - center) @ rot.T + center
    warped += rng.uniform(-1.0, 1.0, size=(4, 2)) * perspective_frac * min(width, height)
    return homography_from_correspondences(corners, warped)


def warp_image(image: np.ndarray, homography: Homography, order: int = 1):
    """Warp so that output(p) = input(H^-1 p); returns (warped, valid mask)."""
    height, width = image.shape
    ys, xs = np.mgrid[0:height, 0:width]
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = warp_pixels(pixels, homography.inverse())
    sample_coords = np.stack([src[:, 1].reshape(height, width),
                              src[:, 0].reshape(height, width)])
    warped = ndimage.map_coordinates(image, sample_coords, order=order,
                                     mode="constant", cval=0.0)
    valid = ((src[:, 0] >= 0) & (src[:, 0] <= width - 1)
             & (src[:, 1] >= 0) & (src[:, 1] <= height - 1))
    return warped, valid.reshape(height, width).astype(np.float64)


def accumulate_adapted_response(image, homographies, window_sigma=1.5):
    """Sum of unwarped detector responses and visibility counts over warps."""
    height, width = image.shape
    total = np.zeros((height, width))
    counts = np.zeros((height, width))
    for h in homographies:
        if np.allclose(h.matrix, np.eye(3)):
            total += structure_tensor_response(image, window_sigma)
            counts += 1.0
            continue
        warped, _ = warp_image(image, h)
        response = structure_tensor_response(warped, window_sigma)
        unwarped, valid = warp_image(response, h.inverse())
        total += np.maximum(unwarped, 0.0) * valid
        counts += valid
    return total, counts


@dataclass(frozen=True)
class SupersetConfig:
    n_homographies: int = 12
    threshold_quantile: float = 0.95
    nms_radius: int = 4
    max_points: int | None = 600
    window_sigma: float = 1.5
    max_rotation_deg: float = 25.0
    scale_range: tuple = (0.8, 1.25)
    perspective_frac: float = 0.1


def build_feature_superset(images, seed, config: SupersetConfig = SupersetConfig(),
                           detector=structure_tensor_response):
    """Homography-adaptation keypoint superset for each image.

    For every image: accumulate ``detector`` responses over the identity
    plus ``n_homographies - 1`` random warps, average by per-pixel
    visibility, threshold at the configured quantile and apply NMS.
    Deterministic given the seed. Returns a list of (pixels (K,2), scores).
    """
    if config.n_homographies < 1:
        raise ValueError("n_homographies must be >= 1")
    rng = np.random.default_rng(seed)
    results = []
    for image in images:
        image = np.asarray(image, dtype=np.float64)
        height, width = image.shape
        homographies = [Homography.identity()]
        homographies += [
            sample_adaptation_homography(
                rng, width, height, config.max_rotation_deg,
                config.scale_range, config.perspective_frac)
            for _ in range(config.n_homographies - 1)
        ]

        def response_fn(img):
            return detector(img, config.window_sigma)

        total = np.zeros((height, width))
        counts = np.zeros((height, width))
        for h in homographies:
            if np.allclose(h.matrix, np.eye(3)):
                total += response_fn(image)
                counts += 1.0
            else:
                warped, _ = warp_image(image, h)
                unwarped, valid = warp_image(response_fn(warped), h.inverse())
                total += np.maximum(unwarped, 0.0) * valid
                counts += valid
        averaged = np.where(counts > 0, total / np.maximum(counts, 1.0), 0.0)
        threshold = np.quantile(averaged, config.threshold_quantile)
        results.append(nms_points(averaged, threshold, radius=config.nms_radius,
                                  max_points=config.max_points))
    return results
