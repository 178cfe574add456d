"""Evaluation metrics: keypoint repeatability and location error, descriptor
similarity at repeated keypoints (same position, SP), descriptor disparity
within an image (different position, DP), homography-estimation correctness,
and a runtime benchmark.

The protocol per (scene, view) group: extract on every held-out-illumination
render, take the brightest image (highest mean linear luminance) as the
reference, and measure how the other conditions reproduce its keypoints and
descriptors.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import Homography, homography_from_correspondences, warp_pixels

# published reference timings for a comparable extractor (context only,
# reported next to measured numbers, never asserted)
REFERENCE_RUNTIME_MS = {"gpu": 20.73, "cpu": 44.61}

# Detection threshold used by the evaluation protocol: slightly above the
# 65-way uniform-softmax floor (1/65 ~ 0.0154), so a head carrying no
# keypoint evidence yields no detections instead of structural, input-
# independent peaks that would score as perfectly repeatable.
EVAL_SCORE_THRESHOLD = 0.02


class EmptyReference(ValueError):
    pass


class NoRepeatedKeypoints(RuntimeError):
    pass


class TooFewKeypoints(ValueError):
    pass


class InsufficientMatches(RuntimeError):
    """Internal marker: a pair with too few matches counts as incorrect."""


# ---------------------------------------------------------------------------
# repeatability
# ---------------------------------------------------------------------------

@dataclass
class RepeatabilityReport:
    repeatability: float
    location_error: float
    epsilon: float
    n_reference: int
    n_repeated: int
    per_condition: list = field(default_factory=list)


def match_to_reference(reference, detections, epsilon):
    """Greedy nearest match of each reference keypoint to a detection
    within ``epsilon``; returns (ref_idx, det_idx, distance) triples."""
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 2)
    detections = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    if len(reference) == 0 or len(detections) == 0:
        return []
    d = cdist(reference, detections)
    out = []
    for i in range(len(reference)):
        j = int(np.argmin(d[i]))
        if d[i, j] <= epsilon:
            out.append((i, j, float(d[i, j])))
    return out


def repeatability(reference_kps, other_kps_per_condition, epsilon) -> RepeatabilityReport:
    """Fraction of reference keypoints re-detected within ``epsilon``,
    averaged over conditions; location error is the mean matched distance."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    reference = np.asarray(reference_kps, dtype=np.float64).reshape(-1, 2)
    if len(reference) == 0:
        raise EmptyReference("no reference keypoints")
    fractions, distances = [], []
    repeated_total = 0
    for detections in other_kps_per_condition:
        matches = match_to_reference(reference, detections, epsilon)
        fractions.append(len(matches) / len(reference))
        distances.extend(m[2] for m in matches)
        repeated_total += len(matches)
    return RepeatabilityReport(
        repeatability=float(np.mean(fractions)) if fractions else 0.0,
        location_error=float(np.mean(distances)) if distances else 0.0,
        epsilon=float(epsilon),
        n_reference=len(reference),
        n_repeated=repeated_total,
        per_condition=fractions,
    )


# ---------------------------------------------------------------------------
# descriptor statistics
# ---------------------------------------------------------------------------

def _vector_mse(a, b):
    return float(((a - b) ** 2).mean())


def _vector_cosine(a, b):
    na = np.linalg.norm(a) + 1e-12
    nb = np.linalg.norm(b) + 1e-12
    return float(a @ b) / (na * nb)


def sp_descriptor_similarity(descriptor_pairs):
    """MSE and cosine similarity over matched (same-position) descriptor
    pairs across illumination conditions."""
    pairs = list(descriptor_pairs)
    if not pairs:
        raise NoRepeatedKeypoints("no matched keypoint pairs")
    mses = [_vector_mse(a, b) for a, b in pairs]
    coss = [_vector_cosine(a, b) for a, b in pairs]
    return float(np.mean(mses)), float(np.mean(coss))


def dp_descriptor_disparity(extractions, max_keypoints_per_image=24):
    """MSE and cosine similarity over pairs of descriptors at different
    keypoints within one image, pooled over images. High DP cosine is the
    collapse signature."""
    mses, coss = [], []
    for extraction in extractions:
        desc = np.asarray(extraction.descriptors, dtype=np.float64)
        k = min(len(desc), max_keypoints_per_image)
        if k < 2:
            continue
        desc = desc[:k]  # extractions are score-sorted; keep the strongest
        for m in range(k):
            for n in range(m + 1, k):
                mses.append(_vector_mse(desc[m], desc[n]))
                coss.append(_vector_cosine(desc[m], desc[n]))
    if not mses:
        raise TooFewKeypoints("need >= 2 keypoints in at least one image")
    return float(np.mean(mses)), float(np.mean(coss))


# ---------------------------------------------------------------------------
# group-level protocol driver
# ---------------------------------------------------------------------------

def brightest_index(images):
    """Index of the image with maximal mean linear luminance. Images are
    gamma-encoded grayscale, so decode before averaging."""
    means = [float((np.asarray(img) ** 2.2).mean()) for img in images]
    return int(np.argmax(means))


def evaluate_extractions(reference, others, epsilon):
    """Reference extraction vs other-condition extractions.

    Returns (RepeatabilityReport, list of matched descriptor pairs).
    """
    report = repeatability(
        reference.keypoints, [o.keypoints for o in others], epsilon)
    pairs = []
    for other in others:
        for i, j, _ in match_to_reference(reference.keypoints, other.keypoints,
                                          epsilon):
            pairs.append((reference.descriptors[i], other.descriptors[j]))
    return report, pairs


def evaluate_on_groups(groups_images, extract_fn, epsilon=1.0):
    """Full detection/similarity evaluation over groups of images.

    ``groups_images``: list of per-group image lists (grayscale arrays, one
    per illumination condition of that group). The brightest image of each
    group serves as its reference. Returns a flat report dict.
    """
    fractions, distances = [], []
    sp_pairs, all_extractions = [], []
    n_reference = n_repeated = 0
    for images in groups_images:
        extractions = [extract_fn(img) for img in images]
        ref_idx = brightest_index(images)
        reference = extractions[ref_idx]
        others = [e for i, e in enumerate(extractions) if i != ref_idx]
        all_extractions.extend(extractions)
        if len(reference.keypoints) == 0:
            fractions.extend([0.0] * len(others))
            continue
        report, pairs = evaluate_extractions(reference, others, epsilon)
        fractions.extend(report.per_condition)
        if report.n_repeated:
            distances.append(report.location_error * report.n_repeated)
        n_reference += report.n_reference
        n_repeated += report.n_repeated
        sp_pairs.extend(pairs)

    rep = float(np.mean(fractions)) if fractions else 0.0
    loc = float(np.sum(distances) / n_repeated) if n_repeated else 0.0
    try:
        sp_mse, sp_cs = sp_descriptor_similarity(sp_pairs)
    except NoRepeatedKeypoints:
        sp_mse, sp_cs = float("nan"), float("nan")
    try:
        dp_mse, dp_cs = dp_descriptor_disparity(all_extractions)
    except TooFewKeypoints:
        dp_mse, dp_cs = float("nan"), float("nan")
    return {
        "repeatability": rep,
        "location_error": loc,
        "epsilon": epsilon,
        "n_reference": n_reference,
        "n_repeated": n_repeated,
        "sp_mse": sp_mse,
        "sp_cs": sp_cs,
        "dp_mse": dp_mse,
        "dp_cs": dp_cs,
    }


# ---------------------------------------------------------------------------
# homography estimation
# ---------------------------------------------------------------------------

def match_mutual_nn(desc1, desc2):
    """Mutual nearest neighbours in descriptor space; (i, j) index pairs."""
    desc1 = np.asarray(desc1, dtype=np.float64)
    desc2 = np.asarray(desc2, dtype=np.float64)
    if len(desc1) == 0 or len(desc2) == 0:
        return np.zeros((0, 2), dtype=int)
    d = cdist(desc1, desc2)
    nn12 = np.argmin(d, axis=1)
    nn21 = np.argmin(d, axis=0)
    idx1 = np.arange(len(desc1))
    mutual = nn21[nn12[idx1]] == idx1
    return np.stack([idx1[mutual], nn12[idx1[mutual]]], axis=1)


def estimate_homography_ransac(pts1, pts2, inlier_threshold=3.0, iterations=500,
                               seed=0) -> Homography:
    """Randomized-consensus homography fit with a least-squares refit on the
    best inlier set. Needs >= 4 correspondences."""
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    n = len(pts1)
    if n < 4:
        raise InsufficientMatches(f"need >= 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    best_inliers = None
    for _ in range(iterations):
        sample = rng.choice(n, size=4, replace=False)
        try:
            h = homography_from_correspondences(pts1[sample], pts2[sample])
        except Exception:
            continue
        err = np.linalg.norm(warp_pixels(pts1, h) - pts2, axis=1)
        inliers = err < inlier_threshold
        if best_inliers is None or inliers.sum() > best_inliers.sum():
            best_inliers = inliers
    if best_inliers is None or best_inliers.sum() < 4:
        raise InsufficientMatches("consensus failed to find 4 inliers")
    return homography_from_correspondences(pts1[best_inliers], pts2[best_inliers])


def corner_transfer_error(h_est: Homography, h_true: Homography, width, height):
    """Mean distance between the four image corners mapped by the estimated
    and the true homography."""
    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0],
                        [width - 1.0, height - 1.0], [0.0, height - 1.0]])
    return float(np.linalg.norm(
        warp_pixels(corners, h_est) - warp_pixels(corners, h_true), axis=1).mean())


@dataclass
class HomographyReport:
    correctness: float
    epsilon: float
    corner_errors: list
    n_pairs: int


def homography_correctness(image_pairs, extract_fn, epsilon=3.0,
                           inlier_threshold=3.0, iterations=500,
                           seed=0) -> HomographyReport:
    """Mutual-NN matching -> robust fit -> corner transfer error <= epsilon.

    ``image_pairs``: (image1, image2, true Homography mapping 1 -> 2). Pairs
    with fewer than 4 matches or a failed consensus count as incorrect.
    """
    errors, correct = [], 0
    for k, (img1, img2, h_true) in enumerate(image_pairs):
        e1, e2 = extract_fn(img1), extract_fn(img2)
        matches = match_mutual_nn(e1.descriptors, e2.descriptors)
        height, width = np.asarray(img1).shape[:2]
        try:
            if len(matches) < 4:
                raise InsufficientMatches(f"{len(matches)} matches")
            h_est = estimate_homography_ransac(
                e1.keypoints[matches[:, 0]], e2.keypoints[matches[:, 1]],
                inlier_threshold=inlier_threshold, iterations=iterations,
                seed=seed + k)
        except InsufficientMatches:
            errors.append(float("inf"))
            continue
        err = corner_transfer_error(h_est, h_true, width, height)
        errors.append(err)
        if err <= epsilon:
            correct += 1
    n = len(errors)
    return HomographyReport(
        correctness=correct / n if n else 0.0,
        epsilon=float(epsilon), corner_errors=errors, n_pairs=n)


# ---------------------------------------------------------------------------
# runtime benchmark
# ---------------------------------------------------------------------------

def runtime_benchmark(extract_fn, n_frames=100, size=(320, 240), warmup=10,
                      seed=0):
    """Mean/stddev extraction time per frame on random inputs; the published
    reference timings ride along for context."""
    rng = np.random.default_rng(seed)
    width, height = size
    frames = [rng.uniform(size=(height, width)).astype(np.float32)
              for _ in range(warmup + n_frames)]
    for frame in frames[:warmup]:
        extract_fn(frame)
    times = []
    for frame in frames[warmup:]:
        start = time.perf_counter()
        extract_fn(frame)
        times.append((time.perf_counter() - start) * 1000.0)
    times = np.asarray(times)
    return {
        "mean_ms": float(times.mean()),
        "std_ms": float(times.std()),
        "n_frames": int(n_frames),
        "size": [int(width), int(height)],
        "reference_ms": dict(REFERENCE_RUNTIME_MS),
    }


# ---------------------------------------------------------------------------
# report formatting
# ---------------------------------------------------------------------------

def format_table(headers, rows) -> str:
    """Aligned-column text table."""
    cells = [[str(h) for h in headers]]
    for row in rows:
        cells.append([f"{v:.4g}" if isinstance(v, float) else str(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def format_detection_report(rows) -> str:
    """Rows of (name, repeatability, location_error, sp_mse, sp_cs)."""
    return format_table(
        ["extractor", "repeatability", "loc_error", "SP_MSE", "SP_CS"], rows)


def format_ablation_report(rows) -> str:
    """Rows of (mode, sp_mse, dp_mse, sp_cs, dp_cs)."""
    return format_table(
        ["mode", "SP_MSE", "DP_MSE", "SP_CS", "DP_CS"], rows)


def save_report(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
