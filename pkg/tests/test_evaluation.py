import numpy as np
import pytest

from lumafeat.evaluation import (
    EmptyReference,
    InsufficientMatches,
    NoRepeatedKeypoints,
    TooFewKeypoints,
    brightest_index,
    corner_transfer_error,
    dp_descriptor_disparity,
    estimate_homography_ransac,
    format_ablation_report,
    format_detection_report,
    homography_correctness,
    match_mutual_nn,
    repeatability,
    runtime_benchmark,
    sp_descriptor_similarity,
)
from lumafeat.geometry import Homography, warp_pixels
from lumafeat.model import FeatureExtraction


def extraction(kps, descs=None, scores=None):
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    if descs is None:
        descs = np.tile(np.eye(1, 8)[0], (len(kps), 1))
    return FeatureExtraction(
        keypoints=kps,
        scores=np.asarray(scores) if scores is not None else np.ones(len(kps)),
        descriptors=np.asarray(descs, dtype=np.float64),
    )


class TestRepeatability:
    def test_identical_sets(self):
        kps = [(0.0, 0.0), (10.0, 10.0), (5.0, 3.0)]
        report = repeatability(kps, [kps, kps], epsilon=1.0)
        assert report.repeatability == 1.0
        assert report.location_error == 0.0

    def test_half_repeated(self):
        reference = [(0.0, 0.0), (10.0, 10.0)]
        detections = [(0.5, 0.0), (30.0, 30.0)]
        report = repeatability(reference, [detections], epsilon=1.0)
        assert report.repeatability == 0.5
        assert report.location_error == pytest.approx(0.5)
        assert report.n_reference == 2 and report.n_repeated == 1

    def test_monotone_in_epsilon(self):
        rng = np.random.default_rng(0)
        reference = rng.uniform(0, 50, size=(20, 2))
        detections = reference + rng.normal(scale=1.5, size=(20, 2))
        previous = 0.0
        for eps in (0.5, 1.0, 2.0, 4.0, 8.0):
            rep = repeatability(reference, [detections], epsilon=eps).repeatability
            assert rep >= previous
            previous = rep

    def test_empty_reference(self):
        with pytest.raises(EmptyReference):
            repeatability(np.zeros((0, 2)), [[(0.0, 0.0)]], epsilon=1.0)

    def test_no_detections_is_zero(self):
        report = repeatability([(0.0, 0.0)], [np.zeros((0, 2))], epsilon=1.0)
        assert report.repeatability == 0.0


class TestDescriptorStats:
    def test_sp_constant_descriptors(self):
        d = np.ones(8) / np.sqrt(8)
        mse, cs = sp_descriptor_similarity([(d, d), (d, d)])
        assert mse == 0.0
        assert cs == pytest.approx(1.0, abs=1e-9)

    def test_sp_random_unit_vectors_isotropy(self):
        # random unit descriptor pairs in high dimension have cosine ~ 0
        rng = np.random.default_rng(1)
        pairs = []
        for _ in range(1500):
            a, b = rng.normal(size=(2, 256))
            pairs.append((a / np.linalg.norm(a), b / np.linalg.norm(b)))
        _, cs = sp_descriptor_similarity(pairs)
        assert abs(cs) < 0.05

    def test_sp_requires_pairs(self):
        with pytest.raises(NoRepeatedKeypoints):
            sp_descriptor_similarity([])

    def test_dp_constant_descriptor_collapse_signature(self):
        d = np.ones((5, 8)) / np.sqrt(8)
        _, cs = dp_descriptor_disparity([extraction(np.zeros((5, 2)), d)])
        assert cs == pytest.approx(1.0, abs=1e-9)

    def test_dp_orthogonal_descriptors(self):
        descs = np.eye(8)[:4]
        _, cs = dp_descriptor_disparity([extraction(np.zeros((4, 2)), descs)])
        assert cs == pytest.approx(0.0, abs=1e-9)

    def test_dp_too_few(self):
        with pytest.raises(TooFewKeypoints):
            dp_descriptor_disparity([extraction(np.zeros((1, 2)))])

    def test_brightest_index_uses_linear_luminance(self):
        dim = np.full((8, 8), 0.2)
        bright = np.full((8, 8), 0.8)
        assert brightest_index([dim, bright, dim]) == 1


class TestMatching:
    def test_mutual_nn_basic(self):
        d1 = np.eye(4)
        d2 = np.eye(4)[[2, 0, 3, 1]]
        matches = match_mutual_nn(d1, d2)
        pairs = {tuple(m) for m in matches}
        assert pairs == {(0, 1), (1, 3), (2, 0), (3, 2)}

    def test_mutual_nn_is_symmetric_as_a_set(self):
        rng = np.random.default_rng(2)
        d1 = rng.normal(size=(20, 16))
        d2 = rng.normal(size=(25, 16))
        fwd = {tuple(m) for m in match_mutual_nn(d1, d2)}
        bwd = {(j, i) for i, j in match_mutual_nn(d2, d1)}
        assert fwd == bwd


class TestHomographyEstimation:
    @staticmethod
    def random_h(rng):
        m = np.eye(3) + rng.uniform(-0.15, 0.15, size=(3, 3))
        m[2, :2] = rng.uniform(-5e-4, 5e-4, size=2)
        return Homography(m)

    def test_exact_fit_oracle(self):
        # perfect synthetic matches: recovered H reproduces corner positions
        rng = np.random.default_rng(3)
        for trial in range(10):
            h_true = self.random_h(rng)
            pts1 = rng.uniform(10, 200, size=(40, 2))
            pts2 = warp_pixels(pts1, h_true)
            h_est = estimate_homography_ransac(pts1, pts2, seed=trial)
            assert corner_transfer_error(h_est, h_true, 256, 192) < 1e-6

    def test_outlier_rejection(self):
        rng = np.random.default_rng(4)
        h_true = self.random_h(rng)
        pts1 = rng.uniform(10, 200, size=(60, 2))
        pts2 = warp_pixels(pts1, h_true)
        pts2[::4] += rng.uniform(30, 60, size=(15, 2))  # 25% gross outliers
        h_est = estimate_homography_ransac(pts1, pts2, seed=0)
        assert corner_transfer_error(h_est, h_true, 256, 192) < 1e-6

    def test_too_few_matches(self):
        with pytest.raises(InsufficientMatches):
            estimate_homography_ransac(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_identity_pair_correct(self):
        rng = np.random.default_rng(5)
        kps = rng.uniform(5, 40, size=(12, 2))
        descs = rng.normal(size=(12, 16))
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)

        def fake_extract(img):
            return extraction(kps, descs)

        img = np.zeros((48, 48))
        report = homography_correctness(
            [(img, img, Homography.identity())], fake_extract, epsilon=3.0)
        assert report.correctness == 1.0
        assert report.corner_errors[0] < 1e-6

    def test_insufficient_matches_counts_incorrect(self):
        def empty_extract(img):
            return extraction(np.zeros((0, 2)), np.zeros((0, 8)))

        img = np.zeros((32, 32))
        report = homography_correctness(
            [(img, img, Homography.identity())], empty_extract)
        assert report.correctness == 0.0
        assert report.corner_errors[0] == float("inf")

    def test_pair_order_invariance_on_clean_pairs(self):
        rng = np.random.default_rng(6)
        h_true = self.random_h(rng)
        kps1 = rng.uniform(20, 100, size=(15, 2))
        kps2 = warp_pixels(kps1, h_true)
        descs = rng.normal(size=(15, 16))
        descs /= np.linalg.norm(descs, axis=1, keepdims=True)
        table = {0: extraction(kps1, descs), 1: extraction(kps2, descs)}

        def extract_by_id(img):
            return table[int(img[0, 0])]

        img1 = np.zeros((128, 128))
        img2 = np.ones((128, 128))
        fwd = homography_correctness([(img1, img2, h_true)], extract_by_id)
        bwd = homography_correctness([(img2, img1, h_true.inverse())], extract_by_id)
        assert fwd.correctness == bwd.correctness == 1.0


class TestBenchmarkAndReports:
    def test_runtime_benchmark_fields(self):
        def fast_extract(img):
            return extraction(np.zeros((1, 2)))

        result = runtime_benchmark(fast_extract, n_frames=20, warmup=3,
                                   size=(64, 48))
        assert result["mean_ms"] > 0.0
        assert result["n_frames"] == 20
        assert result["reference_ms"] == {"gpu": 20.73, "cpu": 44.61}

    def test_tables_align(self):
        text = format_detection_report([("ours", 0.45, 0.31, 6.1e-4, 0.98)])
        assert "repeatability" in text and "ours" in text
        text2 = format_ablation_report([("full", 0.0006, 0.0287, 0.98, 0.05)])
        assert "DP_CS" in text2
