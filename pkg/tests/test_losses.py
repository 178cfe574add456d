import numpy as np
import pytest
import torch

from lumafeat.dataset import encode_heatmap_label
from lumafeat.losses import (
    LabelOutOfRange,
    LossWeights,
    ShapeMismatch,
    TooFewMaps,
    cosine_map,
    disparity_from_descriptors,
    disparity_loss,
    fusion_error,
    mse_map,
    repeatability_loss,
    similarity_loss,
    total_loss,
)
from oracles import (
    oracle_disparity,
    oracle_fusion,
    oracle_mse,
    oracle_cosine,
    oracle_repeatability,
    oracle_similarity,
)


def t64(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


class TestRepeatabilityLoss:
    def test_confident_correct_logits(self):
        label = torch.randint(0, 65, (4, 5))
        logits = torch.zeros(3, 4, 5, 65, dtype=torch.float64)
        logits.scatter_(-1, label.expand(3, 4, 5)[..., None], 1000.0)
        assert repeatability_loss(logits, label).item() < 1e-6

    def test_uniform_logits_closed_form(self):
        logits = torch.zeros(2, 2, 2, 65, dtype=torch.float64)
        label = torch.zeros(2, 2, dtype=torch.long)
        expected = 2 * 2 * np.log(65.0)
        assert repeatability_loss(logits, label).item() == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(16.6975, abs=5e-4)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            logits = rng.normal(size=(3, 4, 6, 65))
            label = rng.integers(0, 65, size=(4, 6))
            got = repeatability_loss(t64(logits), torch.as_tensor(label)).item()
            assert got == pytest.approx(oracle_repeatability(logits, label), abs=1e-6)

    def test_label_out_of_range(self):
        logits = torch.zeros(1, 2, 2, 65)
        with pytest.raises(LabelOutOfRange):
            repeatability_loss(logits, torch.full((2, 2), 65, dtype=torch.long))

    def test_monotone_along_uniform_to_onehot_path(self):
        rng = np.random.default_rng(1)
        label = rng.integers(0, 65, size=(3, 3))
        one_hot = np.zeros((1, 3, 3, 65))
        for m in range(3):
            for n in range(3):
                one_hot[0, m, n, label[m, n]] = 10.0
        previous = None
        for alpha in np.linspace(0.0, 1.0, 10):
            logits = t64(alpha * one_hot)
            value = repeatability_loss(logits, torch.as_tensor(label)).item()
            if previous is not None:
                assert value <= previous + 1e-12
            previous = value


class TestMapLosses:
    def test_mse_trivial(self):
        d = torch.rand(4, 4, 8, dtype=torch.float64)
        assert mse_map(d, d).item() == 0.0
        zeros, ones = torch.zeros(2, 2, 3), torch.ones(2, 2, 3)
        assert mse_map(zeros, ones).item() == 1.0

    def test_mse_oracle(self):
        rng = np.random.default_rng(2)
        d1, d2 = rng.normal(size=(3, 5, 7)), rng.normal(size=(3, 5, 7))
        assert mse_map(t64(d1), t64(d2)).item() == pytest.approx(oracle_mse(d1, d2), abs=1e-9)

    def test_cosine_trivial(self):
        d = torch.rand(4, 4, 8, dtype=torch.float64) + 0.1
        assert cosine_map(d, d).item() == pytest.approx(1.0, abs=1e-9)
        e1 = torch.zeros(2, 2, 4, dtype=torch.float64)
        e2 = torch.zeros(2, 2, 4, dtype=torch.float64)
        e1[..., 0] = 1.0
        e2[..., 1] = 1.0
        assert cosine_map(e1, e2).item() == pytest.approx(0.0, abs=1e-9)

    def test_cosine_oracle(self):
        rng = np.random.default_rng(3)
        d1, d2 = rng.normal(size=(4, 3, 6)), rng.normal(size=(4, 3, 6))
        assert cosine_map(t64(d1), t64(d2)).item() == pytest.approx(
            oracle_cosine(d1, d2), abs=1e-9)

    def test_fusion_trivial_and_closed_form(self):
        d = torch.rand(3, 3, 16, dtype=torch.float64)
        assert fusion_error(d, d).item() == pytest.approx(0.0, abs=1e-12)
        e1 = torch.zeros(2, 2, 256, dtype=torch.float64)
        e2 = torch.zeros(2, 2, 256, dtype=torch.float64)
        e1[..., 0] = 1.0
        e2[..., 1] = 1.0
        # mse = 2/256, cs = 0 -> 2/256 + 1
        assert fusion_error(e1, e2).item() == pytest.approx(1.0078125, abs=1e-9)

    def test_fusion_oracle(self):
        rng = np.random.default_rng(4)
        d1, d2 = rng.normal(size=(4, 4, 8)), rng.normal(size=(4, 4, 8))
        assert fusion_error(t64(d1), t64(d2)).item() == pytest.approx(
            oracle_fusion(d1, d2), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            mse_map(torch.zeros(2, 2, 3), torch.zeros(2, 3, 3))
        with pytest.raises(ShapeMismatch):
            cosine_map(torch.zeros(2, 2, 3), torch.zeros(2, 2, 4))


class TestSimilarityLoss:
    def test_identical_maps_zero(self):
        d = torch.rand(4, 4, 8, dtype=torch.float64)
        # the 1e-12 norm guard keeps cosine fractionally below 1
        assert abs(similarity_loss([d, d.clone(), d.clone()]).item()) < 1e-9

    def test_two_identical_one_different(self):
        rng = np.random.default_rng(5)
        a = t64(rng.normal(size=(3, 3, 4)))
        b = t64(rng.normal(size=(3, 3, 4)))
        f = fusion_error(a, b).item()
        got = similarity_loss([a, a.clone(), b]).item()
        assert got == pytest.approx(2 * f / 3, abs=1e-9)

    def test_four_maps_match_six_pair_enumeration(self):
        rng = np.random.default_rng(6)
        maps = [rng.normal(size=(4, 4, 8)) for _ in range(4)]
        got = similarity_loss([t64(m) for m in maps]).item()
        assert got == pytest.approx(oracle_similarity(maps), abs=1e-9)

    def test_permutation_invariance_bit_exact(self):
        rng = np.random.default_rng(7)
        maps = [t64(rng.normal(size=(3, 3, 5))) for _ in range(4)]
        reference = similarity_loss(maps).item()
        for perm in [(1, 0, 2, 3), (3, 2, 1, 0), (2, 0, 3, 1)]:
            assert similarity_loss([maps[i] for i in perm]).item() == reference

    def test_positive_when_maps_differ(self):
        rng = np.random.default_rng(8)
        a = torch.nn.functional.normalize(t64(rng.normal(size=(3, 3, 8))), dim=-1)
        b = torch.nn.functional.normalize(t64(rng.normal(size=(3, 3, 8))), dim=-1)
        assert similarity_loss([a, b]).item() > 0.0

    def test_too_few_maps(self):
        with pytest.raises(TooFewMaps):
            similarity_loss([torch.zeros(2, 2, 3)])

    def test_pair_subsampling(self):
        rng = np.random.default_rng(9)
        maps = [t64(rng.normal(size=(2, 2, 4))) for _ in range(5)]
        sub = similarity_loss(maps, max_pairs=4, rng=np.random.default_rng(0))
        assert torch.isfinite(sub)


class TestDisparityLoss:
    def test_single_keypoint_zero(self):
        label = encode_heatmap_label([(10.0, 5.0)], 16, 16)
        maps = torch.rand(2, 16, 16, 4, dtype=torch.float64)
        assert disparity_loss(maps, label).item() == 0.0

    def test_identical_descriptors_zero(self):
        desc = torch.ones(3, 8, dtype=torch.float64)
        assert disparity_from_descriptors([desc]).item() == pytest.approx(0.0, abs=1e-12)

    def test_three_descriptors_match_enumeration(self):
        rng = np.random.default_rng(10)
        desc = rng.normal(size=(3, 8))
        got = disparity_from_descriptors([t64(desc)]).item()
        assert got == pytest.approx(oracle_disparity([desc]), abs=1e-9)

    def test_sampling_descriptors_from_maps(self):
        rng = np.random.default_rng(11)
        kps = [(2.0, 3.0), (10.0, 12.0), (13.0, 5.0)]
        label = encode_heatmap_label(kps, 16, 16)
        maps = rng.normal(size=(2, 16, 16, 6))
        got = disparity_loss(t64(maps), label).item()
        per_image = [np.stack([maps[j][int(y), int(x)] for x, y in kps])
                     for j in range(2)]
        assert got == pytest.approx(oracle_disparity(per_image), abs=1e-9)

    def test_permutation_invariance_bit_exact(self):
        rng = np.random.default_rng(12)
        descs = [t64(rng.normal(size=(4, 6))) for _ in range(3)]
        reference = disparity_from_descriptors(descs).item()
        assert disparity_from_descriptors(descs[::-1]).item() == reference
        shuffled = [d[[2, 0, 3, 1]] for d in descs]
        assert disparity_from_descriptors(shuffled).item() == reference


class TestTotalLoss:
    def test_zero_third_weight(self):
        w = LossWeights(lambda1=1.0, lambda2=1.0, lambda3=0.0)
        assert total_loss(1.25, 0.5, 3.0, w) == pytest.approx(1.75, abs=1e-15)

    def test_guard_at_collapse(self):
        w = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=1.0, disparity_guard=1e-6)
        assert total_loss(0.0, 0.0, 0.0, w) == pytest.approx(1e6, rel=1e-12)

    def test_random_affine_combination(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            lr, li, ld = rng.uniform(0.1, 5.0, size=3)
            w = LossWeights(*rng.uniform(0.1, 2.0, size=3), disparity_guard=1e-6)
            expected = w.lambda1 * lr + w.lambda2 * li + w.lambda3 / (ld + 1e-6)
            assert total_loss(lr, li, ld, w) == pytest.approx(expected, abs=1e-12)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-0.1)
        with pytest.raises(ValueError):
            LossWeights(disparity_guard=0.0)


class TestGradients:
    @staticmethod
    def finite_difference(fn, x, step=1e-4):
        grad = np.zeros_like(x)
        it = np.nditer(x, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            xp, xm = x.copy(), x.copy()
            xp[idx] += step
            xm[idx] -= step
            grad[idx] = (fn(xp) - fn(xm)) / (2 * step)
            it.iternext()
        return grad

    @staticmethod
    def check(fn, x):
        tensor = torch.tensor(x, dtype=torch.float64, requires_grad=True)
        fn(tensor).backward()
        analytic = tensor.grad.numpy()
        numeric = TestGradients.finite_difference(
            lambda arr: fn(torch.tensor(arr, dtype=torch.float64)).item(), x)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        assert np.linalg.norm(analytic - numeric) / denom < 1e-3

    def test_repeatability_gradient(self):
        rng = np.random.default_rng(14)
        label = torch.as_tensor(rng.integers(0, 8, size=(4, 4)))
        x = rng.normal(size=(2, 4, 4, 8))
        self.check(lambda t: repeatability_loss(t, label), x)

    def test_similarity_gradient(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(3, 4, 4, 8))
        self.check(lambda t: similarity_loss(list(t)), x)

    def test_disparity_gradient(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(2, 5, 8))
        self.check(lambda t: disparity_from_descriptors(list(t)), x)
