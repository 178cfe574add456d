"""Training losses: keypoint repeatability, cross-illumination descriptor
similarity, and same-image descriptor disparity, plus their weighted total.

All losses are differentiable torch expressions and dtype-agnostic (float64
inputs give float64 losses, which the gradient checks rely on). Pairwise
reductions sum their terms in sorted value order, which makes the similarity
and disparity losses bit-exactly invariant to permutations of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .dataset import decode_heatmap_label


class LabelOutOfRange(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class TooFewMaps(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Balance coefficients; ``disparity_guard`` keeps the inverted
    disparity term finite at perfect collapse."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    disparity_guard: float = 1e-6

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.disparity_guard <= 0:
            raise ValueError("disparity_guard must be positive")


def _sorted_sum(values):
    """Order-independent sum of a list of 0-dim tensors."""
    stacked = torch.stack(values)
    return torch.sort(stacked).values.sum()


def repeatability_loss(logit_maps: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Cross-entropy detector loss against the shared cell/channel label.

    ``logit_maps`` is (n_E, Hc, Wc, C); per map the -log softmax at the
    label channel is summed over the cell grid, then averaged over the
    n_E maps.
    """
    if logit_maps.ndim != 4:
        raise ShapeMismatch(f"expected (n_E,Hc,Wc,C), got {tuple(logit_maps.shape)}")
    n_e, hc, wc, channels = logit_maps.shape
    label = torch.as_tensor(label, dtype=torch.long, device=logit_maps.device)
    if label.shape != (hc, wc):
        raise ShapeMismatch(f"label shape {tuple(label.shape)} vs grid {(hc, wc)}")
    if label.min() < 0 or label.max() > channels - 1:
        raise LabelOutOfRange(f"label values must lie in [0, {channels - 1}]")
    log_probs = torch.log_softmax(logit_maps, dim=-1)
    picked = torch.gather(log_probs, -1, label.expand(n_e, hc, wc)[..., None])
    return -picked.sum() / n_e


def mse_map(d1: torch.Tensor, d2: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of mean over channels of the squared difference."""
    if d1.shape != d2.shape:
        raise ShapeMismatch(f"{tuple(d1.shape)} vs {tuple(d2.shape)}")
    return ((d1 - d2) ** 2).mean()


def cosine_map(d1: torch.Tensor, d2: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the per-pixel cosine similarity (channels last)."""
    if d1.shape != d2.shape:
        raise ShapeMismatch(f"{tuple(d1.shape)} vs {tuple(d2.shape)}")
    dot = (d1 * d2).sum(dim=-1)
    n1 = torch.linalg.vector_norm(d1, dim=-1) + 1e-12
    n2 = torch.linalg.vector_norm(d2, dim=-1) + 1e-12
    return (dot / (n1 * n2)).mean()


def fusion_error(d1: torch.Tensor, d2: torch.Tensor) -> torch.Tensor:
    """mse + 1 - cosine; zero iff the maps are identical."""
    return mse_map(d1, d2) + 1.0 - cosine_map(d1, d2)


def _pair_indices(n, max_pairs=None, rng=None):
    pairs = [(m, k) for m in range(n) for k in range(m + 1, n)]
    if max_pairs is not None and len(pairs) > max_pairs:
        if rng is None:
            raise ValueError("pair subsampling needs an rng")
        chosen = rng.choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(chosen)]
    return pairs


def similarity_loss(descriptor_maps, max_pairs=None, rng=None) -> torch.Tensor:
    """Mean fusion error over unordered pairs of aligned descriptor maps.

    Maps must come from the same (scene, view) under different illumination
    conditions. ``max_pairs`` caps the O(n_E^2) pair set for large sweeps.
    """
    maps = list(descriptor_maps)
    if len(maps) < 2:
        raise TooFewMaps("similarity loss needs at least 2 descriptor maps")
    pairs = _pair_indices(len(maps), max_pairs, rng)
    values = [fusion_error(maps[m], maps[k]) for m, k in pairs]
    return _sorted_sum(values) / len(values)


def disparity_from_descriptors(descriptors_per_image) -> torch.Tensor:
    """Mean over images of the mean pairwise fusion error between that
    image's keypoint descriptors (as 1x1xC maps). Images with fewer than
    two descriptors contribute 0.

    The pairwise grid is computed with broadcasting (not matmul) so each
    pair's value reduces over channels in a fixed order, keeping the
    sorted-sum reduction bit-exactly permutation invariant.
    """
    per_image = []
    for desc in descriptors_per_image:
        k = desc.shape[0]
        if k < 2:
            per_image.append(torch.zeros((), dtype=desc.dtype, device=desc.device))
            continue
        diff = desc[:, None, :] - desc[None, :, :]
        mse = (diff ** 2).mean(dim=-1)
        dot = (desc[:, None, :] * desc[None, :, :]).sum(dim=-1)
        norms = torch.linalg.vector_norm(desc, dim=-1) + 1e-12
        cos = dot / (norms[:, None] * norms[None, :])
        fusion = mse + 1.0 - cos
        iu = torch.triu_indices(k, k, offset=1)
        values = fusion[iu[0], iu[1]]
        per_image.append(torch.sort(values).values.sum() / values.numel())
    if not per_image:
        return torch.zeros(())
    return _sorted_sum(per_image) / len(per_image)


def disparity_loss(descriptor_maps: torch.Tensor, label,
                   max_keypoints=None, rng=None) -> torch.Tensor:
    """Disparity of descriptors sampled where keypoints are active.

    ``descriptor_maps`` is (n_E, H, W, C); active pixels come from decoding
    the cell/channel label. Returns 0 when fewer than 2 keypoints exist.
    """
    if descriptor_maps.ndim != 4:
        raise ShapeMismatch(f"expected (n_E,H,W,C), got {tuple(descriptor_maps.shape)}")
    pixels = decode_heatmap_label(
        label.cpu().numpy() if isinstance(label, torch.Tensor) else label)
    if max_keypoints is not None and len(pixels) > max_keypoints:
        if rng is None:
            raise ValueError("keypoint subsampling needs an rng")
        chosen = rng.choice(len(pixels), size=max_keypoints, replace=False)
        pixels = pixels[sorted(chosen)]
    if len(pixels) < 2:
        return torch.zeros((), dtype=descriptor_maps.dtype,
                           device=descriptor_maps.device)
    xs = torch.as_tensor(pixels[:, 0], dtype=torch.long)
    ys = torch.as_tensor(pixels[:, 1], dtype=torch.long)
    return disparity_from_descriptors([m[ys, xs] for m in descriptor_maps])


def total_loss(repeatability, similarity, disparity,
               weights: LossWeights = LossWeights()):
    """lambda1*Lr + lambda2*Li + lambda3 / (Ld + guard).

    Minimizing the inverted third term maximizes descriptor disparity; the
    guard keeps it finite when descriptors collapse (Ld = 0).
    """
    return (weights.lambda1 * repeatability
            + weights.lambda2 * similarity
            + weights.lambda3 / (disparity + weights.disparity_guard))
