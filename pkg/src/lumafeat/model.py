"""Feature extractor network: shared encoder, keypoint decoder with a
dustbin channel, and a descriptor decoder.

The encoder downsamples 8x through three stride-2 stages; the keypoint head
classifies each 8x8 cell into 64 in-cell positions + dustbin, and the
descriptor head emits a coarse map that is bilinearly upsampled to full
resolution and L2-normalized per pixel. Forward passes in eval mode are
deterministic (no normalization layers, no dropout).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

CELL = 8
DUSTBIN_CHANNELS = CELL * CELL + 1  # 65


class BadShape(ValueError):
    pass


@dataclass(frozen=True)
class ExtractorConfig:
    channels: tuple = (32, 64, 128)
    head_channels: int = 256
    descriptor_dim: int = 256

    def to_json_dict(self):
        return {"channels": list(self.channels),
                "head_channels": self.head_channels,
                "descriptor_dim": self.descriptor_dim}

    @staticmethod
    def from_json_dict(d):
        return ExtractorConfig(channels=tuple(d["channels"]),
                               head_channels=d["head_channels"],
                               descriptor_dim=d["descriptor_dim"])


@dataclass
class NetworkOutputs:
    """Channel-last single-image outputs."""

    keypoint_logits: torch.Tensor  # (H/8, W/8, 65)
    descriptor_map: torch.Tensor   # (H, W, descriptor_dim), unit rows


@dataclass
class FeatureExtraction:
    keypoints: np.ndarray    # (K,2) float pixels (x, y)
    scores: np.ndarray       # (K,) descending
    descriptors: np.ndarray  # (K, descriptor_dim) unit vectors


def _block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, stride=1, padding=1),
        nn.ReLU(inplace=True),
    )


class ExtractorNetwork(nn.Module):
    """Grayscale image in [0,1] -> keypoint logits + normalized descriptors."""

    def __init__(self, config: ExtractorConfig = ExtractorConfig()):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.channels
        self.encoder = nn.Sequential(
            _block(1, c1, stride=2),
            _block(c1, c2, stride=2),
            _block(c2, c3, stride=2),
        )
        hc = config.head_channels
        self.keypoint_head = nn.Sequential(
            nn.Conv2d(c3, hc, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(hc, DUSTBIN_CHANNELS, 1),
        )
        self.descriptor_head = nn.Sequential(
            nn.Conv2d(c3, hc, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(hc, config.descriptor_dim, 1),
        )

    def backbone(self, images: torch.Tensor):
        """(B,1,H,W) -> logits (B,65,H/8,W/8) and the raw (un-normalized)
        coarse descriptor map (B,C,H/8,W/8)."""
        if images.ndim != 4 or images.shape[1] != 1:
            raise BadShape(f"expected (B,1,H,W), got {tuple(images.shape)}")
        if images.shape[2] % CELL or images.shape[3] % CELL:
            raise BadShape("image dimensions must be divisible by 8")
        embedding = self.encoder(images)
        return self.keypoint_head(embedding), self.descriptor_head(embedding)

    def forward_batch(self, images: torch.Tensor):
        """(B,1,H,W) -> logits (B,65,H/8,W/8), full descriptors (B,C,H,W),
        coarse descriptors (B,C,H/8,W/8).

        Full-resolution descriptors are upsampled from the coarse grid then
        L2-normalized per pixel, so the unit-norm invariant holds at every
        resolution consumers see; the coarse map is normalized separately.
        """
        logits, coarse_raw = self.backbone(images)
        height, width = images.shape[2], images.shape[3]
        desc = upsample_descriptors(coarse_raw, height, width)
        coarse = F.normalize(coarse_raw, p=2, dim=1, eps=1e-12)
        return logits, desc, coarse

    @torch.no_grad()
    def infer(self, image) -> NetworkOutputs:
        """Single grayscale (H,W) array in [0,1] -> channel-last outputs."""
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 2:
            raise BadShape(f"expected (H,W) grayscale, got {image.shape}")
        was_training = self.training
        self.eval()
        try:
            tensor = torch.from_numpy(image)[None, None]
            logits, desc, _ = self.forward_batch(tensor)
        finally:
            self.train(was_training)
        return NetworkOutputs(
            keypoint_logits=logits[0].permute(1, 2, 0).contiguous(),
            descriptor_map=desc[0].permute(1, 2, 0).contiguous(),
        )


def upsample_descriptors(coarse_raw: torch.Tensor, height, width) -> torch.Tensor:
    """Bilinear upsample of the raw coarse map + per-pixel L2 normalization."""
    desc = F.interpolate(coarse_raw, size=(height, width), mode="bilinear",
                         align_corners=False)
    return F.normalize(desc, p=2, dim=1, eps=1e-12)


def sample_full_descriptors(coarse_raw: torch.Tensor, pixels, height, width) -> torch.Tensor:
    """Full-resolution descriptors at integer pixel positions without
    materializing the upsampled map.

    Interpolates the raw coarse map exactly where bilinear upsampling
    (align_corners=False) would place each requested pixel, then normalizes.
    Returns (B, K, C).
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    hc, wc = coarse_raw.shape[2], coarse_raw.shape[3]
    # full-res pixel p samples coarse coordinate (p + 0.5) * (Hc/H) - 0.5
    cx = (pixels[:, 0] + 0.5) * (wc / width) - 0.5
    cy = (pixels[:, 1] + 0.5) * (hc / height) - 0.5
    # grid_sample normalized coords for align_corners=False
    gx = (2.0 * cx + 1.0) / wc - 1.0
    gy = (2.0 * cy + 1.0) / hc - 1.0
    grid = torch.as_tensor(np.stack([gx, gy], axis=1),
                           dtype=coarse_raw.dtype)[None, None]
    grid = grid.expand(coarse_raw.shape[0], -1, -1, -1)
    sampled = F.grid_sample(coarse_raw, grid, mode="bilinear",
                            padding_mode="border", align_corners=False)
    sampled = sampled[:, :, 0, :].permute(0, 2, 1)
    return F.normalize(sampled, p=2, dim=-1, eps=1e-12)


def init_network(config: ExtractorConfig = ExtractorConfig(), seed: int = 0) -> ExtractorNetwork:
    """Reproducible instantiation: parameters are a pure function of
    (config, seed)."""
    generator_state = torch.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = ExtractorNetwork(config)
    finally:
        torch.set_rng_state(generator_state)
    return net


def scores_from_logits(logits: torch.Tensor) -> np.ndarray:
    """(Hc,Wc,65) logits -> (H,W) keypoint score map.

    Softmax over the 65 channels per cell, dustbin dropped, remaining 64
    channels unfolded to their in-cell pixel positions.
    """
    probs = torch.softmax(logits, dim=-1)[..., :-1]
    hc, wc = probs.shape[0], probs.shape[1]
    grid = probs.reshape(hc, wc, CELL, CELL)
    return grid.permute(0, 2, 1, 3).reshape(hc * CELL, wc * CELL).cpu().numpy()


def nms_score_map(scores: np.ndarray, threshold: float, radius: int):
    """Keep local maxima above threshold; square suppression window."""
    footprint = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    is_max = scores == ndimage.maximum_filter(scores, footprint=footprint,
                                              mode="constant", cval=-np.inf)
    keep = is_max & (scores >= threshold)
    ys, xs = np.nonzero(keep)
    vals = scores[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    xs, ys, vals = xs[order], ys[order], vals[order]
    kept = []
    for i in range(len(xs)):
        ok = True
        for j in kept:
            if abs(xs[i] - xs[j]) <= radius and abs(ys[i] - ys[j]) <= radius:
                ok = False
                break
        if ok:
            kept.append(i)
    kept = np.asarray(kept, dtype=int)
    return xs[kept], ys[kept], vals[kept]


def extract(network: ExtractorNetwork, image, score_threshold: float = 0.015,
            nms_radius: int = 4, max_keypoints: int = 1000) -> FeatureExtraction:
    """Inference-time extraction: thresholded, NMS'd top-k keypoints with
    descriptors sampled at their pixels."""
    if score_threshold < 0 or nms_radius < 0:
        raise ValueError("thresholds must be nonnegative")
    outputs = network.infer(image)
    scores = scores_from_logits(outputs.keypoint_logits)
    xs, ys, vals = nms_score_map(scores, score_threshold, nms_radius)
    if max_keypoints is not None and len(xs) > max_keypoints:
        xs, ys, vals = xs[:max_keypoints], ys[:max_keypoints], vals[:max_keypoints]
    desc = outputs.descriptor_map.cpu().numpy()[ys, xs]
    return FeatureExtraction(
        keypoints=np.stack([xs, ys], axis=1).astype(np.float64) if len(xs)
        else np.zeros((0, 2)),
        scores=vals.astype(np.float64),
        descriptors=desc.astype(np.float64) if len(xs)
        else np.zeros((0, network.config.descriptor_dim)),
    )


def save_checkpoint(path, network: ExtractorNetwork, metadata=None):
    """Named-tensor container (torch state dict) + JSON metadata sidecar."""
    path = Path(path)
    torch.save(network.state_dict(), path)
    meta = {"config": network.config.to_json_dict()}
    meta.update(metadata or {})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))


def load_checkpoint(path):
    """Returns (network, metadata)."""
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    network = ExtractorNetwork(ExtractorConfig.from_json_dict(meta["config"]))
    network.load_state_dict(torch.load(path, weights_only=True))
    network.eval()
    return network, meta
