"""Self-supervised training over illumination groups.

One step forwards all (or a subsample of) illumination renders of a group,
computes the repeatability loss against the group's shared label, the
similarity loss across the descriptor maps, and the disparity loss at the
active keypoints, then takes one optimizer step on the weighted total.
Ablation modes zero the similarity or disparity weight while the raw values
stay logged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest, IoFailure, decode_heatmap_label, load_group
from .evaluation import evaluate_on_groups
from .losses import (
    LossWeights,
    disparity_from_descriptors,
    repeatability_loss,
    similarity_loss,
    total_loss,
)
from .model import (
    ExtractorConfig,
    ExtractorNetwork,
    extract,
    init_network,
    sample_full_descriptors,
    save_checkpoint,
    upsample_descriptors,
)

ABLATIONS = ("full", "no_similarity", "no_disparity")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = LossWeights()
    steps: int = 1000
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"          # "cosine" | "constant"
    seed: int = 0
    ablation: str = "full"
    illum_subsample: int = 4             # conditions per step once n_E > 6
    max_disparity_keypoints: int = 64
    similarity_resolution: str = "full"  # "full" | "coarse"
    similarity_max_pairs: int | None = None
    checkpoint_interval: int = 0         # 0 = final checkpoint only
    eval_interval: int = 0               # 0 = no metric snapshots
    eval_groups: int = 2
    model: ExtractorConfig = ExtractorConfig()

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")
        if self.similarity_resolution not in ("full", "coarse"):
            raise ValueError("similarity_resolution must be 'full' or 'coarse'")

    def effective_weights(self) -> LossWeights:
        if self.ablation == "no_similarity":
            return replace(self.weights, lambda2=0.0)
        if self.ablation == "no_disparity":
            return replace(self.weights, lambda3=0.0)
        return self.weights

    def to_json_dict(self):
        return {
            "weights": vars(self.weights),
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "lr_schedule": self.lr_schedule,
            "seed": self.seed,
            "ablation": self.ablation,
            "illum_subsample": self.illum_subsample,
            "max_disparity_keypoints": self.max_disparity_keypoints,
            "similarity_resolution": self.similarity_resolution,
            "model": self.model.to_json_dict(),
        }


@dataclass
class TrainRecord:
    """Per-step scalars plus periodic metric snapshots."""

    entries: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def append(self, entry):
        if self.entries and entry["step"] <= self.entries[-1]["step"]:
            raise ValueError("step index must increase monotonically")
        self.entries.append(entry)

    def save_jsonl(self, path):
        with open(path, "w") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry) + "\n")
            for snap in self.snapshots:
                fh.write(json.dumps({"snapshot": snap}) + "\n")

    @staticmethod
    def load_jsonl(path):
        record = TrainRecord()
        for line in Path(path).read_text().splitlines():
            obj = json.loads(line)
            if "snapshot" in obj:
                record.snapshots.append(obj["snapshot"])
            else:
                record.entries.append(obj)
        return record


def _select_conditions(n_images, config: TrainConfig, rng):
    """Indices of the conditions used this step. The brightest condition
    (index 0, sweeps sort it first) is always kept."""
    if n_images <= max(config.illum_subsample, 1) or n_images <= 6:
        return list(range(n_images))
    chosen = rng.choice(np.arange(1, n_images), size=config.illum_subsample - 1,
                        replace=False)
    return [0] + sorted(int(i) for i in chosen)


def group_tensor(group, indices=None) -> torch.Tensor:
    images = group.images if indices is None else [group.images[i] for i in indices]
    stack = np.stack([np.asarray(img, dtype=np.float32) for img in images])
    return torch.from_numpy(stack)[:, None]


def train_step(network: ExtractorNetwork, group, config: TrainConfig,
               optimizer, step_rng=None, step=0) -> dict:
    """One gradient update on one image group; returns the record entry."""
    if len(group.images) < 2:
        raise ValueError("group needs at least 2 illumination images")
    step_rng = step_rng or np.random.default_rng(config.seed + step)
    indices = _select_conditions(len(group.images), config, step_rng)
    images = group_tensor(group, indices)
    height, width = images.shape[2], images.shape[3]

    logits, coarse_raw = network.backbone(images)
    label = torch.as_tensor(group.heatmap_label, dtype=torch.long)
    loss_r = repeatability_loss(logits.permute(0, 2, 3, 1), label)

    # disparity descriptors are sampled from the full-resolution map; the
    # coarse similarity option avoids materializing that map
    pixels = decode_heatmap_label(group.heatmap_label)
    if config.max_disparity_keypoints and len(pixels) > config.max_disparity_keypoints:
        chosen = step_rng.choice(len(pixels), size=config.max_disparity_keypoints,
                                 replace=False)
        pixels = pixels[sorted(chosen)]
    if config.similarity_resolution == "full":
        desc_full = upsample_descriptors(coarse_raw, height, width)
        sim_maps = desc_full.permute(0, 2, 3, 1)
        if len(pixels) >= 2:
            xs = torch.as_tensor(pixels[:, 0], dtype=torch.long)
            ys = torch.as_tensor(pixels[:, 1], dtype=torch.long)
            keypoint_descs = desc_full.permute(0, 2, 3, 1)[:, ys, xs]
        else:
            keypoint_descs = None
    else:
        sim_maps = torch.nn.functional.normalize(
            coarse_raw, p=2, dim=1, eps=1e-12).permute(0, 2, 3, 1)
        keypoint_descs = (sample_full_descriptors(coarse_raw, pixels, height, width)
                          if len(pixels) >= 2 else None)

    loss_i = similarity_loss(list(sim_maps),
                             max_pairs=config.similarity_max_pairs, rng=step_rng)
    if keypoint_descs is None:
        loss_d = torch.zeros((), dtype=loss_i.dtype)
    else:
        loss_d = disparity_from_descriptors(list(keypoint_descs))

    # combine the scalars in float64 so the logged values satisfy the
    # total-loss identity to 1e-9; gradients flow into float32 parameters
    loss_r, loss_i, loss_d = loss_r.double(), loss_i.double(), loss_d.double()
    weights = config.effective_weights()
    loss = total_loss(loss_r, loss_i, loss_d, weights)

    if not torch.isfinite(loss):
        raise NonFiniteLoss(
            f"non-finite loss at step {step}: "
            f"Lr={loss_r.item()} Li={loss_i.item()} Ld={loss_d.item()}")

    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return {
        "step": step,
        "Lr": float(loss_r.item()),
        "Li": float(loss_i.item()),
        "Ld": float(loss_d.item()),
        "total": float(loss.item()),
        "lr": float(optimizer.param_groups[0]["lr"]),
        "n_conditions": len(indices),
    }


def _snapshot(network, eval_groups, epsilon=1.0):
    """Detection/similarity metrics on held-out illumination renders."""
    from .evaluation import EVAL_SCORE_THRESHOLD

    def extract_fn(image):
        return extract(network, image, score_threshold=EVAL_SCORE_THRESHOLD,
                       nms_radius=4, max_keypoints=300)
    images = [g.eval_images if g.eval_images else g.images for g in eval_groups]
    return evaluate_on_groups(images, extract_fn, epsilon=epsilon)


def train_loop(manifest: DatasetManifest, root, config: TrainConfig,
               out_dir, resume_from=None):
    """Train over the manifest's groups; deterministic given config.seed.

    Writes ``record.jsonl`` and ``model.pt`` (+ interval checkpoints) into
    ``out_dir``. Returns (checkpoint path, TrainRecord).
    """
    if not manifest.complete:
        raise IoFailure("manifest incomplete; run the labels stage first")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    groups = [load_group(manifest, i, root) for i in range(len(manifest.groups))]

    start_step = 0
    if resume_from is not None:
        from .model import load_checkpoint
        network, meta = load_checkpoint(resume_from)
        start_step = int(meta.get("step", 0))
    else:
        network = init_network(config.model, seed=config.seed)
    network.train()

    optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)

    def lr_at(step):
        if config.lr_schedule == "constant":
            return config.learning_rate
        return config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / config.steps))

    record = TrainRecord()
    order = []
    epoch = -1
    try:
        for step in range(start_step, config.steps):
            while len(order) <= step:
                epoch += 1
                epoch_rng = np.random.default_rng(
                    np.random.SeedSequence([config.seed, epoch]))
                perm = epoch_rng.permutation(len(groups))
                order.extend(int(i) for i in perm)
            group = groups[order[step]]
            for pg in optimizer.param_groups:
                pg["lr"] = lr_at(step)
            step_rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, 7919, step]))
            entry = train_step(network, group, config, optimizer,
                               step_rng=step_rng, step=step)
            record.append(entry)

            done = step + 1
            if config.eval_interval and (done % config.eval_interval == 0
                                         or done == config.steps):
                was_training = network.training
                network.eval()
                snap = _snapshot(network, groups[:config.eval_groups])
                network.train(was_training)
                snap["step"] = done
                record.snapshots.append(snap)
            if config.checkpoint_interval and done % config.checkpoint_interval == 0:
                save_checkpoint(out_dir / f"model_{done:06d}.pt", network,
                                metadata={"step": done, "seed": config.seed,
                                          "ablation": config.ablation})
    except NonFiniteLoss as exc:
        dump = {"error": str(exc), "entries": record.entries[-20:]}
        (out_dir / "nonfinite_dump.json").write_text(json.dumps(dump, indent=1))
        raise

    final_path = out_dir / "model.pt"
    save_checkpoint(final_path, network,
                    metadata={"step": config.steps, "seed": config.seed,
                              "ablation": config.ablation,
                              "train_config": config.to_json_dict()})
    record.save_jsonl(out_dir / "record.jsonl")
    return final_path, record
