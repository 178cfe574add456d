"""Training-corpus construction: keypoint lifting, visibility-aware
projection, cell/channel heatmap labels, and the on-disk dataset layout.

Layout under a dataset root:

    manifest.json                     final manifest (written last)
    conditions.json                   train + held-out illumination conditions
    renders/<scene>/<view>/<illum>.png
    depth/<scene>/<view>.f32
    labels/<scene>/<view>.json        projected keypoints + heatmap cells

Each (scene, view) is one *group*: its renders differ only in illumination,
so depth and keypoint labels are shared across the group.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import splat
from .detector import SupersetConfig, build_feature_superset
from .geometry import CameraView, Intrinsics, back_project, look_at_view, project_many
from .renderer import (
    DirectionalLight,
    IlluminationCondition,
    linear_to_grayscale,
    load_depth,
    load_png,
    png_to_grayscale,
    render_scene,
    save_conditions,
    save_depth,
    save_png,
)
from .scene import FeatureSet, Scene

CELL = 8
DUSTBIN = CELL * CELL  # 64


class IoFailure(RuntimeError):
    pass


class OutOfBounds(ValueError):
    pass


# ---------------------------------------------------------------------------
# keypoint lifting and projection
# ---------------------------------------------------------------------------

def _nearest_pixel(x, y):
    # round half up, matching the label encoding
    return int(np.floor(x + 0.5)), int(np.floor(y + 0.5))


def lift_keypoints_to_3d(keypoints, depth, view: CameraView, intrinsics: Intrinsics,
                         merge_radius: float = 0.01) -> FeatureSet:
    """Back-project detected pixels using the rendered depth map.

    Keypoints on background (depth 0) are dropped, never raised on. Lifted
    points closer than ``merge_radius`` are merged to their centroid.
    """
    points = []
    height, width = depth.shape
    for kp in np.asarray(keypoints, dtype=np.float64).reshape(-1, 2):
        ix, iy = _nearest_pixel(kp[0], kp[1])
        if not (0 <= ix < width and 0 <= iy < height):
            continue
        z = depth[iy, ix]
        if z <= 0:
            continue
        points.append(back_project(kp, float(z), view, intrinsics))
    return FeatureSet(merge_close_points(np.asarray(points).reshape(-1, 3), merge_radius))


def merge_close_points(points: np.ndarray, merge_radius: float) -> np.ndarray:
    """Greedy centroid clustering of (N,3) points within ``merge_radius``."""
    if len(points) == 0 or merge_radius <= 0:
        return points
    centroids = []
    members = []
    for p in points:
        assigned = False
        for i, c in enumerate(centroids):
            if np.linalg.norm(p - c) < merge_radius:
                members[i].append(p)
                centroids[i] = np.mean(members[i], axis=0)
                assigned = True
                break
        if not assigned:
            centroids.append(p.copy())
            members.append([p])
    return np.asarray(centroids)


def project_feature_set(points3d, view: CameraView, intrinsics: Intrinsics,
                        depth: np.ndarray, occlusion_tol: float = 0.01):
    """Project world feature points into a view, culling invisible ones.

    A feature survives when it lands inside the image (its rounded pixel is
    in bounds), has positive depth, and agrees with the rendered depth at
    its pixel within ``occlusion_tol`` (relative to its own depth); features
    over background or behind a surface are culled.

    Returns (pixels (M,2), depths (M,), indices into points3d).
    """
    points3d = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    if len(points3d) == 0:
        return np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=int)
    height, width = depth.shape
    pixels, z = project_many(points3d, view, intrinsics)
    keep = []
    for i in range(len(points3d)):
        if z[i] <= 0:
            continue
        x, y = pixels[i]
        if not (-0.5 <= x < width - 0.5 and -0.5 <= y < height - 0.5):
            continue
        ix, iy = _nearest_pixel(x, y)
        d = depth[iy, ix]
        if d <= 0:
            continue
        if abs(z[i] - d) >= occlusion_tol * z[i]:
            continue
        keep.append(i)
    keep = np.asarray(keep, dtype=int)
    return pixels[keep], z[keep], keep


# ---------------------------------------------------------------------------
# heatmap labels
# ---------------------------------------------------------------------------

def encode_heatmap_label(keypoints, height, width, seed=0) -> np.ndarray:
    """Encode keypoints into the (H/8, W/8) cell/channel label grid.

    Cell (y//8, x//8) holds channel (y%8)*8 + (x%8) for the rounded pixel;
    empty cells hold the dustbin value 64. When several keypoints share a
    cell one is kept uniformly at random under ``seed``.
    """
    if height % CELL or width % CELL:
        raise ValueError("image dimensions must be divisible by 8")
    label = np.full((height // CELL, width // CELL), DUSTBIN, dtype=np.int64)
    buckets = {}
    for kp in np.asarray(keypoints, dtype=np.float64).reshape(-1, 2):
        ix, iy = _nearest_pixel(kp[0], kp[1])
        if not (0 <= ix < width and 0 <= iy < height):
            raise OutOfBounds(f"keypoint {kp} rounds outside {width}x{height}")
        buckets.setdefault((iy // CELL, ix // CELL), []).append(
            (iy % CELL) * CELL + (ix % CELL))
    rng = np.random.default_rng(seed)
    for cell_key in sorted(buckets):
        values = buckets[cell_key]
        pick = values[0] if len(values) == 1 else values[int(rng.integers(len(values)))]
        label[cell_key] = pick
    return label


def decode_heatmap_label(label: np.ndarray) -> np.ndarray:
    """Invert the cell/channel encoding: (K,2) integer pixels as (x, y)."""
    cells = np.argwhere(label != DUSTBIN)
    out = []
    for cy, cx in cells:
        value = int(label[cy, cx])
        out.append((cx * CELL + value % CELL, cy * CELL + value // CELL))
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# camera view sampling and object bootstrap feature sets
# ---------------------------------------------------------------------------

def sample_camera_views(count, seed, target, radius_range, elevation_range_deg=(10.0, 60.0)):
    """Look-at poses on a sphere around ``target``: azimuth uniform,
    elevation and radius uniform in their ranges."""
    rng = np.random.default_rng(seed)
    target = np.asarray(target, dtype=np.float64)
    views = []
    for _ in range(count):
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        elevation = np.deg2rad(rng.uniform(*elevation_range_deg))
        radius = rng.uniform(*radius_range)
        eye = target + radius * np.array([
            np.cos(elevation) * np.cos(azimuth),
            np.cos(elevation) * np.sin(azimuth),
            np.sin(elevation),
        ])
        views.append(look_at_view(eye, target))
    return views


def sample_visible_camera_views(scene, intrinsics: Intrinsics, count, seed,
                                radius_range, elevation_range_deg=(10.0, 60.0),
                                occlusion_tol=0.01, min_visible=4,
                                max_attempts=60):
    """Look-at views around the scene centroid, resampled until at least
    ``min_visible`` of the scene's feature points survive projection and
    occlusion culling (grazing views can lose every feature)."""
    rng = np.random.default_rng(seed)
    target = scene.centroid()
    geometry_only = IlluminationCondition((), np.zeros(3), "geometry")
    views = []
    for _ in range(count):
        for attempt in range(max_attempts):
            azimuth = rng.uniform(0.0, 2.0 * np.pi)
            elevation = np.deg2rad(rng.uniform(*elevation_range_deg))
            radius = rng.uniform(*radius_range)
            eye = target + radius * np.array([
                np.cos(elevation) * np.cos(azimuth),
                np.cos(elevation) * np.sin(azimuth),
                np.sin(elevation),
            ])
            view = look_at_view(eye, target)
            if len(scene.feature_points) == 0:
                break
            depth = render_scene(scene, view, intrinsics, geometry_only).depth
            pixels, _, _ = project_feature_set(scene.feature_points, view,
                                               intrinsics, depth,
                                               occlusion_tol=occlusion_tol)
            if len(pixels) >= min_visible:
                break
        else:
            raise IoFailure(
                f"no view with >= {min_visible} visible features found "
                f"after {max_attempts} attempts (scene {scene.scene_id})")
        views.append(view)
    return views


def bootstrap_illumination() -> IlluminationCondition:
    """Fixed bright white condition used when detecting object features."""
    return IlluminationCondition(
        (DirectionalLight(np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0]),
                          np.array([1.4, 1.4, 1.4])),),
        ambient=0.15 * np.ones(3),
        condition_id="bootstrap",
        brightest=True,
    )


def build_object_feature_set(scene_one_object: Scene, intrinsics: Intrinsics,
                             n_views, seed, superset: SupersetConfig = SupersetConfig(),
                             radius_factor=2.6, merge_radius=0.01,
                             occlusion_tol=0.02) -> FeatureSet:
    """Detect-and-lift feature construction for a single placed object.

    Renders the object from ``n_views`` bootstrap views under one bright
    condition, builds homography-adaptation supersets, lifts each view's
    keypoints with the rendered depth, and merges duplicates across views.
    """
    bounding = scene_one_object.bounding_radius()
    views = sample_camera_views(
        n_views, seed, scene_one_object.centroid(),
        radius_range=(radius_factor * bounding, radius_factor * bounding * 1.3),
        elevation_range_deg=(-35.0, 65.0),
    )
    illum = bootstrap_illumination()
    images, depths = [], []
    for view in views:
        out = render_scene(scene_one_object, view, intrinsics, illum)
        images.append(linear_to_grayscale(out.linear_rgb))
        depths.append(out.depth)
    supersets = build_feature_superset(images, seed=seed, config=superset)
    lifted = []
    for (pixels, _), depth, view in zip(supersets, depths, views):
        fs = lift_keypoints_to_3d(pixels, depth, view, intrinsics,
                                  merge_radius=merge_radius)
        if len(fs):
            lifted.append(fs.points3d)
    if not lifted:
        return FeatureSet()
    merged = merge_close_points(np.concatenate(lifted), merge_radius)
    return FeatureSet(merged)


# ---------------------------------------------------------------------------
# dataset manifest and builder
# ---------------------------------------------------------------------------

@dataclass
class GroupEntry:
    scene_id: str
    view_id: str
    view: CameraView
    images: dict            # illum_id -> relative path (train split)
    eval_images: dict       # illum_id -> relative path (held-out split)
    depth: str
    label: str | None = None

    def to_json_dict(self):
        return {
            "scene_id": self.scene_id,
            "view_id": self.view_id,
            "rotation": self.view.rotation.tolist(),
            "translation": self.view.translation.tolist(),
            "images": self.images,
            "eval_images": self.eval_images,
            "depth": self.depth,
            "label": self.label,
        }

    @staticmethod
    def from_json_dict(d):
        return GroupEntry(
            scene_id=d["scene_id"], view_id=d["view_id"],
            view=CameraView(np.asarray(d["rotation"]), np.asarray(d["translation"])),
            images=dict(d["images"]), eval_images=dict(d["eval_images"]),
            depth=d["depth"], label=d.get("label"),
        )


# full-scale convention the desk-scale corpus mirrors
REFERENCE_VIEWS = 300
REFERENCE_ILLUM_CONDITIONS = 13


@dataclass
class DatasetManifest:
    n_scenes: int
    n_views: int
    n_illum: int
    n_illum_eval: int
    width: int
    height: int
    intrinsics: dict
    groups: list
    seeds: dict
    config_hash: str
    renderer_backend: str
    complete: bool = False
    reference_convention: dict = field(default_factory=lambda: {
        "views": REFERENCE_VIEWS, "illum_conditions": REFERENCE_ILLUM_CONDITIONS})

    def validate(self):
        if len(self.groups) != self.n_scenes * self.n_views:
            raise ValueError("group count must equal n_scenes * n_views")
        for g in self.groups:
            if len(g.images) != self.n_illum:
                raise ValueError(f"group {g.scene_id}/{g.view_id} lists "
                                 f"{len(g.images)} train images, want {self.n_illum}")
            if len(g.eval_images) != self.n_illum_eval:
                raise ValueError(f"group {g.scene_id}/{g.view_id} lists "
                                 f"{len(g.eval_images)} eval images, want {self.n_illum_eval}")

    def to_json_dict(self):
        return {
            "complete": self.complete,
            "n_scenes": self.n_scenes,
            "n_views": self.n_views,
            "n_illum": self.n_illum,
            "n_illum_eval": self.n_illum_eval,
            "width": self.width,
            "height": self.height,
            "intrinsics": self.intrinsics,
            "seeds": self.seeds,
            "config_hash": self.config_hash,
            "renderer_backend": self.renderer_backend,
            "reference_convention": self.reference_convention,
            "groups": [g.to_json_dict() for g in self.groups],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @staticmethod
    def load(path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        return DatasetManifest(
            n_scenes=d["n_scenes"], n_views=d["n_views"], n_illum=d["n_illum"],
            n_illum_eval=d["n_illum_eval"], width=d["width"], height=d["height"],
            intrinsics=d["intrinsics"],
            groups=[GroupEntry.from_json_dict(g) for g in d["groups"]],
            seeds=d.get("seeds", {}), config_hash=d.get("config_hash", ""),
            renderer_backend=d.get("renderer_backend", ""),
            complete=d.get("complete", False),
            reference_convention=d.get("reference_convention", {}),
        )

    def intrinsics_object(self) -> Intrinsics:
        return Intrinsics(**self.intrinsics)


def config_digest(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _render_group(scene, view, intrinsics, conditions, eval_conditions, root,
                  scene_id, view_id):
    """Render all illumination conditions of one (scene, view); depth must be
    identical across conditions and is stored once."""
    render_dir = root / "renders" / scene_id / view_id
    render_dir.mkdir(parents=True, exist_ok=True)
    depth_dir = root / "depth" / scene_id
    depth_dir.mkdir(parents=True, exist_ok=True)

    images, eval_images = {}, {}
    depth_ref = None
    for split, conds, sink in (("train", conditions, images),
                               ("eval", eval_conditions, eval_images)):
        for cond in conds:
            out = render_scene(scene, view, intrinsics, cond)
            if depth_ref is None:
                depth_ref = out.depth
                save_depth(depth_dir / f"{view_id}.f32", out.depth)
            elif not np.array_equal(depth_ref, out.depth):
                raise IoFailure("depth varied across illumination conditions")
            rel = f"renders/{scene_id}/{view_id}/{cond.condition_id}.png"
            save_png(root / rel, out.rgb)
            sink[cond.condition_id] = rel
    return GroupEntry(
        scene_id=scene_id, view_id=view_id, view=view,
        images=images, eval_images=eval_images,
        depth=f"depth/{scene_id}/{view_id}.f32",
    )


def render_dataset(scenes, views_per_scene, intrinsics: Intrinsics, conditions,
                   eval_conditions, out_dir, seeds=None, config_hash="",
                   jobs=1) -> DatasetManifest:
    """Render every (scene, view, illumination) triple into ``out_dir``.

    Writes an incomplete manifest (no labels yet); ``label_dataset``
    finalizes it. Jobs parallelize across (scene, view) groups; each job
    only writes its own files, so outputs are independent of scheduling.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    save_conditions(root / "conditions.json", list(conditions) + list(eval_conditions))

    tasks = []
    for si, scene in enumerate(scenes):
        for vi, view in enumerate(views_per_scene[si]):
            tasks.append((scene, view, f"s{si:03d}", f"v{vi:03d}"))

    def run(task):
        scene, view, scene_id, view_id = task
        return _render_group(scene, view, intrinsics, conditions,
                             eval_conditions, root, scene_id, view_id)

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                groups = list(pool.map(run, tasks))
        else:
            groups = [run(t) for t in tasks]
    except OSError as exc:
        manifest = DatasetManifest(
            n_scenes=len(scenes), n_views=len(views_per_scene[0]) if views_per_scene else 0,
            n_illum=len(conditions), n_illum_eval=len(eval_conditions),
            width=intrinsics.width, height=intrinsics.height,
            intrinsics=vars(intrinsics), groups=[], seeds=seeds or {},
            config_hash=config_hash, renderer_backend=splat.active_backend(),
            complete=False)
        manifest.save(root / "manifest.json")
        raise IoFailure(f"render stage failed: {exc}") from exc

    manifest = DatasetManifest(
        n_scenes=len(scenes), n_views=len(views_per_scene[0]),
        n_illum=len(conditions), n_illum_eval=len(eval_conditions),
        width=intrinsics.width, height=intrinsics.height,
        intrinsics={"fx": intrinsics.fx, "fy": intrinsics.fy,
                    "cx": intrinsics.cx, "cy": intrinsics.cy,
                    "width": intrinsics.width, "height": intrinsics.height},
        groups=groups, seeds=seeds or {}, config_hash=config_hash,
        renderer_backend=splat.active_backend(), complete=False)
    manifest.validate()
    manifest.save(root / "manifest.json")
    return manifest


def label_dataset(manifest: DatasetManifest, scenes, out_dir, label_seed=0,
                  occlusion_tol=0.01) -> DatasetManifest:
    """Project scene features into every group and write heatmap labels.

    Labels depend only on geometry, so one label per group serves all of its
    illumination conditions. Marks the manifest complete.
    """
    root = Path(out_dir)
    scene_by_id = {f"s{si:03d}": scene for si, scene in enumerate(scenes)}
    for g in manifest.groups:
        scene = scene_by_id[g.scene_id]
        depth = load_depth(root / g.depth)
        pixels, zs, _ = project_feature_set(
            scene.feature_points, g.view, manifest.intrinsics_object(), depth,
            occlusion_tol=occlusion_tol)
        seed = int(np.random.SeedSequence(
            [label_seed, int(g.scene_id[1:]), int(g.view_id[1:])]).generate_state(1)[0])
        label = encode_heatmap_label(pixels, manifest.height, manifest.width, seed=seed)
        rel = f"labels/{g.scene_id}/{g.view_id}.json"
        (root / "labels" / g.scene_id).mkdir(parents=True, exist_ok=True)
        payload = {
            "keypoints": [[float(p[0]), float(p[1]), float(z)]
                          for p, z in zip(pixels, zs)],
            "heatmap_cells": label.tolist(),
        }
        (root / rel).write_text(json.dumps(payload))
        g.label = rel
    manifest.complete = True
    manifest.save(root / "manifest.json")
    return manifest


def augment_dataset(scenes, views_per_scene, intrinsics, conditions,
                    eval_conditions, out_dir, seeds=None, config_hash="",
                    label_seed=0, occlusion_tol=0.01, jobs=1) -> DatasetManifest:
    """Full corpus build: renders, depth, labels, manifest (written last)."""
    manifest = render_dataset(scenes, views_per_scene, intrinsics, conditions,
                              eval_conditions, out_dir, seeds=seeds,
                              config_hash=config_hash, jobs=jobs)
    return label_dataset(manifest, scenes, out_dir, label_seed=label_seed,
                         occlusion_tol=occlusion_tol)


# ---------------------------------------------------------------------------
# group loading
# ---------------------------------------------------------------------------

@dataclass
class ImageGroup:
    """All renders of one (scene, view) plus the shared keypoint label."""

    scene_id: str
    view_id: str
    images: list                  # grayscale (H,W) arrays, train conditions
    image_ids: list
    eval_images: list             # grayscale (H,W) arrays, held-out conditions
    eval_image_ids: list
    projected_keypoints: np.ndarray  # (K,3): x, y, depth
    heatmap_label: np.ndarray        # (H/8, W/8) int, 64 = dustbin

    def validate(self, n_illum=None, n_illum_eval=None):
        shapes = {img.shape for img in self.images + self.eval_images}
        if len(shapes) > 1:
            raise ValueError("group images disagree on shape")
        if n_illum is not None and len(self.images) != n_illum:
            raise ValueError("wrong number of train images")
        if n_illum_eval is not None and len(self.eval_images) != n_illum_eval:
            raise ValueError("wrong number of eval images")
        if len(self.projected_keypoints):
            if self.projected_keypoints[:, 2].min() <= 0:
                raise ValueError("projected keypoint with nonpositive depth")
        height, width = self.images[0].shape
        if self.heatmap_label.shape != (height // CELL, width // CELL):
            raise ValueError("heatmap label has the wrong cell-grid shape")
        # every encoded cell must decode to a rounded projected keypoint
        decoded = {tuple(p) for p in decode_heatmap_label(self.heatmap_label)}
        rounded = {tuple(map(float, _nearest_pixel(x, y)))
                   for x, y, _ in self.projected_keypoints}
        if not decoded <= rounded:
            raise ValueError("heatmap label disagrees with projected keypoints")


def load_group(manifest: DatasetManifest, index, root) -> ImageGroup:
    g = manifest.groups[index]
    root = Path(root)
    if g.label is None:
        raise IoFailure(f"group {g.scene_id}/{g.view_id} has no label; "
                        "run the labels stage first")
    label_payload = json.loads((root / g.label).read_text())

    def load_split(paths):
        ids = sorted(paths)
        return [png_to_grayscale(load_png(root / paths[i])) for i in ids], ids

    images, image_ids = load_split(g.images)
    eval_images, eval_ids = load_split(g.eval_images)
    return ImageGroup(
        scene_id=g.scene_id, view_id=g.view_id,
        images=images, image_ids=image_ids,
        eval_images=eval_images, eval_image_ids=eval_ids,
        projected_keypoints=np.asarray(label_payload["keypoints"],
                                       dtype=np.float64).reshape(-1, 3),
        heatmap_label=np.asarray(label_payload["heatmap_cells"], dtype=np.int64),
    )
