"""Relightable objects, feature sets, and random scene composition.

Objects are clouds of surface-sampled Gaussian points carrying BRDF
attributes (base color, roughness, metallic, normal). Real photogrammetric
reconstruction is out of scope; procedural shapes with high-contrast
textures stand in for it so that corner-like photometric features exist in
the renders. Scenes place aligned (feature set, object) pairs with random
rigid transforms.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import apply_rigid, random_rotation

SHAPE_KINDS = ("plane", "cube", "sphere", "cylinder")
TEXTURE_KINDS = ("checker", "voronoi", "gradient")

COV_EIG_MIN = 1e-12
NORMAL_TOL = 1e-6


class UnsupportedShapeKind(ValueError):
    pass


class EmptyPairList(ValueError):
    pass


class ScenePlacementError(RuntimeError):
    """Could not find non-overlapping placements for all pairs."""


@dataclass(frozen=True)
class GaussianPoint:
    """One Gaussian splat with BRDF attributes."""

    position: np.ndarray      # (3,)
    covariance: np.ndarray    # (3,3) symmetric positive-definite
    opacity: float            # [0,1]
    base_color: np.ndarray    # (3,) RGB in [0,1]
    roughness: float          # (0,1]
    metallic: float           # [0,1]
    normal: np.ndarray        # unit (3,)


class RelightableObject:
    """Gaussian point cloud stored as structure-of-arrays.

    Arrays: positions (N,3), covariances (N,3,3), opacity (N,),
    base_color (N,3), roughness (N,), metallic (N,), normals (N,3).
    """

    def __init__(self, object_id, positions, covariances, opacity, base_color,
                 roughness, metallic, normals, bounding_radius=None, seed=None,
                 validate=True):
        self.object_id = str(object_id)
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        self.covariances = np.ascontiguousarray(covariances, dtype=np.float64)
        self.opacity = np.ascontiguousarray(opacity, dtype=np.float64)
        self.base_color = np.ascontiguousarray(base_color, dtype=np.float64)
        self.roughness = np.ascontiguousarray(roughness, dtype=np.float64)
        self.metallic = np.ascontiguousarray(metallic, dtype=np.float64)
        self.normals = np.ascontiguousarray(normals, dtype=np.float64)
        self.seed = seed
        if bounding_radius is None:
            bounding_radius = float(np.linalg.norm(self.positions, axis=1).max())
        self.bounding_radius = float(bounding_radius)
        if validate:
            self.validate()

    def __len__(self):
        return self.positions.shape[0]

    def point(self, i: int) -> GaussianPoint:
        return GaussianPoint(
            position=self.positions[i],
            covariance=self.covariances[i],
            opacity=float(self.opacity[i]),
            base_color=self.base_color[i],
            roughness=float(self.roughness[i]),
            metallic=float(self.metallic[i]),
            normal=self.normals[i],
        )

    def validate(self):
        n = len(self)
        if n == 0:
            raise ValueError("object must contain at least one point")
        # small slack: serialized containers round positions to float32
        if np.linalg.norm(self.positions, axis=1).max() > self.bounding_radius * (1 + 1e-6) + 1e-9:
            raise ValueError("points exceed the declared bounding radius")
        if not np.allclose(self.covariances, np.transpose(self.covariances, (0, 2, 1)),
                           atol=1e-12):
            raise ValueError("covariances must be symmetric")
        eigvals = np.linalg.eigvalsh(self.covariances)
        if eigvals.min() <= COV_EIG_MIN:
            raise ValueError("covariances must be positive definite")
        if np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max() > NORMAL_TOL:
            raise ValueError("normals must be unit length")
        if self.opacity.min() < 0 or self.opacity.max() > 1:
            raise ValueError("opacity must be in [0,1]")
        if self.roughness.min() <= 0 or self.roughness.max() > 1:
            raise ValueError("roughness must be in (0,1]")
        if self.metallic.min() < 0 or self.metallic.max() > 1:
            raise ValueError("metallic must be in [0,1]")
        if self.base_color.min() < 0 or self.base_color.max() > 1:
            raise ValueError("base_color must be in [0,1]")


@dataclass
class FeatureSet:
    """3D coordinates of feature key points, in the object's frame."""

    points3d: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.points3d = np.asarray(self.points3d, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return self.points3d.shape[0]


@dataclass
class FeatureObjectPair:
    """Feature set and relightable object sharing one coordinate frame."""

    features: FeatureSet
    object: RelightableObject

    def __post_init__(self):
        if len(self.features) > 0:
            limit = self.object.bounding_radius * 1.1
            radii = np.linalg.norm(self.features.points3d, axis=1)
            if radii.max() > limit:
                raise ValueError("feature points exceed 1.1x the object bounding radius")

    @property
    def total_points(self) -> int:
        return len(self.object) + len(self.features)


def align_pair(features: FeatureSet, obj: RelightableObject) -> FeatureObjectPair:
    """Union of a feature set and an object already in a shared frame.

    Synthetic objects and their lifted features live in the same frame, so
    the alignment transform is the identity.
    """
    return FeatureObjectPair(features=features, object=obj)


@dataclass(frozen=True)
class Placement:
    pair_id: int
    rotation: np.ndarray
    translation: np.ndarray


class Scene:
    """Pairs placed in a world frame with rigid transforms.

    ``gaussian_pair_index`` / ``feature_pair_index`` record which placement
    each resolved point came from; total_point_count must equal the sum over
    pairs of (gaussian count + feature count).
    """

    def __init__(self, scene_id, pairs, placements):
        self.scene_id = str(scene_id)
        self.pairs = list(pairs)
        self.placements = list(placements)
        if len(self.pairs) != len(self.placements):
            raise ValueError("one placement per pair required")

        positions, covariances, opacity, colors = [], [], [], []
        roughness, metallic, normals, g_index = [], [], [], []
        feat_points, f_index = [], []
        for idx, (pair, place) in enumerate(zip(self.pairs, self.placements)):
            rot, tr = place.rotation, place.translation
            obj = pair.object
            positions.append(apply_rigid(obj.positions, rot, tr))
            covariances.append(np.einsum("ij,njk,lk->nil", rot, obj.covariances, rot))
            opacity.append(obj.opacity)
            colors.append(obj.base_color)
            roughness.append(obj.roughness)
            metallic.append(obj.metallic)
            normals.append(obj.normals @ rot.T)
            g_index.append(np.full(len(obj), idx))
            if len(pair.features) > 0:
                feat_points.append(apply_rigid(pair.features.points3d, rot, tr))
                f_index.append(np.full(len(pair.features), idx))

        self.gaussian_positions = np.concatenate(positions)
        self.gaussian_covariances = np.concatenate(covariances)
        self.gaussian_opacity = np.concatenate(opacity)
        self.gaussian_base_color = np.concatenate(colors)
        self.gaussian_roughness = np.concatenate(roughness)
        self.gaussian_metallic = np.concatenate(metallic)
        self.gaussian_normals = np.concatenate(normals)
        self.gaussian_pair_index = np.concatenate(g_index)
        if feat_points:
            self.feature_points = np.concatenate(feat_points)
            self.feature_pair_index = np.concatenate(f_index)
        else:
            self.feature_points = np.zeros((0, 3))
            self.feature_pair_index = np.zeros(0, dtype=int)

    @property
    def total_point_count(self) -> int:
        return self.gaussian_positions.shape[0] + self.feature_points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.gaussian_positions.mean(axis=0)

    def bounding_radius(self) -> float:
        c = self.centroid()
        return float(np.linalg.norm(self.gaussian_positions - c, axis=1).max())


def _surface_frame(normals):
    """Per-point tangent/bitangent frame for (N,3) unit normals."""
    n = normals
    helper = np.where(np.abs(n[:, 2:3]) < 0.9,
                      np.tile([0.0, 0.0, 1.0], (len(n), 1)),
                      np.tile([1.0, 0.0, 0.0], (len(n), 1)))
    t = np.cross(helper, n)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(n, t)
    return t, b


def _disk_covariances(normals, tangent_sigma, normal_sigma):
    """Thin-disk covariances tangent to the surface."""
    t, b = _surface_frame(normals)
    st2, sn2 = tangent_sigma ** 2, normal_sigma ** 2
    cov = (st2 * np.einsum("ni,nj->nij", t, t)
           + st2 * np.einsum("ni,nj->nij", b, b)
           + sn2 * np.einsum("ni,nj->nij", normals, normals))
    return cov


def _sample_surface(kind, size, count, rng):
    """Sample positions + outward normals + (u,v) texture coords on a shape."""
    if kind == "plane":
        half = size / 2.0
        uv = rng.uniform(-half, half, size=(count, 2))
        pos = np.column_stack([uv[:, 0], uv[:, 1], np.zeros(count)])
        nrm = np.tile([0.0, 0.0, 1.0], (count, 1))
        area = size * size
        return pos, nrm, uv, area
    if kind == "cube":
        half = size / 2.0
        face = rng.integers(0, 6, size=count)
        uv = rng.uniform(-half, half, size=(count, 2))
        axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
        pos = np.zeros((count, 3))
        nrm = np.zeros((count, 3))
        for a in range(3):
            m = axis == a
            others = [i for i in range(3) if i != a]
            pos[m, a] = sign[m] * half
            pos[m, others[0]] = uv[m, 0]
            pos[m, others[1]] = uv[m, 1]
            nrm[m, a] = sign[m]
        # offset texture coords per face so the pattern doesn't mirror
        uv_tex = uv + (face[:, None] * size)
        return pos, nrm, uv_tex, 6 * size * size
    if kind == "sphere":
        radius = size
        v = rng.normal(size=(count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pos = radius * v
        theta = np.arccos(np.clip(v[:, 2], -1, 1))
        phi = np.arctan2(v[:, 1], v[:, 0])
        uv = np.column_stack([phi * radius, theta * radius])
        return pos, v.copy(), uv, 4 * np.pi * radius ** 2
    if kind == "cylinder":
        radius, height = size / 2.0, size
        lateral = 2 * np.pi * radius * height
        caps = 2 * np.pi * radius ** 2
        on_side = rng.uniform(size=count) < lateral / (lateral + caps)
        pos = np.zeros((count, 3))
        nrm = np.zeros((count, 3))
        uv = np.zeros((count, 2))
        k = int(on_side.sum())
        phi = rng.uniform(0, 2 * np.pi, size=k)
        zz = rng.uniform(-height / 2, height / 2, size=k)
        pos[on_side] = np.column_stack([radius * np.cos(phi), radius * np.sin(phi), zz])
        nrm[on_side] = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(k)])
        uv[on_side] = np.column_stack([phi * radius, zz])
        m = ~on_side
        kc = int(m.sum())
        rr = radius * np.sqrt(rng.uniform(size=kc))
        ph = rng.uniform(0, 2 * np.pi, size=kc)
        top = rng.uniform(size=kc) < 0.5
        z_cap = np.where(top, height / 2, -height / 2)
        pos[m] = np.column_stack([rr * np.cos(ph), rr * np.sin(ph), z_cap])
        nrm[m] = np.column_stack([np.zeros(kc), np.zeros(kc), np.where(top, 1.0, -1.0)])
        uv[m] = np.column_stack([rr * np.cos(ph) + 10 * radius, rr * np.sin(ph)])
        return pos, nrm, uv, lateral + caps
    raise UnsupportedShapeKind(f"unknown shape kind {kind!r}")


def _texture_colors(texture, uv, positions, cell, rng):
    """Spatially varying base colors with sharp discontinuities."""
    n = len(uv)
    if texture == "checker":
        color_a = rng.uniform(0.55, 0.95, size=3)
        color_b = rng.uniform(0.05, 0.35, size=3)
        parity = (np.floor(uv[:, 0] / cell) + np.floor(uv[:, 1] / cell)) % 2
        return np.where(parity[:, None] == 0, color_a, color_b)
    if texture == "voronoi":
        n_cells = 24
        lo, hi = positions.min(axis=0), positions.max(axis=0)
        seeds = rng.uniform(lo, hi, size=(n_cells, 3))
        palette = rng.uniform(0.05, 0.95, size=(n_cells, 3))
        d = np.linalg.norm(positions[:, None] - seeds[None], axis=2)
        return palette[np.argmin(d, axis=1)]
    if texture == "gradient":
        # banded gradient with value-noise modulation keeps strong edges
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        coord = positions @ axis
        bands = np.floor(coord / cell) % 3
        palette = rng.uniform(0.1, 0.9, size=(3, 3))
        noise = 0.1 * np.sin(positions @ rng.normal(scale=4.0, size=3))
        colors = palette[bands.astype(int)] + noise[:, None]
        return np.clip(colors, 0.0, 1.0)
    raise UnsupportedShapeKind(f"unknown texture kind {texture!r}")


@dataclass(frozen=True)
class ObjectSpec:
    """Recipe for one procedural object."""

    shape: str
    size: float = 1.0
    point_count: int = 2000
    texture: str = "checker"
    seed: int = 0
    texture_cell: float = 0.25
    opacity_range: tuple = (0.92, 1.0)
    roughness_range: tuple = (0.35, 0.85)
    metallic: float = 0.05


def make_procedural_object(spec: ObjectSpec):
    """Build a deterministic textured object from its spec.

    Returns (RelightableObject, FeatureSet); the feature set starts empty and
    is filled by the dataset stage, which detects keypoints on bootstrap
    renders and lifts them to 3D.
    """
    if spec.shape not in SHAPE_KINDS:
        raise UnsupportedShapeKind(f"unknown shape kind {spec.shape!r}")
    if spec.texture not in TEXTURE_KINDS:
        raise UnsupportedShapeKind(f"unknown texture kind {spec.texture!r}")
    if spec.point_count < 100:
        raise ValueError("point_count must be >= 100")

    rng = np.random.default_rng(spec.seed)
    pos, nrm, uv, area = _sample_surface(spec.shape, spec.size, spec.point_count, rng)
    # tangent extent ~ mean spacing so neighbouring splats overlap
    tangent_sigma = 0.9 * np.sqrt(area / spec.point_count)
    cov = _disk_covariances(nrm, tangent_sigma, tangent_sigma / 10.0)
    colors = _texture_colors(spec.texture, uv, pos, spec.texture_cell, rng)
    opacity = rng.uniform(*spec.opacity_range, size=spec.point_count)
    roughness = rng.uniform(*spec.roughness_range, size=spec.point_count)
    metallic = np.full(spec.point_count, spec.metallic)

    obj = RelightableObject(
        object_id=f"{spec.shape}-{spec.texture}-{spec.seed}",
        positions=pos, covariances=cov, opacity=opacity, base_color=colors,
        roughness=roughness, metallic=metallic, normals=nrm, seed=spec.seed,
    )
    return obj, FeatureSet()


def sample_placements(pairs, rng, translation_box=2.0, max_attempts=1000):
    """Random rigid placement per pair, rejecting heavy bounding-sphere overlap.

    A placement is rejected while its bounding sphere center sits closer than
    half the sum of radii to an already placed pair.
    """
    placements = []
    centers, radii = [], []
    for idx, pair in enumerate(pairs):
        radius = pair.object.bounding_radius
        for attempt in range(max_attempts):
            rotation = random_rotation(rng)
            translation = rng.uniform(-translation_box, translation_box, size=3)
            ok = True
            for c, r in zip(centers, radii):
                if np.linalg.norm(translation - c) < 0.5 * (r + radius):
                    ok = False
                    break
            if ok:
                placements.append(Placement(idx, rotation, translation))
                centers.append(translation)
                radii.append(radius)
                break
        else:
            raise ScenePlacementError(
                f"could not place pair {idx} after {max_attempts} attempts")
    return placements


def compose_scene(pairs, seed, scene_id=None, translation_box=2.0) -> Scene:
    """Compose aligned pairs into a scene with seeded random placements."""
    pairs = list(pairs)
    if not pairs:
        raise EmptyPairList("compose_scene requires at least one pair")
    rng = np.random.default_rng(seed)
    placements = sample_placements(pairs, rng, translation_box=translation_box)
    return Scene(scene_id if scene_id is not None else f"scene-{seed}",
                 pairs, placements)


def place_pairs(pairs, placements, scene_id="scene") -> Scene:
    """Compose with explicit placements (deterministic entry point)."""
    if not pairs:
        raise EmptyPairList("place_pairs requires at least one pair")
    return Scene(scene_id, list(pairs), list(placements))


# ---------------------------------------------------------------------------
# serialization: binary point container + JSON sidecar; scenes as JSON
# ---------------------------------------------------------------------------

_MAGIC = b"LFGS"
_PACKED_COV = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def serialize_object(obj: RelightableObject) -> bytes:
    """Little-endian binary container: magic, uint32 count, then arrays
    positions Nx3, packed covariances Nx6 (xx,xy,xz,yy,yz,zz), opacity N,
    base_color Nx3, roughness N, metallic N, normals Nx3, all float32."""
    n = len(obj)
    packed = np.stack([obj.covariances[:, i, j] for i, j in _PACKED_COV], axis=1)
    parts = [_MAGIC, struct.pack("<I", n)]
    for arr in (obj.positions, packed, obj.opacity, obj.base_color,
                obj.roughness, obj.metallic, obj.normals):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_object(data: bytes, object_id, bounding_radius=None, seed=None):
    if data[:4] != _MAGIC:
        raise ValueError("not an object container")
    n = struct.unpack("<I", data[4:8])[0]
    offset = 8

    def take(cols):
        nonlocal offset
        count = n * cols
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        return arr.astype(np.float64).reshape(n, cols) if cols > 1 else arr.astype(np.float64)

    positions = take(3)
    packed = take(6)
    cov = np.zeros((n, 3, 3))
    for col, (i, j) in enumerate(_PACKED_COV):
        cov[:, i, j] = packed[:, col]
        cov[:, j, i] = packed[:, col]
    opacity = np.clip(take(1), 0.0, 1.0)
    base_color = np.clip(take(3), 0.0, 1.0)
    roughness = np.clip(take(1), 1e-6, 1.0)
    metallic = np.clip(take(1), 0.0, 1.0)
    normals = take(3)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return RelightableObject(
        object_id=object_id, positions=positions, covariances=cov,
        opacity=opacity, base_color=base_color, roughness=roughness,
        metallic=metallic, normals=normals,
        bounding_radius=bounding_radius, seed=seed,
    )


def save_pair(path, pair: FeatureObjectPair):
    """Write `<path>.gsb` (binary points) and `<path>.json` (sidecar with
    object metadata and the feature set)."""
    path = Path(path)
    path.with_suffix(".gsb").write_bytes(serialize_object(pair.object))
    sidecar = {
        "object_id": pair.object.object_id,
        "point_count": len(pair.object),
        "bounding_radius": pair.object.bounding_radius,
        "seed": pair.object.seed,
        "features": pair.features.points3d.tolist(),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def load_pair(path) -> FeatureObjectPair:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    obj = deserialize_object(
        path.with_suffix(".gsb").read_bytes(),
        object_id=sidecar["object_id"],
        bounding_radius=sidecar["bounding_radius"],
        seed=sidecar.get("seed"),
    )
    features = FeatureSet(np.asarray(sidecar["features"], dtype=np.float64).reshape(-1, 3))
    return align_pair(features, obj)


def save_scene(path, scene: Scene, pair_files):
    """Scene JSON: placements referencing the pair files they transform."""
    payload = {
        "scene_id": scene.scene_id,
        "placements": [
            {
                "pair_id": p.pair_id,
                "pair_file": str(pair_files[p.pair_id]),
                "rotation": p.rotation.tolist(),
                "translation": p.translation.tolist(),
            }
            for p in scene.placements
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_scene(path, root=None) -> Scene:
    payload = json.loads(Path(path).read_text())
    root = Path(root) if root is not None else Path(path).parent
    pairs, placements = [], []
    for idx, entry in enumerate(payload["placements"]):
        pair_file = Path(entry["pair_file"])
        if not pair_file.is_absolute():
            pair_file = root / pair_file
        pairs.append(load_pair(pair_file))
        placements.append(Placement(
            pair_id=idx,
            rotation=np.asarray(entry["rotation"], dtype=np.float64),
            translation=np.asarray(entry["translation"], dtype=np.float64),
        ))
    return Scene(payload["scene_id"], pairs, placements)
