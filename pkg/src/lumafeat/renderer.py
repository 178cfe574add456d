"""Forward physically based rendering of Gaussian-point scenes.

Shading is local Cook-Torrance (GGX microfacets, Schlick Fresnel) under a
small set of directional lights plus an ambient term; no cast shadows or
global illumination. Splats are projected with the first-order camera
Jacobian, sorted front to back, and alpha-composited by the kernel in
``lumafeat.splat``. Depth is the alpha-weighted expected splat depth and
depends only on geometry, so it is bit-identical across illumination
conditions of the same (scene, view).
"""

from __future__ import annotations

import colorsys
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import splat
from .geometry import CameraView, Intrinsics
from .scene import GaussianPoint, Scene

GAMMA = 2.2
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])  # Rec.709
MIN_SPLAT_VAR = 0.25  # px^2, i.e. minimum splat radius 0.5 px
Z_NEAR = 1e-6


class BadRange(ValueError):
    """Invalid illumination sweep parameters."""


@dataclass(frozen=True)
class DirectionalLight:
    """Light at infinity. ``direction`` is the unit vector from the surface
    toward the light; ``radiance`` is linear RGB, components >= 0."""

    direction: np.ndarray
    radiance: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("light direction must be unit length")
        r = np.asarray(self.radiance, dtype=np.float64).reshape(3)
        if r.min() < 0:
            raise ValueError("radiance must be nonnegative")
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "radiance", r)


@dataclass(frozen=True)
class IlluminationCondition:
    directional_lights: tuple
    ambient: np.ndarray
    condition_id: str
    brightest: bool = False

    def __post_init__(self):
        object.__setattr__(self, "directional_lights", tuple(self.directional_lights))
        a = np.asarray(self.ambient, dtype=np.float64).reshape(3)
        if a.min() < 0:
            raise ValueError("ambient must be nonnegative")
        object.__setattr__(self, "ambient", a)

    def total_radiance(self) -> float:
        total = float(self.ambient.sum())
        for light in self.directional_lights:
            total += float(light.radiance.sum())
        return total

    def scaled(self, k: float) -> "IlluminationCondition":
        return IlluminationCondition(
            tuple(DirectionalLight(l.direction, k * l.radiance)
                  for l in self.directional_lights),
            k * self.ambient,
            condition_id=self.condition_id,
            brightest=self.brightest,
        )

    def to_json_dict(self):
        return {
            "condition_id": self.condition_id,
            "brightest": self.brightest,
            "ambient": self.ambient.tolist(),
            "lights": [
                {"direction": l.direction.tolist(), "radiance": l.radiance.tolist()}
                for l in self.directional_lights
            ],
        }

    @staticmethod
    def from_json_dict(d) -> "IlluminationCondition":
        return IlluminationCondition(
            tuple(DirectionalLight(np.asarray(l["direction"]), np.asarray(l["radiance"]))
                  for l in d["lights"]),
            np.asarray(d["ambient"]),
            condition_id=d["condition_id"],
            brightest=bool(d.get("brightest", False)),
        )


@dataclass
class RenderOutput:
    rgb: np.ndarray         # (H,W,3) tone-mapped, in [0,1]
    linear_rgb: np.ndarray  # (H,W,3) pre tone map, >= 0
    depth: np.ndarray       # (H,W), 0 = background
    no_visible_points: bool = False


def tonemap(linear_rgb: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] then gamma 2.2."""
    return np.clip(linear_rgb, 0.0, 1.0) ** (1.0 / GAMMA)


def linear_to_grayscale(linear_rgb: np.ndarray) -> np.ndarray:
    """Rec.709 luma of linear RGB, then gamma; the network input space."""
    luma = linear_rgb @ LUMA_WEIGHTS
    return np.clip(luma, 0.0, 1.0) ** (1.0 / GAMMA)


# ---------------------------------------------------------------------------
# shading
# ---------------------------------------------------------------------------

def _shade_arrays(normals, base_color, roughness, metallic, view_dirs, illum,
                  include_specular=True):
    """Cook-Torrance response for (N,...) arrays; returns (N,3) linear RGB."""
    out = illum.ambient[None, :] * base_color
    if not illum.directional_lights:
        return out
    ndv = np.clip(np.sum(normals * view_dirs, axis=-1, keepdims=True), 0.0, None)
    alpha = roughness[:, None] ** 2
    f0 = 0.04 * (1.0 - metallic[:, None]) + base_color * metallic[:, None]
    kd = (1.0 - metallic[:, None]) * base_color / np.pi
    for light in illum.directional_lights:
        l = light.direction[None, :]
        ndl = np.clip(np.sum(normals * l, axis=-1, keepdims=True), 0.0, None)
        out = out + kd * ndl * light.radiance[None, :]
        if not include_specular:
            continue
        h = l + view_dirs
        h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
        ndh = np.clip(np.sum(normals * h, axis=-1, keepdims=True), 0.0, None)
        vdh = np.clip(np.sum(view_dirs * h, axis=-1, keepdims=True), 0.0, None)
        a2 = alpha ** 2
        denom = ndh * ndh * (a2 - 1.0) + 1.0
        dist = a2 / np.maximum(np.pi * denom * denom, 1e-12)
        k = alpha / 2.0
        g1l = ndl / np.maximum(ndl * (1.0 - k) + k, 1e-12)
        g1v = ndv / np.maximum(ndv * (1.0 - k) + k, 1e-12)
        fresnel = f0 + (1.0 - f0) * (1.0 - vdh) ** 5
        spec = dist * g1l * g1v * fresnel / np.maximum(4.0 * ndl * ndv, 1e-8)
        out = out + spec * ndl * light.radiance[None, :]
    return out


def shade_point(g: GaussianPoint, illum: IlluminationCondition, view_dir,
                include_specular=True) -> np.ndarray:
    """Linear RGB response of a single Gaussian point.

    ``view_dir`` is the unit vector from the surface toward the camera.
    ``include_specular=False`` drops the microfacet lobe (diagnostics only).
    """
    view_dir = np.asarray(view_dir, dtype=np.float64).reshape(1, 3)
    if abs(np.linalg.norm(view_dir) - 1.0) > 1e-6:
        raise ValueError("view_dir must be unit length")
    return _shade_arrays(
        g.normal[None, :], g.base_color[None, :], np.array([g.roughness]),
        np.array([g.metallic]), view_dir, illum, include_specular,
    )[0]


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _project_covariances(cov_cam, p_cam, intrinsics):
    """First-order 2D footprint covariances: J Sigma_cam J^T with the
    perspective Jacobian J, eigenvalues floored at MIN_SPLAT_VAR."""
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    inv_z = 1.0 / z
    j = np.zeros((len(z), 2, 3))
    j[:, 0, 0] = intrinsics.fx * inv_z
    j[:, 0, 2] = -intrinsics.fx * x * inv_z ** 2
    j[:, 1, 1] = intrinsics.fy * inv_z
    j[:, 1, 2] = -intrinsics.fy * y * inv_z ** 2
    cov2d = np.einsum("nij,njk,nlk->nil", j, cov_cam, j)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    # floor the smaller eigenvalue at MIN_SPLAT_VAR by padding the diagonal
    mid = 0.5 * (a + c)
    root = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    eig_min = mid - root
    pad = np.maximum(MIN_SPLAT_VAR - eig_min, 0.0)
    a = a + pad
    c = c + pad
    eig_max = 0.5 * (a + c) + root
    radius = 3.0 * np.sqrt(eig_max)
    det = a * c - b * b
    inv_a, inv_b, inv_c = c / det, -b / det, a / det
    return inv_a, inv_b, inv_c, radius


def render_scene(scene: Scene, view: CameraView, intrinsics: Intrinsics,
                 illum: IlluminationCondition) -> RenderOutput:
    """Render one (scene, view, illumination) triple.

    Deterministic for fixed inputs; linear in the light radiances. If every
    point sits behind the camera a background image is returned with
    ``no_visible_points`` set (and a warning).
    """
    height, width = intrinsics.height, intrinsics.width
    p_cam = view.to_camera(scene.gaussian_positions)
    visible = p_cam[:, 2] > Z_NEAR
    if not visible.any():
        warnings.warn(f"no visible points in scene {scene.scene_id}")
        zeros = np.zeros((height, width, 3))
        return RenderOutput(rgb=tonemap(zeros), linear_rgb=zeros,
                            depth=np.zeros((height, width)), no_visible_points=True)

    p_cam = p_cam[visible]
    z = p_cam[:, 2]
    px = intrinsics.fx * p_cam[:, 0] / z + intrinsics.cx
    py = intrinsics.fy * p_cam[:, 1] / z + intrinsics.cy

    cov_cam = np.einsum("ij,njk,lk->nil", view.rotation,
                        scene.gaussian_covariances[visible], view.rotation)
    inv_a, inv_b, inv_c, radius = _project_covariances(cov_cam, p_cam, intrinsics)

    cam_center = view.camera_center()
    view_dirs = cam_center[None, :] - scene.gaussian_positions[visible]
    view_dirs = view_dirs / np.linalg.norm(view_dirs, axis=1, keepdims=True)
    colors = _shade_arrays(
        scene.gaussian_normals[visible], scene.gaussian_base_color[visible],
        scene.gaussian_roughness[visible], scene.gaussian_metallic[visible],
        view_dirs, illum,
    )

    order = np.argsort(z, kind="stable")
    rgb_acc, depth_acc, weight, _ = splat.composite(
        np.ascontiguousarray(px[order]), np.ascontiguousarray(py[order]),
        np.ascontiguousarray(z[order]),
        np.ascontiguousarray(inv_a[order]), np.ascontiguousarray(inv_b[order]),
        np.ascontiguousarray(inv_c[order]),
        np.ascontiguousarray(radius[order]),
        np.ascontiguousarray(scene.gaussian_opacity[visible][order]),
        np.ascontiguousarray(colors[order]),
        height, width,
    )
    depth = np.where(weight > 1e-8, depth_acc / np.maximum(weight, 1e-300), 0.0)
    return RenderOutput(rgb=tonemap(rgb_acc), linear_rgb=rgb_acc, depth=depth)


# ---------------------------------------------------------------------------
# illumination sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRanges:
    """Sampling bounds for illumination sweeps."""

    intensity: tuple = (0.2, 1.6)       # per-light scalar intensity
    ambient: tuple = (0.0, 0.12)        # ambient intensity
    elevation_deg: tuple = (15.0, 80.0)  # light elevation above the horizon
    saturation: tuple = (0.0, 0.55)     # color saturation (hue is free)
    lights: tuple = (1, 3)              # number of directional lights

    def validate(self):
        for name in ("intensity", "ambient", "elevation_deg", "saturation"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi or lo < 0:
                raise BadRange(f"bad {name} range ({lo}, {hi})")
        lo, hi = self.lights
        if lo < 1 or hi < lo:
            raise BadRange(f"bad light-count range ({lo}, {hi})")


def _direction_from_angles(azimuth, elevation):
    ce = np.cos(elevation)
    return np.array([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)])


def sample_illumination_sweep(count, seed, ranges: SweepRanges = SweepRanges(),
                              id_prefix="illum") -> list:
    """Sample ``count`` illumination conditions varying direction, intensity
    and color; the first one is a designated brightest reference (white,
    maximal intensity, high elevation) and every other condition is rescaled
    below it if needed."""
    if count < 2:
        raise BadRange("sweep needs at least 2 conditions")
    ranges.validate()
    rng = np.random.default_rng(seed)

    reference = IlluminationCondition(
        (DirectionalLight(
            _direction_from_angles(rng.uniform(0, 2 * np.pi),
                                   np.deg2rad(ranges.elevation_deg[1])),
            ranges.intensity[1] * np.ones(3)),),
        ambient=ranges.ambient[1] * np.ones(3),
        condition_id=f"{id_prefix}_000",
        brightest=True,
    )
    conditions = [reference]
    for i in range(1, count):
        n_lights = int(rng.integers(ranges.lights[0], ranges.lights[1] + 1))
        lights = []
        for _ in range(n_lights):
            azimuth = rng.uniform(0, 2 * np.pi)
            elevation = np.deg2rad(rng.uniform(*ranges.elevation_deg))
            intensity = rng.uniform(*ranges.intensity)
            hue = rng.uniform(0, 1)
            sat = rng.uniform(*ranges.saturation)
            color = np.array(colorsys.hsv_to_rgb(hue, sat, 1.0))
            lights.append(DirectionalLight(_direction_from_angles(azimuth, elevation),
                                           intensity * color))
        cond = IlluminationCondition(
            tuple(lights), ambient=rng.uniform(*ranges.ambient) * np.ones(3),
            condition_id=f"{id_prefix}_{i:03d}",
        )
        if cond.total_radiance() > reference.total_radiance():
            cond = cond.scaled(0.95 * reference.total_radiance() / cond.total_radiance())
        conditions.append(cond)
    return conditions


def save_conditions(path, conditions):
    Path(path).write_text(json.dumps([c.to_json_dict() for c in conditions], indent=1))


def load_conditions(path):
    return [IlluminationCondition.from_json_dict(d)
            for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------------------
# image IO
# ---------------------------------------------------------------------------

def save_png(path, rgb: np.ndarray):
    """8-bit PNG of a tone-mapped [0,1] RGB image."""
    data = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def png_to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Grayscale from a stored (gamma-encoded) PNG: decode to linear,
    Rec.709 luma, re-encode. Matches linear_to_grayscale up to the 8-bit
    quantization of the stored file."""
    linear = np.clip(rgb, 0.0, 1.0) ** GAMMA
    return linear_to_grayscale(linear)


def save_depth(path, depth: np.ndarray):
    """Raw float32 little-endian with an 8-byte header (uint32 width, height)."""
    depth = np.ascontiguousarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(depth.tobytes())


def load_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h = struct.unpack("<II", raw[:8])
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(h, w).astype(np.float64)
