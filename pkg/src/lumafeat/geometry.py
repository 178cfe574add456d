"""Camera model, rigid transforms, pinhole projection and planar homographies.

Conventions used across the package:

* World frame is right-handed, units are arbitrary (objects default to
  scale ~1).
* Camera frame: X right, Y down, Z forward (optical axis into the scene).
* Pixel coordinates are (x, y) = (column, row) with the origin at the
  center of the top-left pixel.  Coordinates stay continuous everywhere;
  rounding happens only when labels are encoded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(Exception):
    """Base class for geometry failures."""


class BehindCamera(GeometryError):
    """Point has non-positive depth in the camera frame."""


class NonPositiveDepth(GeometryError):
    """Back-projection requested with depth <= 0."""


class NonOrthonormalRotation(GeometryError):
    """Matrix is not a proper rotation."""


class PointAtInfinity(GeometryError):
    """Projective warp sent the point to the line at infinity."""


class SingularHomography(GeometryError):
    """Homography matrix is not invertible."""


def _check_rotation(rotation: np.ndarray, tol: float = ORTHO_TOL) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise NonOrthonormalRotation(f"rotation must be 3x3, got {rotation.shape}")
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=tol):
        raise NonOrthonormalRotation("rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > tol:
        raise NonOrthonormalRotation("rotation determinant is not +1")
    return rotation


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics. Image dimensions must be divisible by 8 so the
    detector's 8x8 cell grid tiles the image exactly."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width % 8 != 0 or self.height % 8 != 0:
            raise ValueError("width and height must be divisible by 8")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class CameraView:
    """Rigid world-to-camera pose: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "CameraView":
        return CameraView(np.eye(3), np.zeros(3))

    def matrix4x4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map (N,3) world points into the camera frame."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def look_at_view(eye, target, up=(0.0, 0.0, 1.0)) -> CameraView:
    """Camera at ``eye`` looking toward ``target`` with the image's up axis
    aligned against the world ``up`` direction as closely as possible."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward = forward / norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-8:
        # looking straight along up; pick any perpendicular axis
        up = np.array([0.0, 1.0, 0.0]) if abs(forward[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    # reorthogonalize to keep the orthonormality invariant within 1e-9
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    return CameraView(rotation, -rotation @ eye)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation over SO(3) via unit quaternion sampling."""
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Homography:
    """3x3 invertible projective map on pixels, normalized so that the (3,3)
    element is 1 whenever it is nonzero."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise SingularHomography("homography is singular")
        if m[2, 2] != 0.0:
            m = m / m[2, 2]
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))

    @staticmethod
    def translation(tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return Homography(m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """self after other: (self @ other)(p) = self(other(p))."""
        return Homography(self.matrix @ other.matrix)


def project(point3d, view: CameraView, intrinsics: Intrinsics):
    """Project a world point through the pinhole model.

    Returns (pixel (2,), depth z). Raises BehindCamera if the point has
    non-positive depth in the camera frame.
    """
    p_cam = view.rotation @ np.asarray(point3d, dtype=np.float64) + view.translation
    z = p_cam[2]
    if z <= 0:
        raise BehindCamera(f"point depth {z:.6g} <= 0")
    pixel = np.array(
        [
            intrinsics.fx * p_cam[0] / z + intrinsics.cx,
            intrinsics.fy * p_cam[1] / z + intrinsics.cy,
        ]
    )
    return pixel, z


def project_many(points, view: CameraView, intrinsics: Intrinsics):
    """Vectorized projection of (N,3) world points.

    Returns (pixels (N,2), depths (N,)). No culling; callers filter on depth.
    """
    p_cam = view.to_camera(points)
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = intrinsics.fx * p_cam[:, 0] / z + intrinsics.cx
        py = intrinsics.fy * p_cam[:, 1] / z + intrinsics.cy
    return np.stack([px, py], axis=1), z


def back_project(pixel, z: float, view: CameraView, intrinsics: Intrinsics) -> np.ndarray:
    """Invert the pinhole projection for a pixel at known depth z > 0.

    Returns the world point P with project(P, view, intrinsics) == pixel.
    """
    if z <= 0:
        raise NonPositiveDepth(f"depth {z:.6g} <= 0")
    pixel = np.asarray(pixel, dtype=np.float64)
    ray = np.array(
        [
            (pixel[0] - intrinsics.cx) / intrinsics.fx,
            (pixel[1] - intrinsics.cy) / intrinsics.fy,
            1.0,
        ]
    )
    p_cam = z * ray
    return view.rotation.T @ (p_cam - view.translation)


def apply_rigid(points, rotation, translation) -> np.ndarray:
    """Apply p -> R @ p + t to an (N,3) array (or a single 3-vector)."""
    rotation = _check_rotation(rotation)
    translation = np.asarray(translation, dtype=np.float64).reshape(3)
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    out = np.atleast_2d(points) @ rotation.T + translation
    return out[0] if single else out


def warp_pixel(pixel, homography: Homography) -> np.ndarray:
    """Apply a projective warp to one pixel with de-homogenization."""
    pixel = np.asarray(pixel, dtype=np.float64)
    v = homography.matrix @ np.array([pixel[0], pixel[1], 1.0])
    if abs(v[2]) < 1e-12:
        raise PointAtInfinity(f"pixel {pixel} maps to infinity")
    return v[:2] / v[2]


def warp_pixels(pixels, homography: Homography) -> np.ndarray:
    """Vectorized projective warp of (N,2) pixels (no infinity guard)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    ones = np.ones((pixels.shape[0], 1))
    v = np.hstack([pixels, ones]) @ homography.matrix.T
    return v[:, :2] / v[:, 2:3]


def homography_from_correspondences(src, dst) -> Homography:
    """Least-squares homography from >= 4 point correspondences.

    Normalized DLT: both point sets are translated/scaled to mean 0 and RMS
    distance sqrt(2) before the SVD solve, which keeps the fit stable.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.shape[0] < 4 or src.shape[1] != 2:
        raise ValueError("need matching (N>=4, 2) arrays")

    def normalizer(pts):
        mean = pts.mean(axis=0)
        rms = np.sqrt(((pts - mean) ** 2).sum(axis=1).mean())
        s = np.sqrt(2.0) / max(rms, 1e-12)
        t = np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])
        return t

    t_src = normalizer(src)
    t_dst = normalizer(dst)
    s = (np.hstack([src, np.ones((len(src), 1))]) @ t_src.T)[:, :2]
    d = (np.hstack([dst, np.ones((len(dst), 1))]) @ t_dst.T)[:, :2]

    rows = []
    for (x, y), (u, v) in zip(s, d):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows))
    h_norm = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(t_dst) @ h_norm @ t_src)
