"""Camera models, rigid transforms and per-pixel geometry helpers.

Conventions used throughout the package:

* camera frame is +z forward, +x right, +y down (image rows);
* poses are camera-to-world, ``X_world = R @ X_cam + t``;
* a depth value of ``0`` marks an invalid pixel;
* a zero normal vector marks an invalid normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

Array = np.ndarray

CAMERA = "camera"
WORLD = "world"


class InvalidInputError(ValueError):
    """Raised when an operation receives input that violates its contract."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> Array:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> "CameraIntrinsics":
        """Square-pixel pinhole with the principal point at the image centre."""
        f = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2.0)
        return cls(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


@dataclass(frozen=True)
class RigidPose:
    """Camera-to-world rigid transform."""

    rotation: Array
    translation: Array

    def __post_init__(self) -> None:
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise InvalidInputError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("pose contains non-finite values")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err >= 1e-9 or np.linalg.det(R) <= 0:
            raise InvalidInputError(f"rotation is not a proper orthonormal matrix (error {err:.3g})")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: Array) -> "RigidPose":
        T = np.asarray(T, dtype=np.float64)
        if T.shape != (4, 4):
            raise InvalidInputError(f"pose matrix must be 4x4, got {T.shape}")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidInputError("last row of a pose matrix must be [0, 0, 0, 1]")
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "RigidPose":
        """Camera at ``eye`` looking at ``target``; image "up" roughly along ``up``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=1)
        # re-orthonormalise to clear rounding before validation
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, eye)

    def matrix(self) -> Array:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidPose":
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    @property
    def center(self) -> Array:
        return self.translation

    @property
    def principal_axis(self) -> Array:
        return self.rotation[:, 2]

    def apply(self, points: Array) -> Array:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_inverse(self, points: Array) -> Array:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def rotate(self, vectors: Array) -> Array:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T


def orthonormalize(R: Array) -> Array:
    """Nearest proper rotation (polar projection via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    Q = u @ vt
    if np.linalg.det(Q) < 0:
        u[:, -1] *= -1
        Q = u @ vt
    return Q


@dataclass
class NormalMap:
    values: Array  # (H, W, 3); zero rows are invalid
    frame: str = CAMERA

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise InvalidInputError(f"normal map must be HxWx3, got {self.values.shape}")
        if self.frame not in (CAMERA, WORLD):
            raise InvalidInputError(f"unknown normal frame {self.frame!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    @property
    def valid(self) -> Array:
        return np.any(self.values != 0.0, axis=-1)

    def to_world(self, pose: RigidPose) -> "NormalMap":
        if self.frame == WORLD:
            return self
        return NormalMap(pose.rotate(self.values), WORLD)

    def to_camera(self, pose: RigidPose) -> "NormalMap":
        if self.frame == CAMERA:
            return self
        return NormalMap(self.values @ pose.rotation, CAMERA)


@dataclass
class PointCloud:
    points: Array
    normals: Optional[Array] = None
    frame_index: Optional[Array] = None
    pixels: Optional[Array] = field(default=None, repr=False)  # (N, 2) row, col of the source pixel

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise InvalidInputError("normals must match the point count")

    def __len__(self) -> int:
        return len(self.points)


def _check_depth(depth: Array, intr: CameraIntrinsics) -> Array:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != intr.shape:
        raise InvalidInputError(f"depth map is {depth.shape}, intrinsics expect {intr.shape}")
    return depth


def pixel_rays(intr: CameraIntrinsics) -> Array:
    """Camera-frame direction with unit z for every pixel, shape (H, W, 3)."""
    v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def backproject_grid(depth: Array, intr: CameraIntrinsics) -> Array:
    """Camera-frame point for every pixel, shape (H, W, 3); invalid pixels map to the origin."""
    depth = _check_depth(depth, intr)
    return pixel_rays(intr) * depth[..., None]


def backproject(depth: Array, intr: CameraIntrinsics, pose: RigidPose) -> PointCloud:
    """World-space points for the valid pixels, in row-major pixel order."""
    depth = _check_depth(depth, intr)
    rows, cols = np.nonzero(depth > 0)
    d = depth[rows, cols]
    cam = np.stack([(cols - intr.cx) / intr.fx * d, (rows - intr.cy) / intr.fy * d, d], axis=-1)
    return PointCloud(pose.apply(cam), pixels=np.stack([rows, cols], axis=-1))


def project(points: Array, intr: CameraIntrinsics, pose: RigidPose) -> tuple[Array, Array, Array]:
    """World points to pixel coordinates ``(u, v)`` and camera depth."""
    cam = pose.apply_inverse(points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    return u, v, z


def angle_between(a, b) -> float:
    """Angle in degrees between two non-zero 3-vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidInputError("angle_between needs non-zero vectors")
    # atan2 stays accurate near 0 and 180 degrees, where arccos loses half the digits
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


def angles_between(a: Array, b: Array) -> tuple[Array, Array]:
    """Vectorised angle in degrees over the last axis, plus a mask of rows where both are non-zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    s = np.linalg.norm(np.cross(a, b), axis=-1)
    c = np.sum(a * b, axis=-1)
    return np.degrees(np.arctan2(s, c)), ok


def bilinear_sample(values: Array, u, v, validity: Optional[Array] = None, normalize: bool = False):
    """Bilinearly interpolate ``values`` (H, W) or (H, W, C) at pixel coords ``(u, v)``.

    Returns ``(samples, valid)``. A sample is valid only when all four
    surrounding pixels are valid; out-of-bounds queries are invalid.
    """
    values = np.asarray(values, dtype=np.float64)
    scalar = np.ndim(u) == 0
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    H, W = values.shape[:2]
    if validity is None:
        validity = np.any(values != 0, axis=-1) if values.ndim == 3 else values != 0
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (v >= 0) & (u <= W - 1) & (v <= H - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.int64), max(W - 2, 0))
    v0 = np.minimum(np.floor(vc).astype(np.int64), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = uc - u0
    b = vc - v0
    ok = inside & validity[v0, u0] & validity[v0, u1] & validity[v1, u0] & validity[v1, u1]
    if values.ndim == 3:
        a = a[:, None]
        b = b[:, None]
    out = ((1 - a) * (1 - b) * values[v0, u0] + a * (1 - b) * values[v0, u1]
           + (1 - a) * b * values[v1, u0] + a * b * values[v1, u1])
    if normalize:
        n = np.linalg.norm(out, axis=-1, keepdims=True)
        ok &= n[:, 0] > 0
        out = np.where(n > 0, out / np.where(n > 0, n, 1.0), 0.0)
    out = np.where(ok[:, None] if out.ndim == 2 else ok, out, 0.0)
    if scalar:
        return out[0], bool(ok[0])
    return out, ok
