"""Analytic scenes, sphere-traced depth/normal renders and seeded sensor noise."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fusion import Frame
from .geometry import CAMERA, Array, CameraIntrinsics, InvalidInputError, NormalMap, RigidPose, pixel_rays
from .marching import TriangleMesh

TRACE_EPS = 1e-10
MAX_STEPS = 4096


class Primitive:
    def sdf(self, x: Array) -> Array:
        raise NotImplementedError

    def gradient(self, x: Array) -> Array:
        raise NotImplementedError

    def mesh(self, bounds: tuple[Array, Array], resolution: float) -> TriangleMesh:
        raise NotImplementedError


@dataclass
class Plane(Primitive):
    """Half-space below the plane is solid; the normal points into free space."""

    point: Sequence[float] = (0.0, 0.0, 0.0)
    normal: Sequence[float] = (0.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)

    def sdf(self, x):
        return (x - self.point) @ self.normal

    def gradient(self, x):
        return np.broadcast_to(self.normal, x.shape).copy()

    def mesh(self, bounds, resolution):
        # rectangle covering the bounds, spanned by two in-plane axes
        n = self.normal
        a = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        lo, hi = bounds
        corners = np.array([[lo[0], lo[1], lo[2]], [hi[0], hi[1], hi[2]]])
        center = self.point + ((0.5 * (lo + hi)) - self.point) @ a * a + ((0.5 * (lo + hi)) - self.point) @ b * b
        span = 0.5 * np.linalg.norm(corners[1] - corners[0])
        ua = np.array([-span, span, span, -span])
        ub = np.array([-span, -span, span, span])
        v = center + ua[:, None] * a + ub[:, None] * b
        return clip_mesh_to_box(TriangleMesh(v, [[0, 1, 2], [0, 2, 3]]), bounds, resolution)


@dataclass
class Sphere(Primitive):
    center: Sequence[float] = (0.0, 0.0, 0.0)
    radius: float = 0.5

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64)

    def sdf(self, x):
        return np.linalg.norm(x - self.center, axis=-1) - self.radius

    def gradient(self, x):
        g = x - self.center
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-300)

    def mesh(self, bounds, resolution):
        n_lat = max(16, int(np.ceil(np.pi * self.radius / resolution)))
        n_lon = 2 * n_lat
        th = np.linspace(0, np.pi, n_lat + 1)[1:-1]
        ph = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
        T, P = np.meshgrid(th, ph, indexing="ij")
        ring = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
        v = np.concatenate([[[0, 0, 1.0]], ring, [[0, 0, -1.0]]]) * self.radius + self.center
        tris = []
        nr = len(th)
        idx = lambda i, j: 1 + i * n_lon + (j % n_lon)
        for j in range(n_lon):
            tris.append([0, idx(0, j), idx(0, j + 1)])
            tris.append([len(v) - 1, idx(nr - 1, j + 1), idx(nr - 1, j)])
        for i in range(nr - 1):
            for j in range(n_lon):
                a, b, c, d = idx(i, j), idx(i, j + 1), idx(i + 1, j), idx(i + 1, j + 1)
                tris.append([a, c, b])
                tris.append([b, c, d])
        return TriangleMesh(v, tris)


@dataclass
class Box(Primitive):
    """Axis-aligned box; with ``inside=True`` the interior is free space (a room)."""

    center: Sequence[float] = (0.0, 0.0, 0.0)
    half: Sequence[float] = (0.5, 0.5, 0.5)
    inside: bool = False

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half = np.asarray(self.half, dtype=np.float64)

    def _box_sdf(self, x):
        q = np.abs(x - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(np.max(q, axis=-1), 0.0)

    def sdf(self, x):
        d = self._box_sdf(x)
        return -d if self.inside else d

    def gradient(self, x):
        p = x - self.center
        q = np.abs(p) - self.half
        sgn = np.where(p >= 0, 1.0, -1.0)
        out = np.maximum(q, 0.0)
        on = np.linalg.norm(out, axis=-1, keepdims=True)
        g_out = sgn * out / np.maximum(on, 1e-300)
        k = np.argmax(q, axis=-1)
        g_in = np.zeros_like(x)
        g_in[np.arange(len(x)), k] = sgn[np.arange(len(x)), k]
        g = np.where(on > 0, g_out, g_in)
        return -g if self.inside else g

    def mesh(self, bounds, resolution):
        lo, hi = self.center - self.half, self.center + self.half
        c = np.array([[lo[0] if i & 1 == 0 else hi[0], lo[1] if i & 2 == 0 else hi[1],
                       lo[2] if i & 4 == 0 else hi[2]] for i in range(8)])
        # outward winding for a solid box
        quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
        tris = []
        for a, b, cc, d in quads:
            tris += [[a, b, cc], [a, cc, d]]
        tris = np.array(tris)
        if self.inside:
            tris = tris[:, ::-1]
        return TriangleMesh(c, tris)


def clip_mesh_to_box(mesh: TriangleMesh, bounds, resolution: float) -> TriangleMesh:
    """Keep the part of a planar polygon inside an axis-aligned box (Sutherland-Hodgman per triangle)."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    verts, tris = [], []
    for t in mesh.triangles:
        poly = [mesh.vertices[i] for i in t]
        for axis in range(3):
            for bound, sign in ((lo[axis], 1.0), (hi[axis], -1.0)):
                out = []
                for i in range(len(poly)):
                    p, q = poly[i], poly[(i + 1) % len(poly)]
                    dp, dq = sign * (p[axis] - bound), sign * (q[axis] - bound)
                    if dp >= 0:
                        out.append(p)
                    if (dp >= 0) != (dq >= 0):
                        out.append(p + (q - p) * (dp / (dp - dq)))
                poly = out
                if not poly:
                    break
            if not poly:
                break
        if len(poly) >= 3:
            base = len(verts)
            verts.extend(poly)
            tris.extend([[base, base + i, base + i + 1] for i in range(1, len(poly) - 1)])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


@dataclass
class SyntheticScene:
    primitives: list
    cameras: list = field(default_factory=list)
    intrinsics: Optional[CameraIntrinsics] = None
    bounds: tuple = ((-5.0, -5.0, -5.0), (5.0, 5.0, 5.0))
    far: float = 20.0
    name: str = "scene"

    def __post_init__(self) -> None:
        if not self.primitives:
            raise InvalidInputError("scene needs at least one primitive")

    def sdf(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        return np.min(np.stack([p.sdf(x) for p in self.primitives]), axis=0)

    def normal(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        d = np.stack([p.sdf(x) for p in self.primitives])
        k = np.argmin(d, axis=0)
        g = np.zeros_like(x)
        for i, p in enumerate(self.primitives):
            m = k == i
            if np.any(m):
                g[m] = p.gradient(x[m])
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)

    def isofunction(self, x: Array) -> tuple[Array, Array]:
        return self.sdf(x), np.ones(len(x), dtype=bool)

    def gt_mesh(self, resolution: float = 0.02) -> TriangleMesh:
        """Explicit surface: each primitive's mesh minus triangles buried in another primitive."""
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        verts, tris = [], []
        base = 0
        for i, p in enumerate(self.primitives):
            m = p.mesh((lo, hi), resolution)
            if m.is_empty:
                continue
            cent = m.vertices[m.triangles].mean(axis=1)
            keep = np.ones(len(m.triangles), dtype=bool)
            for j, q in enumerate(self.primitives):
                if j != i:
                    keep &= q.sdf(cent) > 1e-9
            verts.append(m.vertices)
            tris.append(m.triangles[keep] + base)
            base += len(m.vertices)
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def sphere_trace(scene: SyntheticScene, origins: Array, dirs: Array,
                 near: float = 1e-4) -> tuple[Array, Array]:
    """Distance along unit ``dirs`` to the first surface; returns ``(t, hit)``.

    Plain sphere tracing to within ~1e-3, then safeguarded Newton steps on
    the SDF along the ray to reach ``TRACE_EPS``.
    """
    n = len(dirs)
    t = np.full(n, near)
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    o = np.broadcast_to(origins, dirs.shape)
    for _ in range(MAX_STEPS):
        if len(active) == 0:
            break
        p = o[active] + t[active, None] * dirs[active]
        d = scene.sdf(p)
        close = d < 1e-3
        far = t[active] > scene.far
        t[active[~close & ~far]] += d[~close & ~far]
        hit[active[close & ~far]] = True
        active = active[~close & ~far]
    # polish hits with Newton on g(t) = sdf(o + t dir)
    idx = np.nonzero(hit)[0]
    for _ in range(50):
        if len(idx) == 0:
            break
        p = o[idx] + t[idx, None] * dirs[idx]
        d = scene.sdf(p)
        done = np.abs(d) < TRACE_EPS
        slope = np.sum(scene.normal(p) * dirs[idx], axis=1)
        ok = slope < -1e-6
        step = np.where(ok, -d / np.where(ok, slope, -1.0), d)
        t[idx[~done]] += step[~done]
        idx = idx[~done]
    if len(idx):
        p = o[idx] + t[idx, None] * dirs[idx]
        hit[idx[np.abs(scene.sdf(p)) >= TRACE_EPS * 100]] = False
    return t, hit


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0
    outlier_fraction: float = 0.0
    normal_sigma_deg: float = 0.0
    edge_noise: float = 0.0  # probability that a discontinuity pixel gets a mixed depth
    outlier_blob: int = 1    # outliers come as square patches of this many pixels per side

    def __post_init__(self) -> None:
        if self.depth_sigma < 0 or self.normal_sigma_deg < 0:
            raise InvalidInputError("noise scales must be non-negative")
        if not (0 <= self.outlier_fraction <= 1 and 0 <= self.edge_noise <= 1):
            raise InvalidInputError("noise fractions must lie in [0, 1]")
        if self.outlier_blob < 1:
            raise InvalidInputError("outlier_blob must be >= 1")

    @property
    def is_zero(self) -> bool:
        return self.depth_sigma == 0 and self.outlier_fraction == 0 and self.normal_sigma_deg == 0 \
            and self.edge_noise == 0


@dataclass
class SynthRender:
    frame: Frame              # noisy depth + noisy (prior) normals, camera frame
    clean_depth: Array
    clean_normals: NormalMap  # camera frame
    outlier_mask: Array
    edge_mask: Array

    @property
    def depth_error(self) -> Array:
        """|noisy - clean| where both are valid, +inf where validity differs."""
        a, b = self.frame.depth, self.clean_depth
        err = np.abs(a - b)
        return np.where((a > 0) == (b > 0), np.where(a > 0, err, 0.0), np.inf)


def render_clean(scene: SyntheticScene, pose: RigidPose, intr: CameraIntrinsics) -> tuple[Array, Array]:
    """Exact z-depth and camera-frame normals (facing the camera)."""
    rays = pixel_rays(intr).reshape(-1, 3)
    norm = np.linalg.norm(rays, axis=1)
    dirs_cam = rays / norm[:, None]
    dirs = pose.rotate(dirs_cam)
    t, hit = sphere_trace(scene, pose.center, dirs)
    depth = np.where(hit, t / norm, 0.0)
    pts = pose.center + t[:, None] * dirs
    nw = np.zeros_like(pts)
    nw[hit] = scene.normal(pts[hit])
    nc = nw @ pose.rotation
    back = np.sum(nc * dirs_cam, axis=1) > 0
    nc[back] *= -1.0
    nc[~hit] = 0.0
    H, W = intr.shape
    return depth.reshape(H, W), nc.reshape(H, W, 3)


def _discontinuities(depth: Array, rel: float = 0.1) -> tuple[Array, Array]:
    """Pixels next to a depth jump, and the far-side depth seen across it."""
    H, W = depth.shape
    pad = np.pad(depth, 1, mode="edge")
    mask = np.zeros((H, W), dtype=bool)
    other = np.zeros((H, W))
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nb = pad[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
        jump = (depth > 0) & (nb > 0) & (np.abs(nb - depth) > rel * depth) & ~mask
        other[jump] = nb[jump]
        mask |= jump
    return mask, other


def perturb_normals(n: Array, sigma_deg: float, rng: np.random.Generator) -> Array:
    """Tilt unit normals by a Rayleigh(sigma) angle about a uniformly random axis."""
    if sigma_deg == 0:
        return n.copy()
    valid = np.any(n != 0, axis=-1)
    flat = n.reshape(-1, 3)
    helper = np.where(np.abs(flat[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    a = np.cross(flat, helper)
    a /= np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
    b = np.cross(flat, a)
    g = rng.standard_normal((len(flat), 2)) * np.radians(sigma_deg)
    out = flat + g[:, :1] * a + g[:, 1:] * b
    out /= np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-300)
    out = out.reshape(n.shape)
    return np.where(valid[..., None], out, 0.0)


def rotate_normals_by(n: Array, angles_deg: Array, rng: np.random.Generator) -> Array:
    """Rotate each unit normal by exactly ``angles_deg`` about a random perpendicular axis."""
    flat = n.reshape(-1, 3)
    helper = np.where(np.abs(flat[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    a = np.cross(flat, helper)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    a = np.divide(a, na, out=np.zeros_like(a), where=na > 0)  # zero (invalid) normals stay zero
    b = np.cross(flat, a)
    phi = rng.uniform(0, 2 * np.pi, len(flat))
    axis_dir = np.cos(phi)[:, None] * a + np.sin(phi)[:, None] * b
    th = np.radians(np.asarray(angles_deg, dtype=np.float64).reshape(-1))[:, None]
    return (np.cos(th) * flat + np.sin(th) * axis_dir).reshape(n.shape)


def synth_render(scene: SyntheticScene, pose: RigidPose, intr: CameraIntrinsics,
                 noise: NoiseModel = NoiseModel(), seed: int = 0, frame_id: str = "") -> SynthRender:
    """Render exact maps, then apply seeded depth, outlier, edge and normal noise."""
    rng = np.random.default_rng(seed)
    depth, normals = render_clean(scene, pose, intr)
    valid = depth > 0
    noisy = depth.copy()
    if noise.depth_sigma > 0:
        noisy = np.where(valid, noisy + rng.normal(0.0, noise.depth_sigma, depth.shape), 0.0)
        noisy = np.where(valid, np.maximum(noisy, 1e-6), 0.0)

    edge_mask = np.zeros_like(valid)
    if noise.edge_noise > 0:
        disc, other = _discontinuities(depth)
        edge_mask = disc & (rng.random(depth.shape) < noise.edge_noise)
        mix = rng.uniform(0.2, 0.8, depth.shape)
        noisy = np.where(edge_mask, (1 - mix) * depth + mix * other, noisy)

    outliers = np.zeros_like(valid)
    if noise.outlier_fraction > 0 and np.any(valid):
        lo, hi = depth[valid].min(), depth[valid].max()
        b = noise.outlier_blob
        if b == 1:
            outliers = valid & (rng.random(depth.shape) < noise.outlier_fraction)
            noisy = np.where(outliers, rng.uniform(lo, hi, depth.shape), noisy)
        else:
            # one constant wrong depth per b x b patch, anchored at its top-left pixel
            seeds = rng.random(depth.shape) < noise.outlier_fraction / b ** 2
            draws = rng.uniform(lo, hi, depth.shape)
            patch = np.zeros_like(noisy)
            hit = np.zeros_like(valid)
            for r, c in np.argwhere(seeds):
                patch[r:r + b, c:c + b] = draws[r, c]
                hit[r:r + b, c:c + b] = True
            outliers = valid & hit
            noisy = np.where(outliers, patch, noisy)

    prior = perturb_normals(normals, noise.normal_sigma_deg, rng)
    frame = Frame(intr, pose, noisy, NormalMap(prior, CAMERA), frame_id=frame_id)
    return SynthRender(frame, depth, NormalMap(normals, CAMERA), outliers, edge_mask)


# --- stock scenes --------------------------------------------------------------

def plane_sphere_scene(width: int = 320, height: int = 240, n_cameras: int = 1) -> SyntheticScene:
    """Floor plane with a sphere resting on it, seen obliquely from above."""
    prims = [Plane((0, 0, 0), (0, 0, 1)), Sphere((0.0, 0.0, 0.5), 0.5)]
    intr = CameraIntrinsics.from_fov(width, height, 60.0)
    cams = []
    for i in range(n_cameras):
        a = 2 * np.pi * i / max(n_cameras, 1)
        eye = (2.2 * np.cos(a), 2.2 * np.sin(a) - 0.0, 1.8)
        cams.append(RigidPose.look_at(eye, (0.0, 0.0, 0.35)))
    return SyntheticScene(prims, cams, intr, bounds=((-3.0, -3.0, -0.1), (3.0, 3.0, 1.2)),
                          far=5.0, name="plane-sphere")


ROOM_HALF = (2.0, 1.5, 1.25)
ROOM_CENTER = (0.0, 0.0, 1.25)


def room_scene(width: int = 320, height: int = 240, n_cameras: int = 8) -> SyntheticScene:
    """Closed box room with a floating sphere, watched from corners and wall midpoints."""
    prims = [Box(ROOM_CENTER, ROOM_HALF, inside=True), Sphere((0.6, 0.3, 0.9), 0.35)]
    intr = CameraIntrinsics.from_fov(width, height, 100.0)
    hx, hy, hz = ROOM_HALF
    eyes_targets = [
        ((hx - 0.3, hy - 0.3, 2.1), (-0.6, -0.5, 0.7)),
        ((-hx + 0.3, -hy + 0.3, 2.1), (0.6, 0.5, 0.7)),
        ((hx - 0.3, -hy + 0.3, 2.1), (-0.6, 0.5, 0.7)),
        ((-hx + 0.3, hy - 0.3, 2.1), (0.6, -0.5, 0.7)),
        ((0.0, -hy + 0.25, 0.4), (0.0, hy, 1.9)),
        ((0.0, hy - 0.25, 0.4), (0.0, -hy, 1.9)),
        ((-hx + 0.25, 0.0, 0.4), (hx, 0.0, 1.9)),
        ((hx - 0.25, 0.0, 0.4), (-hx, 0.0, 1.9)),
        ((0.0, 0.0, 0.3), (0.2, 0.1, 2.5)),
        ((0.0, 0.0, 2.2), (0.3, 0.2, 0.0)),
        ((1.4, -0.9, 1.2), (0.6, 0.3, 0.9)),
        ((-0.6, 1.0, 1.0), (0.6, 0.3, 0.9)),
    ]
    cams = [RigidPose.look_at(e, t) for e, t in eyes_targets[:n_cameras]]
    pad = 0.05
    lo = tuple(c - h - pad for c, h in zip(ROOM_CENTER, ROOM_HALF))
    hi = tuple(c + h + pad for c, h in zip(ROOM_CENTER, ROOM_HALF))
    return SyntheticScene(prims, cams, intr, bounds=(lo, hi), far=10.0, name="room")


def floor_object_scene(width: int = 160, height: int = 120, n_cameras: int = 8) -> SyntheticScene:
    """Large floor slab with one small detailed object in the middle.

    Even cameras orbit the object at close range and low height; odd cameras
    look down on the floor from high above, so the floor is seen steeply but
    sparsely while the object is sampled densely.
    """
    prims = [Box((0.0, 0.0, -0.1), (2.0, 2.0, 0.1)), Sphere((0.0, 0.0, 0.25), 0.15),
             Box((0.0, 0.0, 0.05), (0.12, 0.12, 0.05))]
    intr = CameraIntrinsics.from_fov(width, height, 70.0)
    cams = []
    for i in range(n_cameras):
        a = 2 * np.pi * i / n_cameras
        c, s = np.cos(a), np.sin(a)
        if i % 2 == 0:
            cams.append(RigidPose.look_at((0.7 * c, 0.7 * s, 0.35), (0.0, 0.0, 0.15)))
        else:
            cams.append(RigidPose.look_at((1.0 * c, 1.0 * s, 4.5), (-0.3 * c, -0.3 * s, 0.0)))
    return SyntheticScene(prims, cams, intr, bounds=((-2.0, -2.0, -0.2), (2.0, 2.0, 0.5)),
                          far=8.0, name="floor-object")


SCENES = {
    "plane-sphere": plane_sphere_scene,
    "room": room_scene,
    "floor-object": floor_object_scene,
}


def make_scene(name: str, **kw) -> SyntheticScene:
    try:
        return SCENES[name](**kw)
    except KeyError:
        raise InvalidInputError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


def render_scene(scene: SyntheticScene, noise: NoiseModel = NoiseModel(), seed: int = 0) -> list[SynthRender]:
    """Render every camera; frame i uses seed ``seed + i``."""
    return [synth_render(scene, pose, scene.intrinsics, noise, seed + i, frame_id=f"{i:04d}")
            for i, pose in enumerate(scene.cameras)]
