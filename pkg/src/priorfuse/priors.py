"""Geometric prior filtering: PCA normals from sensor depth, DNC and ANR masks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    CAMERA,
    WORLD,
    Array,
    CameraIntrinsics,
    InvalidInputError,
    NormalMap,
    PointCloud,
    RigidPose,
    angles_between,
    backproject,
    backproject_grid,
    pixel_rays,
)

# covariance eigenvalue ratio below which a neighbourhood is treated as rank deficient
_RANK_EPS = 1e-10
# extra neighbours fetched so distance ties at the k-th slot can be broken by index
_TIE_SLACK = 8


@dataclass(frozen=True)
class DncConfig:
    k: int = 200
    tau_d: float = 10.0

    def __post_init__(self) -> None:
        if self.k < 3:
            raise InvalidInputError(f"k must be >= 3, got {self.k}")
        if not 0 < self.tau_d < 90:
            raise InvalidInputError(f"tau_d must be in (0, 90) degrees, got {self.tau_d}")


@dataclass(frozen=True)
class AnrConfig:
    tau_n: float = 10.0

    def __post_init__(self) -> None:
        if not 0 < self.tau_n < 90:
            raise InvalidInputError(f"tau_n must be in (0, 90) degrees, got {self.tau_n}")


@dataclass
class FilterReport:
    """Outcome of a per-pixel filter.

    ``kept`` pixels passed the angle test, ``removed`` failed it and
    ``invalid`` had no usable normal on one side. Pixels that were already
    invalid on input are not counted.
    """

    kept_mask: Array
    removed_mask: Array
    invalid_mask: Array
    angles: Array = field(repr=False)

    @property
    def kept(self) -> int:
        return int(self.kept_mask.sum())

    @property
    def removed(self) -> int:
        return int(self.removed_mask.sum())

    @property
    def invalid(self) -> int:
        return int(self.invalid_mask.sum())

    def to_dict(self) -> dict:
        return {"kept": self.kept, "removed": self.removed, "invalid": self.invalid}


def knn_indices(points: Array, k: int, workers: int = 1) -> Array:
    """Exact k nearest neighbours (self included), ties broken by point index."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < k:
        raise InvalidInputError(f"need at least k={k} points, got {n}")
    tree = cKDTree(points)
    kq = min(n, k + _TIE_SLACK)
    dist, idx = tree.query(points, k=kq, workers=workers)
    if kq == 1:
        dist, idx = dist[:, None], idx[:, None]
    order = np.lexsort((idx, dist), axis=-1)
    idx = np.take_along_axis(idx, order, axis=-1)
    return idx[:, :k]


def pca_normals(points: Array, neighbors: Array, chunk: int = 8192,
                center: str = "query") -> tuple[Array, Array]:
    """Smallest-eigenvalue eigenvector of each neighbourhood scatter matrix.

    ``center="query"`` spreads the neighbours about the query point itself
    (row i of ``neighbors`` belongs to ``points[i]``); ``"centroid"`` is
    textbook PCA about the neighbourhood mean. Returns unoriented unit
    normals and a validity mask (False where the matrix has rank < 2).
    """
    if center not in ("query", "centroid"):
        raise InvalidInputError(f"unknown centering {center!r}")
    n = len(neighbors)
    normals = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    for s in range(0, n, chunk):
        nb = points[neighbors[s:s + chunk]]
        ref = points[s:s + len(nb), None, :] if center == "query" else nb.mean(axis=1, keepdims=True)
        centered = nb - ref
        cov = np.einsum("nki,nkj->nij", centered, centered) / nb.shape[1]
        evals, evecs = np.linalg.eigh(cov)
        normals[s:s + chunk] = evecs[:, :, 0]
        top = evals[:, 2]
        valid[s:s + chunk] = (top > 0) & (evals[:, 1] > _RANK_EPS * top)
    normals[~valid] = 0.0
    return normals, valid


def estimate_point_normals_knn(cloud: PointCloud, view_center, k: int = 200,
                               workers: int = 1, center: str = "query") -> Array:
    """Per-point PCA normals oriented towards ``view_center``.

    Invalid (rank-deficient, or exactly edge-on to the viewer) rows are zero.
    """
    pts = cloud.points
    idx = knn_indices(pts, k, workers=workers)
    normals, valid = pca_normals(pts, idx, center=center)
    facing = np.sum(normals * (np.asarray(view_center, dtype=np.float64) - pts), axis=1)
    normals[facing < 0] *= -1.0
    normals[facing == 0] = 0.0
    return normals


def depth_normals_knn(depth: Array, intr: CameraIntrinsics, pose: RigidPose, k: int = 200,
                      workers: int = 1, center: str = "query") -> NormalMap:
    """World-frame N_d map: back-project one frame and run KNN PCA per valid pixel."""
    cloud = backproject(depth, intr, pose)
    out = np.zeros(intr.shape + (3,))
    if len(cloud) == 0:
        return NormalMap(out, WORLD)
    normals = estimate_point_normals_knn(cloud, pose.center, k, workers=workers, center=center)
    out[cloud.pixels[:, 0], cloud.pixels[:, 1]] = normals
    return NormalMap(out, WORLD)


def _check_pair(a: NormalMap, b: NormalMap) -> None:
    if a.frame != b.frame:
        raise InvalidInputError(f"normal maps are in different frames ({a.frame} vs {b.frame})")
    if a.shape != b.shape:
        raise InvalidInputError(f"normal maps differ in size ({a.shape} vs {b.shape})")


def dnc_filter_depth(depth: Array, n_d: NormalMap, n_p: NormalMap,
                     cfg: DncConfig = DncConfig()) -> tuple[Array, FilterReport]:
    """Zero every depth pixel whose depth-derived normal disagrees with the prior by more than tau_d."""
    depth = np.asarray(depth, dtype=np.float64)
    _check_pair(n_d, n_p)
    if depth.shape != n_d.shape:
        raise InvalidInputError(f"depth {depth.shape} and normals {n_d.shape} differ in size")
    theta, both = angles_between(n_d.values, n_p.values)
    has_depth = depth > 0
    keep = has_depth & both & (theta <= cfg.tau_d)
    report = FilterReport(
        kept_mask=keep,
        removed_mask=has_depth & both & (theta > cfg.tau_d),
        invalid_mask=has_depth & ~both,
        angles=np.where(both, theta, np.nan),
    )
    return np.where(keep, depth, 0.0), report


def render_normal_from_depth(depth: Array, intr: CameraIntrinsics) -> NormalMap:
    """Camera-frame normals from the cross product of back-projected point gradients.

    Central differences inside the image, one-sided at the borders; any
    invalid pixel in the stencil invalidates the normal.
    """
    depth = np.asarray(depth, dtype=np.float64)
    P = backproject_grid(depth, intr)
    ok = depth > 0
    H, W = depth.shape
    out = np.zeros((H, W, 3))
    if H < 2 or W < 2:
        return NormalMap(out, CAMERA)

    dx = np.empty_like(P)
    okx = np.empty_like(ok)
    dx[:, 1:-1] = P[:, 2:] - P[:, :-2]
    okx[:, 1:-1] = ok[:, 2:] & ok[:, :-2]
    dx[:, 0] = P[:, 1] - P[:, 0]
    okx[:, 0] = ok[:, 1] & ok[:, 0]
    dx[:, -1] = P[:, -1] - P[:, -2]
    okx[:, -1] = ok[:, -1] & ok[:, -2]

    dy = np.empty_like(P)
    oky = np.empty_like(ok)
    dy[1:-1] = P[2:] - P[:-2]
    oky[1:-1] = ok[2:] & ok[:-2]
    dy[0] = P[1] - P[0]
    oky[0] = ok[1] & ok[0]
    dy[-1] = P[-1] - P[-2]
    oky[-1] = ok[-1] & ok[-2]

    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    valid = ok & okx & oky & (norm > 0)
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    # face the camera at the origin
    flip = np.sum(n * P, axis=-1) > 0
    n[flip] *= -1.0
    out[valid] = n[valid]
    return NormalMap(out, CAMERA)


def anr_filter_normals(n_hat: NormalMap, n_p: NormalMap,
                       cfg: AnrConfig = AnrConfig()) -> tuple[NormalMap, FilterReport]:
    """Keep the prior normal only where it agrees with the rendered normal within tau_n."""
    _check_pair(n_hat, n_p)
    theta, both = angles_between(n_hat.values, n_p.values)
    keep = both & (theta <= cfg.tau_n)
    has_prior = n_p.valid
    report = FilterReport(
        kept_mask=keep,
        removed_mask=both & (theta > cfg.tau_n),
        invalid_mask=has_prior & ~both,
        angles=np.where(both, theta, np.nan),
    )
    out = np.where(keep[..., None], n_p.values, 0.0)
    return NormalMap(out, n_p.frame), report


@dataclass(frozen=True)
class CompletionConfig:
    radius: int = 12        # search window half-size, pixels
    max_angle: float = 10.0  # anchor and hole normals must agree this closely, degrees

    def __post_init__(self) -> None:
        if self.radius < 1:
            raise InvalidInputError("radius must be >= 1")
        if not 0 < self.max_angle < 90:
            raise InvalidInputError("max_angle must be in (0, 90) degrees")


def complete_depth_from_normals(depth: Array, normals: NormalMap, fill_mask: Array,
                                intr: CameraIntrinsics,
                                cfg: CompletionConfig = CompletionConfig()) -> tuple[Array, Array]:
    """Fill masked holes by extending the plane of a nearby pixel with a matching normal.

    For each pixel in ``fill_mask`` without depth, the nearest valid pixel
    (in image distance, ties by scan order of the offset table) whose normal
    lies within ``max_angle`` of the hole's own normal anchors a plane with
    the hole's normal; the hole's depth is where its pixel ray meets that
    plane. ``normals`` must be camera-frame. Returns the completed depth and
    the mask of filled pixels.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if normals.frame != CAMERA:
        raise InvalidInputError("completion needs camera-frame normals")
    if depth.shape != normals.shape or depth.shape != intr.shape:
        raise InvalidInputError("depth, normals and intrinsics differ in size")
    n = normals.values
    P = backproject_grid(depth, intr)
    rays = pixel_rays(intr)  # z component 1
    H, W = depth.shape
    todo = np.asarray(fill_mask, dtype=bool) & (depth <= 0) & normals.valid
    out = depth.copy()
    filled = np.zeros_like(todo)
    cos_max = np.cos(np.radians(cfg.max_angle))
    r = cfg.radius
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
    offs.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))
    pad_d = np.pad(depth, r)
    pad_n = np.pad(n, ((r, r), (r, r), (0, 0)))
    pad_P = np.pad(P, ((r, r), (r, r), (0, 0)))
    denom = np.sum(n * rays, axis=-1)
    for dy, dx in offs:
        if not todo.any():
            break
        sl = (slice(r + dy, r + dy + H), slice(r + dx, r + dx + W))
        d_nb = pad_d[sl]
        agree = np.sum(pad_n[sl] * n, axis=-1) >= cos_max
        cand = todo & (d_nb > 0) & agree & (np.abs(denom) > 1e-6)
        if not cand.any():
            continue
        z = np.sum(n * pad_P[sl], axis=-1) / np.where(cand, denom, 1.0)
        ok = cand & (z > 0)
        out[ok] = z[ok]
        filled |= ok
        todo &= ~ok
    return out, filled
