"""Sample-based mesh comparison: accuracy, completion, Chamfer-L1, normal consistency, F-score."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Array, InvalidInputError, PointCloud
from .marching import TriangleMesh

REPORT_KEYS = ("accuracy", "completion", "chamfer_l1", "normal_consistency", "f_score",
               "threshold", "n_samples", "seed")


@dataclass(frozen=True)
class MeshMetrics:
    accuracy: float
    completion: float
    chamfer_l1: float
    normal_consistency: float
    f_score: float
    sample_count: int
    threshold: float = 0.05
    seed: int = 0
    precision: float = float("nan")
    recall: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "completion": self.completion,
            "chamfer_l1": self.chamfer_l1,
            "normal_consistency": self.normal_consistency,
            "f_score": self.f_score,
            "threshold": self.threshold,
            "n_samples": self.sample_count,
            "seed": self.seed,
        }

    def to_text(self) -> str:
        return "".join(f"{k}: {v!r}\n" for k, v in self.to_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def as_tuple(self) -> tuple:
        return (self.accuracy, self.completion, self.chamfer_l1, self.normal_consistency, self.f_score)


def crop_mesh(mesh: TriangleMesh, box) -> TriangleMesh:
    """Keep triangles whose centroid lies inside the closed box ``(lo, hi)``."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    c = mesh.vertices[mesh.triangles].mean(axis=1)
    keep = np.all((c >= lo) & (c <= hi), axis=1)
    return TriangleMesh(mesh.vertices, mesh.triangles[keep], mesh.normals)


def sample_mesh_points(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform surface samples carrying their face normals."""
    if n < 1:
        raise InvalidInputError(f"sample count must be >= 1, got {n}")
    if mesh.is_empty:
        raise InvalidInputError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise InvalidInputError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    face = np.searchsorted(cdf, rng.random(n), side="right")
    face = np.minimum(face, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.triangles[face]]
    pts = ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
           + (r1 * r2)[:, None] * v[:, 2])
    return PointCloud(pts, normals=mesh.face_normals()[face])


def _one_way(src: PointCloud, dst: PointCloud, workers: int) -> tuple[Array, Array]:
    dist, idx = cKDTree(dst.points).query(src.points, k=1, workers=workers)
    dots = np.abs(np.sum(src.normals * dst.normals[idx], axis=1))
    return dist, dots


def evaluate(pred: TriangleMesh, gt: TriangleMesh, n: int = 200_000, threshold: float = 0.05,
             seed: int = 0, crop_box=None, workers: int = 1) -> MeshMetrics:
    """Compare two meshes through ``n`` surface samples each, drawn with the same seed."""
    if n < 1:
        raise InvalidInputError(f"sample count must be >= 1, got {n}")
    if threshold <= 0:
        raise InvalidInputError(f"threshold must be positive, got {threshold}")
    if crop_box is not None:
        pred, gt = crop_mesh(pred, crop_box), crop_mesh(gt, crop_box)
    if pred.is_empty or gt.is_empty:
        raise InvalidInputError("both meshes must be non-empty")
    sp = sample_mesh_points(pred, n, seed)
    sg = sample_mesh_points(gt, n, seed)
    d_pg, nc_pg = _one_way(sp, sg, workers)
    d_gp, nc_gp = _one_way(sg, sp, workers)
    acc = float(np.mean(d_pg))
    comp = float(np.mean(d_gp))
    precision = float(np.mean(d_pg < threshold))
    recall = float(np.mean(d_gp < threshold))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    nc = 0.5 * (float(np.mean(nc_pg)) + float(np.mean(nc_gp)))
    return MeshMetrics(acc, comp, 0.5 * (acc + comp), min(nc, 1.0), f, n, threshold, seed,
                       precision, recall)


def chamfer_distance(a: Array, b: Array) -> float:
    """Symmetric mean nearest-point distance between two point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("chamfer distance needs two non-empty point sets")
    dab, _ = cKDTree(b).query(a, k=1)
    dba, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float(np.mean(dab)) + float(np.mean(dba)))


def load_metrics(text: str) -> MeshMetrics:
    """Inverse of ``MeshMetrics.to_json``."""
    d = json.loads(text)
    missing = [k for k in REPORT_KEYS if k not in d]
    if missing:
        raise InvalidInputError(f"metrics record lacks keys {missing}")
    return MeshMetrics(d["accuracy"], d["completion"], d["chamfer_l1"], d["normal_consistency"],
                       d["f_score"], int(d["n_samples"]), d["threshold"], int(d["seed"]))


__all__ = ["MeshMetrics", "REPORT_KEYS", "sample_mesh_points", "evaluate", "crop_mesh",
           "chamfer_distance", "load_metrics"]
