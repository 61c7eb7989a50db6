"""Depth-adaptive truncated signed distance isofunction over posed depth + normal maps.

For a query point x and frame j with camera centre p_j and principal axis
c_z, the signed difference is ``s_j = d_j(x) - (x - p_j) . c_z`` where
``d_j(x)`` is the bilinearly interpolated depth at the projection of x. A
frame contributes only when ``s_j >= -tau * d_j(x)``; positive values are
clamped at ``+tau * d_j(x)``. The isofunction is ``f(x) = sum_j w_j s_j``,
positive in free space, with weights from a two-pass normal agreement rule.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import (
    Array,
    CameraIntrinsics,
    InvalidInputError,
    NormalMap,
    RigidPose,
    backproject,
    bilinear_sample,
    project,
)


@dataclass(frozen=True)
class FusionConfig:
    tau_rel: float = 0.05
    edge_rel: float = 0.02
    normal_cutoff_deg: float = 60.0

    def __post_init__(self) -> None:
        if not 0 < self.tau_rel < 1:
            raise InvalidInputError(f"tau_rel must be in (0, 1), got {self.tau_rel}")
        if self.edge_rel <= 0:
            raise InvalidInputError(f"edge_rel must be positive, got {self.edge_rel}")
        if not 0 < self.normal_cutoff_deg <= 90:
            raise InvalidInputError(f"normal_cutoff_deg must be in (0, 90], got {self.normal_cutoff_deg}")


@dataclass
class Frame:
    """One posed capture. ``normals`` may be in camera or world frame."""

    intrinsics: CameraIntrinsics
    pose: RigidPose
    depth: Array
    normals: Optional[NormalMap] = None
    color: Optional[Array] = None
    frame_id: str = ""

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != self.intrinsics.shape:
            raise InvalidInputError(
                f"frame {self.frame_id!r}: depth {self.depth.shape} does not match intrinsics {self.intrinsics.shape}")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise InvalidInputError(f"frame {self.frame_id!r}: depth must be finite and non-negative")
        if self.normals is not None and self.normals.shape != self.intrinsics.shape:
            raise InvalidInputError(f"frame {self.frame_id!r}: normal map size mismatch")

    def world_normals(self) -> NormalMap:
        if self.normals is None:
            raise InvalidInputError(f"frame {self.frame_id!r} has no normal map")
        return self.normals.to_world(self.pose)


def edge_filter_depth(depth: Array, cfg: FusionConfig = FusionConfig()) -> tuple[Array, Array]:
    """Invalidate pixels that differ from any valid 8-neighbour by more than ``edge_rel * d``.

    Returns the filtered depth and the keep mask.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    valid = depth > 0
    pad = np.pad(depth, 1)
    pvalid = np.pad(valid, 1)
    bad = np.zeros_like(valid)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nb = pad[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
            nbv = pvalid[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
            bad |= nbv & (np.abs(nb - depth) > cfg.edge_rel * depth)
    keep = valid & ~bad
    return np.where(keep, depth, 0.0), keep


@dataclass
class _PreparedFrame:
    intrinsics: CameraIntrinsics
    pose: RigidPose
    depth: Array
    normals: Array  # world frame, (H, W, 3)
    mask: Array


def prepare_frame(frame: Frame, cfg: FusionConfig, edge_filter: bool = True) -> _PreparedFrame:
    """Edge-filter depth, share the mask with the normals and move normals to world frame."""
    depth = frame.depth
    if edge_filter:
        depth, _ = edge_filter_depth(depth, cfg)
    normals = frame.world_normals().values
    mask = (depth > 0) & np.any(normals != 0, axis=-1)
    return _PreparedFrame(frame.intrinsics, frame.pose, np.where(mask, depth, 0.0),
                          np.where(mask[..., None], normals, 0.0), mask)


@dataclass
class FrameSamples:
    """Per-frame quantities at a batch of query points."""

    s: Array        # truncated signed difference
    d: Array        # interpolated observed depth d_j(x)
    n: Array        # interpolated world normal n_j(x)
    r: Array        # unit ray from camera centre to x
    valid: Array


def tsdf_contributions(frame: _PreparedFrame, x: Array, cfg: FusionConfig) -> FrameSamples:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    u, v, z = project(x, frame.intrinsics, frame.pose)
    front = z > 0
    u = np.where(front, u, -1.0)
    v = np.where(front, v, -1.0)
    d, ok_d = bilinear_sample(frame.depth, u, v, frame.mask)
    n, ok_n = bilinear_sample(frame.normals, u, v, frame.mask, normalize=True)
    ok = front & ok_d & ok_n & (d > 0)
    s = d - z
    band = cfg.tau_rel * d
    ok &= s >= -band
    s = np.where(ok, np.minimum(s, band), 0.0)
    ray = x - frame.pose.center
    rn = np.linalg.norm(ray, axis=1, keepdims=True)
    ray = ray / np.where(rn > 0, rn, 1.0)
    return FrameSamples(s, np.where(ok, d, 1.0), n, ray, ok)


def weight_first_pass(fs: FrameSamples) -> Array:
    """``s * (-r . n) / d**2``; -inf where the frame does not contribute."""
    w = fs.s * (-np.sum(fs.r * fs.n, axis=1)) / fs.d ** 2
    return np.where(fs.valid, w, -np.inf)


def weight_agreement(fs: FrameSamples, n_ref: Array, cos_cutoff: float) -> Array:
    """Second-pass weight: normal agreement times frontal viewing over squared depth."""
    agree = np.sum(fs.n * n_ref, axis=1)
    facing = -np.sum(fs.r * n_ref, axis=1)
    w = np.maximum(0.0, agree) * np.maximum(0.0, facing) / fs.d ** 2
    return np.where(fs.valid & (agree >= cos_cutoff), w, 0.0)


WeightFn = Callable[[FrameSamples, Array, float], Array]


@dataclass
class FusionVolume:
    """Immutable set of prepared frames defining the isofunction."""

    frames: list
    config: FusionConfig = field(default_factory=FusionConfig)
    weight_fn: WeightFn = weight_agreement
    workers: int = 1
    chunk: int = 1 << 16

    @classmethod
    def from_frames(cls, frames: Sequence[Frame], config: FusionConfig = FusionConfig(),
                    edge_filter: bool = True, **kw) -> "FusionVolume":
        return cls([prepare_frame(f, config, edge_filter) for f in frames], config, **kw)

    def samples(self, x: Array) -> list[FrameSamples]:
        return [tsdf_contributions(fr, x, self.config) for fr in self.frames]

    def max_weight_normal(self, x: Array, samples: Optional[list] = None) -> tuple[Array, Array]:
        """Normal of the frame with the largest first-pass weight (lowest index on ties)."""
        samples = samples if samples is not None else self.samples(x)
        w = np.stack([weight_first_pass(fs) for fs in samples], axis=0)
        best = np.argmax(w, axis=0)
        any_valid = np.any(np.stack([fs.valid for fs in samples]), axis=0)
        normals = np.stack([fs.n for fs in samples], axis=0)
        n = normals[best, np.arange(len(best))]
        return np.where(any_valid[:, None], n, 0.0), any_valid

    def _evaluate_chunk(self, x: Array) -> tuple[Array, Array]:
        if not self.frames:
            return np.zeros(len(x)), np.zeros(len(x), dtype=bool)
        samples = self.samples(x)
        n_ref, any_valid = self.max_weight_normal(x, samples)
        cos_cut = np.cos(np.radians(self.config.normal_cutoff_deg))
        f = np.zeros(len(x))
        wsum = np.zeros(len(x))
        for fs in samples:  # fixed frame order
            w = self.weight_fn(fs, n_ref, cos_cut)
            f += w * fs.s
            wsum += w
        ok = any_valid & (wsum > 0)
        return np.where(ok, f, 0.0), ok

    def evaluate(self, x: Array) -> tuple[Array, Array]:
        """``(f, valid)`` at an (M, 3) batch of world points."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        chunks = [x[s:s + self.chunk] for s in range(0, len(x), self.chunk)]
        if not chunks:
            return np.zeros(0), np.zeros(0, dtype=bool)
        if self.workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                parts = list(ex.map(self._evaluate_chunk, chunks))
        else:
            parts = [self._evaluate_chunk(c) for c in chunks]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    __call__ = evaluate

    def hint_cloud(self) -> Array:
        """Back-projected valid depth of every frame."""
        pts = [backproject(fr.depth, fr.intrinsics, fr.pose).points for fr in self.frames]
        return np.concatenate(pts) if pts else np.zeros((0, 3))


def tsdf_contribution(frame: Frame, x, cfg: FusionConfig = FusionConfig()) -> tuple[float, bool]:
    """Truncated signed difference of one frame at one point (no edge filtering)."""
    fs = tsdf_contributions(prepare_frame(frame, cfg, edge_filter=False), np.asarray(x)[None], cfg)
    return float(fs.s[0]), bool(fs.valid[0])


def max_weight_normal(frames: Sequence[Frame], x, cfg: FusionConfig = FusionConfig()) -> tuple[Array, bool]:
    vol = FusionVolume.from_frames(frames, cfg, edge_filter=False)
    n, ok = vol.max_weight_normal(np.asarray(x, dtype=np.float64)[None])
    return n[0], bool(ok[0])


def isofunction_eval(volume: FusionVolume, x) -> tuple[float, bool]:
    f, ok = volume.evaluate(np.asarray(x, dtype=np.float64)[None])
    return float(f[0]), bool(ok[0])
