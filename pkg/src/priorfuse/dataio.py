"""Dataset manifests and PNG depth / normal maps.

A manifest is a JSON object::

    {
      "root": ".",                      # relative to the manifest file
      "depth_scale": 0.0001,            # metres per 16-bit depth unit
      "normal_frame": "camera",         # frame of the prior normal PNGs
      "intrinsics": {"fx": ..., "fy": ..., "cx": ..., "cy": ..., "width": ..., "height": ...},
      "frames": [
        {"id": "000", "depth": "depth/000.png", "normal": "normal/000.png",
         "color": "color/000.png", "pose": [[...4x4 camera-to-world...]],
         "intrinsics": {...}}           # color and per-frame intrinsics optional
      ]
    }
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .fusion import Frame
from .geometry import CAMERA, WORLD, Array, CameraIntrinsics, InvalidInputError, NormalMap, RigidPose, orthonormalize
from .meshio import atomic_write_bytes, atomic_write_text

POSE_TOLERANCE = 1e-4
# decoded normals shorter than this are treated as "no normal"
MIN_NORMAL_NORM = 0.5
# 8-bit code for an invalid normal; decodes to a vector of length ~0.007
INVALID_NORMAL_RGB = 128


class FrameLoadError(InvalidInputError):
    def __init__(self, frame_id: str, message: str):
        super().__init__(f"frame {frame_id!r}: {message}")
        self.frame_id = frame_id


# --- PNG codecs -----------------------------------------------------------------

def _png_bytes(arr: Array) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def encode_depth(depth: Array, depth_scale: float) -> Array:
    depth = np.asarray(depth, dtype=np.float64)
    if depth_scale <= 0:
        raise InvalidInputError("depth_scale must be positive")
    q = np.round(depth / depth_scale)
    if np.any(q > np.iinfo(np.uint16).max) or np.any(q < 0):
        raise InvalidInputError(f"depth exceeds the 16-bit range at scale {depth_scale}")
    return q.astype(np.uint16)


def decode_depth(raw: Array, depth_scale: float) -> Array:
    return np.asarray(raw, dtype=np.float64) * depth_scale


def encode_normals(normals: Array) -> Array:
    n = np.asarray(normals, dtype=np.float64)
    valid = np.any(n != 0, axis=-1)
    rgb = np.round((n + 1.0) * 127.5)
    rgb = np.clip(rgb, 0, 255).astype(np.uint8)
    rgb[~valid] = INVALID_NORMAL_RGB
    return rgb


def decode_normals(rgb: Array) -> Array:
    n = 2.0 * (np.asarray(rgb, dtype=np.float64)[..., :3] / 255.0) - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = norm >= MIN_NORMAL_NORM
    return np.where(ok, n / np.where(ok, norm, 1.0), 0.0)


def save_depth_png(path, depth: Array, depth_scale: float) -> None:
    atomic_write_bytes(path, _png_bytes(encode_depth(depth, depth_scale)))


def load_depth_png(path, depth_scale: float) -> Array:
    with Image.open(path) as im:
        raw = np.array(im)
    if raw.ndim != 2:
        raise InvalidInputError(f"{path}: depth PNG must be single channel")
    return decode_depth(raw, depth_scale)


def save_normal_png(path, normals: Array) -> None:
    atomic_write_bytes(path, _png_bytes(encode_normals(normals)))


def load_normal_png(path) -> Array:
    with Image.open(path) as im:
        raw = np.array(im.convert("RGB"))
    return decode_normals(raw)


# --- manifests ------------------------------------------------------------------

def pose_from_matrix(T, tol: float = POSE_TOLERANCE) -> RigidPose:
    """Validate a 4x4 camera-to-world matrix and snap its rotation to SO(3)."""
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        raise InvalidInputError(f"pose must be a finite 4x4 matrix, got shape {T.shape}")
    if np.abs(T[3] - [0, 0, 0, 1]).max() > tol:
        raise InvalidInputError("pose bottom row must be [0, 0, 0, 1]")
    R = T[:3, :3]
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol:
        raise InvalidInputError(f"rotation is not orthonormal (error {err:.3g} > {tol})")
    if np.linalg.det(R) <= 0:
        raise InvalidInputError("rotation is a reflection")
    return RigidPose(orthonormalize(R), T[:3, 3])


def _intrinsics(d) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                                int(d["width"]), int(d["height"]))
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidInputError(f"bad intrinsics record: {e}") from None


@dataclass
class FrameRecord:
    frame_id: str
    depth: str
    normal: str
    pose: list
    color: Optional[str] = None
    intrinsics: Optional[dict] = None


@dataclass
class DatasetManifest:
    root: Path
    frames: list
    intrinsics: Optional[dict] = None
    depth_scale: float = 0.001
    normal_frame: str = CAMERA

    def __post_init__(self) -> None:
        if not self.depth_scale > 0:
            raise InvalidInputError(f"depth_scale must be positive, got {self.depth_scale}")
        if self.normal_frame not in (CAMERA, WORLD):
            raise InvalidInputError(f"normal_frame must be 'camera' or 'world', got {self.normal_frame!r}")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except OSError as e:
            raise InvalidInputError(f"cannot read manifest {path}: {e}") from None
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"manifest {path} is not valid JSON: {e}") from None
        if not isinstance(d, dict) or not isinstance(d.get("frames"), list):
            raise InvalidInputError(f"manifest {path} needs a 'frames' list")
        frames = []
        for i, fr in enumerate(d["frames"]):
            fid = str(fr.get("id", i)) if isinstance(fr, dict) else str(i)
            if not isinstance(fr, dict) or not all(k in fr for k in ("depth", "normal", "pose")):
                raise FrameLoadError(fid, "record needs 'depth', 'normal' and 'pose'")
            frames.append(FrameRecord(fid, fr["depth"], fr["normal"], fr["pose"], fr.get("color"),
                                      fr.get("intrinsics")))
        ids = [f.frame_id for f in frames]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("frame ids must be unique")
        root = (path.parent / d.get("root", ".")).resolve()
        return cls(root, frames, d.get("intrinsics"), float(d.get("depth_scale", 0.001)),
                   d.get("normal_frame", CAMERA))

    def to_json(self, root_rel: str = ".") -> str:
        frames = []
        for f in self.frames:
            rec = {"id": f.frame_id, "depth": f.depth, "normal": f.normal, "pose": f.pose}
            if f.color is not None:
                rec["color"] = f.color
            if f.intrinsics is not None:
                rec["intrinsics"] = f.intrinsics
            frames.append(rec)
        out = {"root": root_rel, "depth_scale": self.depth_scale, "normal_frame": self.normal_frame,
               "intrinsics": self.intrinsics, "frames": frames}
        return json.dumps(out, indent=1) + "\n"


def _load_frame(man: DatasetManifest, rec: FrameRecord) -> Frame:
    fid = rec.frame_id
    try:
        intr_d = rec.intrinsics if rec.intrinsics is not None else man.intrinsics
        if intr_d is None:
            raise InvalidInputError("no intrinsics (shared or per-frame)")
        intr = _intrinsics(intr_d)
        pose = pose_from_matrix(rec.pose)
        paths = {"depth": man.root / rec.depth, "normal": man.root / rec.normal}
        if rec.color is not None:
            paths["color"] = man.root / rec.color
        for kind, p in paths.items():
            if not p.is_file():
                raise InvalidInputError(f"missing {kind} file {p}")
        depth = load_depth_png(paths["depth"], man.depth_scale)
        normals = load_normal_png(paths["normal"])
        color = None
        if "color" in paths:
            with Image.open(paths["color"]) as im:
                color = np.array(im.convert("RGB"), dtype=np.float64) / 255.0
        if depth.shape != intr.shape or normals.shape[:2] != intr.shape:
            raise InvalidInputError(f"image size does not match intrinsics {intr.shape}")
        return Frame(intr, pose, depth, NormalMap(normals, man.normal_frame), color, frame_id=fid)
    except FrameLoadError:
        raise
    except (InvalidInputError, OSError, ValueError) as e:
        raise FrameLoadError(fid, str(e)) from None


def load_dataset(path) -> list:
    """Load every frame of a manifest; any failure names the offending frame."""
    man = DatasetManifest.load(path)
    return [_load_frame(man, rec) for rec in man.frames]


def write_dataset(out_dir, frames: Sequence[Frame], depth_scale: float = 0.0001,
                  manifest_name: str = "manifest.json") -> Path:
    """Write frames as PNGs plus a manifest; normals are stored in camera frame."""
    out = Path(out_dir)
    records = []
    shared = frames[0].intrinsics.to_dict() if frames else None
    for i, fr in enumerate(frames):
        fid = fr.frame_id or f"{i:03d}"
        save_depth_png(out / "depth" / f"{fid}.png", fr.depth, depth_scale)
        cam = fr.normals.to_camera(fr.pose) if fr.normals is not None else NormalMap(
            np.zeros(fr.depth.shape + (3,)), CAMERA)
        save_normal_png(out / "normal" / f"{fid}.png", cam.values)
        intr = fr.intrinsics.to_dict()
        records.append(FrameRecord(fid, f"depth/{fid}.png", f"normal/{fid}.png",
                                   fr.pose.matrix().tolist(),
                                   intrinsics=None if intr == shared else intr))
    man = DatasetManifest(out, records, shared, depth_scale, CAMERA)
    path = out / manifest_name
    atomic_write_text(path, man.to_json())
    return path


__all__ = ["FrameLoadError", "DatasetManifest", "FrameRecord", "load_dataset", "write_dataset",
           "pose_from_matrix", "encode_depth", "decode_depth", "encode_normals", "decode_normals",
           "save_depth_png", "load_depth_png", "save_normal_png", "load_normal_png"]
