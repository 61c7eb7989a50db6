"""Binary little-endian PLY meshes and atomic file writes."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .geometry import InvalidInputError
from .marching import TriangleMesh


class PlyParseError(InvalidInputError):
    """Malformed PLY data; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def mesh_to_ply_bytes(mesh: TriangleMesh) -> bytes:
    has_n = mesh.normals is not None and len(mesh.normals) == len(mesh.vertices)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}",
              "property float x", "property float y", "property float z"]
    if has_n:
        header += ["property float nx", "property float ny", "property float nz"]
    header += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices",
               "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")
    cols = [mesh.vertices] + ([mesh.normals] if has_n else [])
    verts = np.ascontiguousarray(np.hstack(cols), dtype="<f4")
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    return head + verts.tobytes() + faces.tobytes()


def save_mesh(path, mesh: TriangleMesh) -> None:
    atomic_write_bytes(path, mesh_to_ply_bytes(mesh))


def _parse_header(data: bytes) -> tuple[list, int]:
    if not data.startswith(b"ply\n") and not data.startswith(b"ply\r\n"):
        raise PlyParseError("missing 'ply' magic", 0)
    end = data.find(b"end_header")
    if end < 0:
        raise PlyParseError("header has no end_header line", len(data))
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyParseError("header not terminated by newline", len(data))
    body = nl + 1
    elements: list = []
    fmt_seen = False
    offset = 0
    for raw in data[:body].split(b"\n"):
        line_at = offset
        offset += len(raw) + 1
        words = raw.decode("ascii", errors="replace").strip().split()
        if not words or words[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if words[0] == "format":
            if len(words) != 3 or words[1] != "binary_little_endian":
                raise PlyParseError(f"unsupported format {' '.join(words[1:])!r}", line_at)
            fmt_seen = True
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PlyParseError("malformed element line", line_at)
            elements.append({"name": words[1], "count": int(words[2]), "props": []})
        elif words[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", line_at)
            if len(words) == 5 and words[1] == "list":
                if words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise PlyParseError("unknown list property type", line_at)
                elements[-1]["props"].append((words[4], _PLY_TYPES[words[2]], _PLY_TYPES[words[3]]))
            elif len(words) == 3 and words[1] in _PLY_TYPES:
                elements[-1]["props"].append((words[2], _PLY_TYPES[words[1]], None))
            else:
                raise PlyParseError("malformed property line", line_at)
        else:
            raise PlyParseError(f"unexpected header keyword {words[0]!r}", line_at)
    if not fmt_seen:
        raise PlyParseError("header lacks a format line", body)
    return elements, body


def mesh_from_ply_bytes(data: bytes) -> TriangleMesh:
    elements, pos = _parse_header(data)
    verts = normals = None
    tris = np.zeros((0, 3), dtype=np.int64)
    for el in elements:
        props = el["props"]
        lists = [p for p in props if p[2] is not None]
        if not lists:
            dt = np.dtype([(name, "<" + t) for name, t, _ in props])
            need = dt.itemsize * el["count"]
            if pos + need > len(data):
                raise PlyParseError(f"truncated {el['name']} data", len(data))
            arr = np.frombuffer(data, dtype=dt, count=el["count"], offset=pos)
            pos += need
            if el["name"] == "vertex":
                names = dt.names
                for axis in "xyz":
                    if axis not in names:
                        raise PlyParseError(f"vertex element lacks property {axis}", pos - need)
                verts = np.stack([arr[a].astype(np.float64) for a in "xyz"], axis=1)
                if all(a in names for a in ("nx", "ny", "nz")):
                    normals = np.stack([arr[a].astype(np.float64) for a in ("nx", "ny", "nz")], axis=1)
            continue
        if el["name"] != "face" or len(props) != 1:
            raise PlyParseError(f"unsupported list layout in element {el['name']!r}", pos)
        _, ct, it = props[0]
        cdt, idt = np.dtype("<" + ct), np.dtype("<" + it)
        fixed = np.dtype([("n", cdt), ("idx", idt, (3,))])
        need = fixed.itemsize * el["count"]
        if pos + need > len(data):
            raise PlyParseError("truncated face data", len(data))
        arr = np.frombuffer(data, dtype=fixed, count=el["count"], offset=pos)
        if np.any(arr["n"] != 3):
            bad = int(np.argmax(arr["n"] != 3))
            raise PlyParseError("only triangular faces are supported", pos + bad * fixed.itemsize)
        tris = arr["idx"].astype(np.int64)
        pos += need
    if verts is None:
        raise PlyParseError("no vertex element", pos)
    if pos != len(data):
        raise PlyParseError(f"{len(data) - pos} trailing bytes after last element", pos)
    if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
        raise PlyParseError("face index out of range", pos)
    return TriangleMesh(verts, tris, normals)


def load_mesh(path) -> TriangleMesh:
    return mesh_from_ply_bytes(Path(path).read_bytes())


__all__ = ["PlyParseError", "save_mesh", "load_mesh", "mesh_to_ply_bytes", "mesh_from_ply_bytes",
           "atomic_write_bytes", "atomic_write_text"]
