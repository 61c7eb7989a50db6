"""Marching cubes on a dense grid, with the case table derived from face pairing.

Iso-segments on every face are produced by walking the face boundary
counter-clockwise (seen from outside the cell) and pairing each crossing
into the negative region with the next crossing out of it. The rule only
depends on the values on the face, so both cells sharing a face build the
same segments. Chaining the six faces' segments yields closed polygons,
which are fanned from their smallest vertex. The 256-entry table is simply
this procedure evaluated on every sign pattern of a unit cube; the octree
extractor runs the same procedure on subdivided faces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .geometry import Array, InvalidInputError

ZERO_NUDGE = 1e-12
MAX_GRID_CELLS = 10 ** 9

# corner i sits at offset (i & 1, (i >> 1) & 1, (i >> 2) & 1)
CORNER_OFFSETS = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)], dtype=np.int64)


def _corner_index(off) -> int:
    return int(off[0]) | (int(off[1]) << 1) | (int(off[2]) << 2)


# 12 cube edges as (start offset, axis), sorted like global lattice keys
EDGES: list[tuple[tuple[int, int, int], int]] = sorted(
    (tuple(int(c) for c in off), a)
    for off in CORNER_OFFSETS
    for a in range(3)
    if off[a] == 0
)
EDGE_CORNERS = np.array(
    [[_corner_index(o), _corner_index(tuple(o[i] + (i == a) for i in range(3)))] for o, a in EDGES],
    dtype=np.int64,
)
_EDGE_ID = {e: i for i, e in enumerate(EDGES)}


def face_boundary(axis: int, side: int) -> list[tuple[int, int]]:
    """Face corners in (u, v) with u = axis+1, v = axis+2 (mod 3), CCW about the outward normal."""
    loop = [(0, 0), (1, 0), (1, 1), (0, 1)]
    if side == 0:
        loop = [loop[0], loop[3], loop[2], loop[1]]
    return loop


def face_segments(points: Sequence[Hashable], negative: Sequence[bool],
                  edge_key: Callable[[Hashable, Hashable], Hashable]) -> list[tuple[Hashable, Hashable]]:
    """Directed iso-segments on one face.

    ``points`` is the closed boundary walk (CCW about the outward normal),
    ``negative`` the sign of the field at each point. Each crossing into the
    negative region is joined to the next crossing out of it.
    """
    n = len(points)
    crossings = []
    for i in range(n):
        j = (i + 1) % n
        if negative[i] != negative[j]:
            crossings.append((negative[j], edge_key(points[i], points[j])))
    if not crossings:
        return []
    start = next(i for i, (enters, _) in enumerate(crossings) if enters)
    crossings = crossings[start:] + crossings[:start]
    return [(crossings[i][1], crossings[i + 1][1]) for i in range(0, len(crossings), 2)]


def trace_loops(segments: Sequence[tuple[Hashable, Hashable]]) -> list[list[Hashable]]:
    """Chain directed segments into closed loops (each vertex has one in and one out)."""
    nxt = {}
    for a, b in segments:
        if a in nxt:
            raise RuntimeError(f"iso-vertex {a!r} has two outgoing segments")
        nxt[a] = b
    loops = []
    seen = set()
    for start in nxt:
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        v = nxt[start]
        while v != start:
            if v in seen or v not in nxt:
                raise RuntimeError("iso-segments do not close into loops")
            loop.append(v)
            seen.add(v)
            v = nxt[v]
        loops.append(loop)
    return loops


def fan_from_min(loop: Sequence) -> list[tuple]:
    """Fan-triangulate a loop from its smallest vertex (orientation preserved)."""
    if len(loop) < 3:
        return []
    m = min(range(len(loop)), key=lambda i: loop[i])
    lp = list(loop[m:]) + list(loop[:m])
    return [(lp[0], lp[i], lp[i + 1]) for i in range(1, len(lp) - 1)]


def _local_edge_key(p, q) -> int:
    a = next(i for i in range(3) if p[i] != q[i])
    lo = p if p[a] < q[a] else q
    return _EDGE_ID[(lo, a)]


def cube_loops(case: int) -> list[list[int]]:
    """Iso-polygons (as local edge ids) of a unit cube with sign pattern ``case``.

    Bit i of ``case`` set means corner i is negative.
    """
    segments = []
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, 1):
            pts = []
            for a, b in face_boundary(axis, side):
                p = [0, 0, 0]
                p[axis], p[u], p[v] = side, a, b
                pts.append(tuple(p))
            neg = [bool(case >> _corner_index(p) & 1) for p in pts]
            segments.extend(face_segments(pts, neg, _local_edge_key))
    return trace_loops(segments)


def _build_tables() -> tuple[Array, Array]:
    tris = [[t for loop in cube_loops(c) for t in fan_from_min(loop)] for c in range(256)]
    width = max(len(t) for t in tris)
    table = -np.ones((256, width, 3), dtype=np.int64)
    counts = np.zeros(256, dtype=np.int64)
    for c, tl in enumerate(tris):
        counts[c] = len(tl)
        if tl:
            table[c, :len(tl)] = tl
    return table, counts


TRI_TABLE, TRI_COUNT = _build_tables()


@dataclass
class TriangleMesh:
    vertices: Array = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: Array = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    normals: Array | None = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise InvalidInputError("triangle index out of range")

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_areas(self) -> Array:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def face_normals(self) -> Array:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def edge_incidence(self) -> tuple[Array, Array]:
        """Unique undirected edges and how many triangles use each."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def boundary_edge_count(self) -> int:
        if self.is_empty:
            return 0
        _, counts = self.edge_incidence()
        return int(np.sum(counts == 1))

    def euler_characteristic(self) -> int:
        if self.is_empty:
            return 0
        edges, _ = self.edge_incidence()
        used = np.unique(self.triangles)
        return int(len(used) - len(edges) + len(self.triangles))

    def signed_volume(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.sum(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2]))) / 6.0)

    def transformed(self, R: Array, t: Array) -> "TriangleMesh":
        normals = None if self.normals is None else self.normals @ np.asarray(R).T
        return TriangleMesh(self.vertices @ np.asarray(R).T + np.asarray(t), self.triangles.copy(), normals)


def nudge_zeros(values: Array) -> Array:
    return np.where(values == 0.0, ZERO_NUDGE, values)


def interpolate_crossings(pa: Array, pb: Array, va: Array, vb: Array) -> Array:
    t = va / (va - vb)
    return pa + t[:, None] * (pb - pa)


def grid_shape(lo: Array, hi: Array, voxel_size: float) -> tuple[int, int, int]:
    if voxel_size <= 0:
        raise InvalidInputError("voxel size must be positive")
    ext = np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)
    if np.any(ext <= 0):
        raise InvalidInputError("box must have positive extent")
    n = np.maximum(np.ceil(ext / voxel_size - 1e-9).astype(np.int64), 1)
    if float(np.prod(n.astype(np.float64))) > MAX_GRID_CELLS:
        raise InvalidInputError(f"grid of {tuple(n)} cells exceeds the {MAX_GRID_CELLS:g} cell limit")
    return int(n[0]), int(n[1]), int(n[2])


def uniform_marching_cubes(f: Callable[[Array], tuple[Array, Array]], box, voxel_size: float,
                           chunk_points: int = 1 << 21) -> TriangleMesh:
    """Dense-grid marching cubes of ``f = 0`` over ``box = (lo, hi)``.

    ``f`` maps an (M, 3) array to ``(values, valid)``. Cells with an invalid
    corner produce no geometry. Vertices come out sorted by lattice edge.
    """
    lo = np.asarray(box[0], dtype=np.float64)
    nx, ny, nz = grid_shape(lo, box[1], voxel_size)
    npts = np.array([nx + 1, ny + 1, nz + 1], dtype=np.int64)

    # sample slab by slab along x to bound memory
    vals = np.empty(tuple(npts))
    valid = np.empty(tuple(npts), dtype=bool)
    jj, kk = np.meshgrid(np.arange(npts[1]), np.arange(npts[2]), indexing="ij")
    per_slab = int(npts[1] * npts[2])
    step = max(1, chunk_points // per_slab)
    for i0 in range(0, npts[0], step):
        i1 = min(npts[0], i0 + step)
        ii = np.arange(i0, i1)[:, None, None]
        pts = np.stack(np.broadcast_arrays(lo[0] + ii * voxel_size, lo[1] + jj[None] * voxel_size,
                                           lo[2] + kk[None] * voxel_size), axis=-1).reshape(-1, 3)
        v, ok = f(pts)
        vals[i0:i1] = np.asarray(v, dtype=np.float64).reshape(i1 - i0, npts[1], npts[2])
        valid[i0:i1] = np.asarray(ok, dtype=bool).reshape(i1 - i0, npts[1], npts[2])
    vals = nudge_zeros(vals)
    return _mc_from_samples(vals, valid, lo, voxel_size)


def _mc_from_samples(vals: Array, valid: Array, lo: Array, voxel: float) -> TriangleMesh:
    npts = np.array(vals.shape, dtype=np.int64)
    neg = vals < 0
    case = np.zeros(tuple(npts - 1), dtype=np.int64)
    allvalid = np.ones(tuple(npts - 1), dtype=bool)
    for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        sl = (slice(dx, dx + npts[0] - 1), slice(dy, dy + npts[1] - 1), slice(dz, dz + npts[2] - 1))
        case |= neg[sl].astype(np.int64) << c
        allvalid &= valid[sl]
    active = allvalid & (TRI_COUNT[case] > 0)
    cells = np.argwhere(active)
    if len(cells) == 0:
        return TriangleMesh()
    ccase = case[tuple(cells.T)]
    tris_local = TRI_TABLE[ccase]  # (C, T, 3)
    has = tris_local[:, :, 0] >= 0
    cell_of = np.broadcast_to(np.arange(len(cells))[:, None], has.shape)[has]
    tl = tris_local[has]  # (F, 3) local edge ids

    edge_off = np.array([o for o, _ in EDGES], dtype=np.int64)
    edge_axis = np.array([a for _, a in EDGES], dtype=np.int64)
    start = cells[cell_of][:, None, :] + edge_off[tl]  # (F, 3, 3) lattice coords of edge starts
    axis = edge_axis[tl]
    keys = ((start[..., 0] * npts[1] + start[..., 1]) * npts[2] + start[..., 2]) * 3 + axis
    ukeys, inv = np.unique(keys.ravel(), return_inverse=True)
    tris = inv.reshape(-1, 3)

    ax = ukeys % 3
    lin = ukeys // 3
    a = np.stack([lin // (npts[1] * npts[2]), (lin // npts[2]) % npts[1], lin % npts[2]], axis=-1)
    b = a + np.eye(3, dtype=np.int64)[ax]
    va = vals[tuple(a.T)]
    vb = vals[tuple(b.T)]
    pa = lo + a * voxel
    pb = lo + b * voxel
    verts = interpolate_crossings(pa, pb, va, vb)
    return TriangleMesh(verts, tris)
