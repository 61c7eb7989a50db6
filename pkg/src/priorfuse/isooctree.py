"""Point-hint octrees and crack-free isosurface extraction on unbalanced trees.

All geometry lives on an integer lattice at the finest resolution
(``2**max_depth`` steps per root edge). Leaf corners are deduplicated on that
lattice, so a value is sampled once and shared by every leaf touching it.

Extraction resolves each leaf edge and face at the finest subdivision
present on either side: an edge is split wherever its midpoint is a leaf
corner, a face wherever its centre is. Iso-vertices are keyed by the finest
lattice edge they lie on, and face segments come from the subdivided faces,
so a coarse leaf picks up exactly the vertices and segments of its finer
neighbours. Leaves without any subdivision on their boundary go through
the dense marching-cubes table, which is built from the same face rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Array, InvalidInputError, PointCloud
from .marching import (
    CORNER_OFFSETS,
    EDGES,
    TRI_COUNT,
    TRI_TABLE,
    TriangleMesh,
    face_boundary,
    face_segments,
    interpolate_crossings,
    nudge_zeros,
    trace_loops,
)

log = logging.getLogger(__name__)

Isofunction = Callable[[Array], tuple[Array, Array]]


@dataclass(frozen=True)
class OctreeConfig:
    max_depth: int = 10
    expand_threshold: int = 50
    root_box: Optional[tuple] = None  # (lo, hi); defaults to the padded hint AABB
    initial_depth: int = 3
    padding: float = 0.05

    def __post_init__(self) -> None:
        if not 1 <= self.max_depth <= 12:
            raise InvalidInputError(f"max_depth must be in [1, 12], got {self.max_depth}")
        if self.expand_threshold < 1:
            raise InvalidInputError("expand_threshold must be >= 1")
        if self.initial_depth < 0:
            raise InvalidInputError("initial_depth must be >= 0")
        if self.root_box is not None:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in self.root_box)
            if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
                raise InvalidInputError("root_box must have positive extent on all axes")


@dataclass
class HintOctree:
    """Leaves per level (integer cell coords at that level) over a cubic root."""

    origin: Array
    width: float
    max_depth: int
    leaves: dict[int, Array]
    corner_keys: Array = field(default=None, repr=False)
    values: Optional[Array] = field(default=None, repr=False)
    valid: Optional[Array] = field(default=None, repr=False)
    evaluations: int = 0

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.corner_keys is None:
            self.corner_keys = self._collect_corners()

    @property
    def resolution(self) -> int:
        return 1 << self.max_depth

    @property
    def finest_width(self) -> float:
        return self.width / self.resolution

    @property
    def n_leaves(self) -> int:
        return int(sum(len(v) for v in self.leaves.values()))

    @property
    def depth_histogram(self) -> dict[int, int]:
        return {lvl: len(c) for lvl, c in sorted(self.leaves.items()) if len(c)}

    def lattice_key(self, p: Array) -> Array:
        n1 = self.resolution + 1
        p = np.asarray(p, dtype=np.int64)
        return (p[..., 0] * n1 + p[..., 1]) * n1 + p[..., 2]

    def key_to_lattice(self, key: Array) -> Array:
        n1 = self.resolution + 1
        key = np.asarray(key, dtype=np.int64)
        return np.stack([key // (n1 * n1), (key // n1) % n1, key % n1], axis=-1)

    def lattice_to_world(self, p: Array) -> Array:
        return self.origin + np.asarray(p, dtype=np.int64) * (self.width / self.resolution)

    def leaf_origins(self) -> tuple[Array, Array]:
        """Fine-lattice origin and edge length of every leaf, ordered by level then coords."""
        origins, sizes = [], []
        for lvl in sorted(self.leaves):
            c = self.leaves[lvl]
            if len(c) == 0:
                continue
            s = 1 << (self.max_depth - lvl)
            origins.append(c * s)
            sizes.append(np.full(len(c), s, dtype=np.int64))
        if not origins:
            return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.concatenate(origins), np.concatenate(sizes)

    def _collect_corners(self) -> Array:
        o, s = self.leaf_origins()
        pts = o[:, None, :] + s[:, None, None] * CORNER_OFFSETS[None]
        return np.unique(self.lattice_key(pts.reshape(-1, 3)))

    def lookup(self, keys: Array) -> Array:
        """Index of each lattice key in the corner table, -1 where absent."""
        keys = np.asarray(keys, dtype=np.int64)
        idx = np.searchsorted(self.corner_keys, keys)
        idx = np.minimum(idx, len(self.corner_keys) - 1)
        return np.where(self.corner_keys[idx] == keys, idx, -1)

    def corner_positions(self) -> Array:
        return self.lattice_to_world(self.key_to_lattice(self.corner_keys))

    def leaf_boxes(self) -> tuple[Array, Array]:
        o, s = self.leaf_origins()
        h = self.width / self.resolution
        return self.origin + o * h, self.origin + (o + s[:, None]) * h


def cubic_root(lo, hi, padding: float = 0.0) -> tuple[Array, float]:
    """Smallest cube holding the box ``[lo, hi]`` grown by ``padding`` of its extent."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    lo = lo - padding * ext
    hi = hi + padding * ext
    width = float(np.max(hi - lo))
    if width <= 0:
        raise InvalidInputError("root box must have positive extent")
    center = 0.5 * (lo + hi)
    return center - 0.5 * width, width


def build_octree(origin, width: float, max_depth: int,
                 should_split: Callable[[int, Array, float], Array],
                 initial_depth: int = 3) -> HintOctree:
    """Generic top-down construction.

    Every cell down to ``initial_depth`` is split; below that a cell at
    ``level`` with centres ``centers`` and width ``h`` splits where
    ``should_split(level, centers, h)`` is True.
    """
    origin = np.asarray(origin, dtype=np.float64)
    init = min(initial_depth, max_depth)
    n = 1 << init
    grid = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"), -1)
    active = grid.reshape(-1, 3).astype(np.int64)
    leaves: dict[int, Array] = {}
    for lvl in range(init, max_depth):
        h = width / (1 << lvl)
        centers = origin + (active + 0.5) * h
        split = np.asarray(should_split(lvl, centers, h), dtype=bool) if len(active) else np.zeros(0, bool)
        leaves[lvl] = active[~split]
        parents = active[split]
        active = (2 * parents[:, None, :] + CORNER_OFFSETS[None]).reshape(-1, 3)
        active = active[np.lexsort(active.T[::-1])]
    leaves[max_depth] = active
    return HintOctree(origin, width, max_depth, leaves)


def build_hint_octree(hints: PointCloud | Array, cfg: OctreeConfig = OctreeConfig()) -> HintOctree:
    """Split a cell of width h while at least ``expand_threshold`` hints lie within h of its centre."""
    pts = hints.points if isinstance(hints, PointCloud) else np.asarray(hints, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInputError("hint cloud is empty")
    if cfg.root_box is not None:
        origin, width = cubic_root(*cfg.root_box)
    else:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        # a flat cloud still needs a non-degenerate box
        ext = np.maximum(hi - lo, 1e-6 * max(1.0, float(np.max(hi - lo))))
        origin, width = cubic_root(lo, lo + ext, cfg.padding)
    tree = cKDTree(pts)

    def should_split(level: int, centers: Array, h: float) -> Array:
        counts = tree.query_ball_point(centers, r=h, return_length=True)
        return np.asarray(counts) >= cfg.expand_threshold

    return build_octree(origin, width, cfg.max_depth, should_split, cfg.initial_depth)


def uniform_octree(lo, hi, depth: int) -> HintOctree:
    """Tree refined everywhere to ``depth`` over the cube spanning ``[lo, hi]``."""
    origin, width = cubic_root(lo, hi)
    return build_octree(origin, width, depth, lambda l, c, h: np.ones(len(c), bool), initial_depth=depth)


def sample_corners(tree: HintOctree, f: Isofunction, chunk: int = 1 << 20) -> HintOctree:
    """Evaluate ``f`` once per unique corner; zero values are nudged positive."""
    pos = tree.corner_positions()
    vals = np.empty(len(pos))
    ok = np.empty(len(pos), dtype=bool)
    for s in range(0, len(pos), chunk):
        v, m = f(pos[s:s + chunk])
        vals[s:s + chunk] = v
        ok[s:s + chunk] = m
    tree.values = nudge_zeros(vals)
    tree.valid = ok & np.isfinite(vals)
    tree.evaluations = len(pos)
    return tree


# --- extraction -----------------------------------------------------------------

_EDGE_OFF = np.array([o for o, _ in EDGES], dtype=np.int64)
_EDGE_AXIS = np.array([a for _, a in EDGES], dtype=np.int64)
_EDGE_MID = 2 * _EDGE_OFF + np.eye(3, dtype=np.int64)[_EDGE_AXIS]  # in half-cell units
_FACE_MID = np.array([[1 if i != a else 2 * s for i in range(3)] for a in range(3) for s in (0, 1)],
                     dtype=np.int64)


class _LeafWalker:
    """Builds the iso-polygons of one leaf whose boundary is subdivided."""

    def __init__(self, tree: HintOctree):
        self.tree = tree
        self.n1 = tree.resolution + 1
        keys = tree.corner_keys
        self.index = {int(k): i for i, k in enumerate(keys)}
        self.values = tree.values
        self.valid = tree.valid

    def key(self, p) -> int:
        return (p[0] * self.n1 + p[1]) * self.n1 + p[2]

    def has(self, p) -> bool:
        return self.key(p) in self.index

    def edge_points(self, p, q) -> list:
        """Lattice points from p towards q (q excluded) on the finest edge subdivision."""
        length = sum(abs(q[i] - p[i]) for i in range(3))
        if length > 1 and length % 2 == 0:
            m = tuple((p[i] + q[i]) // 2 for i in range(3))
            if self.has(m):
                return self.edge_points(p, m) + self.edge_points(m, q)
        return [p]

    def sub_faces(self, o, axis: int, size: int) -> list:
        u, v = (axis + 1) % 3, (axis + 2) % 3
        if size > 1:
            half = size // 2
            c = list(o)
            c[u] += half
            c[v] += half
            if self.has(tuple(c)):
                out = []
                for du in (0, half):
                    for dv in (0, half):
                        q = list(o)
                        q[u] += du
                        q[v] += dv
                        out.extend(self.sub_faces(tuple(q), axis, half))
                return out
        return [(o, size)]

    def edge_key(self, p, q):
        a = next(i for i in range(3) if p[i] != q[i])
        lo, hi = (p, q) if p[a] < q[a] else (q, p)
        return (self.key(lo) * 3 + a, hi[a] - lo[a])

    def loops(self, origin, size):
        """Closed loops of (edge key, sub-edge length) for the leaf, or None if a value is invalid."""
        segments = []
        for axis in range(3):
            u, v = (axis + 1) % 3, (axis + 2) % 3
            for side in (0, 1):
                fo = list(origin)
                fo[axis] += side * size
                for so, ss in self.sub_faces(tuple(fo), axis, size):
                    corners = []
                    for a, b in face_boundary(axis, side):
                        p = list(so)
                        p[u] += a * ss
                        p[v] += b * ss
                        corners.append(tuple(p))
                    pts = []
                    for i in range(4):
                        pts.extend(self.edge_points(corners[i], corners[(i + 1) % 4]))
                    idx = [self.index[self.key(p)] for p in pts]
                    if not all(self.valid[i] for i in idx):
                        return None
                    neg = [self.values[i] < 0 for i in idx]
                    segments.extend(face_segments(pts, neg, self.edge_key))
        return trace_loops(segments)


def _is_simple(tree: HintOctree, origins: Array, sizes: Array) -> Array:
    """True for leaves with no corner inside any of their edges or faces."""
    simple = np.ones(len(origins), dtype=bool)
    big = sizes > 1
    if not np.any(big):
        return simple
    o = origins[big]
    half = (sizes[big] // 2)[:, None, None]
    probes = np.concatenate([_EDGE_MID, _FACE_MID])  # (18, 3) in half-size units
    keys = tree.lattice_key(o[:, None, :] + half * probes[None])
    simple[big] = ~np.any(tree.lookup(keys) >= 0, axis=1)
    return simple


def _candidate_general(tree: HintOctree, origins: Array, sizes: Array, general: Array) -> Array:
    """Non-simple leaves that can carry iso-geometry.

    Every finest sub-edge on a leaf boundary is an edge of some leaf, so a
    crossing there implies a mixed-sign leaf whose corners lie on that
    boundary. Leaves that are neither mixed nor touch such corners are skipped.
    """
    ci = tree.lookup(tree.lattice_key(origins[:, None, :] + sizes[:, None, None] * CORNER_OFFSETS[None]))
    ok = tree.valid[ci]
    neg = (tree.values[ci] < 0) & ok
    pos = (tree.values[ci] >= 0) & ok
    mixed = np.any(neg, axis=1) & np.any(pos, axis=1)
    idx = np.nonzero(general)[0]
    if len(idx) == 0:
        return idx
    hot = np.unique(ci[mixed].ravel())
    if len(hot) == 0:
        return idx[mixed[idx]]
    rest = idx[~mixed[idx]]
    hot_pts = tree.key_to_lattice(tree.corner_keys[hot]).astype(np.float64)
    half = sizes[rest] / 2.0
    counts = cKDTree(hot_pts).query_ball_point(origins[rest] + half[:, None], r=half, p=np.inf,
                                               return_length=True)
    touch = np.zeros(len(origins), dtype=bool)
    touch[rest[np.asarray(counts) > 0]] = True
    return idx[mixed[idx] | touch[idx]]


def extract_isooctree_mesh(tree: HintOctree, force_general: bool = False) -> TriangleMesh:
    """Mesh the zero level set of the sampled tree without cracks across level changes."""
    if tree.values is None:
        raise InvalidInputError("sample_corners must run before extraction")
    origins, sizes = tree.leaf_origins()
    simple = np.zeros(len(origins), bool) if force_general else _is_simple(tree, origins, sizes)

    edge_keys: list[Array] = []
    edge_lens: list[Array] = []
    tri_keys: list[Array] = []

    # table path
    so, ss = origins[simple], sizes[simple]
    if len(so):
        ck = tree.lattice_key(so[:, None, :] + ss[:, None, None] * CORNER_OFFSETS[None])
        ci = tree.lookup(ck)
        ok = np.all(tree.valid[ci], axis=1)
        neg = tree.values[ci] < 0
        case = np.sum(neg.astype(np.int64) << np.arange(8), axis=1)
        act = ok & (TRI_COUNT[case] > 0)
        so, ss, case = so[act], ss[act], case[act]
        tl = TRI_TABLE[case]
        has = tl[:, :, 0] >= 0
        leaf_of = np.broadcast_to(np.arange(len(so))[:, None], has.shape)[has]
        tl = tl[has]
        starts = so[leaf_of][:, None, :] + ss[leaf_of][:, None, None] * _EDGE_OFF[tl]
        keys = tree.lattice_key(starts) * 3 + _EDGE_AXIS[tl]
        tri_keys.append(keys)
        edge_keys.append(keys.ravel())
        edge_lens.append(np.repeat(ss[leaf_of], 3))

    # general path: leaves with subdivided edges or faces
    centroid_loops: list[list[int]] = []
    centroid_tris: list[tuple[int, int, int]] = []  # (loop id, key a, key b)
    general = _candidate_general(tree, origins, sizes, ~simple)
    if len(general):
        walker = _LeafWalker(tree)
        gen_tris = []
        gk, gl = [], []
        for i in general:
            o = tuple(int(c) for c in origins[i])
            loops = walker.loops(o, int(sizes[i]))
            if not loops:
                continue
            for loop in loops:
                for k, ln in loop:
                    gk.append(k)
                    gl.append(ln)
                ks = [k for k, _ in loop]
                if len(ks) == 3:
                    gen_tris.append(ks)
                elif len(ks) > 3:
                    lid = len(centroid_loops)
                    centroid_loops.append(ks)
                    for j in range(len(ks)):
                        centroid_tris.append((lid, ks[j], ks[(j + 1) % len(ks)]))
        if gen_tris:
            tri_keys.append(np.asarray(gen_tris, dtype=np.int64))
        if gk:
            edge_keys.append(np.asarray(gk, dtype=np.int64))
            edge_lens.append(np.asarray(gl, dtype=np.int64))
        log.debug("general-path leaves: %d of %d", len(general), len(origins))

    if not edge_keys:
        return TriangleMesh()
    allk = np.concatenate(edge_keys)
    alll = np.concatenate(edge_lens)
    ukeys, first, inv = np.unique(allk, return_index=True, return_inverse=True)
    ulen = alll[first]
    if np.any(alll != ulen[inv]):
        raise RuntimeError("inconsistent sub-edge lengths for a shared iso-vertex")

    axis = ukeys % 3
    a = tree.key_to_lattice(ukeys // 3)
    b = a + ulen[:, None] * np.eye(3, dtype=np.int64)[axis]
    ia, ib = tree.lookup(tree.lattice_key(a)), tree.lookup(tree.lattice_key(b))
    verts = interpolate_crossings(tree.lattice_to_world(a), tree.lattice_to_world(b),
                                  tree.values[ia], tree.values[ib])

    tris = [np.searchsorted(ukeys, t) for t in tri_keys]
    if centroid_loops:
        n0 = len(verts)
        cents = np.array([verts[np.searchsorted(ukeys, np.asarray(lp))].mean(axis=0) for lp in centroid_loops])
        ct = np.asarray(centroid_tris, dtype=np.int64)
        tris.append(np.stack([n0 + ct[:, 0], np.searchsorted(ukeys, ct[:, 1]),
                              np.searchsorted(ukeys, ct[:, 2])], axis=1))
        verts = np.concatenate([verts, cents])
    return TriangleMesh(verts, np.concatenate(tris).reshape(-1, 3))


def octree_marching_cubes(f: Isofunction, hints: PointCloud | Array,
                          cfg: OctreeConfig = OctreeConfig()) -> tuple[TriangleMesh, HintOctree]:
    tree = build_hint_octree(hints, cfg)
    sample_corners(tree, f)
    return extract_isooctree_mesh(tree), tree
