import numpy as np
import pytest
from scipy.spatial import cKDTree

from priorfuse.geometry import InvalidInputError
from priorfuse.isooctree import (
    OctreeConfig,
    build_hint_octree,
    build_octree,
    cubic_root,
    extract_isooctree_mesh,
    sample_corners,
    uniform_octree,
)
from priorfuse.marching import uniform_marching_cubes

UNIT = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
CUBE = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


def sphere(r=0.4, c=(0.0, 0.0, 0.0)):
    c = np.asarray(c, float)
    return lambda x: (np.linalg.norm(x - c, axis=1) - r, np.ones(len(x), bool))


def plane_z(z0):
    return lambda x: (x[:, 2] - z0, np.ones(len(x), bool))


def unbalanced_tree(extra=2, base=3):
    """Uniform at ``base`` with the (+,+,+) octant refined ``extra`` levels deeper."""
    origin, width = cubic_root(*CUBE)
    return build_octree(origin, width, base + extra,
                        lambda lvl, c, h: np.all(c > 0, axis=1), initial_depth=base)


def chamfer_exact(a, b):
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (da.mean() + db.mean())


class TestBuild:
    def test_octant_locality(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0.1, 0.4, (1000, 3))
        tree = build_hint_octree(pts, OctreeConfig(max_depth=5, expand_threshold=20, root_box=CUBE))
        lo, hi = tree.leaf_boxes()
        centres = 0.5 * (lo + hi)
        deep = tree.leaves[5]
        assert len(deep) > 0
        deep_lo = tree.origin + deep * tree.finest_width
        assert np.all(deep_lo >= 0.0 - 1e-12)
        # the far (-,-,-) octant stays at the initial uniform depth
        far = np.all(centres < 0, axis=1)
        width = hi[far, 0] - lo[far, 0]
        np.testing.assert_allclose(width, 1.0 / 8)

    @pytest.mark.parametrize("count,split", [(49, False), (50, True)])
    def test_expand_threshold_boundary(self, count, split):
        centre = np.full(3, 1.0 / 16)
        pts = np.repeat(centre[None], count, axis=0)
        tree = build_hint_octree(pts, OctreeConfig(max_depth=4, expand_threshold=50, root_box=UNIT))
        coarse = {tuple(c) for c in tree.leaves[3]}
        assert ((0, 0, 0) not in coarse) == split

    def test_dense_cloud_gives_uniform_tree(self):
        pts = np.random.default_rng(1).uniform(0, 1, (200_000, 3))
        tree = build_hint_octree(pts, OctreeConfig(max_depth=4, expand_threshold=50, root_box=UNIT))
        assert tree.depth_histogram == {4: 4096}

    def test_children_partition_parent(self):
        tree = unbalanced_tree()
        lo, hi = tree.leaf_boxes()
        vol = np.prod(hi - lo, axis=1).sum()
        assert vol == pytest.approx(tree.width ** 3, rel=1e-12)
        assert max(tree.leaves) <= tree.max_depth

    def test_empty_hints(self):
        with pytest.raises(InvalidInputError):
            build_hint_octree(np.zeros((0, 3)))

    @pytest.mark.parametrize("bad", [dict(max_depth=0), dict(max_depth=13), dict(expand_threshold=0),
                                     dict(root_box=((0, 0, 0), (1, 0, 1)))])
    def test_config_validation(self, bad):
        with pytest.raises(InvalidInputError):
            OctreeConfig(**bad)


class TestSampling:
    def test_shared_corners_evaluated_once(self):
        calls = []

        def f(x):
            calls.append(len(x))
            return sphere()(x)
        tree = uniform_octree(*CUBE, depth=2)
        sample_corners(tree, f)
        assert sum(calls) == tree.evaluations == 5 ** 3

    def test_unbalanced_corner_dedup(self):
        tree = unbalanced_tree()
        keys = tree.corner_keys
        assert len(np.unique(keys)) == len(keys)

    def test_constant_field_empty(self):
        tree = uniform_octree(*CUBE, depth=3)
        sample_corners(tree, lambda x: (np.ones(len(x)), np.ones(len(x), bool)))
        assert extract_isooctree_mesh(tree).is_empty

    def test_plane_sign_change_only_in_straddling_cells(self):
        tree = uniform_octree(*UNIT, depth=3)
        sample_corners(tree, plane_z(0.51))
        mesh = extract_isooctree_mesh(tree)
        assert np.all((mesh.vertices[:, 2] > 0.5) & (mesh.vertices[:, 2] < 0.625))


class TestExtraction:
    def test_sphere_uniform_closed(self):
        tree = uniform_octree(*CUBE, depth=4)
        sample_corners(tree, sphere())
        mesh = extract_isooctree_mesh(tree)
        assert mesh.boundary_edge_count() == 0
        assert mesh.euler_characteristic() == 2

    @pytest.mark.parametrize("centre", [(0.0, 0.0, 0.0), (0.07, 0.03, -0.02)])
    def test_unbalanced_crack_free(self, centre):
        tree = unbalanced_tree()
        sample_corners(tree, sphere(0.33, centre))
        mesh = extract_isooctree_mesh(tree)
        assert mesh.boundary_edge_count() == 0
        assert mesh.euler_characteristic() == 2
        assert np.all(mesh.face_areas() > 1e-12)

    def test_fast_and_general_paths_agree(self):
        # the general path fans polygons around a centroid, so only the iso-vertices must agree
        tree = unbalanced_tree()
        sample_corners(tree, sphere(0.33, (0.07, 0.03, -0.02)))
        a = extract_isooctree_mesh(tree)
        b = extract_isooctree_mesh(tree, force_general=True)
        d, _ = cKDTree(b.vertices).query(a.vertices)
        assert d.max() < 1e-12
        assert b.boundary_edge_count() == 0 and b.euler_characteristic() == 2

    def test_linear_exactness_across_levels(self):
        tree = unbalanced_tree()
        sample_corners(tree, plane_z(0.0371))
        mesh = extract_isooctree_mesh(tree)
        assert not mesh.is_empty
        assert np.abs(mesh.vertices[:, 2] - 0.0371).max() < 1e-9

    def test_matches_uniform_mc(self):
        depth = 5
        tree = uniform_octree(*CUBE, depth=depth)
        sample_corners(tree, sphere())
        octo = extract_isooctree_mesh(tree)
        lo = tree.origin
        uni = uniform_marching_cubes(sphere(), (lo, lo + tree.width), tree.width / 2 ** depth)
        assert len(octo.triangles) == len(uni.triangles)
        assert chamfer_exact(octo.vertices, uni.vertices) < 1e-9

    def test_invalid_corners_drop_cells(self):
        tree = uniform_octree(*CUBE, depth=4)
        sample_corners(tree, lambda x: (np.linalg.norm(x, axis=1) - 0.4, x[:, 0] < 0.1))
        mesh = extract_isooctree_mesh(tree)
        assert mesh.vertices[:, 0].max() <= 0.1

    def test_deterministic(self):
        meshes = []
        for _ in range(2):
            tree = unbalanced_tree()
            sample_corners(tree, sphere(0.3, (0.1, 0.1, 0.1)))
            meshes.append(extract_isooctree_mesh(tree))
        assert meshes[0].vertices.tobytes() == meshes[1].vertices.tobytes()
        assert meshes[0].triangles.tobytes() == meshes[1].triangles.tobytes()
