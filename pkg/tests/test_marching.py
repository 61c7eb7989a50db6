import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorfuse.geometry import InvalidInputError
from priorfuse.marching import (
    TriangleMesh,
    cube_loops,
    grid_shape,
    nudge_zeros,
    trace_loops,
    uniform_marching_cubes,
)

BOX = ((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


def sphere(r=0.4, c=(0.0, 0.0, 0.0)):
    c = np.asarray(c)
    return lambda x: (np.linalg.norm(x - c, axis=1) - r, np.ones(len(x), bool))


class TestCaseTable:
    def test_each_crossing_edge_used_once(self):
        from priorfuse.marching import EDGE_CORNERS
        for case in range(256):
            neg = [(case >> i) & 1 for i in range(8)]
            crossing = {e for e, (a, b) in enumerate(EDGE_CORNERS) if neg[a] != neg[b]}
            used = [e for loop in cube_loops(case) for e in loop]
            assert sorted(used) == sorted(crossing)

    def test_trivial_cases_empty(self):
        assert cube_loops(0) == [] and cube_loops(255) == []

    def test_single_corner_triangle(self):
        loops = cube_loops(1)
        assert len(loops) == 1 and len(loops[0]) == 3

    def test_trace_loops_closed(self):
        loops = trace_loops([(1, 2), (2, 3), (3, 1), (5, 6), (6, 7), (7, 5)])
        assert sorted(len(l) for l in loops) == [3, 3]


class TestUniformMC:
    def test_sphere_accuracy(self):
        mesh = uniform_marching_cubes(sphere(), BOX, 0.01)
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(r - 0.4).max() < 0.01

    def test_sphere_closed_genus_zero(self):
        mesh = uniform_marching_cubes(sphere(), BOX, 0.05)
        assert mesh.boundary_edge_count() == 0
        assert mesh.euler_characteristic() == 2
        assert mesh.signed_volume() > 0  # outward orientation

    def test_no_crossing_is_empty(self):
        mesh = uniform_marching_cubes(lambda x: (np.ones(len(x)), np.ones(len(x), bool)), BOX, 0.1)
        assert mesh.is_empty

    def test_linear_field_exact(self):
        mesh = uniform_marching_cubes(lambda x: (x[:, 2] - 0.123, np.ones(len(x), bool)), BOX, 0.05)
        assert not mesh.is_empty
        assert np.abs(mesh.vertices[:, 2] - 0.123).max() < 1e-9

    def test_invalid_cells_dropped(self):
        def f(x):
            return np.linalg.norm(x, axis=1) - 0.4, x[:, 0] < 0.2
        mesh = uniform_marching_cubes(f, BOX, 0.05)
        assert mesh.vertices[:, 0].max() <= 0.2 + 1e-12

    def test_grid_guard(self):
        with pytest.raises(InvalidInputError):
            grid_shape(np.zeros(3), np.full(3, 100.0), 1e-4)

    def test_deterministic(self):
        a = uniform_marching_cubes(sphere(0.3, (0.05, -0.02, 0.01)), BOX, 0.04)
        b = uniform_marching_cubes(sphere(0.3, (0.05, -0.02, 0.01)), BOX, 0.04)
        assert a.vertices.tobytes() == b.vertices.tobytes()
        assert a.triangles.tobytes() == b.triangles.tobytes()

    @settings(max_examples=15)
    @given(st.integers(0, 10_000))
    def test_random_field_is_manifold_inside(self, seed):
        # a random trilinear-free field: sum of random spheres blobs; interior surfaces are closed
        rng = np.random.default_rng(seed)
        cs = rng.uniform(-0.2, 0.2, (3, 3))
        rs = rng.uniform(0.05, 0.15, 3)

        def f(x):
            d = np.min(np.linalg.norm(x[:, None, :] - cs[None], axis=2) - rs[None], axis=1)
            return d, np.ones(len(x), bool)
        mesh = uniform_marching_cubes(f, BOX, 0.04)
        assert mesh.boundary_edge_count() == 0
        assert np.all(mesh.face_areas() > 1e-12)


class TestTriangleMesh:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))

    def test_nudge(self):
        v = nudge_zeros(np.array([0.0, -1.0, 2.0]))
        assert v[0] > 0 and v[1] == -1.0
