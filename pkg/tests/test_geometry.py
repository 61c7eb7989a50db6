import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from priorfuse.geometry import (
    CAMERA,
    WORLD,
    CameraIntrinsics,
    InvalidInputError,
    NormalMap,
    RigidPose,
    angle_between,
    angles_between,
    backproject,
    bilinear_sample,
    orthonormalize,
    project,
)

unit_floats = st.floats(-1.0, 1.0, allow_nan=False)
vec3 = st.tuples(unit_floats, unit_floats, unit_floats).filter(lambda v: np.linalg.norm(v) > 1e-3)


def random_pose(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return RigidPose(orthonormalize(R), rng.normal(size=3))


class TestIntrinsics:
    def test_rejects_bad_focal(self):
        with pytest.raises(InvalidInputError):
            CameraIntrinsics(0.0, 1.0, 0.5, 0.5, 2, 2)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(InvalidInputError):
            CameraIntrinsics(1.0, 1.0, 4.0, 0.5, 4, 2)

    def test_from_fov_centres_principal_point(self):
        intr = CameraIntrinsics.from_fov(64, 48, 90.0)
        assert intr.cx == 31.5 and intr.cy == 23.5
        assert intr.fx == pytest.approx(32.0)


class TestPose:
    def test_rejects_reflection(self):
        with pytest.raises(InvalidInputError):
            RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvalidInputError):
            RigidPose(np.diag([1.0, 1.0, 1.0 + 1e-6]), np.zeros(3))

    def test_inverse_is_exact(self):
        p = random_pose(3)
        q = p.compose(p.inverse())
        assert np.abs(q.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(q.translation).max() < 1e-12

    def test_look_at_axes(self):
        # looking along +x with z up: image right is -y, image down is -z
        p = RigidPose.look_at((0, 0, 0), (1, 0, 0))
        np.testing.assert_allclose(p.principal_axis, [1, 0, 0], atol=1e-12)
        np.testing.assert_allclose(p.rotation[:, 0], [0, -1, 0], atol=1e-12)
        np.testing.assert_allclose(p.rotation[:, 1], [0, 0, -1], atol=1e-12)

    def test_matrix_round_trip(self):
        p = random_pose(5)
        q = RigidPose.from_matrix(p.matrix())
        np.testing.assert_array_equal(p.rotation, q.rotation)


class TestBackproject:
    def test_principal_ray(self, intr_small):
        d = np.zeros(intr_small.shape)
        intr = CameraIntrinsics(50.0, 50.0, 16.0, 12.0, 32, 24)
        d[12, 16] = 2.0
        pts = backproject(d, intr, RigidPose.identity()).points
        np.testing.assert_allclose(pts, [[0.0, 0.0, 2.0]])

    def test_unit_tangent(self):
        intr = CameraIntrinsics(4.0, 4.0, 1.0, 1.0, 8, 4)
        d = np.zeros(intr.shape)
        d[1, 5] = 1.0  # u = cx + fx
        pts = backproject(d, intr, RigidPose.identity()).points
        np.testing.assert_allclose(pts, [[1.0, 0.0, 1.0]])

    def test_invalid_pixel_skipped(self):
        intr = CameraIntrinsics(2.0, 2.0, 1.5, 1.5, 4, 4)
        d = np.ones((4, 4))
        d[2, 1] = 0.0
        cloud = backproject(d, intr, RigidPose.identity())
        assert len(cloud) == 15
        # row-major order of the surviving pixels
        expected = [(r, c) for r in range(4) for c in range(4) if (r, c) != (2, 1)]
        assert [tuple(p) for p in cloud.pixels] == expected

    def test_dimension_mismatch(self, intr_small):
        with pytest.raises(InvalidInputError):
            backproject(np.ones((3, 3)), intr_small, RigidPose.identity())

    @given(st.integers(0, 10_000))
    def test_project_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        intr = CameraIntrinsics(40.0, 45.0, 9.5, 7.5, 20, 16)
        pose = random_pose(seed)
        d = rng.uniform(0.5, 5.0, intr.shape)
        d[rng.random(intr.shape) < 0.2] = 0.0
        cloud = backproject(d, intr, pose)
        u, v, z = project(cloud.points, intr, pose)
        r, c = cloud.pixels.T
        assert np.abs(u - c).max(initial=0) < 1e-6
        assert np.abs(v - r).max(initial=0) < 1e-6
        assert np.abs(z - d[r, c]).max(initial=0) < 1e-9

    @given(st.integers(0, 10_000))
    def test_pose_composition(self, seed):
        rng = np.random.default_rng(seed)
        intr = CameraIntrinsics(40.0, 40.0, 9.5, 7.5, 20, 16)
        pose = random_pose(seed + 1)
        d = rng.uniform(0.5, 5.0, intr.shape)
        ident = backproject(d, intr, RigidPose.identity()).points
        moved = backproject(d, intr, pose).points
        assert np.abs(pose.apply(ident) - moved).max() < 1e-9


class TestAngles:
    def test_examples(self):
        assert angle_between((0, 0, 1), (0, 0, 1)) == 0.0
        assert angle_between((1, 0, 0), (0, 1, 0)) == pytest.approx(90.0, abs=1e-12)
        t = np.radians(10.0)
        assert abs(angle_between((0, 0, 1), (np.sin(t), 0, np.cos(t))) - 10.0) < 1e-9

    def test_zero_vector_rejected(self):
        with pytest.raises(InvalidInputError):
            angle_between((0, 0, 0), (0, 0, 1))

    def test_clamped_near_parallel(self):
        a = np.array([0.1, 0.2, 0.3])
        assert angle_between(a, a * 7.0) == pytest.approx(0.0, abs=1e-5)
        assert angle_between(a, -a) == pytest.approx(180.0, abs=1e-5)

    @given(vec3, vec3)
    def test_symmetric_and_scale_invariant(self, a, b):
        a, b = np.array(a), np.array(b)
        ab = angle_between(a, b)
        assert abs(ab - angle_between(b, a)) < 1e-9
        assert abs(ab - angle_between(2 * a, 3 * b)) < 1e-6
        assert 0.0 <= ab <= 180.0

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
        a[3] = 0.0
        deg, ok = angles_between(a, b)
        assert not ok[3] and ok.sum() == 49
        for i in np.nonzero(ok)[0]:
            assert deg[i] == pytest.approx(angle_between(a[i], b[i]), abs=1e-9)


class TestBilinear:
    def test_lattice_point_exact(self):
        vals = np.arange(12, dtype=float).reshape(3, 4) + 1.0
        out, ok = bilinear_sample(vals, 2.0, 1.0)
        assert ok and out == vals[1, 2]

    def test_midpoint(self):
        vals = np.array([[1.0, 3.0], [1.0, 3.0]])
        out, ok = bilinear_sample(vals, 0.5, 0.3)
        assert ok and out == pytest.approx(2.0)

    def test_touching_invalid(self):
        vals = np.ones((3, 3))
        vals[1, 1] = 0.0
        for u, v in [(0.5, 0.5), (1.0, 1.0), (1.5, 0.2), (0.1, 1.9)]:
            _, ok = bilinear_sample(vals, u, v)
            assert not ok

    def test_out_of_bounds_invalid(self):
        vals = np.ones((3, 3))
        out, ok = bilinear_sample(vals, np.array([-0.1, 2.01, 1.0]), np.array([1.0, 1.0, 3.5]))
        assert not ok.any()
        assert np.all(out == 0)

    def test_far_edge_is_inside(self):
        vals = np.arange(9, dtype=float).reshape(3, 3) + 1.0
        out, ok = bilinear_sample(vals, 2.0, 2.0)
        assert ok and out == 9.0

    def test_normals_renormalised(self):
        n = np.zeros((2, 2, 3))
        n[:, 0] = (1.0, 0.0, 0.0)
        n[:, 1] = (0.0, 1.0, 0.0)
        out, ok = bilinear_sample(n, np.array([0.5]), np.array([0.5]), normalize=True)
        assert ok[0]
        np.testing.assert_allclose(out[0], [np.sqrt(0.5), np.sqrt(0.5), 0.0])


class TestNormalMap:
    def test_frame_round_trip(self, tilted_pose):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(4, 5, 3))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        v[0, 0] = 0.0
        nm = NormalMap(v, CAMERA)
        w = nm.to_world(tilted_pose)
        assert w.frame == WORLD
        back = w.to_camera(tilted_pose)
        np.testing.assert_allclose(back.values, v, atol=1e-12)
        assert not back.valid[0, 0]

    def test_rejects_bad_shape(self):
        with pytest.raises(InvalidInputError):
            NormalMap(np.zeros((4, 4)))
