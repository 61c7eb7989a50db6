import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from priorfuse.fusion import (
    FusionConfig,
    FusionVolume,
    Frame,
    edge_filter_depth,
    isofunction_eval,
    max_weight_normal,
    prepare_frame,
    tsdf_contribution,
    tsdf_contributions,
    weight_agreement,
)
from priorfuse.geometry import CAMERA, CameraIntrinsics, InvalidInputError, NormalMap, RigidPose

INTR = CameraIntrinsics.from_fov(32, 24, 60.0)


def plane_frame(dist=2.0, normal=(0.0, 0.0, -1.0), center=(0.0, 0.0, 0.0), fid=""):
    """Camera looking down +z at a fronto-parallel plane ``dist`` ahead."""
    pose = RigidPose(np.eye(3), np.asarray(center, float))
    n = np.broadcast_to(np.asarray(normal, float), INTR.shape + (3,)).copy()
    return Frame(INTR, pose, np.full(INTR.shape, dist), NormalMap(n, CAMERA), frame_id=fid)


def tilt(deg):
    t = np.radians(deg)
    return (np.sin(t), 0.0, -np.cos(t))


class TestEdgeFilter:
    def test_constant_depth(self):
        d, keep = edge_filter_depth(np.full((10, 12), 3.0))
        assert keep.all()

    def test_step_edge(self):
        depth = np.ones((6, 10))
        depth[:, 5:] = 2.0
        d, keep = edge_filter_depth(depth)
        removed = np.nonzero(~keep.all(axis=0))[0]
        assert list(removed) == [4, 5]
        assert keep[:, [0, 1, 2, 3, 6, 7, 8, 9]].all()

    def test_smooth_ramp(self):
        depth = 1.0 * 1.001 ** np.arange(40)[None, :].repeat(5, axis=0)
        _, keep = edge_filter_depth(depth)
        assert keep.all()

    def test_mask_shared_with_normals(self):
        fr = plane_frame()
        fr.depth[:, 16:] = 4.0
        prep = prepare_frame(fr, FusionConfig())
        assert np.array_equal(prep.mask, prep.depth > 0)
        assert np.all(prep.normals[~prep.mask] == 0)


class TestTsdf:
    def test_on_surface(self):
        s, ok = tsdf_contribution(plane_frame(), (0.0, 0.0, 2.0))
        assert ok and abs(s) < 1e-12

    def test_far_behind_is_invalid(self):
        _, ok = tsdf_contribution(plane_frame(), (0.0, 0.0, 2.2))
        assert not ok

    def test_in_front_inside_band(self):
        s, ok = tsdf_contribution(plane_frame(), (0.0, 0.0, 1.95))
        assert ok and s == pytest.approx(0.05, abs=1e-12)

    def test_outside_image_and_behind_camera(self):
        assert not tsdf_contribution(plane_frame(), (50.0, 0.0, 1.0))[1]
        assert not tsdf_contribution(plane_frame(), (0.0, 0.0, -1.0))[1]

    @given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.1, 4.0))
    def test_truncation_bound(self, x, y, z):
        cfg = FusionConfig()
        prep = prepare_frame(plane_frame(), cfg, edge_filter=False)
        fs = tsdf_contributions(prep, np.array([[x, y, z]]), cfg)
        if fs.valid[0]:
            assert abs(fs.s[0]) <= cfg.tau_rel * fs.d[0] + 1e-15

    @pytest.mark.parametrize("bad", [dict(tau_rel=0.0), dict(tau_rel=1.0), dict(edge_rel=0.0),
                                     dict(normal_cutoff_deg=0.0), dict(normal_cutoff_deg=91.0)])
    def test_config_validation(self, bad):
        with pytest.raises(InvalidInputError):
            FusionConfig(**bad)


class TestMaxWeightNormal:
    def test_single_frame(self):
        n, ok = max_weight_normal([plane_frame(normal=tilt(5))], (0.0, 0.0, 1.95))
        assert ok
        np.testing.assert_allclose(n, tilt(5), atol=1e-12)

    def test_nearer_frame_wins(self):
        far = plane_frame(2.0, (0.0, 0.0, -1.0))
        near = plane_frame(1.0, tilt(3), center=(0.0, 0.0, 1.0))
        n, ok = max_weight_normal([far, near], (0.0, 0.0, 1.97))
        np.testing.assert_allclose(n, tilt(3), atol=1e-12)

    def test_grazing_normal_never_wins(self):
        grazing = plane_frame(2.0, (1.0, 0.0, 0.0))
        frontal = plane_frame(2.0, (0.0, 0.0, -1.0))
        for order in ([grazing, frontal], [frontal, grazing]):
            n, _ = max_weight_normal(order, (0.0, 0.0, 1.95))
            np.testing.assert_allclose(n, (0.0, 0.0, -1.0), atol=1e-12)

    def test_no_valid_frame(self):
        _, ok = max_weight_normal([plane_frame()], (0.0, 0.0, 3.0))
        assert not ok


class TestIsofunction:
    def test_single_frame_on_surface(self):
        f, ok = isofunction_eval(FusionVolume.from_frames([plane_frame()]), (0.0, 0.0, 2.0))
        assert ok and f == 0.0

    def test_two_frames_on_plane(self):
        vol = FusionVolume.from_frames([plane_frame(), plane_frame(1.5, center=(0.0, 0.0, 0.5))])
        f, ok = isofunction_eval(vol, (0.0, 0.0, 2.0))
        assert ok and abs(f) < 1e-15

    def test_displaced_point_equals_eps_over_d_squared(self):
        eps, d = 0.01, 2.0
        f, ok = isofunction_eval(FusionVolume.from_frames([plane_frame(d)]), (0.0, 0.0, d - eps))
        assert ok and f > 0
        assert f == pytest.approx(eps / d ** 2, rel=1e-12)

    def test_distance_down_weighting_exact(self):
        # equal obliquity, depth ratio 2 -> weight ratio 4
        cfg = FusionConfig()
        x = np.array([[0.0, 0.0, 1.9]])
        a = tsdf_contributions(prepare_frame(plane_frame(2.0), cfg), x, cfg)
        b = tsdf_contributions(prepare_frame(plane_frame(1.0, center=(0, 0, 1.0)), cfg), x, cfg)
        n_ref = np.array([[0.0, 0.0, -1.0]])
        wa = weight_agreement(a, n_ref, 0.5)
        wb = weight_agreement(b, n_ref, 0.5)
        assert wb[0] == 4.0 * wa[0]

    def test_cutoff_rejects_disagreeing_frame(self):
        cfg = FusionConfig()
        prep = prepare_frame(plane_frame(normal=tilt(70)), cfg)
        fs = tsdf_contributions(prep, np.array([[0.0, 0.0, 1.95]]), cfg)
        assert weight_agreement(fs, np.array([[0.0, 0.0, -1.0]]), np.cos(np.radians(60)))[0] == 0.0

    @given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(1.5, 2.5))
    def test_duplicate_frame_keeps_sign(self, x, y, z):
        # both frames see the plane z = 2; with conflicting surfaces a doubled weight may flip the sum
        a, b = plane_frame(fid="a"), plane_frame(1.7, tilt(10), center=(0.1, 0.0, 0.3), fid="b")
        f1, ok1 = isofunction_eval(FusionVolume.from_frames([a, b]), (x, y, z))
        f2, ok2 = isofunction_eval(FusionVolume.from_frames([a, a, b]), (x, y, z))
        assert ok1 == ok2
        if ok1:
            assert np.sign(f1) == np.sign(f2)

    def test_sign_along_ray(self):
        vol = FusionVolume.from_frames([plane_frame()])
        ts = np.linspace(1.5, 2.08, 30)
        f, ok = vol.evaluate(np.column_stack([np.zeros(30), np.zeros(30), ts]))
        assert ok.all()
        assert np.all(f[ts < 2.0 - 1e-9] > 0) and np.all(f[ts > 2.0 + 1e-9] < 0)

    def test_thread_count_bit_identical(self):
        rng = np.random.default_rng(0)
        frames = [plane_frame(), plane_frame(1.7, tilt(8), center=(0.2, 0.0, 0.3))]
        x = rng.uniform([-0.5, -0.5, 1.6], [0.5, 0.5, 2.2], size=(5000, 3))
        f1, v1 = FusionVolume.from_frames(frames, workers=1, chunk=512).evaluate(x)
        f4, v4 = FusionVolume.from_frames(frames, workers=4, chunk=512).evaluate(x)
        assert f1.tobytes() == f4.tobytes() and np.array_equal(v1, v4)

    def test_hint_cloud(self):
        pts = FusionVolume.from_frames([plane_frame()]).hint_cloud()
        assert pts.shape == (32 * 24, 3)
        np.testing.assert_allclose(pts[:, 2], 2.0)
