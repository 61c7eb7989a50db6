import argparse
import json

import numpy as np
import pytest
from PIL import Image

from priorfuse.config import UsageError, read_config_file, resolve
from priorfuse.dataio import (
    DatasetManifest,
    FrameLoadError,
    decode_depth,
    decode_normals,
    encode_depth,
    encode_normals,
    load_dataset,
    pose_from_matrix,
    write_dataset,
)
from priorfuse.geometry import CAMERA, InvalidInputError, RigidPose
from priorfuse.marching import TriangleMesh
from priorfuse.meshio import PlyParseError, load_mesh, mesh_from_ply_bytes, mesh_to_ply_bytes, save_mesh
from priorfuse.synth import NoiseModel, make_scene, render_scene


def tri_mesh(normals=False):
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.5]])
    n = np.tile([0.0, 0.0, 1.0], (3, 1)) if normals else None
    return TriangleMesh(v, np.array([[0, 1, 2]]), n)


class TestPly:
    @pytest.mark.parametrize("normals", [False, True])
    def test_single_triangle_roundtrip(self, tmp_path, normals):
        m = tri_mesh(normals)
        save_mesh(tmp_path / "t.ply", m)
        back = load_mesh(tmp_path / "t.ply")
        np.testing.assert_array_equal(back.triangles, m.triangles)
        np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-7)
        assert (back.normals is not None) == normals

    def test_empty_mesh(self):
        data = mesh_to_ply_bytes(TriangleMesh())
        assert b"element vertex 0" in data and b"element face 0" in data
        assert mesh_from_ply_bytes(data).is_empty

    def test_truncated(self):
        data = mesh_to_ply_bytes(tri_mesh())
        with pytest.raises(PlyParseError) as ei:
            mesh_from_ply_bytes(data[:-5])
        assert ei.value.offset > 0

    def test_bad_magic_and_format(self):
        with pytest.raises(PlyParseError) as ei:
            mesh_from_ply_bytes(b"plx\nformat ascii 1.0\nend_header\n")
        assert ei.value.offset == 0
        with pytest.raises(PlyParseError) as ei:
            mesh_from_ply_bytes(b"ply\nformat ascii 1.0\nend_header\n")
        assert ei.value.offset == 4
        with pytest.raises(PlyParseError):
            mesh_from_ply_bytes(b"ply\nformat binary_little_endian 1.0\nelement vertex x\nend_header\n")

    def test_index_out_of_range(self):
        data = bytearray(mesh_to_ply_bytes(tri_mesh()))
        data[-4:] = np.int32(7).tobytes()
        with pytest.raises(PlyParseError):
            mesh_from_ply_bytes(bytes(data))

    def test_no_temp_files_left(self, tmp_path):
        save_mesh(tmp_path / "a.ply", tri_mesh())
        assert [p.name for p in tmp_path.iterdir()] == ["a.ply"]


class TestCodecs:
    def test_depth_scale(self):
        assert decode_depth(np.array([4000], np.uint16), 0.00025)[0] == 1.0

    def test_normal_pixel(self):
        n = decode_normals(np.array([[128, 128, 255]], np.uint8))[0]
        np.testing.assert_allclose(n, [0.0039, 0.0039, 1.0], atol=1e-4)
        assert np.linalg.norm(n) == pytest.approx(1.0)

    def test_invalid_normal_roundtrip(self):
        rgb = encode_normals(np.zeros((1, 1, 3)))
        assert np.all(decode_normals(rgb) == 0)

    def test_depth_overflow(self):
        with pytest.raises(InvalidInputError):
            encode_depth(np.array([10.0]), 0.0001)

    def test_normal_quantisation_error(self):
        rng = np.random.default_rng(0)
        n = rng.normal(size=(100, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        back = decode_normals(encode_normals(n))
        ang = np.degrees(np.arccos(np.clip(np.sum(n * back, axis=1), -1, 1)))
        assert ang.max() < 1.0


class TestPose:
    def test_accepts_and_snaps_small_error(self):
        T = RigidPose.look_at((1, 2, 3), (0, 0, 0)).matrix()
        T[:3, :3] *= 1 + 2e-5
        pose = pose_from_matrix(T)
        np.testing.assert_allclose(pose.rotation.T @ pose.rotation, np.eye(3), atol=1e-12)

    def test_rejects_non_orthonormal(self):
        T = np.eye(4)
        T[0, 1] = 1e-3
        with pytest.raises(InvalidInputError):
            pose_from_matrix(T)

    def test_rejects_reflection(self):
        with pytest.raises(InvalidInputError):
            pose_from_matrix(np.diag([1.0, 1.0, -1.0, 1.0]))


class TestDataset:
    @pytest.fixture
    def dataset(self, tmp_path):
        scene = make_scene("plane-sphere", width=40, height=30, n_cameras=2)
        renders = render_scene(scene, NoiseModel(0.002, 0.0, 1.0))
        path = write_dataset(tmp_path / "ds", [r.frame for r in renders], depth_scale=0.0001)
        return path, renders

    def test_roundtrip(self, dataset):
        path, renders = dataset
        frames = load_dataset(path)
        assert [f.frame_id for f in frames] == ["0000", "0001"]
        for f, r in zip(frames, renders):
            np.testing.assert_allclose(f.depth, r.frame.depth, atol=0.5e-4 + 1e-12)
            assert f.normals.frame == CAMERA
            np.testing.assert_allclose(f.pose.matrix(), r.frame.pose.matrix(), atol=1e-12)

    def test_missing_file_names_frame(self, dataset):
        path, _ = dataset
        (path.parent / "normal" / "0001.png").unlink()
        with pytest.raises(FrameLoadError) as ei:
            load_dataset(path)
        assert ei.value.frame_id == "0001" and "0001" in str(ei.value)

    def test_bad_pose_names_frame(self, dataset):
        path, _ = dataset
        man = json.loads(path.read_text())
        man["frames"][0]["pose"][0][1] += 0.01
        path.write_text(json.dumps(man))
        with pytest.raises(FrameLoadError) as ei:
            load_dataset(path)
        assert ei.value.frame_id == "0000"

    def test_size_mismatch(self, dataset):
        path, _ = dataset
        Image.fromarray(np.zeros((5, 5), np.uint16)).save(path.parent / "depth" / "0000.png")
        with pytest.raises(FrameLoadError):
            load_dataset(path)

    def test_manifest_validation(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{"frames": [], "depth_scale": 0}')
        with pytest.raises(InvalidInputError):
            DatasetManifest.load(p)
        p.write_text("not json")
        with pytest.raises(InvalidInputError):
            DatasetManifest.load(p)


class TestConfig:
    def parser(self):
        p = argparse.ArgumentParser()
        p.add_argument("--config")
        p.add_argument("--alpha", type=float, default=1.0)
        p.add_argument("--beta", type=int, default=2)
        p.add_argument("--gamma", default="g")
        p.add_argument("--flag", action="store_true")
        p.add_argument("--mode", choices=["a", "b"], default="a")
        return p

    def test_defaults(self):
        ns = resolve(self.parser(), [])
        assert (ns.alpha, ns.beta, ns.gamma, ns.flag, ns.mode) == (1.0, 2, "g", False, "a")

    def test_three_layers(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("# comment\nalpha = 3.5\nbeta = 7\nflag = yes\n")
        ns = resolve(self.parser(), ["--config", str(cfg), "--beta", "9"])
        assert ns.alpha == 3.5      # file beats default
        assert ns.beta == 9         # flag beats file
        assert ns.gamma == "g"      # default survives
        assert ns.flag is True

    def test_json_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"mode": "b", "alpha": 0.25}))
        ns = resolve(self.parser(), ["--config", str(cfg)])
        assert ns.mode == "b" and ns.alpha == 0.25

    @pytest.mark.parametrize("text", ["delta = 1\n", "beta = many\n", "mode = c\n", "flag = perhaps\n", "novalue\n"])
    def test_bad_config(self, tmp_path, text):
        cfg = tmp_path / "c.txt"
        cfg.write_text(text)
        with pytest.raises(UsageError):
            resolve(self.parser(), ["--config", str(cfg)])

    def test_unknown_flag(self):
        with pytest.raises(UsageError):
            resolve(self.parser(), ["--nope"])

    def test_dashes_in_keys(self, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("some-key = 1\n")
        assert read_config_file(cfg) == {"some_key": "1"}
