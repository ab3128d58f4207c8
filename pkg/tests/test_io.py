"""Scene, checkpoint, and mesh persistence roundtrips plus error paths."""
import json

import numpy as np
import pytest

from disksplat.errors import CheckpointError, SceneFormatError
from disksplat.model import random_model
from disksplat.seghead import SegHead
from disksplat.sceneio import (export_mesh, load_checkpoint, load_image,
                               load_label_map, load_manifest, load_mesh,
                               load_points, save_checkpoint, save_image,
                               save_label_map, save_manifest, save_points)
from disksplat.synth import (SynthSpec, default_three_object_spec,
                             generate_scene, write_scene)
from disksplat.tsdf import TriangleMesh


@pytest.fixture(scope="module")
def tiny_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    spec = SynthSpec(objects=default_three_object_spec().objects[:1],
                     n_views=3, image_size=24, seed=5)
    scene = generate_scene(spec)
    write_scene(scene, root)
    return root, scene


class TestManifest:
    def test_roundtrip(self, tiny_scene, tmp_path):
        root, scene = tiny_scene
        loaded = load_manifest(root / "manifest.json")
        assert len(loaded.views) == 3
        np.testing.assert_allclose(loaded.bounds_min, scene.bounds_min)
        np.testing.assert_allclose(loaded.bounds_max, scene.bounds_max)
        for i, view in enumerate(loaded.views):
            orig_cam = scene.cameras[i]
            np.testing.assert_allclose(view.camera.world_to_camera,
                                       orig_cam.world_to_camera)
            assert view.camera.width == orig_cam.width
        # properties
        assert len(loaded.cameras) == 3
        img = loaded.load_image(0)
        assert img.shape == (24, 24, 3)
        assert img.dtype == np.float64
        labels = loaded.load_labels(0)
        assert labels.shape == (24, 24)
        assert labels.dtype == np.uint8
        pts, cols = loaded.load_points()
        assert pts.shape[1] == 3
        assert cols.shape == pts.shape

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(SceneFormatError, match="manifest not found"):
            load_manifest(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text("{not json")
        with pytest.raises(SceneFormatError, match="not valid JSON"):
            load_manifest(p)

    def test_missing_views_key(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps({"bounds": {"min": [0, 0, 0],
                                            "max": [1, 1, 1]}}))
        with pytest.raises(SceneFormatError, match="missing required key"):
            load_manifest(p)

    def test_empty_views(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps({"views": [],
                                 "bounds": {"min": [0, 0, 0],
                                            "max": [1, 1, 1]}}))
        with pytest.raises(SceneFormatError, match="empty scene"):
            load_manifest(p)

    def test_view_missing_camera(self, tiny_scene, tmp_path):
        root, _ = tiny_scene
        data = json.loads((root / "manifest.json").read_text())
        del data["views"][0]["camera"]
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps(data))
        with pytest.raises(SceneFormatError, match="missing 'camera'"):
            load_manifest(p)

    def test_bad_bounds(self, tiny_scene, tmp_path):
        root, _ = tiny_scene
        data = json.loads((root / "manifest.json").read_text())
        data["bounds"]["min"] = [0, 0]
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps(data))
        with pytest.raises(SceneFormatError, match="3-vector"):
            load_manifest(p)

    def test_save_manifest_relocates(self, tiny_scene, tmp_path):
        root, _ = tiny_scene
        scene = load_manifest(root / "manifest.json")
        save_manifest(scene, tmp_path / "manifest.json")
        again = load_manifest(tmp_path / "manifest.json")
        assert len(again.views) == len(scene.views)


class TestImages:
    def test_image_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, size=(9, 7, 3))
        p = tmp_path / "a.png"
        save_image(p, img)
        back = load_image(p)
        assert back.shape == img.shape
        # 8-bit quantization
        np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-9)

    def test_label_map_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 256, size=(11, 13)).astype(np.uint8)
        p = tmp_path / "l.png"
        save_label_map(p, labels)
        back = load_label_map(p)
        np.testing.assert_array_equal(back, labels)
        assert back.dtype == np.uint8

    def test_label_map_range_check(self, tmp_path):
        with pytest.raises(SceneFormatError, match="fit in"):
            save_label_map(tmp_path / "l.png", np.array([[300]]))

    def test_label_map_rejects_color_png(self, tmp_path):
        p = tmp_path / "c.png"
        save_image(p, np.zeros((4, 4, 3)))
        with pytest.raises(SceneFormatError):
            load_label_map(p)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        for sh_degree in (0, 2, 3):
            model = random_model(17, np.random.default_rng(sh_degree),
                                 sh_degree=sh_degree)
            rng = np.random.default_rng(9)
            head = SegHead(rng.normal(size=(256, 8)), rng.normal(size=256))
            p = tmp_path / f"ck{sh_degree}.ply"
            save_checkpoint(model, head, p)
            m2, h2 = load_checkpoint(p)
            assert m2.sh_degree == sh_degree
            for field in model.FIELDS:
                np.testing.assert_array_equal(getattr(m2, field),
                                              getattr(model, field),
                                              err_msg=field)
            np.testing.assert_array_equal(h2.weights, head.weights)
            np.testing.assert_array_equal(h2.biases, head.biases)

    def test_repeated_save_identical_bytes(self, tmp_path):
        model = random_model(9, np.random.default_rng(4))
        head = SegHead.zeros()
        a, b = tmp_path / "a.ply", tmp_path / "b.ply"
        save_checkpoint(model, head, a)
        save_checkpoint(model, head, b)
        assert a.read_bytes() == b.read_bytes()

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "gone.ply")

    def test_foreign_ply_rejected(self, tmp_path):
        p = tmp_path / "pts.ply"
        save_points(p, np.zeros((3, 3)))
        with pytest.raises(CheckpointError, match="not a disksplat"):
            load_checkpoint(p)

    def test_missing_sidecar(self, tmp_path):
        model = random_model(5, np.random.default_rng(0))
        p = tmp_path / "ck.ply"
        save_checkpoint(model, SegHead.zeros(), p)
        p.with_suffix(".ply.head.json").unlink()
        with pytest.raises(CheckpointError, match="sidecar not found"):
            load_checkpoint(p)

    def test_truncated_file(self, tmp_path):
        model = random_model(5, np.random.default_rng(0))
        p = tmp_path / "ck.ply"
        save_checkpoint(model, SegHead.zeros(), p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises((CheckpointError, SceneFormatError)):
            load_checkpoint(p)


class TestMeshAndPoints:
    def test_mesh_roundtrip(self, tmp_path):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
                         dtype=np.float64)
        faces = np.array([[0, 1, 2], [0, 1, 3]], dtype=np.int64)
        mesh = TriangleMesh(verts, faces)
        p = tmp_path / "m.ply"
        export_mesh(mesh, p)
        back = load_mesh(p)
        np.testing.assert_allclose(back.vertices, verts, atol=1e-6)
        np.testing.assert_array_equal(back.triangles, faces)

    def test_mesh_bad_indices(self, tmp_path):
        mesh = TriangleMesh(np.zeros((2, 3)), np.array([[0, 1, 5]]))
        with pytest.raises(SceneFormatError, match="out-of-range"):
            export_mesh(mesh, tmp_path / "m.ply")

    def test_mesh_nonfinite_vertices(self, tmp_path):
        verts = np.array([[0, 0, 0], [np.nan, 0, 0], [0, 1, 0]])
        mesh = TriangleMesh(verts, np.array([[0, 1, 2]]))
        with pytest.raises(SceneFormatError, match="non-finite"):
            export_mesh(mesh, tmp_path / "m.ply")

    def test_points_roundtrip_with_colors(self, tmp_path):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(20, 3))
        cols = rng.uniform(0, 1, size=(20, 3))
        p = tmp_path / "p.ply"
        save_points(p, pts, colors=cols)
        back, back_cols = load_points(p)
        np.testing.assert_allclose(back, pts, atol=1e-6)
        np.testing.assert_allclose(back_cols, cols, atol=0.5 / 255 + 1e-9)

    def test_points_without_colors(self, tmp_path):
        pts = np.arange(12, dtype=np.float64).reshape(4, 3)
        p = tmp_path / "p.ply"
        save_points(p, pts)
        back, back_cols = load_points(p)
        np.testing.assert_allclose(back, pts, atol=1e-6)
        assert back_cols is None

    def test_load_mesh_on_points_gives_empty_triangles(self, tmp_path):
        p = tmp_path / "p.ply"
        save_points(p, np.zeros((3, 3)))
        back = load_mesh(p)
        assert back.triangles.shape == (0, 3)
