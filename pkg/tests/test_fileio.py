import json
import struct

import numpy as np
import pytest

from fusioncount.autodiff import Tensor
from fusioncount.errors import CheckpointError, DataError
from fusioncount.fileio import (
    content_hash,
    read_annotations,
    read_checkpoint,
    read_dmap,
    read_image,
    resize_image_and_points,
    write_annotations,
    write_checkpoint,
    write_dmap,
    write_image,
    write_manifest,
)
from fusioncount.groundtruth import DensityMap, PointAnnotation
from fusioncount.model import config_from_params, init_params, tiny_config


class TestDmapFormat:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        dmap = DensityMap(rng.random((17, 23)).astype(np.float32))
        path = tmp_path / "a.dmap"
        write_dmap(path, dmap)
        back = read_dmap(path)
        assert back.values.tobytes() == dmap.values.tobytes()

    def test_layout(self, tmp_path):
        dmap = DensityMap(np.arange(6, dtype=np.float32).reshape(2, 3))
        path = tmp_path / "b.dmap"
        write_dmap(path, dmap)
        raw = path.read_bytes()
        assert raw[:4] == b"DMAP"
        h, w = struct.unpack("<II", raw[4:12])
        assert (h, w) == (2, 3)
        assert len(raw) == 12 + 4 * 6
        assert np.frombuffer(raw[12:], dtype="<f4")[3] == 3.0

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "c.dmap"
        path.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(DataError, match="magic"):
            read_dmap(path)

    def test_rewrite_is_idempotent(self, tmp_path):
        dmap = DensityMap(np.random.default_rng(1).random((8, 8)).astype(np.float32))
        p1, p2 = tmp_path / "x1.dmap", tmp_path / "x2.dmap"
        write_dmap(p1, dmap)
        write_dmap(p2, dmap)
        assert p1.read_bytes() == p2.read_bytes()


class TestCheckpointFormat:
    def test_round_trip_bit_identical(self, tmp_path):
        params = init_params(tiny_config(), 0)
        path = tmp_path / "model.ifnw"
        write_checkpoint(path, params)
        back = read_checkpoint(path)
        assert list(back) == list(params)
        for name in params:
            assert back[name].data.tobytes() == params[name].data.tobytes()

    def test_config_survives(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "model.ifnw"
        write_checkpoint(path, init_params(cfg, 1))
        assert config_from_params(read_checkpoint(path)) == cfg

    def test_magic_and_count(self, tmp_path):
        params = {"w": Tensor(np.ones((2, 2)), requires_grad=True)}
        path = tmp_path / "m.ifnw"
        write_checkpoint(path, params)
        raw = path.read_bytes()
        assert raw[:4] == b"IFNW"
        assert struct.unpack("<I", raw[4:8])[0] == 1
        name_len = struct.unpack("<H", raw[8:10])[0]
        assert raw[10:10 + name_len] == b"w"
        assert raw[10 + name_len] == 2  # rank

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ifnw"
        path.write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        params = {"w": Tensor(np.ones((4, 4)), requires_grad=True)}
        path = tmp_path / "t.ifnw"
        write_checkpoint(path, params)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(path)


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        ann = PointAnnotation(np.array([[1.5, 2.25], [10.0, 20.5]]), (32, 32))
        path = tmp_path / "annotations.json"
        write_annotations(path, [("img.png", ann)])
        back = read_annotations(path, {"img.png": (32, 32)})
        assert back[0][0] == "img.png"
        np.testing.assert_array_equal(back[0][1].points, ann.points)

    def test_schema(self, tmp_path):
        ann = PointAnnotation(np.array([[3.0, 4.0]]), (16, 16))
        path = tmp_path / "annotations.json"
        write_annotations(path, [("a.png", ann)])
        records = json.loads(path.read_text())
        assert records == [{"image": "a.png", "points": [[3.0, 4.0]]}]

    def test_missing_image_rejected(self, tmp_path):
        path = tmp_path / "annotations.json"
        write_annotations(path, [("ghost.png", PointAnnotation(np.empty((0, 2)), (8, 8)))])
        with pytest.raises(DataError, match="ghost"):
            read_annotations(path, {})


class TestImages:
    def test_png_round_trip_rgb(self, tmp_path):
        rng = np.random.default_rng(2)
        img = (rng.random((12, 10, 3)) * 255).astype(np.uint8)
        path = tmp_path / "img.png"
        write_image(path, img)
        back = read_image(path)
        np.testing.assert_allclose(back, img.astype(np.float32) / 255.0, atol=1e-7)

    def test_grayscale_replicated(self, tmp_path):
        img = np.linspace(0, 1, 64, dtype=np.float32).reshape(8, 8)
        path = tmp_path / "g.png"
        write_image(path, img)
        back = read_image(path)
        assert back.shape == (8, 8, 3)
        np.testing.assert_array_equal(back[:, :, 0], back[:, :, 2])

    def test_resize_scales_points(self):
        img = np.zeros((100, 200, 3), dtype=np.float32)
        ann = PointAnnotation(np.array([[100.0, 50.0]]), (100, 200))
        out, ann2 = resize_image_and_points(img, ann, (50, 100))
        assert out.shape == (50, 100, 3)
        np.testing.assert_allclose(ann2.points, [[50.0, 25.0]])


class TestManifest:
    def test_deterministic_and_complete(self, tmp_path):
        f = tmp_path / "input.bin"
        f.write_bytes(b"hello")
        m1 = write_manifest(tmp_path / "m1.json", "train", 7, {"lr": 1e-3},
                            content_hash([f]), ["out.bin"])
        m2 = write_manifest(tmp_path / "m2.json", "train", 7, {"lr": 1e-3},
                            content_hash([f]), ["out.bin"])
        assert (tmp_path / "m1.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
        assert m1 == m2
        assert set(m1) == {"command", "seed", "config", "inputs_hash", "outputs"}

    def test_hash_tracks_content(self, tmp_path):
        f = tmp_path / "input.bin"
        f.write_bytes(b"one")
        h1 = content_hash([f])
        f.write_bytes(b"two")
        assert content_hash([f]) != h1
