import json

import numpy as np
import pytest

from fusioncount.cli import main
from fusioncount.fileio import read_dmap, write_checkpoint
from fusioncount.model import init_params, tiny_config


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


TINY_CONFIG_TEXT = """
# desk-scale run
backbone_channels = 4,6,6,8
block_count = 2
block_channels = 8
lr = 3e-3
lr_warmup = 2
epochs = 6
batch = 4
crop = 64
seed = 0
sigma = 2.0
"""


@pytest.fixture
def dataset_dir(tmp_path, capsys):
    out = tmp_path / "data"
    code, _, _ = run_cli(
        capsys, "gen-data", "--out", str(out), "--scenes", "5",
        "--size", "64x64", "--count-range", "2:8", "--seed", "11",
    )
    assert code == 0
    return out


class TestGenData:
    def test_outputs_present(self, dataset_dir):
        assert (dataset_dir / "annotations.json").exists()
        assert (dataset_dir / "manifest.json").exists()
        assert len(list(dataset_dir.glob("scene_*.png"))) == 5

    def test_zero_scenes(self, tmp_path, capsys):
        out = tmp_path / "empty"
        code, _, _ = run_cli(capsys, "gen-data", "--out", str(out), "--scenes", "0")
        assert code == 0
        assert json.loads((out / "annotations.json").read_text()) == []

    def test_seed_reproducibility(self, tmp_path, capsys):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code, _, _ = run_cli(
                capsys, "gen-data", "--out", str(out), "--scenes", "3", "--seed", "7"
            )
            assert code == 0
            outs.append(out)
        for png in ("scene_0000.png", "scene_0002.png", "annotations.json"):
            assert (outs[0] / png).read_bytes() == (outs[1] / png).read_bytes()

    def test_fixed_count_range(self, tmp_path, capsys):
        out = tmp_path / "five"
        code, _, _ = run_cli(
            capsys, "gen-data", "--out", str(out), "--scenes", "4",
            "--count-range", "5:5",
        )
        assert code == 0
        records = json.loads((out / "annotations.json").read_text())
        assert all(len(r["points"]) == 5 for r in records)

    def test_unwritable_path_exit_2(self, capsys):
        code, _, err = run_cli(
            capsys, "gen-data", "--out", "/proc/definitely/not/writable", "--scenes", "1"
        )
        assert code == 2


class TestMakeGt:
    def test_dmap_sums_match_counts(self, dataset_dir, tmp_path, capsys):
        gt = tmp_path / "gt"
        code, _, _ = run_cli(
            capsys, "make-gt", "--data", str(dataset_dir), "--out", str(gt),
            "--sigma", "2.0",
        )
        assert code == 0
        records = json.loads((dataset_dir / "annotations.json").read_text())
        for rec in records:
            stem = rec["image"].removesuffix(".png")
            count = len(rec["points"])
            tol = 1e-3 * max(count, 1)
            for suffix in (".dmap", ".q4.dmap", ".q8.dmap"):
                total = float(np.sum(read_dmap(gt / f"{stem}{suffix}").values,
                                     dtype=np.float64))
                assert total == pytest.approx(count, abs=tol)
            assert (gt / f"{stem}.seg.png").exists()

    def test_rerun_identical_bytes(self, dataset_dir, tmp_path, capsys):
        gts = []
        for name in ("gt1", "gt2"):
            gt = tmp_path / name
            code, _, _ = run_cli(
                capsys, "make-gt", "--data", str(dataset_dir), "--out", str(gt)
            )
            assert code == 0
            gts.append(gt)
        for f in sorted(p.name for p in gts[0].iterdir()):
            assert (gts[0] / f).read_bytes() == (gts[1] / f).read_bytes()

    def test_sigma_changes_bytes_not_sums(self, dataset_dir, tmp_path, capsys):
        a, b = tmp_path / "s2", tmp_path / "s3"
        run_cli(capsys, "make-gt", "--data", str(dataset_dir), "--out", str(a),
                "--sigma", "2.0")
        run_cli(capsys, "make-gt", "--data", str(dataset_dir), "--out", str(b),
                "--sigma", "3.0")
        da = read_dmap(a / "scene_0000.dmap")
        db = read_dmap(b / "scene_0000.dmap")
        assert da.values.tobytes() != db.values.tobytes()
        assert da.total() == pytest.approx(db.total(), abs=1e-3)

    def test_missing_annotations_exit_3(self, tmp_path, capsys):
        lonely = tmp_path / "lonely"
        lonely.mkdir()
        from fusioncount.fileio import write_image

        write_image(lonely / "scene_0000.png", np.zeros((16, 16, 3), dtype=np.float32))
        code, _, err = run_cli(
            capsys, "make-gt", "--data", str(lonely), "--out", str(tmp_path / "x")
        )
        assert code == 3
        assert "annotation" in err

    def test_unannotated_image_exit_3(self, dataset_dir, tmp_path, capsys):
        from fusioncount.fileio import write_image

        write_image(dataset_dir / "scene_9999.png", np.zeros((16, 16, 3), dtype=np.float32))
        code, _, err = run_cli(
            capsys, "make-gt", "--data", str(dataset_dir), "--out", str(tmp_path / "y")
        )
        assert code == 3
        assert "scene_9999.png" in err


class TestTrainEvalInfer:
    @pytest.fixture
    def trained(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY_CONFIG_TEXT)
        out = tmp_path / "run"
        code, out_s, _ = run_cli(
            capsys, "train", "--data", str(dataset_dir), "--config", str(cfg),
            "--out", str(out),
        )
        assert code == 0
        payload = json.loads(out_s.strip().splitlines()[-1])
        assert np.isfinite(payload["final_loss"])
        return out

    def test_train_outputs(self, trained):
        assert (trained / "checkpoint.ifnw").exists()
        history = (trained / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,lr,loss_total,loss_I,loss_C,loss_S"
        assert len(history) == 7
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["config"]["alpha_ifm"] == 0.3
        assert manifest["config"]["epochs"] == 6

    def test_eval_json(self, dataset_dir, trained, capsys):
        code, out, _ = run_cli(
            capsys, "eval", "--data", str(dataset_dir),
            "--ckpt", str(trained / "checkpoint.ifnw"), "--sigma", "2.0",
        )
        assert code == 0
        report = json.loads(out.strip().splitlines()[-1])
        assert set(report) == {"mae", "mse", "psnr", "ssim"}
        assert report["mae"] <= report["mse"]

    def test_eval_oracle_is_perfect(self, dataset_dir, capsys):
        code, out, _ = run_cli(
            capsys, "eval", "--data", str(dataset_dir), "--oracle", "--sigma", "2.0"
        )
        assert code == 0
        report = json.loads(out.strip().splitlines()[-1])
        assert report["mae"] == pytest.approx(0.0, abs=1e-3)
        assert report["psnr"] == 99.0
        assert report["ssim"] == pytest.approx(1.0, abs=1e-9)

    def test_infer_count_matches_dmap_and_eval_path(self, dataset_dir, trained,
                                                    tmp_path, capsys):
        out_dmap = tmp_path / "pred.dmap"
        code, out, _ = run_cli(
            capsys, "infer", "--image", str(dataset_dir / "scene_0000.png"),
            "--ckpt", str(trained / "checkpoint.ifnw"), "--out", str(out_dmap),
        )
        assert code == 0
        count = json.loads(out.strip().splitlines()[-1])["count"]
        stored = read_dmap(out_dmap)
        assert count == float(np.sum(stored.values, dtype=np.float64))
        assert out_dmap.with_suffix(".dmap.mask.png").exists()

    def test_infer_deterministic(self, dataset_dir, trained, tmp_path, capsys):
        counts = []
        for name in ("p1.dmap", "p2.dmap"):
            code, out, _ = run_cli(
                capsys, "infer", "--image", str(dataset_dir / "scene_0001.png"),
                "--ckpt", str(trained / "checkpoint.ifnw"),
                "--out", str(tmp_path / name),
            )
            assert code == 0
            counts.append(json.loads(out.strip().splitlines()[-1])["count"])
        assert counts[0] == counts[1]
        assert (tmp_path / "p1.dmap").read_bytes() == (tmp_path / "p2.dmap").read_bytes()

    def test_corrupt_checkpoint_exit_4(self, dataset_dir, tmp_path, capsys):
        bad = tmp_path / "bad.ifnw"
        bad.write_bytes(b"JUNKDATA")
        code, _, err = run_cli(
            capsys, "infer", "--image", str(dataset_dir / "scene_0000.png"),
            "--ckpt", str(bad), "--out", str(tmp_path / "o.dmap"),
        )
        assert code == 4

    def test_unknown_config_key_exit_2(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("warp_speed = 9\n")
        code, _, err = run_cli(
            capsys, "train", "--data", str(dataset_dir), "--config", str(cfg),
            "--out", str(tmp_path / "r"),
        )
        assert code == 2
        assert "warp_speed" in err


MICRO_CONFIG_TEXT = """
backbone_channels = 2,3,3,4
block_count = 1
block_channels = 4
"""


class TestGradcheckCommand:
    def test_micro_model_passes(self, tmp_path, capsys):
        cfg = tmp_path / "micro.cfg"
        cfg.write_text(MICRO_CONFIG_TEXT)
        code, out, _ = run_cli(
            capsys, "gradcheck", "--config", str(cfg), "--size", "16"
        )
        assert code == 0
        payload = json.loads(out.strip().splitlines()[-1])
        assert payload["max_rel_error"] < 1e-3

    def test_tolerance_failure_exit_5(self, tmp_path, capsys):
        cfg = tmp_path / "micro.cfg"
        cfg.write_text(MICRO_CONFIG_TEXT)
        code, _, err = run_cli(
            capsys, "gradcheck", "--config", str(cfg), "--size", "16",
            "--tolerance", "1e-18",
        )
        assert code == 5


def test_console_entry_point():
    import subprocess, sys

    proc = subprocess.run(
        [sys.executable, "-m", "fusioncount.cli", "--help"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout
