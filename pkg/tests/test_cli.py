import json
from pathlib import Path

import numpy as np
import pytest

from lapgsr.cli import main
from lapgsr.data import decode_image, encode_image, load_dataset
from lapgsr.metrics import bicubic_predictor, evaluate

TINY_TRAIN = {
    "epochs": 3, "batch": 4, "seed": 9, "lr_patch": [4, 4], "checkpoint_every": 1,
    "generator": {"blocks_ltb": 1, "blocks_mtb": 1, "blocks_htb": 1, "width_ltb": 8,
                  "width_mtb": 8, "width_htb": 4, "width_stem": 4},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def config_line(out):
    line = next(l for l in out.splitlines() if l.startswith("config "))
    return json.loads(line[len("config "):])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--n", "10", "--seed", "7", "--out", str(root),
                 "--width", "48", "--height", "32"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert main(["train", "--config", str(cfg), "--data", str(corpus), "--out", str(out),
                 "--epochs", "1"]) == 0
    return out


class TestSynth:
    def test_writes_and_is_deterministic(self, corpus, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--n", 10, "--seed", 7, "--out", tmp_path,
                           "--width", 48, "--height", 32)
        assert code == 0 and config_line(out)["seed"] == 7
        files = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*.png"))
        assert len(files) == 30
        for rel in files:
            assert (tmp_path / rel).read_bytes() == (corpus / rel).read_bytes()

    def test_bad_extent(self, tmp_path, capsys):
        code, _, err = run(capsys, "synth", "--n", 2, "--seed", 0, "--out", tmp_path,
                           "--width", 321, "--height", 240)
        assert code != 0 and "extents must be divisible by 4" in err


class TestParser:
    def test_unknown_flag_is_an_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["report", "--frobnicate", "1"])
        assert exc.value.code != 0
        assert "unrecognized" in capsys.readouterr().err

    def test_missing_required(self, capsys):
        with pytest.raises(SystemExit):
            main(["synth", "--n", "3"])


class TestPyramid:
    def test_constant_image_bands_are_mid_gray(self, tmp_path, capsys):
        encode_image(tmp_path / "flat.png", np.full((3, 32, 48), 90, np.uint8))
        code, _, _ = run(capsys, "pyramid", "--image", tmp_path / "flat.png", "--out", tmp_path / "p")
        assert code == 0
        pngs = sorted(p.name for p in (tmp_path / "p").glob("*.png"))
        assert pngs == ["L2.png", "L3.png", "residual.png"]
        for name in ("L2.png", "L3.png"):
            assert np.all(np.round(decode_image(tmp_path / "p" / name) * 255) == 128)
        assert (tmp_path / "p" / "pyramid.json").exists()

    def test_with_thermal(self, corpus, tmp_path, capsys):
        rgb = corpus / "train/rgb/s0000.png"
        thermal = corpus / "train/thermal_lr/s0000.png"
        code, _, _ = run(capsys, "pyramid", "--image", rgb, "--thermal", thermal, "--out", tmp_path,
                         "--figure")
        assert code == 0
        assert len(list(tmp_path.glob("*.png"))) == 7
        np.testing.assert_array_equal(decode_image(tmp_path / "modified_L1.png"), decode_image(thermal))

    def test_ratio_mismatch(self, corpus, tmp_path, capsys):
        code, _, err = run(capsys, "pyramid", "--image", corpus / "train/rgb/s0000.png",
                           "--thermal", corpus / "train/rgb/s0001.png", "--out", tmp_path)
        assert code != 0 and "error" in err


class TestReport:
    def test_headline_count(self, capsys):
        code, out, _ = run(capsys, "report", "--hr-width", 320, "--hr-height", 240,
                           "--blocks", "2,3,3", "--widths", "64,64,12")
        assert code == 0
        row = out.splitlines()[2].split(",")
        assert row[0] == "2-3-3"
        assert abs(int(row[1]) - 398_000) <= 0.03 * 398_000

    def test_ablation_with_figure(self, tmp_path, capsys):
        code, out, _ = run(capsys, "report", "--ablation", "--out", tmp_path)
        assert code == 0
        csv_rows = [l for l in out.splitlines() if l[:1].isdigit()]
        assert len(csv_rows) == 11
        assert (tmp_path / "report.png").stat().st_size > 0
        assert json.loads((tmp_path / "report.json").read_text())["config"]["hr_width"] == 320

    def test_reads_generator_config_file(self, tmp_path, capsys):
        path = tmp_path / "g.json"
        path.write_text(json.dumps({"blocks_ltb": 3, "blocks_mtb": 7, "blocks_htb": 3}))
        _, out, _ = run(capsys, "report", "--config", path)
        assert out.splitlines()[2].startswith("3-7-3,")


class TestTrainEvalInfer:
    def test_train_outputs(self, trained):
        names = {p.name for p in trained.rglob("*") if p.is_file()}
        assert {"train_log.csv", "config.json", "training_curves.png", "best.json", "last.bin",
                "epoch_0001.json"} <= names
        cfg = json.loads((trained / "config.json").read_text())["config"]
        # flag beats config file
        assert cfg["train"]["epochs"] == 1 and cfg["seed"] == 9

    def test_eval_bicubic_stub_matches_baseline(self, corpus, capsys):
        code, out, _ = run(capsys, "eval", "--ckpt", "bicubic", "--data", corpus, "--split", "train")
        assert code == 0
        expected = evaluate(bicubic_predictor, load_dataset(corpus).train)
        rows = [l.split(",") for l in out.splitlines() if l.startswith("s0")]
        assert [r[0] for r in rows] == expected.ids
        np.testing.assert_allclose([float(r[1]) for r in rows], expected.psnr, atol=1e-5)
        np.testing.assert_allclose([float(r[2]) for r in rows], expected.ssim, atol=1e-5)

    def test_eval_checkpoint(self, corpus, trained, tmp_path, capsys):
        code, out, _ = run(capsys, "eval", "--ckpt", trained / "checkpoints/best.json", "--data", corpus,
                           "--split", "test", "--out", tmp_path)
        assert code == 0 and "summary" in out
        for name in ("eval_test.csv", "eval_test.json", "eval_test.png", "eval_test.run.json"):
            assert (tmp_path / name).exists()

    def test_infer_extent(self, corpus, trained, tmp_path, capsys):
        out_png = tmp_path / "sr.png"
        code, _, _ = run(capsys, "infer", "--ckpt", trained / "checkpoints/last.json",
                         "--rgb", corpus / "test/rgb/s0009.png",
                         "--thermal", corpus / "test/thermal_lr/s0009.png", "--out", out_png)
        assert code == 0
        lr = decode_image(corpus / "test/thermal_lr/s0009.png")
        assert decode_image(out_png).shape[1:] == (4 * lr.shape[1], 4 * lr.shape[2])
        assert out_png.with_suffix(".json").exists()

    def test_grid(self, corpus, trained, tmp_path, capsys):
        code, _, _ = run(capsys, "grid", "--ckpt", trained / "checkpoints/best.json", "--data", corpus,
                         "--ids", "s0000,s0009", "--out", tmp_path)
        assert code == 0
        strip = decode_image(tmp_path / "s0000.png")
        assert strip.shape == (3, 32, 4 * 48 + 3 * 4)
        assert (tmp_path / "grid.json").exists()

    def test_grid_unknown_id(self, corpus, tmp_path, capsys):
        code, _, err = run(capsys, "grid", "--ckpt", "bicubic", "--data", corpus, "--ids", "zzz",
                           "--out", tmp_path)
        assert code != 0 and "zzz" in err

    def test_missing_checkpoint(self, corpus, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        code, _, err = run(capsys, "eval", "--ckpt", missing, "--data", corpus)
        assert code != 0 and str(missing) in err

    def test_missing_config(self, corpus, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", tmp_path / "none.json", "--data", corpus,
                           "--out", tmp_path)
        assert code != 0 and "none.json" in err
