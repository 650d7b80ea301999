import csv
import os

import numpy as np
import pytest

from panomamba import images, pano
from panomamba.cli import main
from panomamba.tensor import Tensor

SMALL_CFG = """
# toy config for CLI tests
T = 200
sample_steps = 4
pano_w = 128
pano_h = 64
view_size = 64
d_model = 32
d_key = 16
d_time = 64
unet_widths = [16,32,48,64]
vcr_blocks = 2
warmup_steps = 2
dataset_size = 4
seed = 5
gma_active_scales = [2,3,4]
cfg_scale = 2.5
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "toy.cfg"
    p.write_text(SMALL_CFG, encoding="utf-8")
    return str(p)


def band_image(tmp_path):
    from conftest import band_limited_panorama

    img = band_limited_panorama(256, 128)
    path = tmp_path / "pano.png"
    images.write_png(path, img.rgb)
    return str(path), img


class TestProject:
    def test_cubemap_roundtrip_psnr(self, tmp_path):
        src, img = band_image(tmp_path)
        out_cube = str(tmp_path / "cube_{face}.png")
        assert main(["project", "--in", src, "--to", "cubemap", "--out", out_cube,
                     "--face-size", "64"]) == 0
        back = str(tmp_path / "back.png")
        assert main(["project", "--in", out_cube, "--to", "equirect", "--out", back,
                     "--width", "256"]) == 0
        rec = images.read_png(back)
        band = slice(12, 116)
        # quantization to 8 bits twice costs a few dB on top of resampling
        assert pano.psnr(img.np[band], rec[band]) >= 30.0

    def test_nfov_constant_image(self, tmp_path):
        path = tmp_path / "const.png"
        images.write_png(path, np.full((64, 128, 3), 0.5))
        out = tmp_path / "view.png"
        assert main(["project", "--in", str(path), "--to", "nfov", "--lon", "0",
                     "--lat", "0", "--out", str(out)]) == 0
        view = images.read_png(out)
        assert np.allclose(view, view[0, 0], atol=1 / 255)

    def test_missing_in_flag_exits_1(self, capsys):
        assert pytest.raises(SystemExit, main, ["project", "--to", "nfov", "--out", "x.png"]).value.code == 1

    def test_unknown_flag_exits_1(self):
        assert pytest.raises(SystemExit, main, ["project", "--frobnicate"]).value.code == 1

    def test_missing_file_exits_2(self, tmp_path):
        assert main(["project", "--in", str(tmp_path / "nope.png"), "--to", "nfov",
                     "--out", str(tmp_path / "o.png")]) == 2

    def test_ppm_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).uniform(size=(16, 24, 3))
        p = tmp_path / "img.ppm"
        images.write_ppm(p, arr)
        back = images.read_ppm(p)
        assert np.abs(back - arr).max() <= 1 / 255 + 1e-9


class TestTrain:
    def test_smoke_run_writes_rows_and_ckpt(self, tmp_path, cfg_file):
        ckpt = tmp_path / "m.ckpt"
        csvp = tmp_path / "loss.csv"
        rc = main(["train", "--config", cfg_file, "--data-dir", str(tmp_path / "data"),
                   "--steps", "10", "--ckpt-out", str(ckpt), "--loss-csv", str(csvp)])
        assert rc == 0 and ckpt.exists()
        rows = list(csv.reader(open(csvp)))
        assert rows[0] == ["step", "loss", "lr"]
        assert len(rows) == 11
        assert [r[0] for r in rows[1:]] == [str(i) for i in range(1, 11)]
        # corpus and vocabulary materialized for inspection
        assert (tmp_path / "data" / "captions.txt").exists()
        assert (tmp_path / "data" / "pano_0000.png").exists()
        vocab = (tmp_path / "data" / "vocab.txt").read_text(encoding="utf-8").splitlines()
        assert vocab[:2] == ["<pad>", "<unk>"]

    def test_resume_continues_numbering_and_matches(self, tmp_path, cfg_file):
        data = str(tmp_path / "data")
        full_csv = tmp_path / "full.csv"
        main(["train", "--config", cfg_file, "--data-dir", data, "--steps", "6",
              "--ckpt-out", str(tmp_path / "full.ckpt"), "--loss-csv", str(full_csv)])
        first_csv = tmp_path / "first.csv"
        main(["train", "--config", cfg_file, "--data-dir", data, "--steps", "3",
              "--ckpt-out", str(tmp_path / "a.ckpt"), "--loss-csv", str(first_csv)])
        second_csv = tmp_path / "second.csv"
        main(["train", "--config", cfg_file, "--data-dir", data, "--steps", "3",
              "--ckpt-out", str(tmp_path / "b.ckpt"), "--resume", str(tmp_path / "a.ckpt"),
              "--loss-csv", str(second_csv)])
        full = list(csv.reader(open(full_csv)))[1:]
        resumed = list(csv.reader(open(second_csv)))[1:]
        assert [r[0] for r in resumed] == ["4", "5", "6"]
        assert [r[1] for r in resumed] == [r[1] for r in full[3:]]

    def test_bad_config_exits_1(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("no_such_key = 3\n")
        rc = main(["train", "--config", str(bad), "--data-dir", str(tmp_path / "d"),
                   "--steps", "1", "--ckpt-out", str(tmp_path / "c.ckpt")])
        assert rc == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("gen")
    cfg = tmp / "toy.cfg"
    cfg.write_text(SMALL_CFG, encoding="utf-8")
    ckpt = tmp / "m.ckpt"
    main(["train", "--config", str(cfg), "--data-dir", str(tmp / "data"),
          "--steps", "4", "--ckpt-out", str(ckpt)])
    seed_png = tmp / "seed.png"
    images.write_png(seed_png, np.random.default_rng(1).uniform(size=(64, 64, 3)))
    return str(cfg), str(ckpt), str(seed_png), tmp


class TestGenerate:
    def test_three_guidance_modes(self, trained):
        cfg, ckpt, seed_png, tmp = trained
        for i, extra in enumerate((["--seed-image", seed_png],
                                   ["--text", "a cool scene with 2 boxes"],
                                   ["--seed-image", seed_png, "--text", "a cool scene"])):
            out = str(tmp / f"out{i}")
            rc = main(["generate", "--ckpt", ckpt, "--config", cfg, "--out-dir", out] + extra)
            assert rc == 0
            assert os.path.exists(os.path.join(out, "panorama.png"))
            mask = images.read_mask_png(os.path.join(out, "mask.png"))
            assert np.all(mask == 1.0)
            meta = open(os.path.join(out, "meta.txt")).read()
            assert "seed = 5" in meta

    def test_neither_guidance_exits_1(self, trained):
        cfg, ckpt, _, tmp = trained
        rc = main(["generate", "--ckpt", ckpt, "--config", cfg, "--out-dir", str(tmp / "x")])
        assert rc == 1

    def test_byte_identical_reruns(self, trained):
        cfg, ckpt, seed_png, tmp = trained
        outs = []
        for tag in ("da", "db"):
            out = str(tmp / tag)
            assert main(["generate", "--ckpt", ckpt, "--config", cfg, "--out-dir", out,
                         "--seed-image", seed_png, "--text", "a gray scene"]) == 0
            outs.append(open(os.path.join(out, "panorama.png"), "rb").read())
        assert outs[0] == outs[1]

    def test_trajectory_dumps(self, trained):
        cfg, ckpt, seed_png, tmp = trained
        out = str(tmp / "dumps")
        assert main(["generate", "--ckpt", ckpt, "--config", cfg, "--out-dir", out,
                     "--seed-image", seed_png, "--dump-every", "2"]) == 0
        snaps = os.listdir(os.path.join(out, "trajectory"))
        assert snaps and all(s.endswith(".png") for s in snaps)


class TestVerify:
    def test_scan_suite_passes(self):
        assert main(["verify", "--suite", "scan"]) == 0

    def test_jobs_flag(self):
        assert main(["verify", "--suite", "vcr", "--jobs", "3"]) == 0

    def test_unknown_suite_exits_1(self):
        assert pytest.raises(SystemExit, main, ["verify", "--suite", "nope"]).value.code == 1


class TestBench:
    def test_csv_columns_and_tolerance(self, tmp_path, capsys):
        assert main(["bench", "--L", "4096", "--N", "16", "--D", "8"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0] == "L,N,D,variant,wall_ns,max_abs_err"
        for line in out[1:]:
            fields = line.split(",")
            assert fields[3] in ("seq", "parallel")
            assert float(fields[5]) <= 1e-10
        assert len(out) == 3

    def test_L1_runs(self, capsys):
        assert main(["bench", "--L", "1", "--N", "2", "--D", "2", "--variant", "seq"]) == 0

    def test_bad_sizes_exit_1(self):
        assert main(["bench", "--L", "0", "--N", "2", "--D", "2"]) == 1

    def test_f32_mode(self, capsys):
        assert main(["bench", "--L", "64", "--N", "4", "--D", "4", "--dtype", "f32"]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        for line in out[1:]:
            assert float(line.split(",")[5]) <= 1e-4
