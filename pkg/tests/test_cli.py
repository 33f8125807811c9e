import math
import os
import shutil

import numpy as np
import pytest

from glab import cli, imaging

SMALL = """\
data.class_count=4
capture.count=3
ncb.count=24
ncb.epochs=5
attack.max_iterations=15
bench.strategies=GGI,MGIC
"""


def run(cfg_path, cmd, *overrides):
    argv = [cmd, "--config", str(cfg_path)]
    for o in overrides:
        argv += ["--set", o]
    return cli.main(argv)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.cfg"
    cfg.write_text(SMALL + f"output.dir={root / 'out'}\n")
    for cmd in ("train", "capture", "bench"):
        assert run(cfg, cmd) == 0
    return root, cfg


def test_pipeline_outputs(pipeline):
    root, _ = pipeline
    out = root / "out"
    for name in ("model.weights", "ncb.weights", "bench.csv", "bench_summary.csv", "bench.png",
                 "attack_GGI.csv", "attack_MGIC.csv",
                 "manifest_train.txt", "manifest_capture.txt", "manifest_bench.txt"):
        assert (out / name).exists(), name
    assert sorted(os.listdir(out / "captures")) == [f"capture_{i:03d}.bin" for i in range(3)]
    assert len(os.listdir(out / "recon" / "MGIC")) == 3
    summary = cli.read_csv(out / "bench_summary.csv")
    assert [r["strategy"] for r in summary] == ["GGI", "MGIC"]
    rows = cli.read_csv(out / "bench.csv")
    assert list(rows[0]) == cli.EVAL_HEADER and len(rows) == 6


def test_manifest_rerun_is_byte_identical(pipeline):
    root, _ = pipeline
    manifest = root / "out" / "manifest_bench.txt"
    rerun = root / "rerun"
    for cmd in ("train", "capture", "bench"):
        assert run(manifest, cmd, f"output.dir={rerun}") == 0
    for line in manifest.read_text().splitlines():
        if line.startswith("# output "):
            rel = line.split()[2]
            a, b = (root / "out" / rel).read_bytes(), (rerun / rel).read_bytes()
            assert a == b, rel


def test_eval_of_perfect_reconstruction(pipeline, tmp_path):
    root, cfg = pipeline
    out = tmp_path / "copy"
    shutil.copytree(root / "out", out)
    for name in os.listdir(out / "truth"):
        if name.startswith("image_"):
            shutil.copy(out / "truth" / name, out / "recon" / "GGI" / name)
    assert run(cfg, "eval", f"output.dir={out}", "attack.strategy=GGI") == 0
    for r in cli.read_csv(out / "eval_GGI.csv"):
        assert math.isinf(float(r["psnr"])) and float(r["ssim"]) == pytest.approx(1.0, abs=1e-9)
    assert (out / "eval_GGI.png").exists()


def test_csv_numbers_round_trip():
    for v in (0.1, 1 / 3, 1e-300, math.inf, 12.0):
        assert float(cli.fmt(v)) == v


def test_missing_inputs_exit_nonzero(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"output.dir={tmp_path / 'empty'}\n")
    assert run(cfg, "attack") == 1
    assert "missing input" in capsys.readouterr().err
    assert run(tmp_path / "nope.cfg", "train") == 1
    assert run(cfg, "train", "attack.strategy=XYZ") == 1


def test_fingerprint_mismatch_exits_nonzero(pipeline, tmp_path, capsys):
    root, cfg = pipeline
    out = tmp_path / "swap"
    shutil.copytree(root / "out", out)
    assert run(cfg, "train", f"output.dir={out}", "model.seed=5") == 0
    assert run(cfg, "attack", f"output.dir={out}", "model.seed=5") == 1
    assert "fingerprint" in capsys.readouterr().err.lower()
