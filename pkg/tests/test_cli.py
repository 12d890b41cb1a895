import json
import subprocess
import sys

import numpy as np
import pytest

from nexel.cli import main
from nexel.io.bundle import read_png
from nexel.io.checkpoint import load_checkpoint

TINY = """\
budget = 12
densify_start = 2
densify_every = 2
n_levels = 2
table_size = 256
hidden = 8
finest_ratio = 4.0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "three-quads", str(root / "b"), "--views", "5", "--test", "2",
                 "--resolution", "16", "--supersample", "1"]) == 0
    (root / "cfg.toml").write_text(TINY)
    assert main(["train", str(root / "b"), "--out", str(root / "m.nxl"), "--config", str(root / "cfg.toml"),
                 "--iterations", "6", "--seed", "3", "--log", str(root / "log.csv")]) == 0
    return root


def test_synth_layout(workspace):
    b = workspace / "b"
    assert (b / "cameras.json").is_file() and (b / "points.ply").is_file()
    assert len(list((b / "images").glob("*.png"))) == 5


def test_train_writes_checkpoint_and_log(workspace):
    ck = load_checkpoint(workspace / "m.nxl")
    assert ck.iteration == 6 and 0 < len(ck.scene) <= 12
    assert ck.config["seed"] == 3 and len(ck.cameras) == 5
    lines = (workspace / "log.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,image,texture") and len(lines) == 7


def test_render_png(workspace):
    out = workspace / "view.png"
    assert main(["render", str(workspace / "m.nxl"), "--camera", "1", "--out", str(out)]) == 0
    assert read_png(out).shape == (16, 16, 3)


def test_render_inline_camera_json(workspace):
    ck = load_checkpoint(workspace / "m.nxl")
    out = workspace / "inline.png"
    cam = json.dumps(ck.cameras[0].to_dict())
    assert main(["render", str(workspace / "m.nxl"), "--camera", cam, "--out", str(out)]) == 0
    ref = workspace / "idx0.png"
    main(["render", str(workspace / "m.nxl"), "--camera", "0", "--out", str(ref)])
    assert np.array_equal(read_png(out), read_png(ref))


def test_render_camera_out_of_range(workspace, capsys):
    assert main(["render", str(workspace / "m.nxl"), "--camera", "9", "--out", str(workspace / "x.png")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: camera-index:") and "[0, 4]" in err and "\n" not in err


def test_eval_csv_and_determinism(workspace, capsys):
    args = ["eval", str(workspace / "m.nxl"), str(workspace / "b"), "--split", "test"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    rows = first.strip().splitlines()
    assert rows[0] == "view,psnr,ssim" and len(rows) == 2 + 2
    assert rows[-1].startswith("mean,")
    vals = [float(r.split(",")[1]) for r in rows[1:-1]]
    assert float(rows[-1].split(",")[1]) == pytest.approx(np.mean(vals), abs=1e-5)


def test_info(workspace, capsys):
    assert main(["info", str(workspace / "m.nxl")]) == 0
    out = capsys.readouterr().out
    assert "iteration=6" in out and "bytes=" in out


def test_train_twice_is_bit_identical(workspace):
    out = workspace / "again.nxl"
    assert main(["train", str(workspace / "b"), "--out", str(out), "--config", str(workspace / "cfg.toml"),
                 "--iterations", "6", "--seed", "3", "--deterministic"]) == 0
    assert out.read_bytes() == (workspace / "m.nxl").read_bytes()


@pytest.mark.parametrize("argv,code", [
    (["train", "{root}/missing", "--out", "{root}/o.nxl"], "bundle-missing-file"),
    (["info", "{root}/cfg.toml"], "checkpoint"),
    (["train", "{root}/b", "--out", "{root}/o.nxl", "--config", "{root}/bad.toml"], "config-malformed"),
    (["train", "{root}/b", "--out", "{root}/o.nxl", "--config", "{root}/unknown.toml"], "config-invalid"),
])
def test_errors_are_one_line(workspace, capsys, argv, code):
    (workspace / "bad.toml").write_text("budget = = 3")
    (workspace / "unknown.toml").write_text("no_such_key = 1")
    assert main([a.format(root=workspace) for a in argv]) == 1
    err = capsys.readouterr().err
    assert err.startswith(f"error: {code}") and err.count("\n") == 1


def test_module_entry_point(workspace):
    proc = subprocess.run([sys.executable, "-m", "nexel", "info", str(workspace / "m.nxl")],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "iteration=6" in proc.stdout
