import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from dnp.cli import main
from dnp.dense import load_grid
from dnp.imageio import write_image


def run(capsys, *argv):
    code = main(["-q", *argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["train"]) == 1  # missing required options
    capsys.readouterr()


def test_table_prints_paper_values(capsys):
    code, out, _ = run(capsys, "table", "--csv")
    assert code == 0
    rows = [line.split(",") for line in out.strip().splitlines()[1:]]
    assert [int(r[5]) for r in rows] == [4, 8, 8, 16, 16, 16, 16, 32]
    assert [int(r[6]) for r in rows] == [6, 10, 10, 18, 18, 18, 18, 34]


def test_table_accepts_net_file(capsys):
    code, out, _ = run(capsys, "table", "--net", str(Path(__file__).resolve().parents[1] / "nets" / "paper.net"))
    assert code == 0 and "conv5" in out


def test_bench(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--csv", str(tmp_path / "b.csv"))
    assert code == 0 and "2213" in out and "46.10" in out
    assert (tmp_path / "b.csv").read_text().startswith("width,height")
    assert main(["bench", "--size", "640by480"]) == 1


def test_data_errors(capsys, tmp_path):
    assert main(["-q", "eval", "--data", str(tmp_path / "none"), "--detections", "x.csv"]) == 2
    assert main(["-q", "table", "--net", str(tmp_path / "missing.net")]) == 2
    capsys.readouterr()


def test_pipeline(capsys, tmp_path):
    data = tmp_path / "data"
    assert run(capsys, "synth", "--n", "10", "--n-test", "3", "--size", "128", "--out", str(data))[0] == 0
    empty = tmp_path / "empty.csv"
    empty.write_text("image_id,left,top,right,bottom,score\n")
    code, out, _ = run(capsys, "eval", "--data", str(data), "--detections", str(empty))
    assert code == 0 and out.strip() == "AP 0.0000"

    cascade = tmp_path / "model.cascade"
    common = ["--net", "tiny", "--layer", "pool2", "--scales", "40", "56", "--proposal-stride", "16"]
    code, out, _ = run(
        capsys, "train", "--data", str(data), *common, "--features", "dnp,hog", "--pool-size", "100",
        "--stages", "2", "--weaks", "4", "--neg-candidates", "50", "--neg-per-image", "10", "--out", str(cascade),
    )
    assert code == 0 and cascade.exists() and cascade.with_suffix(".pool").exists()
    dets = tmp_path / "dets.csv"
    code, out, _ = run(capsys, "detect", "--data", str(data), "--cascade", str(cascade), *common, "--out", str(dets))
    assert code == 0 and dets.read_text().startswith("image_id,left,top,right,bottom,score")
    code, out, _ = run(capsys, "eval", "--data", str(data), "--detections", str(dets), "--mode", "11pt")
    assert code == 0 and 0.0 <= float(out.split()[1]) <= 1.0

    code, out, _ = run(capsys, "visualize", "--data", str(data), "--cascade", str(cascade), "--k", "3",
                       "--out", str(tmp_path / "vis"))
    assert code == 0 and (tmp_path / "vis" / "index.csv").exists()


def test_extract_and_forward(capsys, tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(80, 90, 3), dtype=np.uint8)
    path = tmp_path / "im.ppm"
    write_image(path, img)
    out = tmp_path / "g.dnpg"
    code, text, _ = run(capsys, "extract", "--image", str(path), "--out", str(out))
    assert code == 0 and load_grid(out).dim == 32
    code, text, _ = run(capsys, "extract", "--image", str(path), "--hog", "--out", str(out))
    assert code == 0 and load_grid(out).dim == 36
    npy = tmp_path / "f.npy"
    code, text, _ = run(capsys, "forward", "--image", str(path), "--layer", "conv2", "--out", str(npy))
    assert code == 0 and np.load(npy).shape == (32, 15, 15)
    w = tmp_path / "w.dnpw"
    assert run(capsys, "init-weights", "--weight-seed", "3", "--out", str(w))[0] == 0
    assert run(capsys, "forward", "--image", str(path), "--weights", str(w))[0] == 0
    assert run(capsys, "forward", "--image", str(path), "--weights", str(w), "--net", "paper")[0] == 2


@pytest.mark.skipif(shutil.which("dnp") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["dnp", "table"], capture_output=True, text=True)
    assert res.returncode == 0 and "pool3" in res.stdout
    assert subprocess.run(["dnp"], capture_output=True).returncode == 1
