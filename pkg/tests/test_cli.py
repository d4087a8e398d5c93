import struct
import subprocess
import sys

import pytest

from actcompress.harness.cli import main


def run(*args):
    return subprocess.run([sys.executable, "-m", "actcompress", *args], capture_output=True, text=True)


def test_train_writes_csv(tmp_path):
    out = tmp_path / "m.csv"
    code = main(["train", "--model", "mlp:hidden=8", "--dataset", "synthetic:n=40,d=4,k=2",
                 "--epochs", "1", "--batch-size", "16", "--level", "L3", "--bits", "2", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("step,epoch,loss") and len(lines) == 3


def test_memreport_stdout(capsys, tmp_path):
    cfg = tmp_path / "block.cfg"
    cfg.write_text("model = block\ndataset = synthetic:n=16,d=1024,k=2\ninput_shape = 4,16,16\n"
                   "batch_size = 8\n")
    assert main(["memreport", "--config", str(cfg), "--level", "L2", "--bits", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1] == "ratio,,,,,,,,12.190476"


def test_profile_variance_and_heterogeneity(tmp_path, capsys):
    common = ["--model", "linear(4,8) bn(8) relu linear(8,2)", "--dataset", "synthetic:n=64,d=4,k=2",
              "--batch-size", "16", "--level", "L2", "--bits", "2"]
    assert main(["profile-variance", *common, "--trials", "5", "--sampling-batches", "5",
                 "--adapt-steps", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "source,0:linear,1:batchnorm,3:linear"
    assert [l.split(",")[0] for l in lines[1:]] == ["0:linear", "1:batchnorm", "3:linear", "sampling", "total"]
    out = tmp_path / "h.csv"
    assert main(["heterogeneity", *common, "--out", str(out)]) == 0
    assert (tmp_path / "h_range_histogram.csv").exists()
    assert (tmp_path / "h_layer_sensitivity.csv").read_text().count("\n") == 4


def test_sweep(capsys):
    assert main(["sweep", "--model", "quadratic", "--dataset", "linreg:n=32,d=4", "--config", "/dev/null",
                 "--epochs", "1", "--bits-list", "1,2", "--levels", "L2,L3", "--trials", "3",
                 "--batch-size", "8", "--lr", "0.05"]) == 2  # ce on regression data
    capsys.readouterr()


def test_exit_codes(tmp_path):
    assert run("train", "--bits", "1.5", "--level", "L2").returncode == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = lots\n")
    assert run("train", "--config", str(bad)).returncode == 2
    assert run("train", "--config", str(tmp_path / "missing.cfg")).returncode == 2
    img = tmp_path / "img"
    img.write_bytes(struct.pack(">I", 0x803) + b"\x00\x00")
    r = run("train", "--dataset", f"idx:images={img},labels={img}")
    assert r.returncode == 3 and "byte offset" in r.stderr
    assert run("frobnicate").returncode == 2
