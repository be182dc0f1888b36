import json
import subprocess
import sys

import numpy as np
import pytest

from logradial.cli import main
from logradial.datasets import LabeledImageSet, read_dataset, write_dataset

COMMANDS = ["gen-basis", "verify-steer", "synth-data", "train", "eval", "render"]


@pytest.fixture
def source_dir(tmp_path):
    rng = np.random.default_rng(0)
    images = np.zeros((40, 28, 28))
    labels = np.arange(40) % 10
    for i, d in enumerate(labels):
        images[i, 6:22, 8 + d:12 + d] = rng.uniform(0.5, 1.0)
    path = tmp_path / "src"
    write_dataset(LabeledImageSet(np.round(images * 255) / 255, labels), path, {"kind": "toy"})
    return path


@pytest.fixture
def harness(tmp_path):
    """Three bar-position classes on 12x12 images, written as an IDX directory."""
    rng = np.random.default_rng(1)
    images = np.zeros((10, 12, 12))
    labels = np.arange(10) % 3
    for i, c in enumerate(labels):
        images[i, 2 + 3 * c:4 + 3 * c, 2:10] = 1.0
        images[i] += 0.1 * rng.random((12, 12))
    data_dir = tmp_path / "harness"
    write_dataset(LabeledImageSet(np.round(np.clip(images, 0, 1) * 255) / 255, labels), data_dir, {})
    config = tmp_path / "overfit.cfg"
    config.write_text(
        "# overfit harness\n"
        "channel_widths = 4, 6, 8\n"
        "scales = 1.0, 1.5\n"
        "base_kernel_size = 5\n"
        "spatial_pool_sizes = 2, 2, 2\n"
        "upsample_factor = 1\n"
        "dense_widths = 16, 3\n"
        "input_shape = 12, 12\n"
        "learning_rate = 0.05\n"
        "momentum = 0.9\n"
        "epochs = 60\n"
        "batch_size = 10\n"
        "n_train = 10\n"
        "n_test = 0\n"
    )
    return data_dir, config


def test_help_for_every_command(capsys):
    for cmd in COMMANDS:
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out


def test_usage_errors_exit_2(capsys):
    for argv in ([], ["frobnicate"], ["gen-basis", "--size", "7"], ["verify-steer", "--bogus"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "logradial", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "verify-steer" in out.stdout


def test_gen_basis(tmp_path, capsys):
    assert main(["gen-basis", "--size", "9", "--out", str(tmp_path / "b")]) == 0
    manifest = json.loads((tmp_path / "b" / "basis_manifest.json").read_text())
    assert manifest["count"] == 24 and manifest["size"] == 9
    assert all(f["center"] == [1.0, 0.0] for f in manifest["filters"])
    head = (tmp_path / "b" / "basis_magnitude.pgm").read_bytes()[:20]
    assert head.startswith(b"P5\n79 29\n255\n")
    assert main(["gen-basis", "--size", "5", "--out", str(tmp_path / "c"), "--orders", "1,3",
                 "--orientations", "4", "--m", "0.5"]) == 0
    assert json.loads((tmp_path / "c" / "basis_manifest.json").read_text())["count"] == 8


def test_gen_basis_even_size_fails(tmp_path, capsys):
    assert main(["gen-basis", "--size", "8", "--out", str(tmp_path / "b")]) == 1
    assert "odd" in capsys.readouterr().err


def test_verify_steer(capsys):
    assert main(["verify-steer", "--trials", "5", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 5 + 3 and "FAIL" not in out


def test_synth_data_reproducible(tmp_path, source_dir, capsys):
    for name in ("a", "b"):
        assert main(["synth-data", "--kind", "local2", "--in", str(source_dir), "--out", str(tmp_path / name),
                     "--seed", "7", "--pairs", "25"]) == 0
    for f in ("images-idx3-ubyte", "labels-idx1-ubyte", "manifest.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert read_dataset(tmp_path / "a").images.shape == (25, 28, 40)
    assert main(["synth-data", "--kind", "mnist-scale", "--in", str(source_dir), "--out", str(tmp_path / "s"),
                 "--range", "0.5,0.9", "--count", "12"]) == 0
    assert read_dataset(tmp_path / "s").images.shape == (12, 28, 28)
    assert "range = 0.5,0.9" in (tmp_path / "s" / "manifest.txt").read_text()


def test_synth_data_errors(tmp_path, source_dir, capsys):
    assert main(["synth-data", "--kind", "local2", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert main(["synth-data", "--kind", "local2", "--in", str(source_dir), "--out", str(tmp_path / "o"),
                 "--range", "0.5,1"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["synth-data", "--kind", "local2", "--in", str(source_dir), "--out", "o", "--range", "0.5"])
    assert exc.value.code == 2


def test_train_eval_render_on_harness(tmp_path, harness, capsys):
    data_dir, config = harness
    ckpt = tmp_path / "run" / "model.npz"
    assert main(["train", "--config", str(config), "--data", str(data_dir), "--out", str(ckpt)]) == 0
    lines = (tmp_path / "run" / "model.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss,train_acc,val_acc" and len(lines) == 61
    assert float(lines[-1].split(",")[3]) == 1.0
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data_dir), "--split", "train"]) == 0
    assert "error rate 0.0000 on 10 samples" in capsys.readouterr().out
    image = tmp_path / "x.npy"
    np.save(image, read_dataset(data_dir).images[0])
    out = tmp_path / "renders"
    assert main(["render", "--ckpt", str(ckpt), "--layer", "1", "--out", str(out), "--input", str(image)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert "layer1_in0_filters_by_channel_scale.pgm" in names
    assert "layer1_average_activation.pgm" in names and "layer1_scale1_average_response.pgm" in names
    assert main(["render", "--ckpt", str(ckpt), "--layer", "4", "--out", str(out)]) == 1


def test_train_is_deterministic(tmp_path, harness):
    data_dir, config = harness
    text = config.read_text().replace("epochs = 60", "epochs = 3")
    config.write_text(text)
    for name in ("a", "b"):
        assert main(["train", "--config", str(config), "--data", str(data_dir),
                     "--out", str(tmp_path / name / "m.npz")]) == 0
    assert (tmp_path / "a" / "m.csv").read_bytes() == (tmp_path / "b" / "m.csv").read_bytes()


def test_train_errors(tmp_path, harness, source_dir, capsys):
    data_dir, config = harness
    assert main(["train", "--config", str(config), "--data", str(source_dir), "--out", str(tmp_path / "m.npz")]) == 1
    assert "config expects" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("widths = 3\n")
    assert main(["train", "--config", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "m.npz")]) == 1
    assert main(["eval", "--ckpt", str(tmp_path / "none.npz"), "--data", str(data_dir)]) == 1
