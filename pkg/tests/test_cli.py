"""End-to-end command-line runs on a tiny dataset (small step counts)."""

import json
from pathlib import Path

import numpy as np
import pytest

from mvaction import cli, nn, videoio

FAST = [
    "--steps", "30", "--batch-size", "4", "--eval-stride", "8",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    rc = cli.run(["dataset", "gen", "--seed", "5", "--clips-per-class", "2",
                  "--clip-length", "24", "--out-dir", str(root)])
    assert rc == 0
    return root


def test_no_command_is_usage_error(capsys):
    assert cli.run([]) == 2
    capsys.readouterr()


def test_unknown_flag_rejected(capsys):
    assert cli.run(["dataset", "gen", "--bogus", "1"]) == 2
    capsys.readouterr()


def test_dataset_layout(workspace):
    ds = workspace / "dataset"
    manifest = videoio.DatasetManifest.from_json((ds / "manifest.json").read_text())
    assert len(manifest.splits) == 16
    containers = sorted(ds.glob("clips/*.mvs"))
    assert len(containers) == 16
    # resolved-config manifest records the run
    cfgfile = json.loads((workspace / "dataset_config.json").read_text())
    assert cfgfile["seed"] == 5
    assert cfgfile["clips_per_class"] == 2


def test_decode_writes_pgms(workspace, tmp_path):
    container = sorted((workspace / "dataset" / "clips").glob("*.mvs"))[0]
    rc = cli.run(["decode", "--in", str(container), "--frames",
                  "--vectors-pgm", "--out-dir", str(tmp_path)])
    assert rc == 0
    frames = list(tmp_path.glob("*_f*.pgm"))
    vectors = list(tmp_path.glob("*_mv*_dx.pgm"))
    assert frames and vectors


def test_encode_new_gop(workspace, tmp_path):
    container = sorted((workspace / "dataset" / "clips").glob("*.mvs"))[0]
    rc = cli.run(["encode", "--in", str(container), "--block-size", "16",
                  "--gop-length", "6", "--out-dir", str(tmp_path)])
    assert rc == 0
    out = list(tmp_path.glob("*.mvs"))
    assert len(out) == 1
    cc = videoio.read_container(out[0])
    assert cc.header.gop.block_size == 16
    assert cc.header.gop.gop_length == 6


def test_decode_missing_file(tmp_path, capsys):
    rc = cli.run(["decode", "--in", str(tmp_path / "nope.mvs")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_corrupt_container_reports_error(workspace, tmp_path, capsys):
    src = sorted((workspace / "dataset" / "clips").glob("*.mvs"))[0]
    bad = tmp_path / "bad.mvs"
    blob = bytearray(src.read_bytes())
    blob[0] ^= 0xFF
    bad.write_bytes(bytes(blob))
    assert cli.run(["decode", "--in", str(bad)]) == 1
    assert "error:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def teacher_ckpt(workspace):
    out = workspace / "teacher_run"
    rc = cli.run(["train-teacher", "--dataset", str(workspace / "dataset"),
                  "--seed", "1", "--out-dir", str(out),
                  "--teacher-steps", "30"] + FAST)
    assert rc == 0
    ckpts = list(out.glob("*.nnw"))
    assert len(ckpts) == 1
    return ckpts[0]


def test_teacher_artifacts(teacher_ckpt):
    out = teacher_ckpt.parent
    assert (out / "train_teacher_config.json").exists()
    net = nn.load_weights(teacher_ckpt)
    assert net.num_classes == 8


def test_student_requires_teacher(workspace, capsys):
    rc = cli.run(["train-student", "--dataset", str(workspace / "dataset"),
                  "--strategy", "ti+st"] + FAST)
    assert rc == 1
    assert "teacher" in capsys.readouterr().err


def test_student_run_and_eval(workspace, teacher_ckpt, tmp_path):
    out = workspace / "student_run"
    rc = cli.run(["train-student", "--dataset", str(workspace / "dataset"),
                  "--teacher", str(teacher_ckpt), "--strategy", "ti+st",
                  "--seed", "1", "--out-dir", str(out)] + FAST)
    assert rc == 0
    ckpts = list(out.glob("*.nnw"))
    assert len(ckpts) == 1
    metrics = list(out.glob("*_metrics.csv"))
    assert metrics
    header = metrics[0].read_text().splitlines()[0]
    assert header == "step,lr,l_tsl,l_gt,total,train_acc_window"

    ev = tmp_path / "eval"
    rc = cli.run(["eval", "--dataset", str(workspace / "dataset"),
                  "--checkpoint", str(ckpts[0]), "--modality", "mv",
                  "--out-dir", str(ev)])
    assert rc == 0
    lines = (ev / "eval.csv").read_text().splitlines()
    assert lines[0] == "class,accuracy"
    assert lines[-1].startswith("overall,")
    assert len(lines) == 10  # header + 8 classes + overall
    conf = np.loadtxt(ev / "confusion.csv", delimiter=",")
    assert conf.shape == (8, 8)
    assert conf.sum() == 8


def test_viz_filters_mosaic(teacher_ckpt, tmp_path):
    rc = cli.run(["viz-filters", "--checkpoint", str(teacher_ckpt),
                  "--out-dir", str(tmp_path)])
    assert rc == 0
    pgms = list(tmp_path.glob("*.pgm"))
    assert len(pgms) == 1
    img = videoio.read_pgm(pgms[0])
    assert img.ndim == 2 and img.size > 0


def test_viz_filters_bad_layer(teacher_ckpt, tmp_path, capsys):
    rc = cli.run(["viz-filters", "--checkpoint", str(teacher_ckpt),
                  "--layer", "fc9", "--out-dir", str(tmp_path)])
    assert rc == 1
    capsys.readouterr()


def test_bench_command(workspace, teacher_ckpt, tmp_path):
    rc = cli.run(["bench", "--dataset", str(workspace / "dataset"),
                  "--checkpoint", str(teacher_ckpt), "--clips", "2",
                  "--iters", "1", "--warmup", "0", "--out-dir", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "bench.csv").exists()
    text = (tmp_path / "bench.txt").read_text()
    assert "mv_decode" in text and "total" in text
