"""End-to-end command-line runs on a tiny dataset."""

import csv
import subprocess
import sys

import pytest
import yaml

from gofield.cli import THREADS_ENV, build_parser, run
from gofield.codec import read_gof

TINY_CONFIG = dict(
    keyframe_iters=40,
    residual_iters=15,
    rays_per_batch=128,
    n_samples=12,
    lr_grid=5e-2,
    lr_net=1e-2,
    lr_entropy=1e-2,
    basis_resolutions=[3, 4, 5, 6, 7, 8],
    basis_channels=2,
    coeff_resolution=5,
    log_every=10,
)


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["--threads", "1", "synth", str(root / "data"), "--frames", "3", "--train-cams", "4",
                "--test-cams", "2", "--size", "16", "--samples", "16"]) == 0
    (root / "tiny.yaml").write_text(yaml.safe_dump(TINY_CONFIG))
    assert run(["--threads", "1", "train", str(root / "data"), "--out", str(root / "run"),
                "--config", str(root / "tiny.yaml"), "--gof-len", "2", "--seed", "7"]) == 0
    return root


def test_help_and_usage_errors(capsys):
    assert run(["--help"]) == 0
    assert "rdcurve" in capsys.readouterr().out
    assert run(["bogus"]) == 2
    assert run(["train"]) == 2
    assert run(["train", "x", "--out", "y", "--q", "-1"]) == 2
    assert run(["synth", "out", "--frames", "0"]) == 2
    assert run(["render", "a.gof", "--dataset", "d", "--out", "x.png", "--warp"]) == 2


def test_defaults_follow_experiment_setup():
    args = build_parser().parse_args(["rdcurve", "data", "--out", "o"])
    assert args.q == [1.0, 2.0, 5.0, 10.0]
    from gofield.cli import _config

    cfg = _config(build_parser().parse_args(["train", "data", "--out", "o"]))
    assert cfg.gof_length == 10 and cfg.q == 10.0
    cfg = _config(build_parser().parse_args(["train", "data", "--out", "o", "--gof-len", "4", "--q", "2"]))
    assert cfg.gof_length == 4 and cfg.q == 2.0


def test_missing_inputs_exit_1(tmp_path, capsys):
    assert run(["train", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1
    assert run(["decode", str(tmp_path / "none.gof"), "--out", str(tmp_path / "x.npz")]) == 1
    assert run(["train", str(tmp_path), "--out", str(tmp_path / "o"), "--config", str(tmp_path / "c.yaml")]) == 1
    assert "gofield:" in capsys.readouterr().err


def test_threads_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(THREADS_ENV, "zero")
    assert run(["synth", str(tmp_path / "d"), "--frames", "1", "--train-cams", "1", "--test-cams", "0",
                "--size", "4", "--samples", "4"]) == 2
    monkeypatch.setenv(THREADS_ENV, "1")
    assert run(["synth", str(tmp_path / "d"), "--frames", "1", "--train-cams", "1", "--test-cams", "0",
                "--size", "4", "--samples", "4"]) == 0


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    assert sorted(p.name for p in run_dir.glob("*.gof")) == ["gof_000.gof", "gof_001.gof"]
    log_rows = read_rows(run_dir / "train_log.csv")
    assert set(log_rows[0]) == {"stage", "frame", "iteration", "mse", "rate_bits", "l1", "psnr", "loss"}
    frames = read_rows(run_dir / "frames.csv")
    assert [int(r["frame"]) for r in frames] == [0, 1, 2]
    assert [r["kind"] for r in frames] == ["keyframe", "residual", "keyframe"]
    sizes = {0: 0, 1: 0}
    for r in frames:
        sizes[int(r["gof"])] += int(r["bytes"])
    for g in (0, 1):
        assert sizes[g] == (run_dir / f"gof_{g:03d}.gof").stat().st_size


def test_eval_reproduces_training_report(workspace, capsys):
    gofs = sorted(str(p) for p in (workspace / "run").glob("*.gof"))
    out_csv = workspace / "eval.csv"
    assert run(["--threads", "1", "eval", str(workspace / "data"), *gofs, "--samples", "12",
                "--csv", str(out_csv)]) == 0
    evaluated = read_rows(out_csv)
    trained = read_rows(workspace / "run" / "frames.csv")
    assert len(evaluated) == len(trained) == 3
    for e, t in zip(evaluated, trained):
        assert int(e["bytes"]) == int(t["bytes"])
        for key in ("psnr_train", "psnr_test", "ssim_test"):
            assert abs(float(e[key]) - float(t[key])) <= 1e-6


def test_decode_then_render_matches_direct_render(workspace):
    gof = workspace / "run" / "gof_000.gof"
    npz = workspace / "g0.npz"
    assert run(["decode", str(gof), "--out", str(npz)]) == 0
    for frame in (0, 1):
        direct = workspace / f"direct{frame}.png"
        via = workspace / f"via{frame}.png"
        common = ["--dataset", str(workspace / "data"), "--frame", str(frame), "--camera", "4", "--samples", "16"]
        assert run(["--threads", "1", "render", str(gof), *common, "--out", str(direct)]) == 0
        assert run(["--threads", "1", "render", str(npz), *common, "--out", str(via)]) == 0
        assert direct.read_bytes() == via.read_bytes()
    assert run(["render", str(gof), "--dataset", str(workspace / "data"), "--frame", "2",
                "--out", str(workspace / "x.png")]) == 2
    assert run(["render", str(gof), "--dataset", str(workspace / "data"), "--camera", "99",
                "--out", str(workspace / "x.png")]) == 2


def test_decode_to_images(workspace):
    out = workspace / "renders"
    assert run(["decode", str(workspace / "run" / "gof_001.gof"), "--out", str(out),
                "--render", str(workspace / "data"), "--samples", "8"]) == 0
    assert sorted(p.name for p in out.glob("*.png")) == [f"f002_c{c:03d}.png" for c in range(6)]


def test_decode_rejects_non_gof(tmp_path):
    bad = tmp_path / "bad.gof"
    bad.write_bytes(b"not a gof file at all")
    assert run(["decode", str(bad), "--out", str(tmp_path / "x.npz")]) == 2


def test_train_is_deterministic_with_seed(workspace, tmp_path):
    assert run(["--threads", "1", "train", str(workspace / "data"), "--out", str(tmp_path / "again"),
                "--config", str(workspace / "tiny.yaml"), "--gof-len", "2", "--seed", "7"]) == 0
    for name in ("gof_000.gof", "gof_001.gof"):
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "run" / name).read_bytes()
    gof = read_gof(tmp_path / "again" / "gof_000.gof")
    assert len(gof) == 2


def test_rdcurve_sweep_and_compare(workspace, capsys):
    out = workspace / "rd"
    assert run(["--threads", "1", "rdcurve", str(workspace / "data"), "--out", str(out), "--config",
                str(workspace / "tiny.yaml"), "--q", "1", "10", "--frames", "1"]) == 0
    rows = read_rows(out / "rd.csv")
    assert [r["label"] for r in rows] == ["q=1", "q=10"]
    assert set(rows[0]) == {"label", "bytes", "psnr", "ssim"}
    assert (out / "rd.svg").read_text().lstrip().startswith("<?xml")

    a, b = workspace / "a.csv", workspace / "b.csv"
    for path, offset in ((a, 0.0), (b, 1.0)):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["label", "bytes", "psnr", "ssim"])
            for i, (size, p) in enumerate(((100, 30), (200, 32), (400, 34), (800, 36))):
                w.writerow([f"q{i}", size, p + offset, 0.9])
    capsys.readouterr()
    assert run(["rdcurve", "--out", str(workspace / "cmp"), "--compare", str(a), str(b)]) == 0
    assert "BD-PSNR +1.000 dB" in capsys.readouterr().out
    assert run(["rdcurve", "--out", str(workspace / "cmp")]) == 2


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "gofield.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "synth" in out.stdout
