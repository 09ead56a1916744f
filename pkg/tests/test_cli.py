import json

import numpy as np
import pytest

from csflow.cli import build_parser, main
from csflow.core import PointCloud
from csflow.io import BENCH_HEADER, parse_metrics, read_flow, write_cloud, write_flow


@pytest.fixture
def scene(tmp_path, rng):
    pts = rng.uniform(size=(60, 3))
    write_cloud(PointCloud(pts), tmp_path / "s.xyz")
    write_cloud(PointCloud(pts), tmp_path / "same.xyz")
    write_cloud(PointCloud(pts + [0.05, 0, 0]), tmp_path / "t.xyz")
    return tmp_path


def test_estimate_identical_clouds(scene, capsys):
    code = main(["estimate", "--source", str(scene / "s.xyz"), "--target", str(scene / "same.xyz"),
                 "--out", str(scene / "f.xyz"), "--variance", "0.01"])
    assert code == 0
    assert np.abs(read_flow(scene / "f.xyz").vectors).max() < 1e-3
    out = parse_metrics(capsys.readouterr().out)
    assert {"final_objective", "iterations", "converged", "wall_time_s"} <= set(out)


def test_estimate_not_converged_exit_code(scene):
    code = main(["estimate", "--source", str(scene / "s.xyz"), "--target", str(scene / "t.xyz"),
                 "--out", str(scene / "f.xyz"), "--iters", "3"])
    assert code == 2
    assert len(read_flow(scene / "f.xyz")) == 60


@pytest.mark.parametrize("loss", ["cd", "emd"])
def test_estimate_baselines(scene, loss):
    code = main(["estimate", "--source", str(scene / "s.xyz"), "--target", str(scene / "t.xyz"),
                 "--out", str(scene / "f.xyz"), "--loss", loss, "--iters", "5"])
    assert code in (0, 2)


def test_missing_target_names_flag(scene, capsys):
    with pytest.raises(SystemExit) as info:
        main(["estimate", "--source", str(scene / "s.xyz"), "--out", str(scene / "f.xyz")])
    assert info.value.code == 1
    assert "--target" in capsys.readouterr().err


@pytest.mark.parametrize("argv, flag", [
    (["--lambda", "-1"], "--lambda"), (["--lr", "0"], "--lr"), (["--variance", "big"], "--variance"),
    (["--bogus"], "--bogus"),
])
def test_bad_flags_exit_1(scene, capsys, argv, flag):
    with pytest.raises(SystemExit) as info:
        main(["estimate", "--source", "a", "--target", "b", "--out", "c", *argv])
    assert info.value.code == 1
    assert flag in capsys.readouterr().err


def test_unreadable_input(scene, capsys):
    (scene / "bad.xyz").write_text("1 2\n")
    code = main(["estimate", "--source", str(scene / "bad.xyz"), "--target", str(scene / "t.xyz"),
                 "--out", str(scene / "f.xyz")])
    assert code == 1
    assert "bad.xyz:1" in capsys.readouterr().err


def test_eval(tmp_path, capsys, rng):
    gt = rng.normal(size=(5, 3))
    write_flow(gt, tmp_path / "gt.xyz")
    assert main(["eval", "--flow", str(tmp_path / "gt.xyz"), "--truth", str(tmp_path / "gt.xyz")]) == 0
    assert parse_metrics(capsys.readouterr().out) == {
        "epe3d": 0.0, "acc3d_strict": 1.0, "acc3d_relaxed": 1.0, "outliers3d": 0.0
    }
    write_flow(gt[:4], tmp_path / "short.xyz")
    assert main(["eval", "--flow", str(tmp_path / "short.xyz"), "--truth", str(tmp_path / "gt.xyz")]) == 1


@pytest.mark.parametrize("loss", ["cs", "cd", "emd", "emd-exact"])
def test_divergence(tmp_path, capsys, loss):
    write_cloud(PointCloud([[0, 0, 0], [2, 0, 0]]), tmp_path / "a.xyz")
    write_cloud(PointCloud([[1, 0, 0], [4, 0, 0]]), tmp_path / "b.xyz")
    assert main(["divergence", "--a", str(tmp_path / "a.xyz"), "--b", str(tmp_path / "b.xyz"),
                 "--loss", loss, "--variance", "0.5"]) == 0
    value = parse_metrics(capsys.readouterr().out)["value"]
    if loss == "emd-exact":
        assert value == 3.0


def test_gen_multi_object(tmp_path):
    args = ["gen", "--shape", "multi-object", "--n-points", "40", "--translation", "0.1", "0", "0",
            "--translation", "0", "0.1", "0", "--out-source", str(tmp_path / "s.xyz"),
            "--out-target", str(tmp_path / "t.xyz"), "--out-truth", str(tmp_path / "g.xyz")]
    assert main(args) == 0
    truth = read_flow(tmp_path / "g.xyz").vectors
    assert np.array_equal(truth[:20], np.tile([0.1, 0, 0], (20, 1)))


def test_gen_mismatched_motion_flags(tmp_path, capsys):
    args = ["gen", "--rotation", "0", "0", "0", "--translation", "0", "0", "0", "--translation", "1", "0", "0",
            "--out-source", "s", "--out-target", "t", "--out-truth", "g"]
    assert main(args) == 1
    assert "--rotation" in capsys.readouterr().err


def test_bench_identity_scene(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--n-points", "40", "--repeats", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(BENCH_HEADER)
    assert len(lines) == 1 + 3 * 2 + 3
    for line in lines[1:7]:
        assert float(line.split(",")[3]) <= 1e-3


def test_bench_recipe_file_and_jobs(tmp_path):
    recipe = {"n_points": 40, "shape": "sphere-surface", "motion": [{"translation": [0.05, 0, 0]}]}
    (tmp_path / "r.json").write_text(json.dumps(recipe))
    common = ["bench", "--recipe", str(tmp_path / "r.json"), "--losses", "cs,cd", "--repeats", "2",
              "--iters", "10", "--deterministic"]
    assert main(common + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(common + ["--jobs", "2", "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_bench_bad_losses(tmp_path, capsys):
    assert main(["bench", "--losses", "cs,kl", "--out", str(tmp_path / "b.csv")]) == 1
    assert "--losses" in capsys.readouterr().err


def test_help_lists_defaults(capsys):
    for cmd in ("estimate", "eval", "divergence", "gen", "bench"):
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args([cmd, "--help"])
        assert info.value.code == 0
    assert "default" in capsys.readouterr().out


def test_emd_loss_uses_approximate_path(tmp_path, rng, monkeypatch):
    import csflow.divergence as div

    def forbidden(*args, **kwargs):
        raise AssertionError("exact EMD must not be used for optimisation")

    monkeypatch.setattr(div, "emd_exact", forbidden)
    pts = rng.uniform(size=(300, 3))
    write_cloud(PointCloud(pts), tmp_path / "s.xyz")
    write_cloud(PointCloud(pts + 0.02), tmp_path / "t.xyz")
    code = main(["estimate", "--source", str(tmp_path / "s.xyz"), "--target", str(tmp_path / "t.xyz"),
                 "--out", str(tmp_path / "f.xyz"), "--loss", "emd", "--iters", "3"])
    assert code in (0, 2)
