import subprocess
import sys

import pytest

from dstvio import cli, io

CONFIG = """\
trajectory.kind = circle
trajectory.duration_s = 3
imu.rate_hz = 100
cam.rate_hz = 10
seed = 7
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.txt"
    cfg.write_text(CONFIG)
    assert cli.main(["simulate", str(cfg), str(root / "data")]) == 0
    return cfg, root / "data"


def test_simulate_writes_streams(dataset):
    _, data = dataset
    for name in ("imu.csv", "features.csv", "groundtruth.txt", "config.txt"):
        assert (data / name).is_file()
    assert (data / "imu.csv").read_text().splitlines()[0] == "t,gx,gy,gz,ax,ay,az"


def test_run_writes_tum_estimate(dataset, tmp_path, capsys):
    cfg, data = dataset
    assert cli.main(["run", str(cfg), str(data), str(tmp_path), "--variant", "no-po"]) == 0
    t, p, q = io.read_tum(tmp_path / "estimate.txt")
    assert len(t) == 31 and p.shape == (31, 3)
    assert "variant=no-po" in capsys.readouterr().out


def test_compare_ranks_all_variants(dataset, capsys):
    cfg, data = dataset
    assert cli.main(["compare", str(cfg), str(data)]) == 0
    out = capsys.readouterr().out
    assert all(v in out for v in ("full", "no-st", "no-po", "baseline"))
    assert "seed=7" in out


def test_obs_check_passes(dataset, capsys):
    cfg, _ = dataset
    assert cli.main(["obs-check", str(cfg), "--variant", "ekf"]) == 0
    assert "ekf: PASS" in capsys.readouterr().out


def test_obs_check_rejects_static(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("trajectory.kind = static\n")
    assert cli.main(["obs-check", str(cfg)]) == cli.EXIT_DATA


def test_smooth_writes_both_trajectories(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text(CONFIG.replace("= 3", "= 6") + "deprivation.intervals = 2:3\n")
    assert cli.main(["simulate", str(cfg), str(tmp_path / "d")]) == 0
    assert cli.main(["smooth", str(cfg), str(tmp_path / "d"), str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "smoothed.txt").is_file() and (tmp_path / "o" / "estimate.txt").is_file()
    assert "segment 2.00-3.00 s" in capsys.readouterr().out


def test_missing_data_is_exit_2(dataset, tmp_path):
    cfg, _ = dataset
    assert cli.main(["run", str(cfg), str(tmp_path / "nope"), str(tmp_path)]) == cli.EXIT_DATA


def test_bad_config_is_exit_2(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("imu.rate_hz = fast\n")
    assert cli.main(["simulate", str(cfg), str(tmp_path / "d")]) == cli.EXIT_DATA
    cfg.write_text("no.such.key = 1\n")
    assert cli.main(["simulate", str(cfg), str(tmp_path / "d")]) == cli.EXIT_DATA


def test_numerical_failure_is_exit_3(dataset, tmp_path, monkeypatch):
    cfg, data = dataset

    def boom(*a, **k):
        raise cli.NumericalFailure("covariance not positive semi-definite")

    monkeypatch.setattr(cli, "run_filter", boom)
    assert cli.main(["run", str(cfg), str(data), str(tmp_path)]) == cli.EXIT_NUMERIC


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dstvio.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "obs-check" in out.stdout
