import math

import numpy as np
import pytest

from mhmap import cli
from mhmap import experiments as ex
from mhmap.errors import ConfigError, EmptyInput
from mhmap.fem import contains

SMALL = ex.ExperimentConfig(duration=300.0, horizon=5, runs=3, truth_h=0.2, filter="both")


def test_config_defaults():
    c = ex.ExperimentConfig()
    assert (c.diffusivity, c.dirichlet, c.n_sensors, c.horizon, c.noise_true, c.noise_assumed) == \
        (5e-8, 30.0, 20, 15, 0.1, 1.0)
    assert c.n_ticks == 120 and c.decimation == 10
    assert c.divisions == (7, 5, 4, 4)
    assert c.xi == 1.0 and not c.calibrate


def test_config_text_round_trip():
    c = ex.ExperimentConfig(seed=7, filter="both", calibrate=True, noise_true=0.5)
    assert ex.ExperimentConfig.from_text(c.to_text()) == c


def test_config_parsing():
    c = ex.ExperimentConfig.from_text("# comment\nhorizon = 5  # inline\n\nfilter = standard\ncalibrate = yes\n")
    assert c.horizon == 5 and c.filter == "standard" and c.calibrate


@pytest.mark.parametrize("text, key", [
    ("horizon = five", "horizon"),
    ("bogus = 1", "bogus"),
    ("filter = kalman", "filter"),
    ("est_dt = 15\ntruth_dt = 10", "est_dt"),
    ("diffusivity = -1", "diffusivity"),
    ("est_divisions = 1,2,3", "est_divisions"),
    ("calibrate = maybe", "calibrate"),
])
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        ex.ExperimentConfig.from_text(text)
    assert err.value.key == key


def test_rmse_hand_values():
    # one run, error vector (3, 4) over two points
    e = np.linalg.norm([3.0, 4.0])
    np.testing.assert_allclose(ex.rmse([[e]]), [5.0])
    np.testing.assert_allclose(ex.rmse([[3.0, 1.0], [4.0, 1.0]]), [math.sqrt(12.5), 1.0])
    np.testing.assert_allclose(ex.nrmse([2.0, 4.0], [1.0, 2.0]), [2.0, 2.0])
    with pytest.raises(EmptyInput):
        ex.rmse([])
    with pytest.raises(EmptyInput):
        ex.nrmse([], [1.0])
    with pytest.raises(EmptyInput):
        ex.monte_carlo(SMALL, runs=0)


def test_sampling_grid_and_sensors():
    setup = ex.build_setup(ex.ExperimentConfig())
    assert setup.grid.size == 304
    assert contains(setup.est_mesh, setup.grid.points).all()
    rng = np.random.default_rng(0)
    s = ex.place_sensors(setup.est_mesh, 50, rng)
    assert s.shape == (50, 2) and contains(setup.est_mesh, s).all()


def test_truth_starts_at_zero_and_stays_bounded():
    setup = ex.build_setup(SMALL)
    T = setup.truth_states
    assert T.shape == (SMALL.n_ticks, setup.truth_model.n)
    # consistent-mass P1 has no discrete maximum principle: small undershoots at the front are expected
    assert T.min() > -0.1 and T.max() <= 30.0 + 1e-6


def test_run_is_deterministic():
    a = ex.run_scenario(SMALL, run=1)
    b = ex.run_scenario(SMALL, run=1)
    for name in ("standard", "fast"):
        assert a[name].same_as(b[name])
        assert a[name].steps[0] == SMALL.horizon
        assert a[name].error_norms.size == SMALL.n_ticks - SMALL.horizon
    c = ex.run_scenario(SMALL, run=2)
    assert not a["fast"].same_as(c["fast"])


def test_worker_count_does_not_change_results():
    cfg = SMALL.replace(filter="fast", runs=4)
    serial = ex.monte_carlo(cfg, workers=1)
    parallel = ex.monte_carlo(cfg, workers=2)
    assert np.array_equal(serial.errors("fast"), parallel.errors("fast"))


def test_evolving_field_is_tracked():
    cfg = ex.ExperimentConfig.from_file("configs/evolving.cfg").replace(filter="fast", runs=3, truth_h=0.2)
    res = ex.monte_carlo(cfg)
    r = res.rmse("fast")
    assert r[-1] < 0.5 * r[0]
    xi = ex.calibrate_weights(cfg)
    assert 1e-3 <= xi <= 1e6


def test_sweep_rows():
    rows = ex.sweep(SMALL.replace(filter="fast", runs=2), "window", values=(1, 5))
    assert [r.value for r in rows] == [1.0, 5.0]
    assert rows[-1].nrmse == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        ex.sweep(SMALL, "colour")


def test_bench_rows():
    rows = ex.bench(SMALL.replace(duration=200.0), runs=5)
    assert [r.filter for r in rows] == ["standard", "fast"]
    for r in rows:
        assert 0 < r.optimization_s <= r.total_s
        assert 0 < r.fraction <= 1


# --- command line ------------------------------------------------------------

def _small_args(tmp_path, *extra):
    return ["--set", "duration=300", "--set", "horizon=5", "--set", "truth_h=0.2", "--runs", "2",
            "--out-dir", str(tmp_path), *extra]


def test_cli_estimate_is_reproducible(tmp_path):
    out = []
    for name in ("a", "b"):
        assert cli.main(["estimate", "--seed", "1", *_small_args(tmp_path / name)]) == 0
        out.append((tmp_path / name / "rmse.csv").read_bytes())
    assert out[0] == out[1]
    lines = out[0].decode().splitlines()
    assert lines[0] == "step,time_s,rmse,std"
    assert len(lines) == 1 + 30 - 5
    manifest = (tmp_path / "a" / "manifest.txt").read_text()
    assert "seed = 1" in manifest and "average_rmse_fast" in manifest


def test_cli_both_filters_and_simulate(tmp_path):
    assert cli.main(["estimate", "--filter", "both", *_small_args(tmp_path)]) == 0
    assert (tmp_path / "rmse_standard.csv").exists() and (tmp_path / "rmse_fast.csv").exists()
    assert cli.main(["simulate", *_small_args(tmp_path)]) == 0
    truth = (tmp_path / "truth.csv").read_text().splitlines()
    assert len(truth) == 31 and truth[0].startswith("time_s,p0,")
    assert len((tmp_path / "points.csv").read_text().splitlines()) == 305


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["estimate", "--set", "nope=1", "--out-dir", str(tmp_path)]) == 2
    assert "nope" in capsys.readouterr().err
    assert cli.main(["estimate", "--config", str(tmp_path / "missing.cfg"), "--out-dir", str(tmp_path)]) == 2
    bad = tmp_path / "bad.mesh"
    bad.write_text("vertices 1\n")
    assert cli.main(["mesh", "--input", str(bad)]) == 2


def test_cli_mesh(tmp_path, capsys):
    assert cli.main(["mesh", "--output", str(tmp_path / "m.mesh")]) == 0
    assert "vertices 97 triangles 152 free 89" in capsys.readouterr().out
    assert (tmp_path / "m.mesh").read_text().startswith("vertices 97 triangles 152")
