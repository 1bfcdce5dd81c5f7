import csv
import filecmp

import numpy as np
import pytest

from smcmc import experiment as ex
from smcmc.cli import main
from smcmc.experiment import (
    ALGORITHMS,
    EXTRA_STEP_COLUMNS,
    STEP_COLUMNS,
    ConfigError,
    config_for,
    format_config,
    generate_dataset,
    load_dataset,
    parse_config,
    run_experiment,
    save_dataset,
    step_rng,
)
from smcmc.tables import TABLES, reproduce_table, runs_for_scale


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_generate_is_byte_identical(tmp_path):
    cfg = config_for("gaussian", 4, "sir", run_T=5)
    save_dataset(generate_dataset(cfg, 7), tmp_path / "a.csv")
    save_dataset(generate_dataset(cfg, 7), tmp_path / "b.csv")
    assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    ds = load_dataset(tmp_path / "a.csv")
    np.testing.assert_array_equal(ds.x, generate_dataset(cfg, 7).x)
    with open(tmp_path / "a.csv") as fh:
        assert fh.readline().strip() == "n,kind,k,value"


def test_gaussian_data_has_ar_structure():
    cfg = config_for("gaussian", 4, "sir", run_T=1000)
    x = generate_dataset(cfg, 1).x[100:]  # past the start-up transient from the zero anchor
    for k in range(4):
        r = np.corrcoef(x[:-1, k], x[1:, k])[0, 1]
        # stationary AR(1) with a common scalar alpha: lag-1 correlation equals alpha
        assert r == pytest.approx(0.9, rel=0.1)


def test_poisson_observations_are_counts():
    ds = generate_dataset(config_for("gh_poisson", 4, "sir", run_T=20), 2)
    assert np.all(ds.y >= 0) and np.all(ds.y == np.round(ds.y))


def test_serial_and_concurrent_runs_agree(tmp_path):
    cfg = config_for("gaussian", 4, "smcmc_prior", algorithm_N=30, run_T=3, run_n_runs=2, run_timing=False)
    run_experiment(cfg, tmp_path / "serial", workers=1)
    run_experiment(cfg, tmp_path / "pool", workers=2)
    for name in ("steps.csv", "summary.csv", "dataset.csv", "failures.csv"):
        assert filecmp.cmp(tmp_path / "serial" / name, tmp_path / "pool" / name, shallow=False), name


def test_step_csv_columns_and_fingerprint(tmp_path):
    cfg = config_for("gaussian", 4, "smmala", algorithm_N=20, run_T=2)
    run_experiment(cfg, tmp_path)
    with open(tmp_path / "steps.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == STEP_COLUMNS + EXTRA_STEP_COLUMNS
    rows = read_rows(tmp_path / "steps.csv")
    assert [r["n"] for r in rows] == ["1", "2"]
    assert all(r["build"].startswith("smcmc-") and r["algo"] == "smmala" and r["run"] == "1" for r in rows)


def test_optimal_acceptance_is_one(tmp_path):
    cfg = config_for("gaussian", 4, "smcmc_optimal", algorithm_N=50, run_T=3)
    res = run_experiment(cfg, tmp_path)
    assert res[0].summary["accept_joint"] == 1.0
    assert float(read_rows(tmp_path / "summary.csv")[0]["accept_joint"]) == 1.0


def test_optimal_needs_gaussian():
    with pytest.raises(ConfigError):
        config_for("gh_poisson", 4, "smcmc_optimal")


def test_sir_large_n_is_near_exact(tmp_path):
    cfg = config_for("gaussian", 1, "sir", algorithm_N=100_000, run_T=5)
    res = run_experiment(cfg, tmp_path)
    assert 0.0 <= res[0].summary["log_rel_mse"] < 1e-3


def test_failures_are_recorded(tmp_path, monkeypatch):
    real = ex.make_runner

    def flaky(ab, model):
        runner = real(ab, model)

        def bad(state, y, rng):
            raise FloatingPointError("boom")

        runner.step = bad
        return runner

    monkeypatch.setattr(ex, "make_runner", flaky)
    cfg = config_for("gaussian", 4, "sir", algorithm_N=10, run_T=2, run_n_runs=2)
    res = run_experiment(cfg, tmp_path)
    assert all(r.failure for r in res)
    rows = read_rows(tmp_path / "failures.csv")
    assert [r["error"] for r in rows] == ["FloatingPointError"] * 2
    assert read_rows(tmp_path / "summary.csv") == []


def test_step_rng_is_keyed():
    a = step_rng(1, 2, 3).random()
    assert a == step_rng(1, 2, 3).random()
    assert a != step_rng(1, 3, 2).random()


CONFIG = """
# comment line
model.type = gaussian
model.d = 9
algorithm.name = smhmc   # trailing comment
algorithm.N = 50
algorithm.eps = 0.25
algorithm.adapt = false
run.T = 4
run.seed = 11
output.dir = out
"""


def test_config_parse_and_roundtrip():
    cfg = parse_config(CONFIG)
    assert cfg.model.d == 9 and cfg.algorithm.N == 50 and cfg.algorithm.eps == 0.25
    assert cfg.algorithm.adapt is False and cfg.run.seed == 11
    again = parse_config(format_config(cfg))
    assert format_config(again) == format_config(cfg)


@pytest.mark.parametrize("bad", [
    "model.d = 10",
    "model.type = poisson",
    "algorithm.name = pmmh",
    "algorithm.N = many",
    "algorithm.adapt = 1",
    "nosection = 1",
    "model.colour = red",
    "just text",
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_output_dir_environment_override(monkeypatch):
    monkeypatch.setenv("OUTPUT_DIR", "/tmp/elsewhere")
    assert parse_config(CONFIG).output.dir == "/tmp/elsewhere"


def test_non_square_dimension_with_grid_file(tmp_path):
    from smcmc.models import SensorGrid
    SensorGrid(np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 1.0]])).to_csv(tmp_path / "g.csv")
    cfg = config_for("gaussian", 3, "sir", model_grid=str(tmp_path / "g.csv"), run_T=2, algorithm_N=10)
    assert generate_dataset(cfg, 0).x.shape == (2, 3)


def test_table_dry_run(tmp_path):
    path = reproduce_table("mse_poisson", 0, tmp_path)
    rows = read_rows(path)
    spec = TABLES["mse_poisson"]
    assert len(rows) == len(spec.rows) * len(spec.dims)
    assert all(r["value"] == "" and r["runs"] == "0" for r in rows)
    assert {r["d"] for r in rows} == {"144", "400", "1024"}
    with pytest.raises(KeyError):
        reproduce_table("fig5", 0, tmp_path)


def test_runs_for_scale():
    assert runs_for_scale(0) == 0
    assert runs_for_scale(0.2) == 1
    assert runs_for_scale(25) == 25
    with pytest.raises(ValueError):
        runs_for_scale(-1)


def test_small_table_cell(tmp_path):
    path = reproduce_table("ess_gaussian", 1, tmp_path, dims=[4], T=2)
    rows = read_rows(path)
    assert len(rows) == 4
    assert all(float(r["ess_mean"]) > 0 for r in rows)


def test_cli(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text(CONFIG.replace("output.dir = out", f"output.dir = {tmp_path / 'o'}"))
    assert main(["list-algos"]) == 0
    assert set(ALGORITHMS) <= set(capsys.readouterr().out.split())
    assert main(["generate", "--config", str(cfg), "--seed", "3"]) == 0
    data = tmp_path / "o" / "dataset.csv"
    assert data.exists()
    assert main(["run", "--config", str(cfg), "--runs", "1", "--data", str(data), "--out", str(tmp_path / "r")]) == 0
    assert len(read_rows(tmp_path / "r" / "steps.csv")) == 4
    assert main(["table", "ess_gaussian", "--scale", "0", "--out", str(tmp_path / "t")]) == 0
    assert main(["run", "--config", str(tmp_path / "missing.txt")]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--config", str(cfg), "--seed", "-1"])
