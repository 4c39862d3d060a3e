import json
import os

import numpy as np
import pytest

from mdsbalance import io as mio
from mdsbalance.cli import EXIT_CHECK, EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, main
from mdsbalance.config import ConfigError, ExperimentConfig, load_config
from mdsbalance.experiments import sweep_verdict
from mdsbalance.meanfield import run_to_steady
from mdsbalance.model import DEFAULT_M, SystemParams
from mdsbalance.sim import SimConfig


def _write(tmp_path, text, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


# -- configuration ----------------------------------------------------------------------


def test_minimal_file_fills_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, "experiment: fixed-point\nlambda: 0.9\nL: 3\nk: 2\n"))
    assert (cfg.lam, cfg.L, cfg.k) == (0.9, 3, 2)
    assert cfg.M == DEFAULT_M and cfg.seed == 0 and cfg.replications == 1
    assert cfg.n_values == (50, 200, 800)


def test_defaults_match_owning_modules():
    cfg = ExperimentConfig("simulate", 0.5, 2, 1)
    sim = SimConfig(SystemParams(0.5, 2, 1, 4))
    assert (cfg.warmup, cfg.measure_time, cfg.cap, cfg.M) == (sim.warmup_time, sim.measure_time, sim.cap, sim.M)
    defaults = run_to_steady.__defaults__
    assert (cfg.tol, cfg.T) == defaults[:2]


@pytest.mark.parametrize("text,needle", [
    ("experiment: fixed-point\nlambda: 1.2\nL: 3\nk: 2\n", "0 < lambda < 1"),
    ("experiment: fixed-point\nlambda: 0.5\nL: 3\nk: 3\n", "1 <= k < L"),
    ("experiment: fixed-point\nlambda: 0.5\nL: 3\nk: 2\nbogus: 1\n", "bogus"),
    ("experiment: fixed-point\nlambda: 0.5\nL: 3\n", "k: required"),
    ("experiment: nope\nlambda: 0.5\nL: 3\nk: 2\n", "experiment"),
    ("experiment: simulate\nlambda: 0.5\nL: 3\nk: 2\n", "n: violates"),
    ("experiment: oracle-check\nlambda: 0.5\nL: 2\nk: 1\nn: 3\n", "cap"),
    ("experiment: fixed-point\nlambda: 0.5\nL: 3\nk: 2\nM: 2.5\n", "M: expected int"),
    ("experiment: fixed-point\nlambda: 0.5\nL: 3\nk: 2\ntol: -1\n", "tol"),
])
def test_validation_errors_name_the_key(tmp_path, text, needle):
    with pytest.raises(ConfigError, match=needle):
        load_config(_write(tmp_path, text))


def test_parse_error_reports_line(tmp_path):
    with pytest.raises(ConfigError, match="line 3"):
        load_config(_write(tmp_path, "experiment: bounds\nL: 3\nk: : 2\nlambda: 0.5\n"))


def test_nested_sections_rejected(tmp_path):
    with pytest.raises(ConfigError, match="nested"):
        load_config(_write(tmp_path, "experiment: bounds\nparams:\n  L: 3\n"))


def test_overrides_win(tmp_path):
    path = _write(tmp_path, "experiment: fixed-point\nlambda: 0.9\nL: 3\nk: 2\n")
    cfg = load_config(path, {"lambda": 0.5, "n_values": "10,20"})
    assert cfg.lam == 0.5 and cfg.n_values == (10, 20)


# -- output plumbing ---------------------------------------------------------------------


def test_blob_hash_matches_git():
    assert mio.blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_values_round_trip_at_17_digits():
    x = [0.1, 1 / 3, 2.0**-1074, np.nextafter(1.0, 0.0)]
    text = mio.csv_text(["x"], [[v] for v in x])
    back = [float(s) for s in text.split()[1:]]
    assert back == x


def test_missing_directory_created(tmp_path):
    target = tmp_path / "a" / "b" / "c.csv"
    mio.atomic_write(target, "x\n")
    assert target.read_text() == "x\n"


def test_failed_write_leaves_no_partial_file(tmp_path, monkeypatch):
    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(mio.os, "replace", boom)
    with pytest.raises(OSError):
        mio.atomic_write(tmp_path / "out.csv", "a,b\n1,2\n")
    assert os.listdir(tmp_path) == []


# -- end to end ---------------------------------------------------------------------------


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_fixed_point_run_writes_sandwiched_table(tmp_path, capsys):
    code = main(["fixed-point", "--lambda", "0.9", "--L", "3", "--k", "2", "--out", str(tmp_path), "--check"])
    assert code == EXIT_OK
    files = _files(tmp_path)
    assert set(files) == {"fixed-point_L3_k2_lam0.9.csv", "fixed-point_L3_k2_lam0.9.manifest.json"}
    table = np.loadtxt(tmp_path / "fixed-point_L3_k2_lam0.9.csv", delimiter=",", skiprows=1)
    assert (tmp_path / "fixed-point_L3_k2_lam0.9.csv").read_text().startswith("m,u_bar,upper,lower\n")
    assert np.all(table[:, 3] - 1e-15 <= table[:, 1]) and np.all(table[:, 1] <= table[:, 2] + 1e-15)
    manifest = json.loads((tmp_path / "fixed-point_L3_k2_lam0.9.manifest.json").read_text())
    assert manifest["config"]["lambda"] == 0.9
    csv_bytes = files["fixed-point_L3_k2_lam0.9.csv"]
    assert manifest["files"]["fixed-point_L3_k2_lam0.9.csv"] == mio.blob_hash(csv_bytes)
    assert "PASS sandwich" in capsys.readouterr().out


def test_config_file_with_flag_override(tmp_path):
    cfg = _write(tmp_path, "experiment: bounds\nlambda: 0.9\nL: 3\nk: 2\n")
    out = tmp_path / "o"
    assert main(["fixed-point", "--config", str(cfg), "--lambda", "0.5", "--out", str(out)]) == EXIT_OK
    assert (out / "fixed-point_L3_k2_lam0.5.csv").exists()


def test_identity_check_thousand_draws(tmp_path, capsys):
    code = main(["identity-check", "--lambda", "0.5", "--L", "3", "--k", "2", "--draws", "1000",
                 "--out", str(tmp_path), "--check"])
    assert code == EXIT_OK
    assert "PASS identities" in capsys.readouterr().out


def test_simulation_outputs_are_deterministic(tmp_path):
    args = ["simulate", "--lambda", "0.7", "--L", "3", "--k", "2", "--n", "20",
            "--warmup", "10", "--measure-time", "200", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    csvs = [n for n in a if n.endswith(".csv")]
    assert csvs == ["simulate_L3_k2_lam0.7_n20.csv"]
    assert all(a[n] == b[n] for n in csvs)
    header = a[csvs[0]].decode().splitlines()[0]
    assert header == "m,u_hat,stderr,u_bar,upper_bound,lower_bound"


def test_oracle_check_small(tmp_path):
    code = main(["oracle-check", "--lambda", "0.5", "--L", "2", "--k", "1", "--n", "2", "--cap", "6",
                 "--warmup", "100", "--measure-time", "20000", "--out", str(tmp_path), "--check"])
    assert code == EXIT_OK


def test_validation_exit_code(tmp_path, capsys):
    assert main(["fixed-point", "--lambda", "1.2", "--L", "3", "--k", "2", "--out", str(tmp_path)]) == EXIT_INVALID
    assert "0 < lambda < 1" in capsys.readouterr().err
    assert not tmp_path.exists() or not any(tmp_path.iterdir())


def test_numerical_failure_exit_code(tmp_path):
    code = main(["ode-converge", "--lambda", "0.7", "--L", "3", "--k", "2", "--dt", "2.0", "--out", str(tmp_path)])
    assert code == EXIT_NUMERIC


def test_check_failure_exit_code(tmp_path):
    args = ["ode-converge", "--lambda", "0.7", "--L", "3", "--k", "2", "--K", "8", "--T", "1", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert main(args + ["--check"]) == EXIT_CHECK


def test_sweep_verdict():
    assert sweep_verdict([0.01, 0.005, 0.002], [0.001] * 3) == (True, True)
    assert sweep_verdict([0.01, 0.0105, 0.002], [0.001] * 3) == (True, True)
    assert sweep_verdict([0.01, 0.02, 0.03], [0.001] * 3) == (False, False)


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--help"])
    text = capsys.readouterr().out
    assert "default 20000" in text and "--n-values" in text
