import csv

import pytest

from mriv import cli
from mriv.dataset import load_dataset

FAST = """
experiment.methods = mriv, wald
experiment.n_values = 150
experiment.seeds = 0
nuisance.variant = ridge
stage2.variant = ridge
"""


@pytest.fixture
def config(tmp_path):
    def write(text=FAST):
        path = tmp_path / "exp.cfg"
        path.write_text(text)
        return str(path)

    return write


def test_simulate_writes_dataset_and_components(tmp_path, config):
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--config", config(FAST + "sim.n = 120\n"), "--out", str(out)]) == 0
    data = load_dataset(out / "dataset.csv")
    assert data.n == 120 and data.oracle_cate is not None
    with open(out / "components.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 120


def test_simulate_semi_synthetic(tmp_path, config):
    out = tmp_path / "semi"
    text = FAST + "generator = semi-synthetic\nsim.n = 50\nsemi.p = 3\n"
    assert cli.main(["simulate", "--config", config(text), "--out", str(out)]) == 0
    assert load_dataset(out / "dataset.csv").p == 3


def test_run_writes_tables(tmp_path, config, capsys):
    assert cli.main(["run", "--config", config(), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "results.csv").exists() and (tmp_path / "r" / "summary.csv").exists()
    assert "mriv" in capsys.readouterr().out


def test_sweep(tmp_path, config):
    args = ["sweep", "--param", "confounding", "--values", "0,1", "--config", config(), "--out", str(tmp_path)]
    assert cli.main(args) == 0
    assert (tmp_path / "sweep_alpha_u.csv").exists()


def test_check_robustness(tmp_path):
    assert cli.main(["check-robustness", "--trials", "3", "--points", "5", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "robustness.csv").exists()


def test_exit_1_on_config_errors(tmp_path, config):
    assert cli.main(["run", "--config", config("nope = 1\n"), "--out", str(tmp_path)]) == 1
    assert cli.main(["run", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    assert cli.main(["check-robustness", "--trials", "-1", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--param", "colour", "--values", "1", "--config", "x", "--out", "y"])
    assert exc.value.code == 1


def test_exit_2_when_every_cell_fails(tmp_path, config):
    text = FAST.replace("n_values = 150", "n_values = 12") + "nuisance.variant = k-nearest\n"
    text = text.replace("nuisance.variant = ridge\n", "")
    assert cli.main(["run", "--config", config(text), "--out", str(tmp_path)]) == 2


def test_exit_3_when_robustness_check_fails(tmp_path):
    args = ["check-robustness", "--trials", "3", "--points", "5", "--magnitude", "0", "--out", str(tmp_path)]
    assert cli.main(args) == 3
