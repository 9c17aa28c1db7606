import csv
import json

import pytest

import igt.harness
from igt.cli import main
from igt.games import sample_instance
from igt.spaces import make_rng


def read_report(out):
    rep = json.loads((out / "report.json").read_text())
    assert (out / "report.csv").exists() and (out / "traces").is_dir()
    return rep


def test_solve(tmp_path):
    game = tmp_path / "cournot.json"
    game.write_text(sample_instance("cournot", make_rng(0)).to_json())
    assert main(["solve", "--game", str(game), "--iters", "3000", "--out", str(tmp_path / "o")]) == 0
    rep = read_report(tmp_path / "o")
    assert rep["recovered"] and rep["certificate_method"] == "closed_form"
    assert (tmp_path / "o" / "traces" / "solve.csv").exists()


def test_bench_success_and_config_file(tmp_path):
    cfg = tmp_path / "bench.toml"
    cfg.write_text('family = "fisher_cobb_douglas"\nn_instances = 2\nseed = 5\n[gda]\niters = 200\n')
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rep = read_report(tmp_path / "o")
    assert rep["spec"]["n_instances"] == 2 and rep["spec"]["gda"]["iters"] == 200
    assert len(list(csv.DictReader(open(tmp_path / "o" / "report.csv")))) == 2


def test_bench_failure_exit_code(tmp_path, monkeypatch):
    def broken(*a, **k):
        raise RuntimeError("sampler down")

    monkeypatch.setattr(igt.harness, "sample_instance", broken)
    assert main(["bench", "--family", "cournot", "--n", "2", "--out", str(tmp_path / "o")]) == 2
    assert read_report(tmp_path / "o")["n_failed"] == 2


@pytest.mark.parametrize("argv", [
    ["bench", "--config", "does_not_exist.toml"],
    ["bench", "--family", "chess"],
    ["bench"],
    ["bench", "--family", "cournot", "--mode", "budgets"],
    ["solve", "--game", "missing.json"],
    ["ingest", "--input", "missing.csv", "--splits", "train"],
])
def test_config_errors_exit_one(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path / "o")]) == 1
    assert "igt: error:" in capsys.readouterr().err


def test_bad_toml_and_unknown_solver_key(tmp_path):
    bad = tmp_path / "b.toml"
    bad.write_text("family = [")
    assert main(["bench", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    bad.write_text('family = "cournot"\n[gda]\nwarp = 9\n')
    assert main(["bench", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_marl_planted_and_saved_game(tmp_path):
    saved = tmp_path / "game.json"
    assert main(["marl", "--planted", "0", "--iters", "5", "--save-game", str(saved),
                 "--out", str(tmp_path / "a")]) == 0
    assert main(["marl", "--game", str(saved), "--iters", "5", "--out", str(tmp_path / "b")]) == 0
    a, b = read_report(tmp_path / "a"), read_report(tmp_path / "b")
    assert a["theta_bar"] == b["theta_bar"] and a["exact_exploitability"] >= 0


def test_ingest_writes_observations(tmp_path):
    src = tmp_path / "s.csv"
    src.write_text("timestamp,price\n" + "".join(f"2022-01-01T{h:02d}:00:00,{h}\n" for h in range(24)))
    assert main(["ingest", "--input", str(src), "--horizon", "6", "--splits", "early=2022-01-01..2022-01-01T12:00",
                 "--out", str(tmp_path / "o")]) == 0
    rep = read_report(tmp_path / "o")
    assert rep["n_observations"] == 4 and rep["splits"] == {"early": 2}
    assert (tmp_path / "o" / "observations_early.csv").exists()
