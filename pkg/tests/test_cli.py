import numpy as np

from karma_pricing import cli
from karma_pricing.env import InvariantError

SCENARIO = """
name: mini
episode_length: 8
network: {d0: [1.0, 2.0], kappa: [1/3, 2/3]}
population: {M: 30}
learner: {t_init: 5, t_update: 5, H: 2, policy_restarts: 1, policy_maxiter: 2,
          gp_restarts: 1, gp_maxiter: 5}
"""


def test_solve_bundled(capsys):
    assert cli.main(["solve", "--scenario", "three_arc"]) == 0
    out = capsys.readouterr().out
    assert "x_star" in out and "reference" in out


def test_run_writes_outputs(tmp_path, capsys):
    path = tmp_path / "mini.yaml"
    path.write_text(SCENARIO)
    code = cli.main(["run", "--scenario", str(path), "--seed", "5", "--out", str(tmp_path),
                     "--days", "7", "--quiet"])
    assert code == 0
    lines = (tmp_path / "mini_seed5.csv").read_text().splitlines()
    assert len(lines) == 8
    assert (tmp_path / "mini_seed5_summary.json").is_file()
    assert capsys.readouterr().out == ""


def test_bad_scenario_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("network:\n  d0: [1.0]\n  kappa: [1.0]\n  gamma: 2\n")
    assert cli.main(["solve", "--scenario", str(path)]) == 2
    assert "bad.yaml:4" in capsys.readouterr().err


def test_invariant_breach_exit_code(tmp_path, monkeypatch, capsys):
    path = tmp_path / "mini.yaml"
    path.write_text(SCENARIO)

    def boom(*a, **k):
        raise InvariantError("negative Karma")

    monkeypatch.setattr(cli, "run", boom)
    assert cli.main(["run", "--scenario", str(path), "--quiet"]) == 3
    assert "invariant breach" in capsys.readouterr().err


def test_check_exit_code(monkeypatch, capsys):
    from karma_pricing import acceptance

    results = [acceptance.CheckResult(1, "a", True, "ok"), acceptance.CheckResult(2, "b", False)]
    monkeypatch.setattr(acceptance, "run_checks", lambda **kw: results)
    assert cli.main(["check", "--quick"]) == 1
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" in out
    monkeypatch.setattr(acceptance, "run_checks", lambda **kw: results[:1])
    assert cli.main(["check", "--quick"]) == 0
