import asyncio
import csv
import logging

import numpy as np
import pytest

from ttcme.config import bundled_model_path, load_config
from ttcme.exceptions import ConfigError, SolverError
from ttcme.log import get_default_logger
from ttcme.use_cases.run_model import (
    EXIT_CAP,
    EXIT_CONFIG,
    EXIT_SOLVER,
    apply_overrides,
    build_parser,
    main,
    run,
)
from ttcme.use_cases.utils import format_value, setup_logger, write_csv


def invoke(*argv: str) -> int:
    return asyncio.run(run(build_parser().parse_args(list(argv))))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def package_logger():
    """The package logger without handlers, restored afterwards."""
    logger = logging.getLogger("ttcme")
    saved = list(logger.handlers)
    logger.handlers.clear()
    yield logger
    for handler in logger.handlers:
        handler.close()
    logger.handlers[:] = saved


def test_parser_defaults():
    args = build_parser().parse_args(["simulate", "toggle"])
    assert args.format == "qtt"
    assert args.threads == 1
    assert args.times == []
    assert args.eps is None
    args = build_parser().parse_args(
        ["sweep", "toggle", "--eps", "1e-4", "--times", "1", "2.5", "--uncoupled", "--threads", "4"]
    )
    assert args.eps == 1e-4
    assert args.times == [1.0, 2.5]
    assert args.uncoupled and args.threads == 4


def test_parser_rejects_unknown_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["integrate", "toggle"])


def test_overrides_take_precedence():
    cfg = load_config(bundled_model_path("birth_death"))
    args = build_parser().parse_args(
        ["simulate", "birth_death", "--eps", "1e-4", "--T", "3", "--Nt", "8", "--seed", "7"]
    )
    updated = apply_overrides(cfg, args)
    assert updated.solver.eps == 1e-4
    assert updated.solver.seed == 7
    assert (updated.time.T, updated.time.T0, updated.time.Nt) == (3.0, 5.0, 8)
    assert cfg.solver.eps == 1e-8


def test_invalid_override():
    cfg = load_config(bundled_model_path("birth_death"))
    args = build_parser().parse_args(["simulate", "birth_death", "--Nt", "6"])
    with pytest.raises(ConfigError) as exc_info:
        apply_overrides(cfg, args)
    assert exc_info.value.source == "command line"
    assert exc_info.value.errors[0][0] == "Nt"


def test_ranks_of_cascade(tmp_path):
    """Test the operator rank report of the 20-species cascade."""
    assert invoke("ranks", "cascade20", "--out-dir", str(tmp_path)) == 0
    rows = read_csv(tmp_path / "cascade20" / "ranks.csv")
    assert len(rows) == 19
    assert max(int(r["exact"]) for r in rows) == 5
    assert max(int(r["rounded_1e-12"]) for r in rows) <= 4
    assert {r["bound"] for r in rows} == {"5"}


def test_ranks_of_generic_network(tmp_path):
    assert invoke("ranks", "lphage", "--out-dir", str(tmp_path)) == 0
    rows = read_csv(tmp_path / "lphage" / "ranks.csv")
    assert len(rows) == 4
    for row in rows:
        assert int(row["rounded_1e-12"]) <= int(row["exact"]) <= int(row["bound"])


def test_simulate_writes_outputs(tmp_path):
    """Test a short propagation of the birth-death model end to end."""
    code = invoke(
        "simulate", "birth_death", "--out-dir", str(tmp_path),
        "--T", "2", "--T0", "1", "--Nt", "8", "--times", "2", "--format", "tt", "--per-step",
    )
    assert code == 0
    out = tmp_path / "birth_death"
    means = read_csv(out / "means.csv")
    assert [float(r["t"]) for r in means] == [0.0, 1.0, 2.0]
    assert float(means[0]["x1"]) == 0.0
    # mean of a birth-death process started empty: 10·(1 - exp(-0.07 t))
    assert float(means[-1]["x1"]) == pytest.approx(10.0 * (1.0 - np.exp(-0.14)), rel=1e-3)
    mass = read_csv(out / "mass.csv")
    assert float(mass[-1]["mass"]) == pytest.approx(1.0, abs=1e-6)
    assert len(read_csv(out / "residual.csv")) == 3
    assert len(read_csv(out / "steps.csv")) == 16
    marginal = read_csv(out / "marginal_X_t2.csv")
    assert len(marginal) == 64
    assert sum(float(r["p"]) for r in marginal) == pytest.approx(1.0)
    assert (out / "state_ranks.csv").exists()


def test_steady_writes_means(tmp_path):
    code = invoke("steady", "birth_death", "--out-dir", str(tmp_path), "--format", "qtt-tucker")
    assert code == 0
    out = tmp_path / "birth_death"
    means = read_csv(out / "means.csv")
    assert float(means[0]["x1"]) == pytest.approx(10.0, rel=1e-4)
    residual = read_csv(out / "residual.csv")
    assert float(residual[-1]["eta"]) <= 1e-8
    assert read_csv(out / "tucker_ranks.csv")[0]["dimension"] == "1"


def test_oracle_agrees_on_birth_death(tmp_path):
    code = invoke(
        "oracle", "birth_death", "--out-dir", str(tmp_path), "--T", "1", "--T0", "1", "--Nt", "16"
    )
    assert code == 0
    rows = read_csv(tmp_path / "birth_death" / "oracle.csv")
    assert [float(r["t"]) for r in rows] == [0.0, 1.0]
    assert float(rows[0]["error"]) == 0.0
    assert float(rows[1]["error"]) < 1e-3


def test_missing_config_exits_with_config_code(tmp_path):
    assert invoke("simulate", str(tmp_path / "none.yml")) == EXIT_CONFIG


def test_sweep_needs_parameter(tmp_path):
    assert invoke("sweep", "birth_death", "--out-dir", str(tmp_path)) == EXIT_CONFIG


def test_bad_propensity_exits_with_config_code(tmp_path):
    path = tmp_path / "bad.yml"
    path.write_text(
        "species:\n"
        "  - {name: X, bits: 2}\n"
        "reactions:\n"
        "  - name: destroy\n"
        "    stoichiometry: {X: -1}\n"
        "    propensity:\n"
        "      factors:\n"
        "        - {kind: linear, dims: [X], params: {c: -1.0}}\n"
    )
    assert invoke("ranks", str(path), "--out-dir", str(tmp_path)) == EXIT_CONFIG


def test_oracle_cap_exits_with_cap_code(tmp_path, clean_settings):
    clean_settings.setenv("TTCME_ORACLE_CAP", "10")
    assert invoke("oracle", "birth_death", "--out-dir", str(tmp_path)) == EXIT_CAP


def test_solver_failure_exits_with_solver_code(tmp_path, mocker):
    mocker.patch(
        "ttcme.use_cases.run_model.Propagator.propagate",
        side_effect=SolverError("time_integration.propagate", 0, "diverged"),
    )
    assert invoke("simulate", "birth_death", "--out-dir", str(tmp_path)) == EXIT_SOLVER


def test_main_sets_up_logging(tmp_path, mocker):
    setup = mocker.patch("ttcme.use_cases.run_model.setup_logger")
    assert main(["ranks", "birth_death", "--out-dir", str(tmp_path), "--debug"]) == 0
    setup.assert_called_once_with(True)


def test_format_value():
    assert format_value(0.1) == "0.10000000000000001"
    assert format_value(np.float64(2.5)) == "2.5"
    assert format_value(3) == "3"
    assert format_value("x1") == "x1"


def test_write_csv(tmp_path):
    path = write_csv(tmp_path / "nested" / "out.csv", ["t", "p"], [(0.0, 1), (0.5, 2)])
    assert path.read_text().splitlines() == ["t,p", "0,1", "0.5,2"]


def test_setup_logger_reroutes_module_loggers(tmp_path, package_logger):
    """Test that loggers created before setup propagate to the package logger."""
    child = get_default_logger("ttcme.test_child")
    assert child.handlers and not child.propagate
    logger = setup_logger(debug=True, logs_dir=str(tmp_path / "logs"))
    assert logger is package_logger
    assert logger.level == logging.DEBUG
    assert len(logger.handlers) == 2
    assert child.handlers == []
    assert child.propagate
    assert list((tmp_path / "logs").glob("ttcme_*.log"))
    # loggers created afterwards inherit the package handlers
    late = get_default_logger("ttcme.test_late_child")
    assert late.handlers == []


SMALL_TOGGLE = """
name: small_toggle
species:
  - {name: x1, bits: 3}
  - {name: x2, bits: 3}
parameter:
  name: y
  grid: {type: exp-uniform, min: 1.0e-6, max: 1.0e-2, points: 3}
reactions:
  - name: create_x1
    stoichiometry: {x1: 1}
    propensity:
      factors:
        - {kind: hill, dims: [x2], params: {alpha: 3.0, beta: 2.5}}
  - name: destroy_x1
    stoichiometry: {x1: -1}
    propensity:
      factors:
        - {kind: linear, dims: [x1], params: {c: 1.0}}
  - name: create_x2
    stoichiometry: {x2: 1}
    propensity:
      factors:
        - kind: inducible_repression
          dims: [x1, y]
          params: {alpha: 3.0, K: 2.9618e-5, eta: 2.0015}
  - name: destroy_x2
    stoichiometry: {x2: -1}
    propensity:
      factors:
        - {kind: linear, dims: [x2], params: {c: 1.0}}
steady:
  T0: 5.0
  eps_final: 1.0e-6
"""


def test_uncoupled_sweep_does_not_depend_on_threads(tmp_path):
    """Test that the worker count of an uncoupled sweep leaves the output unchanged."""
    path = tmp_path / "small_toggle.yml"
    path.write_text(SMALL_TOGGLE)
    outputs = []
    for threads in ("1", "3"):
        out = tmp_path / f"threads{threads}"
        code = invoke("sweep", str(path), "--out-dir", str(out), "--uncoupled", "--threads", threads)
        assert code == 0
        outputs.append((out / "small_toggle" / "mean_vs_parameter.csv").read_text())
    assert outputs[0] == outputs[1]
    rows = list(csv.DictReader(outputs[0].splitlines()))
    assert len(rows) == 3


def test_threads_help_names_the_sweep(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    assert "uncoupled sweep" in " ".join(capsys.readouterr().out.split())
