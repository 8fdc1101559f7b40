import json

import numpy as np
import pytest

from sparsegain import cli


STABLE_SCALAR = """
{"A": [[-1.0]], "B": [[1.0]], "C": [[1.0]], "Q": [[1.0]], "R": [[1.0]],
 "N": [[2.0]], "lambda": 0.1}
"""

UNSTABLE_UNACTUATED = """
{"A": [[1.0]], "B": [[0.0]], "C": [[1.0]]}
"""


@pytest.fixture
def stable_file(tmp_path):
    path = tmp_path / "problem.json"
    path.write_text(STABLE_SCALAR)
    return str(path)


class TestSynth:
    def test_exit_zero_and_result_fields(self, stable_file, tmp_path, capsys):
        out = tmp_path / "result.json"
        code = cli.dispatch(["synth", stable_file, "-o", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["schema"] == 1
        for key in ("k_dense", "k_truncated", "j_achieved", "j_baseline",
                    "density", "stability_margin", "converged", "iterations"):
            assert key in payload

    def test_stdout_default(self, stable_file, capsys):
        code = cli.dispatch(["synth", stable_file])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["stability_margin"] < 0

    def test_byte_identical_reruns(self, stable_file, tmp_path):
        out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
        assert cli.dispatch(["synth", stable_file, "-o", str(out1)]) == 0
        assert cli.dispatch(["synth", stable_file, "-o", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_lambda_override(self, stable_file, capsys):
        code = cli.dispatch(["synth", stable_file, "--lambda", "1e6"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert np.count_nonzero(payload["k_truncated"]) == 0

    def test_missing_file_exit_two(self, capsys):
        assert cli.dispatch(["synth", "/nonexistent.json"]) == 2

    def test_malformed_file_exit_two(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"A": [[1.0], [2.0, 3.0]]}')
        assert cli.dispatch(["synth", str(path)]) == 2


class TestFeas:
    def test_feasible_exit_zero(self, stable_file, capsys):
        assert cli.dispatch(["feas", stable_file]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["verdict"] == "Feasible"

    def test_infeasible_exit_one(self, tmp_path, capsys):
        path = tmp_path / "inf.json"
        path.write_text(UNSTABLE_UNACTUATED)
        assert cli.dispatch(["feas", str(path)]) == 1
        payload = json.loads(capsys.readouterr().out)
        assert payload["verdict"] == "Infeasible"

    def test_byte_identical(self, stable_file, tmp_path):
        out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
        cli.dispatch(["feas", stable_file, "-o", str(out1)])
        cli.dispatch(["feas", stable_file, "-o", str(out2)])
        assert out1.read_bytes() == out2.read_bytes()


class TestBounds:
    def test_bounds_order(self, stable_file, capsys):
        assert cli.dispatch(["bounds", stable_file]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["lower"] <= payload["upper"] + 1e-9
        assert payload["gap"] == pytest.approx(payload["upper"] - payload["lower"])


class TestSparsest:
    def test_scalar_unstable(self, tmp_path, capsys):
        path = tmp_path / "p.json"
        path.write_text('{"A": [[1.0]], "B": [[1.0]], "C": [[1.0]]}')
        assert cli.dispatch(["sparsest", str(path)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["cardinality"] == 1


class TestBench:
    def test_lattice_csv(self, tmp_path):
        out = tmp_path / "rows.csv"
        code = cli.dispatch([
            "bench", "--lattice", "2", "--seed", "7", "--lambda", "0.1",
            "--rho-grid", "100.0", "-o", str(out), "--max-outer", "300",
        ])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0].startswith("lambda,rho,J,")
        assert len(lines) == 2

    def test_requires_generator(self, capsys):
        assert cli.dispatch(["bench", "--seed", "1"]) == 2


class TestSimulate:
    def test_simulate_from_gain_file(self, stable_file, tmp_path, capsys):
        gain = tmp_path / "gain.json"
        gain.write_text('{"k": [[-0.5]]}')
        code = cli.dispatch(["simulate", stable_file, "--gain", str(gain)])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["j_quadrature"] > 0
        assert payload["sup_u_2"] >= payload["sup_u_inf"] > 0

    def test_unstable_gain_exit_one(self, tmp_path, capsys):
        path = tmp_path / "p.json"
        path.write_text('{"A": [[1.0]], "B": [[1.0]], "C": [[1.0]]}')
        gain = tmp_path / "gain.json"
        gain.write_text('{"k": [[0.0]]}')
        assert cli.dispatch(["simulate", str(path), "--gain", str(gain)]) == 1


class TestUsage:
    def test_unknown_subcommand(self):
        assert cli.dispatch(["frobnicate"]) == 2
