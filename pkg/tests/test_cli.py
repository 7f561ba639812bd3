import json

import numpy as np
import pytest

from eslasso.cli import main


def run_cli(*args):
    return main([str(a) for a in args])


def write_config(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


@pytest.fixture
def data_csv(tmp_path, rng):
    n = 120
    x = rng.normal(size=(n, 2))
    y = 1.0 + x @ np.array([0.8, -0.5]) + rng.normal(size=n)
    path = tmp_path / "data.csv"
    rows = ["y,x1,x2"] + [f"{a},{b},{c}" for a, (b, c) in zip(y, x)]
    path.write_text("\n".join(rows), encoding="utf-8")
    return path


class TestUsageErrors:
    def test_missing_config_file(self, tmp_path):
        assert run_cli("simulate", "--config", tmp_path / "absent.json",
                       "--out", tmp_path) == 2

    def test_invalid_json(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json", encoding="utf-8")
        assert run_cli("simulate", "--config", cfg, "--out", tmp_path) == 2

    def test_unknown_simulation_parameter(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"simulation": {"bogus": 1}})
        assert run_cli("simulate", "--config", cfg, "--out", tmp_path) == 2

    def test_no_command_prints_help(self):
        assert main([]) == 2

    def test_bad_fit_task(self, tmp_path, data_csv):
        cfg = write_config(tmp_path / "c.json", {"task": "nope", "data": str(data_csv)})
        assert run_cli("fit", "--config", cfg, "--out", tmp_path) == 2

    def test_fit_bad_csv(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,x\n", encoding="utf-8")
        cfg = write_config(tmp_path / "c.json",
                           {"task": "quantile", "data": str(bad), "penalty": 0.0})
        assert run_cli("fit", "--config", cfg, "--out", tmp_path) == 2

    def test_tailbound_empty_grid(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", {"u_grid": [], "reps": 10, "T": 50})
        assert run_cli("tailbound", "--config", cfg, "--out", tmp_path) == 2


class TestSimulateCommand:
    def config(self, tmp_path, **extra):
        payload = {
            "simulation": {"T": 60, "d": 3, "K": 2, "s0": 1, "tau": 0.25, "seed": 5},
            "reps": 2,
            "penalized": False,
            **extra,
        }
        return write_config(tmp_path / "sim.json", payload)

    def test_smoke_run_writes_outputs(self, tmp_path):
        cfg = self.config(tmp_path, write_records=True)
        out = tmp_path / "out"
        assert run_cli("simulate", "--config", cfg, "--out", out) == 0
        summary = (out / "summary.csv").read_text().splitlines()
        assert len(summary) == 2
        assert "avg_gamma_error" in summary[0]
        assert (out / "records.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["config"]["reps"] == 2

    def test_rerun_byte_identical(self, tmp_path):
        cfg = self.config(tmp_path)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        assert run_cli("simulate", "--config", cfg, "--out", out1) == 0
        assert run_cli("simulate", "--config", cfg, "--out", out2) == 0
        assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()

    def test_thread_invariant(self, tmp_path):
        cfg = self.config(tmp_path)
        out1, out2 = tmp_path / "t1", tmp_path / "t2"
        assert run_cli("simulate", "--config", cfg, "--out", out1, "--threads", 1) == 0
        assert run_cli("simulate", "--config", cfg, "--out", out2, "--threads", 2) == 0
        assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()

    def test_grid_layout(self, tmp_path):
        cfg = write_config(tmp_path / "grid.json", {
            "simulation": {"T": 60, "d": 3, "s0": 1, "tau": 0.25, "seed": 5},
            "reps": 1,
            "grid": {"K": [2, 3], "sigma_nu": [0.5], "T": [60]},
        })
        out = tmp_path / "out"
        assert run_cli("simulate", "--config", cfg, "--out", out) == 0
        lines = (out / "summary.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + 4  # 2 degrees x 1 scale x 1 size x 2 estimators
        header = lines[0].split(",")
        assert header[:4] == ["K", "sigma_nu", "T", "penalized"]


class TestFitCommand:
    def test_quantile_fit_outputs(self, tmp_path, data_csv):
        cfg = write_config(tmp_path / "c.json", {
            "task": "quantile", "data": str(data_csv), "tau": 0.25, "penalty": 0.1,
        })
        out = tmp_path / "out"
        assert run_cli("fit", "--config", cfg, "--out", out) == 0
        fit = json.loads((out / "fit.json").read_text())
        assert len(fit["coefficients"]) == 3
        assert fit["converged"] is True
        preds = (out / "predictions.csv").read_text().splitlines()
        assert len(preds) == 121

    def test_es_huge_penalty_zeroes_coefficients(self, tmp_path, data_csv):
        cfg = write_config(tmp_path / "c.json", {
            "task": "es", "data": str(data_csv), "tau": 0.25,
            "penalty": 1e9, "quantile_penalty": 0.0,
        })
        out = tmp_path / "out"
        assert run_cli("fit", "--config", cfg, "--out", out) == 0
        fit = json.loads((out / "fit.json").read_text())
        assert all(c == 0.0 for c in fit["coefficients"])

    def test_es_kkt_certificate_in_output(self, tmp_path, data_csv):
        cfg = write_config(tmp_path / "c.json", {
            "task": "es", "data": str(data_csv), "tau": 0.25,
            "penalty": 0.05, "quantile_penalty": 0.0,
        })
        out = tmp_path / "out"
        assert run_cli("fit", "--config", cfg, "--out", out) == 0
        fit = json.loads((out / "fit.json").read_text())
        assert fit["kkt_violation"] <= 1e-5  # 1e-6 * (1 + ||aux||_inf) margin

    def test_cheb_expansion(self, tmp_path, data_csv):
        cfg = write_config(tmp_path / "c.json", {
            "task": "quantile", "data": str(data_csv), "tau": 0.25,
            "penalty": 0.1, "chebyshev_degree": 2,
        })
        out = tmp_path / "out"
        assert run_cli("fit", "--config", cfg, "--out", out) == 0
        fit = json.loads((out / "fit.json").read_text())
        assert len(fit["coefficients"]) == 5


class TestCoesCommand:
    def config(self, tmp_path):
        return write_config(tmp_path / "coes.json", {
            "synthetic": {"seed": 3, "n_periods": 240, "n_state": 2, "degree_true": 2},
            "tau": 0.1,
            "k_values": [1, 2],
            "train_size": 160,
            "test_size": 80,
            "penalties": "benchmark",
            "grid_size": 8,
        })

    def test_runs_both_degrees(self, tmp_path):
        out = tmp_path / "out"
        assert run_cli("coes", "--config", self.config(tmp_path), "--out", out) == 0
        report = (out / "report.csv").read_text().splitlines()
        assert len(report) == 1 + 10  # header + 5 metrics x 2 degrees
        assert (out / "series_k1.csv").exists()
        assert (out / "series_k2.csv").exists()

    def test_rerun_byte_identical(self, tmp_path):
        cfg = self.config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("coes", "--config", cfg, "--out", out1) == 0
        assert run_cli("coes", "--config", cfg, "--out", out2) == 0
        for name in ("report.csv", "series_k1.csv", "series_k2.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


class TestTailboundCommand:
    def config(self, tmp_path):
        return write_config(tmp_path / "tb.json", {
            "rho": 0.5, "p": 3, "T": 300, "reps": 400, "seed": 8,
            "u_range": [0.03, 0.3, 8],
        })

    def test_outputs_and_monotone_smoothed(self, tmp_path):
        out = tmp_path / "out"
        assert run_cli("tailbound", "--config", self.config(tmp_path), "--out", out) == 0
        lines = (out / "tailbound.csv").read_text().strip().splitlines()
        assert len(lines) == 9
        smoothed = [float(row.split(",")[2]) for row in lines[1:]]
        assert all(a >= b - 1e-15 for a, b in zip(smoothed, smoothed[1:]))
        constants = json.loads((out / "constants.json").read_text())
        assert constants["c_poly"] > 0

    def test_thread_invariant(self, tmp_path):
        cfg = self.config(tmp_path)
        out1, out2 = tmp_path / "x", tmp_path / "y"
        assert run_cli("tailbound", "--config", cfg, "--out", out1, "--threads", 1) == 0
        assert run_cli("tailbound", "--config", cfg, "--out", out2, "--threads", 2) == 0
        assert (out1 / "tailbound.csv").read_bytes() == (out2 / "tailbound.csv").read_bytes()


class TestCVCommand:
    def test_writes_loss_table_and_choice(self, tmp_path, data_csv):
        cfg = write_config(tmp_path / "cv.json", {
            "task": "quantile", "data": str(data_csv), "tau": 0.25,
            "cv_folds": 4, "grid_size": 5,
        })
        out = tmp_path / "out"
        assert run_cli("cv", "--config", cfg, "--out", out) == 0
        table = (out / "loss_table.csv").read_text().splitlines()
        assert table[0] == "penalty,fold_0,fold_1,fold_2,fold_3,mean"
        assert len(table) == 6
        chosen = json.loads((out / "chosen.json").read_text())
        assert chosen["chosen_penalty"] > 0


class TestEnvThreads:
    def test_env_fallback(self, tmp_path, monkeypatch, data_csv):
        monkeypatch.setenv("ESLASSO_THREADS", "2")
        cfg = write_config(tmp_path / "c.json", {
            "task": "quantile", "data": str(data_csv), "tau": 0.25, "penalty": 0.1,
        })
        assert run_cli("fit", "--config", cfg, "--out", tmp_path / "out") == 0

    def test_bad_env_value(self, tmp_path, monkeypatch, data_csv):
        monkeypatch.setenv("ESLASSO_THREADS", "0")
        cfg = write_config(tmp_path / "c.json", {
            "task": "quantile", "data": str(data_csv), "tau": 0.25, "penalty": 0.1,
        })
        assert run_cli("fit", "--config", cfg, "--out", tmp_path / "out") == 2
