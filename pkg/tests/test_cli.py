import csv
import json

import numpy as np
import pytest

from drcurve import simulate as sim
from drcurve.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main, read_dataset_csv
from drcurve.estimator import read_curve_csv


def write_dataset_csv(path, data):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "a"] + [f"l{j}" for j in range(1, data.p + 1)])
        for i in range(data.n):
            writer.writerow(
                [repr(float(data.outcome[i])), repr(float(data.treatment[i]))]
                + [repr(float(v)) for v in data.covariates[i]]
            )


@pytest.fixture(scope="module")
def dataset_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "sample.csv"
    data = sim.generate_data(400, 77)
    write_dataset_csv(path, data)
    return str(path)


@pytest.fixture(scope="module")
def sim_style_config(tmp_path_factory):
    # Nuisance models matching the generating process of the sample data.
    cfg = {
        "schema": 1,
        "kernel": "epanechnikov",
        "support": [0.0, 20.0],
        "outcome_model": {
            "link": "logistic",
            "terms": ["1", "l1", "l2", "l3", "l4", "a", "a*l1", "a*l3", "a^3"],
        },
        "treatment_density": {
            "model": "beta",
            "mean_terms": ["1", "l1", "l2", "l3", "l4"],
            "total": 20.0,
        },
        "grid": {"size": 21},
        "bandwidth": {"range": [0.5, 50.0]},
    }
    path = tmp_path_factory.mktemp("cfg") / "estimate.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestEstimateCommand:
    def test_reg_kind_writes_marginal_curve(self, dataset_csv, sim_style_config, tmp_path):
        out = tmp_path / "curve.csv"
        rc = main(
            [
                "estimate",
                "--input",
                dataset_csv,
                "--output",
                str(out),
                "--config",
                sim_style_config,
                "--kind",
                "reg",
            ]
        )
        assert rc == EXIT_OK
        back = read_curve_csv(out)
        assert back["a"].shape == (21,)
        data = read_dataset_csv(dataset_csv, support=(0.0, 20.0))
        fit = sim.fit_nuisances(data)
        from drcurve.estimator import default_grid

        grid = default_grid(data.treatment, size=21)
        np.testing.assert_allclose(back["a"], grid, atol=1e-12)
        np.testing.assert_allclose(back["estimate"], fit.reg_curve(grid), atol=1e-12)
        assert json.loads((tmp_path / "curve.json").read_text())["kind"] == "reg"

    def test_missing_column_names_it(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("y,l1\n1,0.5\n0,0.2\n")
        rc = main(["estimate", "--input", str(path), "--output", str(tmp_path / "o.csv")])
        assert rc == EXIT_INPUT

    def test_missing_column_message(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("y,l1\n1,0.5\n0,0.2\n")
        main(["estimate", "--input", str(path), "--output", str(tmp_path / "o.csv")])
        assert "'a'" in capsys.readouterr().err

    def test_bad_value_names_row_and_column(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text("y,a,l1\n1,2.0,0.5\n0,oops,0.2\n1,3.0,0.1\n")
        rc = main(["estimate", "--input", str(path), "--output", str(tmp_path / "o.csv")])
        assert rc == EXIT_INPUT
        err = capsys.readouterr().err
        assert "'a'" in err and "row 2" in err

    def test_dr_estimate_deterministic(self, dataset_csv, sim_style_config, tmp_path):
        args = [
            "estimate",
            "--input",
            dataset_csv,
            "--config",
            sim_style_config,
            "--kind",
            "dr",
            "--bandwidth",
            "loo",
        ]
        out1, out2 = tmp_path / "c1.csv", tmp_path / "c2.csv"
        assert main(args + ["--output", str(out1)]) == EXIT_OK
        assert main(args + ["--output", str(out2)]) == EXIT_OK
        assert out1.read_bytes() == out2.read_bytes()
        assert (tmp_path / "c1.json").read_text() == (tmp_path / "c2.json").read_text()

    def test_fixed_bandwidth_with_cis(self, dataset_csv, sim_style_config, tmp_path):
        out = tmp_path / "fixed.csv"
        rc = main(
            [
                "estimate",
                "--input",
                dataset_csv,
                "--output",
                str(out),
                "--config",
                sim_style_config,
                "--kind",
                "dr",
                "--bandwidth",
                "2.5",
                "--ci-level",
                "0.9",
            ]
        )
        assert rc == EXIT_OK
        meta = json.loads((tmp_path / "fixed.json").read_text())
        assert meta["bandwidth"] == 2.5
        assert meta["level"] == 0.9
        back = read_curve_csv(out)
        finite = np.isfinite(back["estimate"])
        assert np.all(back["ci_low"][finite] <= back["estimate"][finite])
        assert np.all(back["estimate"][finite] <= back["ci_high"][finite])

    def test_round_trip_via_export(self, dataset_csv, sim_style_config, tmp_path):
        out = tmp_path / "curve.csv"
        main(
            [
                "estimate",
                "--input",
                dataset_csv,
                "--output",
                str(out),
                "--config",
                sim_style_config,
                "--kind",
                "dr",
                "--bandwidth",
                "2.5",
            ]
        )
        exported = tmp_path / "exported.csv"
        rc = main(
            ["export", "--input", str(tmp_path / "curve.json"), "--output", str(exported)]
        )
        assert rc == EXIT_OK
        assert exported.read_bytes() == out.read_bytes()

    def test_bad_feature_term_rejected(self, dataset_csv, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {"schema": 1, "outcome_model": {"link": "logistic", "terms": ["1", "x9"]}}
            )
        )
        rc = main(
            [
                "estimate",
                "--input",
                dataset_csv,
                "--output",
                str(tmp_path / "o.csv"),
                "--config",
                str(cfg),
            ]
        )
        assert rc == EXIT_INPUT
        assert "x9" in capsys.readouterr().err

    def test_negative_bandwidth_rejected(self, dataset_csv, tmp_path):
        rc = main(
            [
                "estimate",
                "--input",
                dataset_csv,
                "--output",
                str(tmp_path / "o.csv"),
                "--bandwidth",
                "-2.0",
            ]
        )
        assert rc == EXIT_INPUT

    def test_unknown_config_key_rejected(self, dataset_csv, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"schema": 1, "bogus": True}))
        rc = main(
            [
                "estimate",
                "--input",
                dataset_csv,
                "--output",
                str(tmp_path / "o.csv"),
                "--config",
                str(cfg),
            ]
        )
        assert rc == EXIT_INPUT

    def test_numerical_failure_exit_code(self, tmp_path):
        # All treatments piled at two isolated spots with a tiny fixed
        # bandwidth: every grid point is singular.
        rng = np.random.default_rng(5)
        path = tmp_path / "clust.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["y", "a", "l1"])
            for i in range(40):
                a = 1.0 if i % 2 else 9.0
                writer.writerow([i % 2, a, repr(rng.normal())])
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {
                    "schema": 1,
                    "bandwidth": {"mode": "fixed", "value": 0.05},
                    "grid": {"points": [4.0, 5.0, 6.0]},
                    "outcome_model": {"link": "logistic", "terms": ["1", "l1"]},
                    "treatment_density": {
                        "model": "locscale",
                        "mean_terms": ["1"],
                        "scale_terms": ["1"],
                    },
                }
            )
        )
        rc = main(
            [
                "estimate",
                "--input",
                str(path),
                "--output",
                str(tmp_path / "o.csv"),
                "--config",
                str(cfg),
            ]
        )
        assert rc == EXIT_NUMERIC


class TestBandwidthCommand:
    def test_prints_selected_and_table(self, dataset_csv, sim_style_config, tmp_path, capsys):
        out = tmp_path / "risk.csv"
        rc = main(
            [
                "bandwidth",
                "--input",
                dataset_csv,
                "--config",
                sim_style_config,
                "--output",
                str(out),
            ]
        )
        assert rc == EXIT_OK
        printed = capsys.readouterr().out
        assert "selected_h=" in printed and "risk=" in printed
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["h", "risk"]
        risks = [float(r[1]) for r in rows[1:]]
        assert any(np.isfinite(risks))

    def test_deterministic(self, dataset_csv, sim_style_config, tmp_path, capsys):
        args = ["bandwidth", "--input", dataset_csv, "--config", sim_style_config]
        main(args)
        first = capsys.readouterr().out
        main(args)
        second = capsys.readouterr().out
        assert first == second

    def test_infeasible_range_exits_numeric(self, dataset_csv, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps({"schema": 1, "bandwidth": {"range": [0.02, 0.05], "grid_size": 4}})
        )
        rc = main(["bandwidth", "--input", dataset_csv, "--config", str(cfg)])
        assert rc == EXIT_NUMERIC

    def test_collapsed_range_prints_it(self, dataset_csv, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps({"schema": 1, "bandwidth": {"range": [5.0, 5.0], "grid_size": 2}})
        )
        rc = main(["bandwidth", "--input", dataset_csv, "--config", str(cfg)])
        assert rc == EXIT_OK
        assert "selected_h=5.0" in capsys.readouterr().out


class TestSimulateCommand:
    def test_smoke_run_and_determinism(self, tmp_path):
        cfg = tmp_path / "sim.json"
        cfg.write_text(
            json.dumps(
                {
                    "schema": 1,
                    "n": 100,
                    "replications": 2,
                    "base_seed": 9,
                    "estimators": ["reg", "dr"],
                    "bandwidth_mode": "loo",
                    "grid_size": 31,
                    "jobs": 1,
                }
            )
        )
        out1, out2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
        assert main(["simulate", "--config", str(cfg), "--output", str(out1)]) == EXIT_OK
        assert main(["simulate", "--config", str(cfg), "--output", str(out2)]) == EXIT_OK
        assert out1.read_bytes() == out2.read_bytes()
        payload = json.loads((tmp_path / "r1.json").read_text())
        assert payload["n_used"] == 2
        assert {c["estimator"] for c in payload["cells"]} == {"reg", "dr"}

    def test_invalid_config_exits_2(self, tmp_path):
        cfg = tmp_path / "sim.json"
        cfg.write_text(json.dumps({"schema": 1, "n": 10}))
        rc = main(["simulate", "--config", str(cfg), "--output", str(tmp_path / "r.csv")])
        assert rc == EXIT_INPUT


class TestExportCommand:
    def test_missing_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"grid": [1, 2]}))
        rc = main(["export", "--input", str(path), "--output", str(tmp_path / "o.csv")])
        assert rc == EXIT_INPUT


class TestReadDatasetCsv:
    def test_column_order_free(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("l1,y,a\n0.5,1,2.0\n0.1,0,3.0\n")
        data = read_dataset_csv(str(path))
        np.testing.assert_allclose(data.treatment, [2.0, 3.0])
        np.testing.assert_allclose(data.outcome, [1.0, 0.0])
        np.testing.assert_allclose(data.covariates[:, 0], [0.5, 0.1])

    def test_bad_covariate_names(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("y,a,x1\n1,2.0,0.5\n0,3.0,0.1\n")
        from drcurve.cli import InputError

        with pytest.raises(InputError):
            read_dataset_csv(str(path))

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("y,a,l1\n1,2.0,0.5\n0,3.0\n")
        from drcurve.cli import InputError

        with pytest.raises(InputError):
            read_dataset_csv(str(path))
