import csv
import json
import os

import numpy as np
import pytest

from misteri import Scenario, generate
from misteri.cli import main
from misteri.simulation import fit_method, write_dataset_csv


def _write_table1_csv(path, n=2000, seed=0, eta_z=0.3):
    data = generate(Scenario("table1_normal", n=n, eta_z=eta_z, seed=seed))
    write_dataset_csv(path, data)
    return data


class TestEstimate:
    def test_end_to_end_cmle(self, tmp_path, capsys):
        path = tmp_path / "d.csv"
        _write_table1_csv(path, n=5000, seed=1)
        out = tmp_path / "est.json"
        code = main(["estimate", "--input", str(path), "--method", "cmle",
                     "--output", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert doc["method"] == "cmle"
        assert doc["n"] == 5000 and doc["p"] == 1
        assert abs(doc["beta"]["est"] - 0.8) < 0.3
        assert doc["beta"]["se"] > 0
        assert doc["converged"] is True
        assert doc["kappa"] is not None
        assert len(doc["theta"]) == 6
        assert doc["beta"]["p"] is not None

    def test_schema_stable_across_data(self, tmp_path):
        docs = []
        for seed in (3, 4):
            path = tmp_path / f"d{seed}.csv"
            _write_table1_csv(path, n=1500, seed=seed)
            out = tmp_path / f"e{seed}.json"
            assert main(["estimate", "--input", str(path), "--method", "three-stage",
                         "--bootstrap", "20", "--seed", "7", "--output", str(out)]) == 0
            docs.append(json.loads(out.read_text()))
        assert _keys(docs[0]) == _keys(docs[1])

    def test_unmapped_column(self, tmp_path):
        path = tmp_path / "d.csv"
        _write_table1_csv(path)
        out = tmp_path / "never.json"
        code = main(["estimate", "--input", str(path), "--instruments", "snp1",
                     "--output", str(out)])
        assert code == 3
        assert not out.exists()

    def test_non_numeric_cell(self, tmp_path, capsys):
        path = tmp_path / "d.csv"
        path.write_text("y,a,z1\n1.0,2.0,0\n1.5,oops,1\n2.0,0.5,2\n")
        code = main(["estimate", "--input", str(path)])
        assert code == 3
        err = capsys.readouterr().err
        assert "row 3" in err and "'a'" in err

    def test_missing_file(self, tmp_path):
        assert main(["estimate", "--input", str(tmp_path / "absent.csv")]) == 3

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        assert main(["estimate", "--input", str(path)]) == 3

    def test_shape_mismatch_closed_form(self, tmp_path):
        path = tmp_path / "d.csv"
        _write_table1_csv(path)  # continuous treatment
        assert main(["estimate", "--input", str(path), "--method", "closed-form"]) == 3

    def test_identification_failure_exit_code(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 400
        path = tmp_path / "d.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["y", "a", "z1", "z2"])
            z1 = rng.integers(0, 3, size=n).astype(float)
            for i in range(n):
                writer.writerow([rng.normal(), rng.normal(), z1[i], 2 * z1[i]])
        assert main(["estimate", "--input", str(path), "--method", "three-stage"]) == 5


class TestDiagnose:
    def test_heteroscedastic_data(self, tmp_path):
        path = tmp_path / "d.csv"
        _write_table1_csv(path, n=8000, seed=2, eta_z=0.3)
        out = tmp_path / "diag.json"
        assert main(["diagnose", "--input", str(path), "--output", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert set(doc) == {"het_stat", "het_pvalue", "kappa", "k",
                            "min_eigenvalue", "warning"}
        assert doc["het_pvalue"] < 1e-6
        assert doc["k"] == 6

    def test_homoscedastic_warning(self, tmp_path):
        agree = 0
        for seed in range(30):
            data = generate(Scenario("homoscedastic", n=2000, eta_z=0.0, seed=seed))
            path = tmp_path / f"h{seed}.csv"
            write_dataset_csv(path, data)
            out = tmp_path / f"h{seed}.json"
            assert main(["diagnose", "--input", str(path), "--output", str(out)]) == 0
            doc = json.loads(out.read_text())
            if doc["het_pvalue"] > 0.05 and doc["warning"]:
                agree += 1
        assert agree >= 27


class TestSimulate:
    def test_summary_csv(self, tmp_path):
        out = tmp_path / "sum.csv"
        code = main(["simulate", "--scenario", "table1", "--n", "1000",
                     "--eta-z", "0.3", "--reps", "3", "--method", "one-step",
                     "--seed", "5", "--output", str(out)])
        assert code == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert rows[1][rows[0].index("method")] == "one_step"

    def test_single_rep_sd_marker(self, tmp_path, capsys):
        code = main(["simulate", "--scenario", "table1", "--n", "1000",
                     "--reps", "1", "--method", "one-step", "--seed", "5"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        header = lines[0].split(",")
        row = lines[1].split(",")
        assert row[header.index("sd")] == ""  # absent marker for a single rep

    def test_unknown_scenario_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--scenario", "table7", "--reps", "1"])
        assert exc.value.code == 2

    def test_round_trip_bit_exact(self, tmp_path):
        emitted = tmp_path / "data.csv"
        out = tmp_path / "sum.json"
        code = main(["simulate", "--scenario", "table1", "--n", "2000",
                     "--eta-z", "0.3", "--reps", "1", "--method", "cmle",
                     "--seed", "42", "--emit-data", str(emitted),
                     "--output", str(out)])
        assert code == 0
        # in-process reference on the same generated data and seed
        data = generate(Scenario("table1_normal", n=2000, eta_z=0.3, seed=42))
        reference = fit_method(data, "cmle", seed=7)
        est_out = tmp_path / "est.json"
        assert main(["estimate", "--input", str(emitted), "--method", "cmle",
                     "--seed", "7", "--output", str(est_out)]) == 0
        doc = json.loads(est_out.read_text())
        assert doc["beta"]["est"] == reference.beta  # bit-exact
        assert doc["gamma"]["est"] == reference.gamma
        assert doc["theta"] == list(reference.theta_hat.to_array())
        assert doc["beta"]["se"] == reference.se[0]

    def test_env_seed_override(self, tmp_path, monkeypatch):
        emitted1 = tmp_path / "a.csv"
        emitted2 = tmp_path / "b.csv"
        main(["simulate", "--scenario", "table1", "--n", "1000", "--reps", "1",
              "--method", "one-step", "--seed", "1", "--emit-data", str(emitted1)])
        monkeypatch.setenv("MISTERI_SEED", "1")
        main(["simulate", "--scenario", "table1", "--n", "1000", "--reps", "1",
              "--method", "one-step", "--seed", "999", "--emit-data", str(emitted2)])
        assert emitted1.read_text() == emitted2.read_text()


class TestReproduce:
    def test_table1_desk_scale(self, tmp_path):
        out = tmp_path / "t1.csv"
        code = main(["reproduce", "--table", "table1", "--reps", "2",
                     "--seed", "3", "--output", str(out)])
        assert code == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 7  # header + six design rows


def _keys(doc, prefix=""):
    out = []
    for key, value in doc.items():
        out.append(prefix + key)
        if isinstance(value, dict):
            out.extend(_keys(value, prefix + key + "."))
    return sorted(out)
