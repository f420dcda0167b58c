import json
import logging

import pandas as pd
import pytest

from conftest import make_cohort, patient_rows
from dtrmon.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_ORACLE, EXIT_SUPPORT, main, oracle_rows
from dtrmon.cohort import load_cohort, write_cohort
from dtrmon.pipeline import AnalysisSpec, SpecError
from dtrmon.regimes import RegimeSpec, TreatmentRule
from dtrmon.simulator import load_scenario


@pytest.fixture(autouse=True)
def quiet_fits():
    logging.disable(logging.WARNING)
    yield
    logging.disable(logging.NOTSET)


def spec_file(tmp_path, name="spec.json", **fields):
    d = {"scenario": "nde_true", "n": 1500, "t0": 2, "seed": 11}
    d.update(fields)
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def read_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestSimulate:
    def test_writes_cohort_and_provenance(self, tmp_path):
        assert main(["simulate", "--config", "confounded_monitoring", "--n", "1000", "--seed", "3",
                     "--out", str(tmp_path)]) == EXIT_OK
        cohort = load_cohort(tmp_path / "cohort.csv")
        assert cohort.n_patients == 1000
        df = pd.read_csv(tmp_path / "cohort.csv", comment="#")
        assert (df["t"] == 0).sum() >= 1000
        prov = json.loads((tmp_path / "provenance.json").read_text())
        assert prov["seed"] == 3 and len(prov["config_sha256"]) == 64
        assert f"config_sha256={prov['config_sha256']}" in (tmp_path / "cohort.csv").read_text()

    def test_malformed_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{oops")
        assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1

    def test_missing_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_IO

    def test_bad_seed(self, tmp_path):
        assert main(["simulate", "--config", "nde_true", "--seed", "-1", "--out", str(tmp_path)]) == EXIT_CONFIG


class TestEstimate:
    def test_treatment_only_counts(self, tmp_path):
        assert main(["estimate", "--config", str(spec_file(tmp_path)), "--out", str(tmp_path / "o")]) == EXIT_OK
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert sorted(report["curves"]) == ["d7", "d7.5", "d8", "d8.5"]
        final = [r for r in report["risk_differences"] if r["h"] == 3]
        assert len(final) == 6
        for name in ("curves.csv", "risk_differences.csv", "weight_bins.csv", "followers.csv", "run.log",
                     "weights.csv", "models.json"):
            assert (tmp_path / "o" / name).exists()

    def test_joint_static_has_sixteen_curves(self, tmp_path):
        p = spec_file(tmp_path, mode="joint-static")
        assert main(["estimate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_OK
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert len(report["curves"]) == 16

    def test_mode_flag_overrides(self, tmp_path):
        p = spec_file(tmp_path)
        assert main(["estimate", "--config", str(p), "--mode", "nde-relaxed", "--out", str(tmp_path / "o")]) == 0
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert all(k.startswith("dstar") for k in report["curves"])

    def test_t0_beyond_horizon(self, tmp_path):
        assert main(["estimate", "--config", str(spec_file(tmp_path, t0=3)), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_inconsistent_regime(self, tmp_path):
        p = spec_file(tmp_path, regimes=[{"threshold": 7.5, "monitoring": {"kind": "static", "skip": 1}}])
        assert main(["estimate", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_spec(self, tmp_path):
        assert main(["estimate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_IO

    def test_missing_cohort(self, tmp_path):
        p = tmp_path / "spec.json"
        p.write_text(json.dumps({"cohort": "absent.csv", "t0": 0}))
        assert main(["estimate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_IO

    def test_support_lost(self, tmp_path):
        rows = [patient_rows(f"P{k}", [0, 0], [1, 1], [0, 0], [k % 2, k % 2], [6.5, 6.5]) for k in range(30)]
        write_cohort(make_cohort(rows, horizon=1), tmp_path / "c.csv")
        p = tmp_path / "spec.json"
        p.write_text(json.dumps({"cohort": "c.csv", "t0": 0}))
        assert main(["estimate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_SUPPORT
        assert (tmp_path / "o" / "report.json").exists()

    def test_flags_recorded(self, tmp_path):
        p = spec_file(tmp_path)
        assert main(["estimate", "--config", str(p), "--truncate", "none", "--bootstrap", "3", "--seed", "5",
                     "--adjust-monitoring", "off", "--out", str(tmp_path / "o")]) == EXIT_OK
        meta = json.loads((tmp_path / "o" / "report.json").read_text())["metadata"]
        assert meta["truncation_cap"] is None
        assert meta["provenance"]["seed"] == 5
        assert meta["adjust_monitoring"] is False

    def test_spec_validation(self):
        with pytest.raises(SpecError):
            AnalysisSpec((RegimeSpec(TreatmentRule(7.5)),), "treatment-only", 0)
        with pytest.raises(SpecError):
            AnalysisSpec.from_dict({"scenario": "nde_true", "n": 10, "t0": 0, "bootstrap": 1})


class TestOracleCheck:
    def test_e1_passes(self, capsys):
        assert main(["oracle-check", "--config", "e1_enum", "--tolerance", "1e-10"]) == EXIT_OK
        assert "FAIL" not in capsys.readouterr().out

    def test_nde_false_fails_mode_equality(self, capsys):
        assert main(["oracle-check", "--config", "nde_false"]) == EXIT_ORACLE
        captured = capsys.readouterr()
        assert "mode-equality" in captured.err
        rows = oracle_rows(load_scenario("nde_false"))
        assert all(r["pass"] for r in rows if r["check"] == "identity")
        assert any(not r["pass"] for r in rows if r["check"] == "mode-equality")

    def test_missing_file(self, tmp_path):
        assert main(["oracle-check", "--config", str(tmp_path / "x.json")]) == EXIT_IO

    def test_continuous_rejected(self):
        assert main(["oracle-check", "--config", "confounded_monitoring"]) == EXIT_CONFIG


class TestDiagnose:
    def test_from_saved_weights(self, tmp_path):
        assert main(["estimate", "--config", str(spec_file(tmp_path)), "--out", str(tmp_path / "o")]) == EXIT_OK
        assert main(["diagnose", "--config", str(tmp_path / "o" / "weights.csv"),
                     "--out", str(tmp_path / "d")]) == EXIT_OK
        def body(path):
            return [line for line in path.read_text().splitlines() if not line.startswith("#")]

        assert body(tmp_path / "d" / "weight_bins.csv") == body(tmp_path / "o" / "weight_bins.csv")

    def test_missing(self, tmp_path):
        assert main(["diagnose", "--config", str(tmp_path / "w.csv"), "--out", str(tmp_path)]) == EXIT_IO


class TestDeterminism:
    def test_every_command_is_byte_identical(self, tmp_path):
        spec = spec_file(tmp_path, bootstrap=4)
        runs = []
        for k in range(2):
            root = tmp_path / f"run{k}"
            assert main(["simulate", "--config", "nde_true", "--n", "300", "--seed", "9",
                         "--out", str(root / "sim")]) == 0
            assert main(["estimate", "--config", str(spec), "--out", str(root / "est")]) == 0
            assert main(["diagnose", "--config", str(root / "est" / "weights.csv"), "--out", str(root / "diag")]) == 0
            assert main(["oracle-check", "--config", "e1_enum", "--out", str(root / "oracle")]) == 0
            runs.append(read_tree(root))
        assert runs[0] == runs[1]
        for name, content in runs[0].items():
            assert b"config_sha256" in content and b"seed" in content, name
