"""
End-to-end tests of the command-line surface on small generated projects.
"""

import json

import numpy as np
import pandas as pd
import pytest

from src.cli import main


def _generate(out, *extra):
    code = main(["generate", "--out-dir", str(out), "--seed", "4", "--n", "10", "--m", "6", *extra])
    assert code == 0
    return out / "project.cfg"


@pytest.fixture
def regular_project(tmp_path):
    out = tmp_path / "regular"
    config = _generate(out)
    assert main(["fit", "--config", str(config), "--out-dir", str(out)]) == 0
    return out


@pytest.fixture
def truncated_project(tmp_path):
    out = tmp_path / "truncated"
    config = _generate(out, "--keep-lo", "0.5", "--keep-hi", "0.9")
    return out, config


class TestGenerate:

    def test_outputs(self, tmp_path):
        _generate(tmp_path)
        for name in ("design.csv", "profiles.csv", "truth.csv", "project.cfg"):
            assert (tmp_path / name).exists()
        assert list(pd.read_csv(tmp_path / "profiles.csv").columns) == ["run_id", "t", "y"]

    def test_same_seed_same_bytes(self, tmp_path):
        _generate(tmp_path / "a")
        _generate(tmp_path / "b")
        for name in ("design.csv", "profiles.csv", "truth.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_bad_keep_range(self, tmp_path):
        code = main(["generate", "--out-dir", str(tmp_path), "--keep-lo", "0.9", "--keep-hi", "0.2"])
        assert code == 2


class TestFit:

    def test_regular_report(self, regular_project):
        report = (regular_project / "report.txt").read_text(encoding="utf-8")
        assert "grid: regular" in report
        assert "EM:" not in report
        payload = json.loads((regular_project / "model.json").read_text(encoding="utf-8"))
        assert payload["version"] == 1

    def test_duplicate_abscissa_is_an_input_error(self, tmp_path):
        (tmp_path / "design.csv").write_text("a,b\n0.1,0.2\n0.5,0.9\n0.9,0.4\n", encoding="utf-8")
        (tmp_path / "profiles.csv").write_text("run_id,t,y\n1,0,1\n1,0,2\n2,0,1\n3,0,1\n", encoding="utf-8")
        code = main(["fit", "--design", str(tmp_path / "design.csv"), "--profiles", str(tmp_path / "profiles.csv"),
                     "--out-dir", str(tmp_path)])
        assert code == 2
        assert not (tmp_path / "model.json").exists()

    def test_missing_inputs(self, tmp_path):
        assert main(["fit", "--out-dir", str(tmp_path)]) == 2

    def test_invalid_override(self, tmp_path):
        config = _generate(tmp_path)
        assert main(["fit", "--config", str(config), "--d", "3"]) == 2

    @pytest.mark.slow
    def test_truncated_report(self, truncated_project):
        out, config = truncated_project
        code = main(["fit", "--config", str(config), "--out-dir", str(out), "--em-q", "2", "--em-max-iter", "5"])
        assert code == 0
        report = (out / "report.txt").read_text(encoding="utf-8")
        assert "grid: irregular" in report
        assert "EM:" in report
        assert "iterations:" in report
        assert "final max-delta:" in report


class TestPredict:

    def test_training_point(self, regular_project, tmp_path):
        design = pd.read_csv(regular_project / "design.csv")
        profiles = pd.read_csv(regular_project / "profiles.csv")
        first = profiles[profiles["run_id"] == 1].iloc[2]
        query = design.iloc[[0]].copy()
        query["t"] = first["t"]
        query.to_csv(tmp_path / "query.csv", index=False)

        code = main(["predict", "--model", str(regular_project / "model.json"), "--query", str(tmp_path / "query.csv"),
                     "--out-dir", str(tmp_path)])
        assert code == 0
        result = pd.read_csv(tmp_path / "predictions.csv")
        assert list(result.columns) == ["x1", "x2", "t", "y_hat", "lo", "hi", "extrapolated"]
        row = result.iloc[0]
        assert row["y_hat"] == pytest.approx(first["y"], abs=1e-3)
        assert row["lo"] <= row["y_hat"] <= row["hi"]
        assert not row["extrapolated"]

    def test_empty_query(self, regular_project, tmp_path):
        (tmp_path / "query.csv").write_text("x1,x2,t\n", encoding="utf-8")
        output = tmp_path / "empty.csv"
        code = main(["predict", "--model", str(regular_project / "model.json"), "--query", str(tmp_path / "query.csv"),
                     "--output", str(output)])
        assert code == 0
        assert output.read_text(encoding="utf-8").splitlines() == ["x1,x2,t,y_hat,lo,hi,extrapolated"]

    def test_missing_model(self, tmp_path):
        (tmp_path / "query.csv").write_text("x1,t\n", encoding="utf-8")
        code = main(["predict", "--model", str(tmp_path / "absent.json"), "--query", str(tmp_path / "query.csv")])
        assert code == 2


class TestAnalyses:

    def test_optimize(self, regular_project):
        code = main(["optimize", "--model", str(regular_project / "model.json"), "--out-dir", str(regular_project),
                     "--restarts", "2", "--max-evals", "200"])
        assert code == 0
        payload = json.loads((regular_project / "optimum.json").read_text(encoding="utf-8"))
        assert payload["variables"] == ["x1", "x2"]
        assert len(payload["x_star"]) == 2

    def test_optimize_bad_bounds(self, regular_project):
        code = main(["optimize", "--model", str(regular_project / "model.json"), "--bounds", "0.5"])
        assert code == 2

    def test_sensitivity(self, regular_project):
        code = main(["sensitivity", "--model", str(regular_project / "model.json"), "--out-dir",
                     str(regular_project), "--mc-nodes", "16"])
        assert code == 0
        for name in ("x1", "x2"):
            curve = pd.read_csv(regular_project / f"effect_{name}.csv")
            assert list(curve.columns) == ["level", "t", "effect"]
            assert len(curve) == 11 * 6

    def test_sensitivity_unknown_variable(self, regular_project):
        code = main(["sensitivity", "--model", str(regular_project / "model.json"), "--variables", "speed"])
        assert code == 2

    @pytest.mark.slow
    def test_validate(self, truncated_project):
        out, config = truncated_project
        code = main(["validate", "--config", str(config), "--out-dir", str(out), "--probes", "1,5",
                     "--em-q", "2", "--em-max-iter", "5"])
        assert code == 0
        rows = pd.read_csv(out / "loo_profiles.csv")
        assert list(rows.columns) == ["run_id", "t", "y", "y_hat", "lo", "hi"]
        assert set(rows["run_id"]) == {1, 5}
        assert "MSCV (EM-completed):" in (out / "mscv.txt").read_text(encoding="utf-8")


class TestBenchmark:

    def test_agreement_only(self, tmp_path):
        code = main(["benchmark", "--out-dir", str(tmp_path), "--sizes", "6x5", "--repetitions", "0"])
        assert code == 0
        assert (tmp_path / "timing.csv").read_text(encoding="utf-8") == "n,m,path,median_seconds,value\n"

    def test_timing_rows(self, tmp_path):
        assert main(["benchmark", "--out-dir", str(tmp_path), "--sizes", "5x4", "--repetitions", "1"]) == 0
        timing = pd.read_csv(tmp_path / "timing.csv")
        assert sorted(timing["path"]) == ["closed_form", "dense", "kronecker"]

    @pytest.mark.slow
    def test_dense_path_grows_fastest(self, tmp_path):
        code = main(["benchmark", "--out-dir", str(tmp_path), "--sizes", "30x32,30x64", "--repetitions", "3"])
        assert code == 0
        timing = pd.read_csv(tmp_path / "timing.csv")
        seconds = timing.pivot(index="path", columns="m", values="median_seconds")
        growth = seconds[64] / seconds[32]
        assert growth["dense"] >= 4.0
        assert growth["kronecker"] < 8.0
        assert growth["closed_form"] < 8.0
        assert growth["dense"] > growth["kronecker"]
        for _, rows in timing.groupby("m"):
            reference = rows.loc[rows["path"] == "dense", "value"].iloc[0]
            assert np.allclose(rows["value"], reference, rtol=1e-6, atol=1e-6)
