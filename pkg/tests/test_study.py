import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from switchssa.study import (
    SCENARIO_TRUTH,
    ScenarioSpec,
    degeneracy_report,
    run_study,
    scenario_spec,
    summarize,
)

MINI = dict(
    n_runs=2,
    n_locations=150,
    n_starts=3,
    issa_starts=2,
    grid_rows=100,
    grid_cols=100,
    seed=1234,
)


@pytest.fixture(scope="module")
def mini_study():
    return run_study(scenario_spec(1, "scaled", **MINI))


class TestSpec:
    def test_profiles(self):
        scaled = scenario_spec(1, "scaled")
        assert scaled.n_runs == 25 and scaled.m_controls == (20,)
        full = scenario_spec(2, "full")
        assert full.n_runs == 100 and full.m_controls == (20, 100, 500)

    def test_scenario_four_has_single_state_truth(self):
        spec = scenario_spec(4)
        assert spec.n_states_true == 1
        assert spec.start_protocol == "both"
        assert spec.true_chain().n_states == 1

    def test_truth_table_values(self):
        assert SCENARIO_TRUTH[1]["k"] == (1.2, 2.5)
        assert SCENARIO_TRUTH[2]["b"] == (-2.0, 2.0)
        assert SCENARIO_TRUTH[3]["kap"] == (0.3, 1.0)
        assert SCENARIO_TRUTH[4]["r"] == (0.29,)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            scenario_spec(7)
        with pytest.raises(ValueError):
            ScenarioSpec(scenario=1, start_protocol="wat")


class TestRunStudy:
    def test_records_cover_all_methods(self, mini_study):
        methods = {r["method"] for r in mini_study["records"]}
        assert {"issa", "msissa", "cchmm", "hmm", "tsissa", "selection"} <= methods

    def test_metrics_structure(self, mini_study):
        metrics = mini_study["metrics"]
        assert metrics["n_completed"] == 2
        assert metrics["n_failed"] == 0
        assert "msissa" in metrics["bias"]
        assert set(metrics["bias"]["msissa"]["20"]) == {
            "b1", "b2", "k1", "k2", "r1", "r2", "kap1", "kap2",
        }
        assert "20" in metrics["selection"]

    def test_rmse_dominates_bias(self, mini_study):
        metrics = mini_study["metrics"]
        for method, by_m in metrics["rmse"].items():
            for m, vals in by_m.items():
                for param, rmse in vals.items():
                    bias = metrics["bias"][method][m][param]
                    assert rmse >= abs(bias) - 1e-12

    def test_deterministic_metrics(self, mini_study):
        again = run_study(scenario_spec(1, "scaled", **MINI))
        assert json.dumps(mini_study["metrics"], sort_keys=True, default=str) == json.dumps(
            again["metrics"], sort_keys=True, default=str
        )

    def test_worker_count_does_not_change_results(self, mini_study):
        parallel = run_study(scenario_spec(1, "scaled", **MINI), n_workers=2)
        assert json.dumps(mini_study["metrics"], sort_keys=True, default=str) == json.dumps(
            parallel["metrics"], sort_keys=True, default=str
        )

    def test_failures_recorded_not_fatal(self):
        # zero requested controls makes every run fail inside choice-set build
        spec = scenario_spec(1, "scaled", **{**MINI, "n_runs": 1, "m_controls": (0,)})
        out = run_study(spec)
        assert out["metrics"]["n_failed"] == 1
        assert out["metrics"]["n_completed"] == 0
        assert "error" in out["records"][0]


class TestScenarioFour:
    @pytest.fixture(scope="class")
    def study(self):
        return run_study(scenario_spec(4, "scaled", **{**MINI, "n_runs": 2}))

    def test_both_protocols_recorded(self, study):
        methods = {r["method"] for r in study["records"]}
        assert "msissa" in methods and "msissa_truth" in methods

    def test_degeneracy_report(self, study):
        rep = degeneracy_report(study["records"], method="msissa")
        assert len(rep) == 2
        assert "flag_near_empty_state" in rep.columns
        assert "occ2" in rep.columns


class TestReportTables:
    def test_files_written_and_rerun_identical(self, mini_study, tmp_path):
        from switchssa.study import report_tables

        spec = scenario_spec(1, "scaled", **MINI)
        first = tmp_path / "a"
        second = tmp_path / "b"
        report_tables(mini_study["metrics"], mini_study["records"], spec, first)
        report_tables(mini_study["metrics"], mini_study["records"], spec, second)
        names = sorted(p.name for p in first.iterdir())
        assert names == [
            "scen1_runs.csv",
            "scen1_table2.csv",
            "scen1_table3.csv",
            "scen1_table4.csv",
            "scen1_tableS3.csv",
            "scen1_tableS4.csv",
            "scen1_tables.json",
        ]
        for name in names:
            assert (first / name).read_bytes() == (second / name).read_bytes()

    def test_csv_and_json_numbers_agree(self, mini_study, tmp_path):
        from switchssa.study import report_tables

        spec = scenario_spec(1, "scaled", **MINI)
        report_tables(mini_study["metrics"], mini_study["records"], spec, tmp_path)
        table3 = pd.read_csv(tmp_path / "scen1_table3.csv")
        with open(tmp_path / "scen1_tables.json") as fh:
            metrics = json.load(fh)
        for _, row in table3.iterrows():
            stored = metrics["misclassification"][row["method"]][str(row["n_controls"])]
            for csv_val, json_val in (
                (row["misclass_mean_pct"], float(stored["mean"])),
                (row["misclass_sd_pct"], float(stored["sd"])),
            ):
                assert csv_val == pytest.approx(json_val, rel=1e-6)

    def test_table3_schema(self, mini_study, tmp_path):
        from switchssa.study import report_tables

        spec = scenario_spec(1, "scaled", **MINI)
        report_tables(mini_study["metrics"], mini_study["records"], spec, tmp_path)
        table3 = pd.read_csv(tmp_path / "scen1_table3.csv")
        assert list(table3.columns) == [
            "method", "n_controls", "misclass_mean_pct", "misclass_sd_pct",
        ]
        assert set(table3["method"]) == {"msissa", "cchmm", "hmm", "tsissa"}


class TestSummarize:
    def test_empty_records(self):
        spec = scenario_spec(1)
        metrics = summarize([{"run": 0, "error": "boom"}], spec)
        assert metrics["n_completed"] == 0
        assert metrics["n_failed"] == 1
