import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_cohort, patient_rows, raw_cohort
from dtrmon.cohort import (BAND_LABELS, FREQ_LABELS, LAG_CAP, CohortTable, DomainViolation, InvalidCohort,
                           MissingBaseline, MissingColumn, NonContiguousPeriods, OutOfRange, PostEventRow,
                           a1c_band, carry_forward, cohort_from_frame, derive_features, freq_category,
                           freq_category_matrix, frequency_matrix, lag_matrix, load_cohort, validate_cohort,
                           write_cohort)
from dtrmon.simulator import load_scenario, simulate_cohort


def _csv(tmp_path, text, name="c.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoad:
    def test_single_failure_trajectory(self, tmp_path):
        p = _csv(tmp_path, "id,t,y,a1,a2,n,i\nA,0,0,0,0,1,7.4\nA,1,0,0,0,1,7.9\nA,2,1,0,0,1,7.9\n")
        cohort = load_cohort(p)
        assert cohort.n_patients == 1
        assert cohort.trajectory(0).terminal_reason == "failure"

    def test_gap_rejected(self, tmp_path):
        p = _csv(tmp_path, "id,t,y,a1,a2,n,i\nA,0,0,0,0,1,7.4\nA,2,0,0,0,1,7.9\n")
        with pytest.raises(NonContiguousPeriods):
            load_cohort(p)

    def test_missing_column(self, tmp_path):
        p = _csv(tmp_path, "id,t,y,a1,a2,i\nA,0,0,0,0,7.4\n")
        with pytest.raises(MissingColumn):
            load_cohort(p)

    def test_row_after_failure(self, tmp_path):
        p = _csv(tmp_path, "id,t,y,a1,a2,n,i\nA,0,0,0,0,1,7.4\nA,1,1,0,0,1,7.9\nA,2,0,0,0,1,7.9\n")
        with pytest.raises(PostEventRow):
            load_cohort(p)

    @pytest.mark.parametrize("row", ["A,0,0,2,0,1,7.4", "A,0,0,0,0,1,-1.0", "A,0,0,0,0,1,"])
    def test_domain(self, tmp_path, row):
        p = _csv(tmp_path, f"id,t,y,a1,a2,n,i\n{row}\n")
        with pytest.raises(DomainViolation):
            load_cohort(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_cohort(tmp_path / "nope.csv")

    def test_invalid_invariants_raise(self):
        df = pd.DataFrame(patient_rows("A", [0, 0], [1, 0], [0, 0], [1, 1], [8.0, 8.0]))
        with pytest.raises(InvalidCohort) as info:
            cohort_from_frame(df, horizon=1)
        assert "treatment_monotone" in info.value.args[0] or "treatment_monotone" in str(info.value)

    def test_sorted_by_id_and_t(self):
        rows = patient_rows("B", [0, 0], [0, 0], [0, 0], [1, 1], [7.1, 7.2]) + \
            patient_rows("A", [0, 1], [0, 0], [0, 0], [1, 1], [7.3, 7.3])
        df = pd.DataFrame(rows).sample(frac=1.0, random_state=3)
        cohort = cohort_from_frame(df, horizon=1)
        assert list(cohort.ids) == ["A", "B"]
        np.testing.assert_array_equal(cohort.i[1], [7.1, 7.2])

    def test_z_covariates_round_trip(self, tmp_path):
        df = pd.DataFrame({"id": ["A", "A"], "t": [0, 1], "y": [0, 0], "a1": [0, 0], "a2": [0, 0],
                           "n": [0, 0], "i": [7.5, 7.5], "bmi": [30.1, 30.1], "mon_bmi": [0, 1],
                           "smoker": [1, 1]})
        cohort = cohort_from_frame(df, z_schema={"bmi": "numeric", "smoker": "binary"}, horizon=1)
        assert [c.monitored for c in cohort.z_schema] == [True, False]
        p = tmp_path / "z.csv"
        write_cohort(cohort, p)
        again = load_cohort(p, z_schema={"bmi": "numeric", "smoker": "binary"})
        assert again == cohort


class TestValidate:
    def test_non_monotone_outcome(self):
        c = raw_cohort("A", 2, y=[0, 1, 0], a1=[0, 0, 0], a2=[0, 0, 0], n=[1, 1, 1], i=[7.2] * 3)
        rules = [v.rule for v in validate_cohort(c).violations]
        assert rules == ["non_monotone_outcome"]

    def test_absorbing_censoring(self):
        c = raw_cohort("A", 4, y=[0] * 5, a1=[0] * 5, a2=[0, 0, 0, 1, 0], n=[1] * 5, i=[7.2] * 5)
        report = validate_cohort(c)
        assert len(report) == 1
        v = report.violations[0]
        assert (v.patient_id, v.t, v.rule) == ("A", 3, "absorbing_censoring")

    def test_lovcf_violation(self):
        c = make_cohort([patient_rows("A", [0, 0, 0], [0, 0, 0], [0, 0, 0], [0, 1, 1], [7.2, 7.8, 7.8])],
                        horizon=2, validate=False)
        assert validate_cohort(c).by_rule() == {"lovcf_a1c": 1}

    @pytest.mark.parametrize("seed", range(100))
    def test_simulated_cohorts_are_valid(self, seed):
        name = ("confounded_monitoring", "nde_true", "nde_false", "e1_enum")[seed % 4]
        cohort = simulate_cohort(load_scenario(name), 150, seed)
        assert validate_cohort(cohort).ok


class TestRoundTrip:
    def test_simulated_round_trip(self, tmp_path):
        cohort = simulate_cohort(load_scenario("confounded_monitoring"), 100, 7)
        p = tmp_path / "c.csv"
        write_cohort(cohort, p, header_comment="seed=7")
        again = load_cohort(p)
        assert again == cohort
        assert again.horizon == cohort.horizon
        np.testing.assert_array_equal(again.i[again.present], cohort.i[cohort.present])

    def test_writer_is_deterministic(self):
        cohort = simulate_cohort(load_scenario("nde_true"), 50, 1)
        assert write_cohort(cohort) == write_cohort(cohort)

    def test_horizon_survives_early_endings(self, tmp_path):
        c = make_cohort([patient_rows("A", [0, 1], [0, 0], [0, 0], [1, 1], [7.2, 7.2])], horizon=4)
        p = tmp_path / "short.csv"
        write_cohort(c, p)
        assert p.read_text().splitlines()[0] == "# horizon=4"
        assert load_cohort(p).horizon == 4

    def test_cohort_is_immutable(self):
        c = make_cohort([patient_rows("A", [0, 0], [0, 0], [0, 0], [1, 1], [7.2, 7.2])], horizon=1)
        with pytest.raises(ValueError):
            c.y[0, 0] = 1
        assert isinstance(c, CohortTable)


class TestCarryForward:
    def test_example(self):
        filled, lag = carry_forward([7.2, None, None, 8.1], [0, 0, 1, 0])
        assert filled == [7.2, 7.2, 7.2, 8.1]
        assert lag == [0, 1, 2, 0]

    def test_all_monitored(self):
        vals = [7.1, 7.9, 8.4, 6.8]
        assert carry_forward(vals, [1, 1, 1, 1]) == (vals, [0, 0, 0, 0])

    def test_lag_cap(self):
        _, lag = carry_forward([7.0] + [None] * 7, [0] * 8)
        assert lag == [0, 1, 2, 3, 4, 4, 4, 4]

    def test_missing_baseline(self):
        with pytest.raises(MissingBaseline):
            carry_forward([None, 7.0], [1, 1])

    @given(st.lists(st.tuples(st.floats(4.0, 14.0), st.integers(0, 1)), min_size=1, max_size=12))
    def test_idempotent(self, pairs):
        vals = [v for v, _ in pairs]
        flags = [f for _, f in pairs]
        filled, lag = carry_forward(vals, flags)
        assert carry_forward(filled, flags) == (filled, lag)
        assert all(0 <= g <= LAG_CAP for g in lag)
        # the filled series only changes right after a monitored period
        for t in range(1, len(filled)):
            if filled[t] != filled[t - 1]:
                assert flags[t - 1] == 1

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=15))
    def test_lag_matrix_matches_scalar(self, flags):
        _, lag = carry_forward([7.0] * len(flags), flags)
        np.testing.assert_array_equal(lag_matrix(np.array([flags]))[0], lag)


class TestFeatures:
    def _traj(self, n_hist, i=8.2):
        T = len(n_hist) + 1
        c = make_cohort([patient_rows("A", [0] * T, [0] * T, [0] * T, list(n_hist) + [1], [i] * T)],
                        horizon=T - 1)
        return c.trajectory(0)

    def test_frequency_example(self):
        fv = derive_features(self._traj([1, 1, 0, 1]), 4)
        assert fv.monitor_freq == 0.75
        assert FREQ_LABELS[fv.monitor_freq_cat] == "[0.7,1)"

    def test_all_monitored(self):
        fv = derive_features(self._traj([1, 1, 1]), 3)
        assert FREQ_LABELS[fv.monitor_freq_cat] == "{1}"
        assert fv.lovcf_lag_cat == 0

    def test_baseline_is_full_frequency(self):
        fv = derive_features(self._traj([0, 0]), 0)
        assert FREQ_LABELS[fv.monitor_freq_cat] == "{1}"
        assert fv.prior_n == 1 and fv.prior_a1 == 0

    def test_band(self):
        assert BAND_LABELS[derive_features(self._traj([1]), 0).a1c_band] == "(8,8.5]"
        assert BAND_LABELS[a1c_band(7.0)] == "<=7"
        assert BAND_LABELS[a1c_band(7.5)] == "(7,7.5]"
        assert BAND_LABELS[a1c_band(8.51)] == ">8.5"

    def test_lag_by_a1c(self):
        fv = derive_features(self._traj([1, 0, 0]), 3)
        assert fv.lovcf_lag_cat == 2
        assert fv.lag_by_a1c == (0.0, 0.0, 8.2, 0.0, 0.0)

    def test_out_of_range(self):
        with pytest.raises(OutOfRange):
            derive_features(self._traj([1]), 5)

    @given(st.floats(0.0, 1.0))
    def test_frequency_categories_partition(self, f):
        cat = freq_category(f)
        bounds = [(0.0, 0.4), (0.4, 0.5), (0.5, 0.7), (0.7, 1.0)]
        hits = [lo <= f < hi for lo, hi in bounds] + [f == 1.0]
        assert sum(hits) == 1 and hits[cat]
        assert freq_category_matrix(np.array([f]))[0] == cat

    def test_frequency_partition_grid(self):
        grid = np.linspace(0.0, 1.0, 10_001)
        cats = freq_category_matrix(grid)
        assert set(np.unique(cats)) == set(range(5))
        assert all(freq_category(float(f)) == c for f, c in zip(grid[::97], cats[::97]))

    def test_frequency_out_of_range(self):
        with pytest.raises(OutOfRange):
            freq_category(1.2)

    def test_frequency_matrix(self):
        np.testing.assert_allclose(frequency_matrix(np.array([[1, 1, 0, 1, 1]])), [[1, 1, 1, 2 / 3, 0.75]])
