import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_cohort, patient_rows
from dtrmon.propensity import NumeratorEstimate, Propensities, compute_propensities, fit_models
from dtrmon.regimes import MonitoringSpec, RegimeSpec, TreatmentRule, regime_grid
from dtrmon.simulator import load_scenario, simulate_cohort
from dtrmon.weights import (BIN_EDGES, BIN_LABELS, ModeMismatch, bin_weights, cumulative_weights, truncate_weights,
                            weight_diagnostics)

D75 = RegimeSpec(TreatmentRule(7.5))


def ones_props(cohort):
    shape = cohort.y.shape
    return Propensities(np.ones(shape), np.ones(shape), np.ones(shape))


def two_period_cohort():
    return make_cohort([patient_rows("A", [0, 0, 0], [0, 0, 0], [0, 0, 0], [1, 1, 1], [7.0, 7.0, 7.0]),
                        patient_rows("B", [0, 0, 0], [0, 1, 1], [0, 0, 0], [1, 1, 1], [7.0, 8.0, 8.0])],
                       horizon=2)


@pytest.fixture(scope="module")
def fitted():
    cohort = simulate_cohort(load_scenario("confounded_monitoring"), 2000, 8)
    return cohort, compute_propensities(cohort, fit_models(cohort))


class TestCumulativeWeights:
    def test_identity_case(self):
        c = two_period_cohort()
        w = cumulative_weights(c, D75, ones_props(c), "treatment-only", 1, stabilized=False)
        np.testing.assert_array_equal(w.weights[0, 0], [1.0, 1.0])

    def test_nonadherent_is_zero(self):
        c = two_period_cohort()
        w = cumulative_weights(c, RegimeSpec(TreatmentRule(9.0)), ones_props(c), "treatment-only", 1)
        np.testing.assert_array_equal(w.weights[0, 1], [1.0, 0.0])

    def test_product_example(self):
        c = make_cohort([patient_rows("A", [0, 0, 0], [0, 0, 0], [0, 0, 0], [1, 1, 1], [7.0, 7.0, 7.0])], horizon=2)
        shape = c.y.shape
        treat = np.ones(shape)
        treat[0, :2] = [0.8, 0.5]
        props = Propensities(treat, np.ones(shape), np.ones(shape))
        nums = {"d7.5": [NumeratorEstimate(D75, 0, 0.9, 1), NumeratorEstimate(D75, 1, 0.6, 1)]}
        w = cumulative_weights(c, D75, props, "treatment-only", 1, numerators=nums)
        assert w.weights[0, 0, 1] == pytest.approx(1.35)

    def test_relaxed_uses_monitoring_only_when_scheduled(self):
        c = make_cohort([patient_rows("A", [0, 0, 0], [0, 0, 0], [0, 0, 0], [0, 1, 1], [7.0, 7.0, 7.0])], horizon=2)
        shape = c.y.shape
        mon = np.ones(shape)
        mon[0, :2] = [0.25, 0.5]
        props = Propensities(np.ones(shape), np.ones(shape), mon)
        relaxed = RegimeSpec(TreatmentRule(7.5), MonitoringSpec("relaxed", 1))
        static = RegimeSpec(TreatmentRule(7.5), MonitoringSpec("static", 1))
        wr = cumulative_weights(c, relaxed, props, "nde-relaxed", 1, stabilized=False)
        ws = cumulative_weights(c, static, props, "joint-static", 1, stabilized=False)
        np.testing.assert_allclose(wr.weights[0, 0], [1.0, 2.0])
        np.testing.assert_allclose(ws.weights[0, 0], [4.0, 8.0])

    def test_mode_mismatch(self):
        c = two_period_cohort()
        with pytest.raises(ModeMismatch):
            cumulative_weights(c, D75, ones_props(c), "joint-static", 1)
        with pytest.raises(ModeMismatch):
            cumulative_weights(c, D75, ones_props(c), "sometimes", 1)

    def test_undefined_numerator_zeroes_later_cells(self):
        c = two_period_cohort()
        nums = {"d7.5": [NumeratorEstimate(D75, 0, 1.0, 2), NumeratorEstimate(D75, 1, None, 0)]}
        w = cumulative_weights(c, D75, ones_props(c), "treatment-only", 1, numerators=nums)
        assert w.undefined[0].tolist() == [False, True]
        assert not w.weights[0, :, 1].any()

    def test_invariants_on_fitted(self, fitted):
        cohort, props = fitted
        for mode, kind in (("treatment-only", "none"), ("joint-static", "static"), ("nde-relaxed", "relaxed")):
            regs = regime_grid((7.0, 8.0), kind, (0, 2))
            w = cumulative_weights(cohort, regs, props, mode, cohort.K)
            assert np.all(w.weights >= 0)
            np.testing.assert_array_equal(w.weights > 0, w.adherence)
            nz = w.weights > 0
            assert not (nz[:, :, 1:] & ~nz[:, :, :-1]).any()

    def test_j0_tables_identical(self, fitted):
        cohort, props = fitted
        for x in (7.0, 7.5, 8.0, 8.5):
            s = cumulative_weights(cohort, RegimeSpec(TreatmentRule(x), MonitoringSpec("static", 0)), props,
                                   "joint-static", cohort.K)
            r = cumulative_weights(cohort, RegimeSpec(TreatmentRule(x), MonitoringSpec("relaxed", 0)), props,
                                   "nde-relaxed", cohort.K)
            np.testing.assert_array_equal(s.weights, r.weights)

    def test_relaxed_support_superset(self, fitted):
        cohort, props = fitted
        for j in range(4):
            s = cumulative_weights(cohort, regime_grid((7.5,), "static", (j,)), props, "joint-static", cohort.K)
            r = cumulative_weights(cohort, regime_grid((7.5,), "relaxed", (j,)), props, "nde-relaxed", cohort.K)
            assert np.all((r.weights > 0).sum(axis=1) >= (s.weights > 0).sum(axis=1))

    def test_csv_layout(self, fitted):
        cohort, props = fitted
        w = cumulative_weights(cohort, [D75], props, "treatment-only", 1)
        df = w.to_frame()
        assert list(df.columns) == ["id", "regime", "t", "weight"]
        assert len(df) == int(w.present.sum())


class TestTruncation:
    def test_example(self, fitted):
        cohort, props = fitted
        w = cumulative_weights(cohort, [D75], props, "treatment-only", 0)
        vals = np.zeros_like(w.weights)
        vals[0, :3, 0] = [0.5, 39.9, 57.2]
        from dataclasses import replace
        t = truncate_weights(replace(w, weights=vals), 40)
        assert t.weights[0, :3, 0].tolist() == [0.5, 39.9, 40.0]
        assert t.truncation_cap == 40.0

    def test_infinite_cap_is_identity(self, fitted):
        cohort, props = fitted
        w = cumulative_weights(cohort, [D75], props, "treatment-only", 2)
        np.testing.assert_array_equal(truncate_weights(w, np.inf).weights, w.weights)

    @given(st.floats(0.1, 100.0))
    def test_idempotent(self, cap):
        c = two_period_cohort()
        rng = np.random.default_rng(int(cap * 1000))
        props = Propensities(rng.uniform(0.01, 1, c.y.shape), np.ones(c.y.shape), np.ones(c.y.shape))
        w = cumulative_weights(c, [D75, RegimeSpec(TreatmentRule(7.0))], props, "treatment-only", 1)
        once = truncate_weights(w, cap)
        np.testing.assert_array_equal(truncate_weights(once, cap).weights, once.weights)
        assert np.all(once.weights <= cap)

    def test_nonpositive_cap(self, fitted):
        cohort, props = fitted
        w = cumulative_weights(cohort, [D75], props, "treatment-only", 0)
        with pytest.raises(ValueError):
            truncate_weights(w, 0)


class TestBins:
    def test_edges(self):
        assert BIN_EDGES == (0.0, 0.5, 1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 100.0, 150.0, np.inf)
        assert BIN_LABELS[0] == "[0, 0.5)" and BIN_LABELS[-1] == ">= 150"

    def test_example(self):
        assert bin_weights(np.array([0.3, 0.7, 5, 45])).counts == (1, 1, 1, 0, 0, 0, 1, 0, 0, 0)

    def test_zeros_excluded(self):
        assert bin_weights(np.array([0.0, 0.0, 0.2])).counts == (1,) + (0,) * 9

    def test_empty(self):
        b = bin_weights(np.array([]))
        assert b.counts == (0,) * 10
        assert b.to_frame()["Cumulative %"].tolist() == ["0.00"] * 10

    def test_boundaries_left_closed(self):
        counts = bin_weights(np.array(BIN_EDGES[1:-1])).counts
        assert counts == (0,) + (1,) * 9

    @given(st.lists(st.floats(0.0, 500.0), min_size=1, max_size=200))
    def test_cumulative(self, vals):
        b = bin_weights(np.array(vals))
        assert b.total == sum(v != 0 for v in vals)
        cum = b.cumulative_percents
        assert all(x <= y + 1e-9 for x, y in zip(cum, cum[1:]))
        if b.total:
            assert b.to_frame()["Cumulative %"].iloc[-1] == "100.00"

    def test_frame_columns(self):
        df = bin_weights(np.array([1.5, 2.5])).to_frame()
        assert list(df.columns) == ["IPW", "Frequency", "%", "Cumulative Frequency", "Cumulative %"]

    def test_diagnostics(self, fitted):
        cohort, props = fitted
        regs = regime_grid((7.0, 8.5), "none")
        w = cumulative_weights(cohort, regs, props, "treatment-only", 2)
        bins, followers = weight_diagnostics(w)
        assert bins.total == int((w.weights > 0).sum())
        assert followers[("d7", 0)] == int(w.adherence[0, :, 0].sum())
        assert set(followers) == {(r, t) for r in ("d7", "d8.5") for t in range(3)}
        assert isinstance(bins.to_frame(), pd.DataFrame)
