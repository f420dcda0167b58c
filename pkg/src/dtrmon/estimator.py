"""Bounded IPW hazard estimation, survival curves, risk differences and bootstrap."""

from __future__ import annotations

import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .cohort import CohortTable
from .features import FeatureSpec
from .propensity import ModelFit, PropensityError, compute_propensities, fit_models
from .regimes import RegimeSpec, adherence_matrix
from .weights import WeightTable, cumulative_weights, truncate_weights

DEFAULT_BOOTSTRAP = 200
DEFAULT_TRUNCATION = 40.0


class UndefinedCurve(ValueError):
    pass


@dataclass(frozen=True)
class HazardSeries:
    """Hazards ``P(Y(t+1) = 1 | Y(t) = 0)`` under a regime for ``t = 0 .. t0``.

    ``values[t]`` is ``None`` where the weighted support is empty.
    """

    regime_id: str
    values: tuple[float | None, ...]
    effective_n: tuple[float, ...]

    @property
    def support_lost(self) -> bool:
        return any(v is None for v in self.values)

    @property
    def first_undefined(self) -> int | None:
        for t, v in enumerate(self.values):
            if v is None:
                return t
        return None


@dataclass(frozen=True)
class SurvivalCurve:
    """Survival ``S(h)`` at horizons ``h = 1 .. t0 + 1``; ``None`` once undefined."""

    regime_id: str
    s: tuple[float | None, ...]

    @property
    def full(self) -> tuple[float | None, ...]:
        """Survival at ``h = 0 .. t0 + 1``, starting from ``S(0) = 1``."""
        return (1.0,) + self.s

    def at(self, h: int) -> float | None:
        if h == 0:
            return 1.0
        return self.s[h - 1]

    @property
    def risk(self) -> tuple[float | None, ...]:
        return tuple(None if v is None else 1.0 - v for v in self.s)


def weighted_hazard(weights: np.ndarray, outcomes: np.ndarray) -> float | None:
    """Convex combination ``sum(w * y) / sum(w)``; ``None`` for empty support."""
    weights = np.asarray(weights, dtype=float)
    total = float(weights.sum())
    if total <= 0.0:
        return None
    value = float(weights @ np.asarray(outcomes, dtype=float)) / total
    return min(max(value, 0.0), 1.0)


def next_outcome(cohort: CohortTable, t: int) -> np.ndarray:
    """``Y(t+1)`` for every patient, 0 where the row at ``t + 1`` is absent."""
    y = cohort.y[:, t + 1].astype(float)
    return np.where(cohort.present[:, t + 1], y, 0.0)


def hazard(weights: WeightTable, cohort: CohortTable, regime: RegimeSpec | str, t: int,
           case_weights: np.ndarray | None = None) -> float | None:
    r = weights.index(regime)
    w = weights.weights[r, :, t]
    if case_weights is not None:
        w = w * case_weights
    return weighted_hazard(w, next_outcome(cohort, t))


def hazard_series(weights: WeightTable, cohort: CohortTable, regime: RegimeSpec | str,
                  t0: int | None = None, case_weights: np.ndarray | None = None) -> HazardSeries:
    r = weights.index(regime)
    t0 = weights.t_max if t0 is None else t0
    vals, eff = [], []
    for t in range(t0 + 1):
        w = weights.weights[r, :, t]
        if case_weights is not None:
            w = w * case_weights
        eff.append(float(w.sum()))
        vals.append(None if weights.undefined is not None and weights.undefined[r, t]
                    else weighted_hazard(w, next_outcome(cohort, t)))
    return HazardSeries(weights.regime_ids[r], tuple(vals), tuple(eff))


def survival_curve(hazards: HazardSeries) -> SurvivalCurve:
    s, acc = [], 1.0
    for h in hazards.values:
        if h is None or acc is None:
            acc = None
        else:
            acc = acc * (1.0 - h)
        s.append(acc)
    return SurvivalCurve(hazards.regime_id, tuple(s))


def risk_difference(curve1: SurvivalCurve, curve2: SurvivalCurve, t0: int) -> float:
    """``risk_1(t0 + 1) - risk_2(t0 + 1)``, i.e. ``S_2 - S_1`` at horizon ``t0 + 1``."""
    s1, s2 = curve1.at(t0 + 1), curve2.at(t0 + 1)
    if s1 is None or s2 is None:
        raise UndefinedCurve(f"survival undefined at horizon {t0 + 1} for "
                             f"{curve1.regime_id if s1 is None else curve2.regime_id}")
    return (1.0 - s1) - (1.0 - s2)


def crude_curve(cohort: CohortTable, regime: RegimeSpec, t0: int) -> SurvivalCurve:
    """Survival from the bare adherence indicator, with no propensity adjustment."""
    adh = adherence_matrix(cohort, regime, t0).astype(float)
    vals, eff = [], []
    for t in range(t0 + 1):
        eff.append(float(adh[:, t].sum()))
        vals.append(weighted_hazard(adh[:, t], next_outcome(cohort, t)))
    return survival_curve(HazardSeries(regime.regime_id, tuple(vals), tuple(eff)))


@dataclass(frozen=True)
class EstimationSettings:
    """Everything needed to rerun the estimation pipeline on a cohort."""

    regimes: tuple[RegimeSpec, ...]
    mode: str
    t0: int
    features: FeatureSpec = field(default_factory=FeatureSpec)
    truncate: float | None = DEFAULT_TRUNCATION
    stabilized: bool = True


@dataclass
class PointEstimate:
    settings: EstimationSettings
    fits: dict[str, ModelFit]
    raw_weights: WeightTable
    weights: WeightTable
    hazards: dict[str, HazardSeries]
    curves: dict[str, SurvivalCurve]
    crude: dict[str, SurvivalCurve]

    @property
    def n_truncated(self) -> int:
        if self.settings.truncate is None:
            return 0
        return int((self.raw_weights.weights > self.settings.truncate).sum())

    def risk_differences(self) -> dict[tuple[str, str, int], float | None]:
        return _pairwise(self.curves, self.settings.t0)


def _pairwise(curves: Mapping[str, SurvivalCurve], t0: int) -> dict[tuple[str, str, int], float | None]:
    out = {}
    for a, b in itertools.combinations(curves, 2):
        for h in range(1, t0 + 2):
            try:
                out[(a, b, h)] = risk_difference(curves[a], curves[b], h - 1)
            except UndefinedCurve:
                out[(a, b, h)] = None
    return out


def estimate(cohort: CohortTable, settings: EstimationSettings, *,
             case_weights: np.ndarray | None = None, with_crude: bool = True) -> PointEstimate:
    """Fit models, build weights and return survival curves for every regime."""
    fits = fit_models(cohort, settings.features, case_weights=case_weights)
    props = compute_propensities(cohort, fits)
    raw = cumulative_weights(cohort, settings.regimes, props, settings.mode, settings.t0,
                             stabilized=settings.stabilized, case_weights=case_weights)
    w = raw if settings.truncate is None or math.isinf(settings.truncate) else truncate_weights(raw, settings.truncate)
    hazards = {rid: hazard_series(w, cohort, rid, settings.t0, case_weights) for rid in w.regime_ids}
    curves = {rid: survival_curve(h) for rid, h in hazards.items()}
    crude = {}
    if with_crude:
        crude = {reg.regime_id: crude_curve(cohort, reg, settings.t0) for reg in settings.regimes}
    return PointEstimate(settings, fits, raw, w, hazards, curves, crude)


@dataclass(frozen=True)
class BootstrapResult:
    """Percentile intervals keyed like the point estimates.

    Survival keys are ``(regime_id, h)``; risk-difference keys are
    ``(regime_a, regime_b, h)``.  ``se`` holds replicate standard deviations.
    """

    B: int
    level: float
    survival: Mapping[tuple[str, int], tuple[float, float] | None]
    survival_se: Mapping[tuple[str, int], float | None]
    rd: Mapping[tuple[str, str, int], tuple[float, float] | None]
    rd_se: Mapping[tuple[str, str, int], float | None]
    n_undefined: Mapping[tuple, int]
    n_failed: int = 0


def _interval(values: list[float], level: float):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=float)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(arr, [alpha, 1.0 - alpha])
    se = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return (float(lo), float(hi)), se


def bootstrap_cis(cohort: CohortTable, settings: EstimationSettings, B: int = DEFAULT_BOOTSTRAP,
                  seed: int | np.random.SeedSequence = 0, level: float = 0.95) -> BootstrapResult:
    """Patient-level nonparametric bootstrap of the whole estimation pipeline.

    Replicate ``b`` draws its resample from the ``b``-th child of
    ``SeedSequence(seed)``, so results do not depend on evaluation order.
    """
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(B)
    n = cohort.n_patients
    surv: dict[tuple[str, int], list[float]] = {}
    rds: dict[tuple[str, str, int], list[float]] = {}
    undefined: dict[tuple, int] = {}
    failed = 0
    rids = [r.regime_id for r in settings.regimes]
    h_all = range(1, settings.t0 + 2)
    for key in itertools.product(rids, h_all):
        surv[key] = []
        undefined[key] = 0
    for a, b in itertools.combinations(rids, 2):
        for h in h_all:
            rds[(a, b, h)] = []
            undefined[(a, b, h)] = 0
    for child in children:
        rng = np.random.default_rng(child)
        idx = np.sort(rng.integers(0, n, size=n))
        try:
            est = estimate(cohort.take(idx), settings, with_crude=False)
        except PropensityError:
            failed += 1
            for key in undefined:
                undefined[key] += 1
            continue
        for rid in rids:
            for h in h_all:
                v = est.curves[rid].at(h)
                if v is None:
                    undefined[(rid, h)] += 1
                else:
                    surv[(rid, h)].append(v)
        for key, v in est.risk_differences().items():
            if v is None:
                undefined[key] += 1
            else:
                rds[key].append(v)
    s_int, s_se, r_int, r_se = {}, {}, {}, {}
    for key, vals in surv.items():
        s_int[key], s_se[key] = _interval(vals, level)
    for key, vals in rds.items():
        r_int[key], r_se[key] = _interval(vals, level)
    return BootstrapResult(B, level, s_int, s_se, r_int, r_se, undefined, failed)


@dataclass
class EstimateReport:
    """Curves, pairwise risk differences, intervals and run metadata."""

    curves: dict[str, SurvivalCurve]
    risk_differences: dict[tuple[str, str, int], float | None]
    crude: dict[str, SurvivalCurve] = field(default_factory=dict)
    intervals: BootstrapResult | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_estimate(cls, est: PointEstimate, intervals: BootstrapResult | None = None,
                      metadata: Mapping | None = None) -> "EstimateReport":
        meta = {
            "mode": est.settings.mode,
            "t0": est.settings.t0,
            "truncation_cap": est.settings.truncate,
            "n_truncated": est.n_truncated,
            "risk_difference": "risk(first) - risk(second) at horizon h",
            "models": {k: f.to_dict() for k, f in est.fits.items()},
            "undefined_hazards": {rid: h.first_undefined for rid, h in est.hazards.items()},
        }
        meta.update(metadata or {})
        return cls(dict(est.curves), est.risk_differences(), dict(est.crude), intervals, meta)

    def to_dict(self) -> dict:
        def ci(mapping, key):
            if self.intervals is None:
                return None
            v = mapping.get(key)
            return None if v is None else list(v)

        curves = {}
        for rid, c in self.curves.items():
            curves[rid] = {
                "survival": list(c.full),
                "crude": list(self.crude[rid].full) if rid in self.crude else None,
                "intervals": [ci(self.intervals.survival, (rid, h)) if self.intervals else None
                              for h in range(1, len(c.s) + 1)],
            }
        rds = [{"first": a, "second": b, "h": h, "value": v,
                "interval": ci(self.intervals.rd, (a, b, h)) if self.intervals else None}
               for (a, b, h), v in self.risk_differences.items()]
        out = {"curves": curves, "risk_differences": rds, "metadata": self.metadata}
        if self.intervals is not None:
            out["bootstrap"] = {
                "B": self.intervals.B, "level": self.intervals.level,
                "failed_replicates": self.intervals.n_failed,
                "undefined_replicates": {"|".join(map(str, k)): v
                                         for k, v in self.intervals.n_undefined.items() if v},
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def curves_frame(self) -> pd.DataFrame:
        rows = []
        for rid, c in self.curves.items():
            for h, s in enumerate(c.full):
                lo = hi = None
                if self.intervals is not None and h > 0:
                    iv = self.intervals.survival.get((rid, h))
                    if iv is not None:
                        lo, hi = iv
                rows.append({"regime": rid, "t": h, "survival": s, "lo": lo, "hi": hi})
        return pd.DataFrame(rows, columns=["regime", "t", "survival", "lo", "hi"])

    def rd_frame(self) -> pd.DataFrame:
        rows = []
        for (a, b, h), v in self.risk_differences.items():
            lo = hi = None
            if self.intervals is not None:
                iv = self.intervals.rd.get((a, b, h))
                if iv is not None:
                    lo, hi = iv
            rows.append({"first": a, "second": b, "t": h, "risk_difference": v, "lo": lo, "hi": hi})
        return pd.DataFrame(rows, columns=["first", "second", "t", "risk_difference", "lo", "hi"])


def frame_to_csv(df: pd.DataFrame, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    df.to_csv(buf, index=False, lineterminator="\n", float_format="%.12g")
    return buf.getvalue()
