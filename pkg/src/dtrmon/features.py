"""Design matrices for the pooled treatment, censoring and monitoring models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cohort import (BAND_LABELS, FREQ_LABELS, LAG_CAP, CohortTable, FeatureVector, band_matrix,
                     frequency_matrix, freq_category_matrix, lag_matrix)

TARGETS = ("treatment", "censoring", "monitoring")

TERMS = ("t", "freq_cat", "lag_cat", "lag_by_a1c", "a1c", "a1c_band", "a1", "prior_a1", "prior_n", "z", "z_lag")
#: Terms summarising the monitoring history; dropped when monitoring adjustment is off.
MONITORING_TERMS = frozenset({"freq_cat", "lag_cat", "lag_by_a1c", "prior_n", "z_lag"})

_BASE = ("t", "freq_cat", "lag_cat", "lag_by_a1c", "z", "z_lag")
DEFAULT_TERMS = {
    "treatment": _BASE,
    "censoring": _BASE + ("a1",),
    "monitoring": _BASE + ("a1", "a1c_band"),
}


class FeatureMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    """Which term groups enter each model.

    ``adjust_monitoring=False`` removes every monitoring-history summary and
    puts a plain A1c main effect in its place.  The time term is always kept.
    """

    terms: Mapping[str, tuple[str, ...]] = field(default_factory=lambda: dict(DEFAULT_TERMS))
    adjust_monitoring: bool = True

    def __post_init__(self):
        merged = dict(DEFAULT_TERMS)
        for target, terms in dict(self.terms).items():
            if target not in TARGETS:
                raise FeatureMismatch(f"unknown model target {target!r}")
            unknown = [t for t in terms if t not in TERMS]
            if unknown:
                raise FeatureMismatch(f"unknown term(s) {unknown} for {target}")
            merged[target] = tuple(terms)
        object.__setattr__(self, "terms", merged)

    def terms_for(self, target: str) -> tuple[str, ...]:
        terms = list(self.terms[target])
        if not self.adjust_monitoring:
            terms = [t for t in terms if t not in MONITORING_TERMS]
            if "a1c" not in terms:
                terms.insert(1 if terms and terms[0] == "t" else 0, "a1c")
        if "t" not in terms:
            terms.insert(0, "t")
        return tuple(terms)

    @classmethod
    def from_config(cls, cfg: Mapping | None, adjust_monitoring: bool | None = None) -> "FeatureSpec":
        cfg = dict(cfg or {})
        adj = cfg.pop("adjust_monitoring", True)
        if adjust_monitoring is not None:
            adj = adjust_monitoring
        return cls(terms={k: tuple(v) for k, v in cfg.items()}, adjust_monitoring=bool(adj))

    def to_dict(self) -> dict:
        return {"adjust_monitoring": self.adjust_monitoring, **{k: list(v) for k, v in self.terms.items()}}


def column_names(terms: Sequence[str], z_names: Sequence[str], z_monitored: Sequence[str]) -> list[str]:
    names = ["intercept"]
    for term in terms:
        if term == "t":
            names.append("t")
        elif term == "freq_cat":
            names += [f"freq{lab}" for lab in FREQ_LABELS[1:]]
        elif term == "lag_cat":
            names += [f"lag{k}" for k in range(1, LAG_CAP + 1)]
        elif term == "lag_by_a1c":
            names += [f"lag{k}:a1c" for k in range(LAG_CAP + 1)]
        elif term == "a1c":
            names.append("a1c")
        elif term == "a1c_band":
            names += [f"band{lab}" for lab in BAND_LABELS[1:]]
        elif term in ("a1", "prior_a1", "prior_n"):
            names.append(term)
        elif term == "z":
            names += [f"z:{z}" for z in z_names]
        elif term == "z_lag":
            names += [f"{z}:lag{k}" for z in z_monitored for k in range(1, LAG_CAP + 1)]
    return names


def encode(fv: FeatureVector, terms: Sequence[str], z_names: Sequence[str],
           z_monitored: Sequence[str]) -> np.ndarray:
    """Model row for a single :class:`FeatureVector` (same layout as :func:`design`)."""
    row = [1.0]
    for term in terms:
        if term == "t":
            row.append(float(fv.period))
        elif term == "freq_cat":
            row += [float(fv.monitor_freq_cat == c) for c in range(1, len(FREQ_LABELS))]
        elif term == "lag_cat":
            row += [float(fv.lovcf_lag_cat == k) for k in range(1, LAG_CAP + 1)]
        elif term == "lag_by_a1c":
            row += list(fv.lag_by_a1c)
        elif term == "a1c":
            row.append(fv.a1c)
        elif term == "a1c_band":
            row += [float(fv.a1c_band == b) for b in range(1, len(BAND_LABELS))]
        elif term in ("a1", "prior_a1", "prior_n"):
            row.append(float(getattr(fv, term)))
        elif term == "z":
            row += [float(fv.z_values[z]) for z in z_names]
        elif term == "z_lag":
            row += [float(fv.z_lag_cats[z] == k) for z in z_monitored for k in range(1, LAG_CAP + 1)]
    return np.asarray(row, dtype=float)


@dataclass(frozen=True)
class CohortFeatures:
    """Per-cell feature arrays of shape (n, horizon + 1), shared by all models."""

    freq_cat: np.ndarray
    lag: np.ndarray
    band: np.ndarray
    prior_a1: np.ndarray
    prior_n: np.ndarray
    z_lag: Mapping[str, np.ndarray]

    @classmethod
    def build(cls, cohort: CohortTable) -> "CohortFeatures":
        prior_a1 = np.zeros(cohort.a1.shape, dtype=np.int8)
        prior_a1[:, 1:] = cohort.a1[:, :-1]
        prior_n = np.ones(cohort.n.shape, dtype=np.int8)
        prior_n[:, 1:] = cohort.n[:, :-1]
        i = np.where(np.isfinite(cohort.i), cohort.i, 0.0)
        return cls(
            freq_cat=freq_category_matrix(frequency_matrix(cohort.n)),
            lag=lag_matrix(cohort.n),
            band=band_matrix(i),
            prior_a1=prior_a1,
            prior_n=prior_n,
            z_lag={name: lag_matrix(flags) for name, flags in cohort.z_mon.items()},
        )


def risk_set(cohort: CohortTable, target: str) -> np.ndarray:
    """Boolean (n, horizon + 1) mask of person-periods entering a model.

    All models use event-free decision periods ``t <= K``.  The treatment
    model is further restricted to patients not yet on intensified therapy
    (treatment is absorbing); the monitoring model to uncensored periods.
    """
    if target not in TARGETS:
        raise FeatureMismatch(f"unknown model target {target!r}")
    mask = cohort.present & (cohort.y == 0)
    mask[:, cohort.horizon:] = False
    if target == "treatment":
        prior = np.zeros(cohort.a1.shape, dtype=bool)
        prior[:, 1:] = cohort.a1[:, :-1] == 1
        mask &= ~prior
    elif target == "monitoring":
        mask &= cohort.a2 == 0
    return mask


def design(cohort: CohortTable, terms: Sequence[str], mask: np.ndarray,
           feats: CohortFeatures | None = None) -> tuple[np.ndarray, list[str]]:
    """Design matrix for the cells selected by ``mask`` (row-major order)."""
    if feats is None:
        feats = CohortFeatures.build(cohort)
    z_names = [c.name for c in cohort.z_schema]
    z_mon = [c.name for c in cohort.z_schema if c.monitored]
    rows, cols = np.nonzero(mask)
    m = len(rows)
    a1c = cohort.i[rows, cols]
    blocks: list[np.ndarray] = [np.ones((m, 1))]
    for term in terms:
        if term == "t":
            blocks.append(cols[:, None].astype(float))
        elif term == "freq_cat":
            fc = feats.freq_cat[rows, cols]
            blocks.append((fc[:, None] == np.arange(1, len(FREQ_LABELS))[None, :]).astype(float))
        elif term == "lag_cat":
            lag = feats.lag[rows, cols]
            blocks.append((lag[:, None] == np.arange(1, LAG_CAP + 1)[None, :]).astype(float))
        elif term == "lag_by_a1c":
            lag = feats.lag[rows, cols]
            blocks.append((lag[:, None] == np.arange(LAG_CAP + 1)[None, :]) * a1c[:, None])
        elif term == "a1c":
            blocks.append(a1c[:, None])
        elif term == "a1c_band":
            band = feats.band[rows, cols]
            blocks.append((band[:, None] == np.arange(1, len(BAND_LABELS))[None, :]).astype(float))
        elif term == "a1":
            blocks.append(cohort.a1[rows, cols][:, None].astype(float))
        elif term == "prior_a1":
            blocks.append(feats.prior_a1[rows, cols][:, None].astype(float))
        elif term == "prior_n":
            blocks.append(feats.prior_n[rows, cols][:, None].astype(float))
        elif term == "z":
            for z in z_names:
                blocks.append(cohort.z[z][rows, cols][:, None])
        elif term == "z_lag":
            for z in z_mon:
                lag = feats.z_lag[z][rows, cols]
                blocks.append((lag[:, None] == np.arange(1, LAG_CAP + 1)[None, :]).astype(float))
        else:
            raise FeatureMismatch(f"unknown term {term!r}")
    X = np.hstack(blocks) if m else np.zeros((0, sum(b.shape[1] for b in blocks)))
    return X, column_names(terms, z_names, z_mon)
