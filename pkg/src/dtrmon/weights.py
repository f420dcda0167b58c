"""Cumulative stabilised inverse-probability weights, truncation and diagnostics."""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .cohort import CohortTable
from .propensity import NumeratorEstimate, Propensities, numerator_series
from .regimes import KIND_FOR_MODE, RegimeSpec, adherence_matrix

MODES = ("treatment-only", "joint-static", "nde-relaxed")

BIN_EDGES = (0.0, 0.5, 1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 100.0, 150.0, np.inf)
BIN_LABELS = ("[0, 0.5)", "[0.5, 1)", "[1, 10)", "[10, 20)", "[20, 30)", "[30, 40)",
              "[40, 50)", "[50, 100)", "[100, 150)", ">= 150")


class ModeMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class WeightTable:
    """Weights ``h_i(t)`` for every (regime, patient, period) cell.

    ``weights`` has shape (n_regimes, n_patients, t_max + 1).  ``present``
    marks cells where the patient is still under follow-up and event-free at
    ``t``; other cells hold 0.  ``undefined`` flags (regime, t) pairs whose
    stabilising numerator had no at-risk followers.
    """

    ids: np.ndarray
    regimes: tuple[RegimeSpec, ...]
    weights: np.ndarray
    adherence: np.ndarray
    present: np.ndarray
    mode: str
    truncation_cap: float | None = None
    undefined: np.ndarray | None = None
    stabilized: bool = True
    numerators: tuple[tuple[NumeratorEstimate, ...], ...] = ()

    @property
    def regime_ids(self) -> list[str]:
        return [r.regime_id for r in self.regimes]

    @property
    def t_max(self) -> int:
        return self.weights.shape[2] - 1

    def index(self, regime: RegimeSpec | str) -> int:
        rid = regime if isinstance(regime, str) else regime.regime_id
        return self.regime_ids.index(rid)

    def to_frame(self, nonzero_only: bool = False) -> pd.DataFrame:
        parts = []
        for r, rid in enumerate(self.regime_ids):
            mask = self.present if not nonzero_only else self.present & (self.weights[r] > 0)
            pid, t = np.nonzero(mask)
            parts.append(pd.DataFrame({"id": self.ids[pid].astype(str), "regime": rid,
                                       "t": t.astype(np.int64), "weight": self.weights[r][mask]}))
        if not parts:
            return pd.DataFrame(columns=["id", "regime", "t", "weight"])
        return pd.concat(parts, ignore_index=True)

    def to_csv(self, dest=None, header_comment: str | None = None):
        return _write_csv(self.to_frame(), dest, header_comment)


def _write_csv(df: pd.DataFrame, dest, header_comment):
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    df.to_csv(buf, index=False, lineterminator="\n")
    text = buf.getvalue()
    if dest is None:
        return text
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return None


def cumulative_weights(cohort: CohortTable, regimes: Sequence[RegimeSpec] | RegimeSpec,
                       propensities: Propensities, mode: str, t_max: int, *,
                       numerators: Mapping[str, Sequence[NumeratorEstimate]] | None = None,
                       stabilized: bool = True, case_weights: np.ndarray | None = None) -> WeightTable:
    """Assemble ``h_i(t)`` for each regime and ``t = 0 .. t_max``.

    The weight is the adherence indicator times the product of stabilising
    numerators, divided by the product of the propensities of the observed
    assignments.  The denominator always contains the treatment and
    censoring factors; monitoring factors enter at every period in
    joint-static mode, only at scheduled periods in nde-relaxed mode, and
    never in treatment-only mode.
    """
    if mode not in MODES:
        raise ModeMismatch(f"unknown mode {mode!r}")
    if isinstance(regimes, RegimeSpec):
        regimes = [regimes]
    regimes = tuple(regimes)
    for reg in regimes:
        if reg.monitoring.kind != KIND_FOR_MODE[mode]:
            raise ModeMismatch(f"regime {reg.regime_id} (monitoring {reg.monitoring.kind}) "
                               f"does not match mode {mode}")
    if not 0 <= t_max < cohort.horizon:
        raise ValueError(f"t_max must lie in [0, {cohort.horizon - 1}]")
    n_pat = cohort.n_patients
    width = t_max + 1
    present = cohort.present[:, :width] & (cohort.y[:, :width] == 0)
    exposure = propensities.exposure[:, :width]
    mon = propensities.monitoring[:, :width]

    w_all = np.zeros((len(regimes), n_pat, width))
    adh_all = np.zeros((len(regimes), n_pat, width), dtype=bool)
    undefined = np.zeros((len(regimes), width), dtype=bool)
    nums_all = []
    for r, reg in enumerate(regimes):
        adh = adherence_matrix(cohort, reg, t_max)
        if numerators is not None and reg.regime_id in numerators:
            nums = tuple(numerators[reg.regime_id])
        else:
            nums = tuple(numerator_series(cohort, reg, t_max, case_weights, adherence=adh))
        nums_all.append(nums)
        factor = exposure.copy()
        if mode == "joint-static":
            factor = factor * mon
        elif mode == "nde-relaxed":
            sched = np.array([reg.monitoring.scheduled(t) for t in range(width)], dtype=bool)
            factor = factor * np.where(sched[None, :], mon, 1.0)
        denom = np.cumprod(factor, axis=1)
        num = np.ones(width)
        lost = False
        acc = 1.0
        for t in range(width):
            est = nums[t]
            if lost or est.value is None:
                lost = True
                undefined[r, t] = True
                num[t] = 0.0
                continue
            if stabilized:
                acc *= est.value
            num[t] = acc
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(adh, num[None, :] / denom, 0.0)
        w_all[r] = w
        adh_all[r] = adh
    return WeightTable(ids=cohort.ids, regimes=regimes, weights=w_all, adherence=adh_all,
                       present=present, mode=mode, undefined=undefined, stabilized=stabilized,
                       numerators=tuple(nums_all))


def truncate_weights(table: WeightTable, cap: float) -> WeightTable:
    """Replace weights above ``cap`` by ``cap``."""
    if not cap > 0:
        raise ValueError("truncation cap must be positive")
    return replace(table, weights=np.minimum(table.weights, cap), truncation_cap=float(cap))


@dataclass(frozen=True)
class BinTable:
    labels: tuple[str, ...]
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    @property
    def percents(self) -> tuple[float, ...]:
        tot = self.total
        return tuple(100.0 * c / tot if tot else 0.0 for c in self.counts)

    @property
    def cumulative_counts(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.cumsum(self.counts))

    @property
    def cumulative_percents(self) -> tuple[float, ...]:
        tot = self.total
        return tuple(100.0 * c / tot if tot else 0.0 for c in self.cumulative_counts)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "IPW": self.labels,
            "Frequency": self.counts,
            "%": [f"{p:.2f}" for p in self.percents],
            "Cumulative Frequency": self.cumulative_counts,
            "Cumulative %": [f"{p:.2f}" for p in self.cumulative_percents],
        })

    def to_csv(self, dest=None, header_comment: str | None = None):
        return _write_csv(self.to_frame(), dest, header_comment)


def bin_weights(values: np.ndarray) -> BinTable:
    values = np.asarray(values, dtype=float)
    values = values[values != 0]
    idx = np.searchsorted(BIN_EDGES, values, side="right") - 1
    counts = np.bincount(idx[(idx >= 0) & (idx < len(BIN_LABELS))], minlength=len(BIN_LABELS))
    return BinTable(BIN_LABELS, tuple(int(c) for c in counts))


def weight_diagnostics(table: WeightTable) -> tuple[BinTable, dict[tuple[str, int], int]]:
    """Weight distribution over nonzero cells and follower counts per (regime, t).

    Pass the untruncated table; the bins mirror the published weight
    distribution tables.
    """
    cells = table.weights[:, table.present] if table.weights.size else np.zeros(0)
    bins = bin_weights(np.ravel(cells))
    counts = {}
    for r, rid in enumerate(table.regime_ids):
        for t in range(table.t_max + 1):
            counts[(rid, t)] = int(table.adherence[r, :, t].sum())
    return bins, counts


def follower_frame(counts: Mapping[tuple[str, int], int]) -> pd.DataFrame:
    return pd.DataFrame([{"regime": r, "t": t, "followers": c} for (r, t), c in counts.items()],
                        columns=["regime", "t", "followers"])
