"""Dynamic treatment rules, monitoring schedules and regime adherence."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping

import numpy as np

from .cohort import CohortTable, PatientTrajectory

DEFAULT_THRESHOLDS = (7.0, 7.5, 8.0, 8.5)
DEFAULT_SKIPS = (0, 1, 2, 3)

MONITORING_KINDS = ("none", "static", "relaxed")
MODE_FOR_KIND = {"none": "treatment-only", "static": "joint-static", "relaxed": "nde-relaxed"}
KIND_FOR_MODE = {v: k for k, v in MODE_FOR_KIND.items()}


class RegimeError(ValueError):
    pass


class Requirement(str, Enum):
    FORCED_ON = "forced_on"
    FORCED_OFF = "forced_off"
    FREE = "free"


@dataclass(frozen=True)
class TreatmentRule:
    """Intensify the first time a freshly monitored A1c reaches ``threshold``."""

    threshold: float

    def __post_init__(self):
        if not self.threshold > 0:
            raise RegimeError(f"threshold must be positive, got {self.threshold}")


@dataclass(frozen=True)
class MonitoringSpec:
    kind: str = "none"
    skip: int = 0

    def __post_init__(self):
        if self.kind not in MONITORING_KINDS:
            raise RegimeError(f"unknown monitoring kind {self.kind!r}")
        if int(self.skip) != self.skip or self.skip < 0:
            raise RegimeError(f"skip must be a non-negative integer, got {self.skip}")

    def scheduled(self, t: int) -> int:
        """Static pattern value ``n_j(t)``; the design convention gives 1 at t = -1."""
        if t < 0:
            return 1
        return int((t + 1) % (self.skip + 1) == 0)


@dataclass(frozen=True)
class DecisionContext:
    prev_a1: int
    prev_a2: int
    prev_n: int
    y: int
    i: float

    @classmethod
    def baseline(cls, y: int, i: float) -> "DecisionContext":
        return cls(0, 0, 1, y, i)


@dataclass(frozen=True)
class RegimeSpec:
    rule: TreatmentRule
    monitoring: MonitoringSpec = MonitoringSpec()

    @property
    def mode(self) -> str:
        return MODE_FOR_KIND[self.monitoring.kind]

    @property
    def regime_id(self) -> str:
        x = f"{self.rule.threshold:g}"
        kind, j = self.monitoring.kind, self.monitoring.skip
        if kind == "none":
            return f"d{x}"
        if kind == "static":
            return f"d{x}_n{j}"
        return f"dstar{x}_gstar{j}"

    def to_dict(self) -> dict:
        mon = {"kind": self.monitoring.kind}
        if self.monitoring.kind != "none":
            mon["skip"] = self.monitoring.skip
        return {"threshold": self.rule.threshold, "monitoring": mon}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegimeSpec":
        try:
            threshold = float(d["threshold"])
        except (KeyError, TypeError, ValueError) as exc:
            raise RegimeError(f"regime needs a numeric 'threshold': {d!r}") from exc
        mon = d.get("monitoring") or {"kind": "none"}
        if not isinstance(mon, Mapping):
            raise RegimeError(f"'monitoring' must be an object: {mon!r}")
        return cls(TreatmentRule(threshold), MonitoringSpec(mon.get("kind", "none"), int(mon.get("skip", 0))))


def regime_grid(thresholds=DEFAULT_THRESHOLDS, kind: str = "none", skips=DEFAULT_SKIPS) -> list[RegimeSpec]:
    """Cross product of thresholds and (for monitored kinds) skip lengths."""
    if kind == "none":
        return [RegimeSpec(TreatmentRule(float(x))) for x in thresholds]
    return [RegimeSpec(TreatmentRule(float(x)), MonitoringSpec(kind, int(j))) for j in skips for x in thresholds]


def monitoring_requirement(spec: MonitoringSpec, t: int) -> Requirement:
    if spec.kind == "none":
        return Requirement.FREE
    if spec.scheduled(t):
        return Requirement.FORCED_ON
    return Requirement.FORCED_OFF if spec.kind == "static" else Requirement.FREE


def decide(rule: TreatmentRule, ctx: DecisionContext) -> tuple[int, int]:
    """Treatment and censoring assignment ``(a1, a2)`` under the rule."""
    if ctx.y == 1 or ctx.prev_a1 == 1 or ctx.prev_n == 0:
        return ctx.prev_a1, 0
    return int(ctx.i >= rule.threshold), 0


def mask_context(ctx: DecisionContext, n_req: int) -> DecisionContext:
    """Hide monitoring and A1c information not required by the schedule."""
    return replace(ctx, prev_n=n_req * ctx.prev_n, i=n_req * ctx.i)


def adherent(trajectory: PatientTrajectory, regime: RegimeSpec, t: int) -> int:
    """1 iff the patient is event-free at ``t`` and followed ``regime`` at 0..t."""
    rows = trajectory.rows
    if t < 0 or t >= len(rows) or rows[t].y != 0:
        return 0
    mon = regime.monitoring
    prev_a1, prev_a2, prev_n = 0, 0, 1
    for k in range(t + 1):
        row = rows[k]
        ctx = DecisionContext(prev_a1, prev_a2, prev_n, row.y, row.i_obs)
        if mon.kind == "relaxed":
            ctx = mask_context(ctx, mon.scheduled(k - 1))
        if (row.a1, row.a2) != decide(regime.rule, ctx):
            return 0
        req = monitoring_requirement(mon, k)
        if (req is Requirement.FORCED_ON and row.n != 1) or (req is Requirement.FORCED_OFF and row.n != 0):
            return 0
        prev_a1, prev_a2, prev_n = row.a1, row.a2, row.n
    return 1


def regime_requirements(cohort: CohortTable, regime: RegimeSpec,
                        t_max: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Assignments the regime demands at each cell, given the observed past.

    Returns ``(a1_required, n_required)``, int8 arrays of shape
    ``(n_patients, t_max + 1)``.  ``n_required`` is -1 where monitoring is free.
    The required censoring value is always 0.
    """
    if t_max is None:
        t_max = cohort.horizon
    width = min(t_max, cohort.horizon) + 1
    mon = regime.monitoring
    x = regime.rule.threshold
    req_a1 = np.zeros((cohort.n_patients, t_max + 1), dtype=np.int8)
    req_n = np.full((cohort.n_patients, t_max + 1), -1, dtype=np.int8)
    prev_a1 = np.zeros(cohort.n_patients, dtype=np.int8)
    prev_n = np.ones(cohort.n_patients, dtype=np.int8)
    for t in range(width):
        n_eff = prev_n
        if mon.kind == "relaxed" and not mon.scheduled(t - 1):
            n_eff = np.zeros_like(prev_n)
        start = (prev_a1 == 0) & (n_eff == 1) & (cohort.i[:, t] >= x)
        req_a1[:, t] = np.where(start, 1, prev_a1)
        req = monitoring_requirement(mon, t)
        if req is Requirement.FORCED_ON:
            req_n[:, t] = 1
        elif req is Requirement.FORCED_OFF:
            req_n[:, t] = 0
        prev_a1 = cohort.a1[:, t]
        prev_n = cohort.n[:, t]
    return req_a1, req_n


def adherence_matrix(cohort: CohortTable, regime: RegimeSpec, t_max: int | None = None) -> np.ndarray:
    """Vectorised :func:`adherent` for every patient and ``t = 0 .. t_max``.

    Returns a boolean array of shape ``(n_patients, t_max + 1)``.
    """
    if t_max is None:
        t_max = cohort.horizon
    req_a1, req_n = regime_requirements(cohort, regime, t_max)
    out = np.zeros((cohort.n_patients, t_max + 1), dtype=bool)
    ok = np.ones(cohort.n_patients, dtype=bool)
    for t in range(min(t_max, cohort.horizon) + 1):
        ok = ok & cohort.present[:, t] & (cohort.y[:, t] == 0)
        ok &= (cohort.a1[:, t] == req_a1[:, t]) & (cohort.a2[:, t] == 0)
        ok &= (req_n[:, t] < 0) | (cohort.n[:, t] == req_n[:, t])
        out[:, t] = ok
    return out
