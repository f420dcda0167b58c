"""Analysis specification and the end-to-end estimation run."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .cohort import CohortTable, load_cohort
from .estimator import (DEFAULT_TRUNCATION, BootstrapResult, EstimateReport, EstimationSettings,
                        PointEstimate, bootstrap_cis, estimate, frame_to_csv)
from .features import FeatureSpec
from .regimes import DEFAULT_SKIPS, DEFAULT_THRESHOLDS, KIND_FOR_MODE, RegimeSpec, regime_grid
from .simulator import load_scenario, simulate_cohort
from .weights import MODES, follower_frame, weight_diagnostics


class SpecError(ValueError):
    pass


def _seed(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2**64:
        raise SpecError(f"seed must be an unsigned 64-bit integer, got {value!r}")
    return value


@dataclass(frozen=True)
class AnalysisSpec:
    """One estimation run.

    Randomness flows from ``seed``: ``SeedSequence(seed).spawn(2)`` gives the
    simulation stream (child 0) and the bootstrap stream (child 1).
    """

    regimes: tuple[RegimeSpec, ...]
    mode: str
    t0: int
    cohort: str | None = None
    scenario: str | None = None
    n: int | None = None
    features: FeatureSpec = field(default_factory=FeatureSpec)
    truncate: float | None = DEFAULT_TRUNCATION
    bootstrap: int = 0
    seed: int = 0
    level: float = 0.95
    out: str | None = None
    base_dir: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise SpecError(f"unknown mode {self.mode!r}")
        if not self.regimes:
            raise SpecError("at least one regime is required")
        kind = KIND_FOR_MODE[self.mode]
        for reg in self.regimes:
            if reg.monitoring.kind != kind:
                raise SpecError(f"regime {reg.regime_id} is inconsistent with mode {self.mode}")
        if (self.cohort is None) == (self.scenario is None):
            raise SpecError("give exactly one of 'cohort' or 'scenario'")
        if self.scenario is not None and (self.n is None or self.n < 1):
            raise SpecError("a scenario source needs a positive 'n'")
        if isinstance(self.t0, bool) or not isinstance(self.t0, int) or self.t0 < 0:
            raise SpecError("t0 must be a non-negative integer")
        if self.truncate is not None and not self.truncate > 0:
            raise SpecError("truncation cap must be positive")
        if self.bootstrap == 1 or self.bootstrap < 0:
            raise SpecError("bootstrap must be 0 (off) or at least 2")
        if not 0 < self.level < 1:
            raise SpecError("level must lie in (0, 1)")
        _seed(self.seed)

    @property
    def settings(self) -> EstimationSettings:
        return EstimationSettings(self.regimes, self.mode, self.t0, self.features, self.truncate)

    def seeds(self) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
        sim, boot = np.random.SeedSequence(self.seed).spawn(2)
        return sim, boot

    def resolve(self, path: str) -> str:
        if self.base_dir is None or os.path.isabs(path) or os.path.exists(path):
            return path
        return os.path.join(self.base_dir, path)

    def to_dict(self) -> dict:
        return {
            "cohort": self.cohort, "scenario": self.scenario, "n": self.n,
            "regimes": [r.to_dict() for r in self.regimes], "mode": self.mode, "t0": self.t0,
            "features": self.features.to_dict(),
            "truncate": self.truncate, "bootstrap": self.bootstrap, "seed": self.seed,
            "level": self.level,
        }

    @property
    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | None = None) -> "AnalysisSpec":
        if not isinstance(d, Mapping):
            raise SpecError("analysis spec must be a JSON object")
        known = {"cohort", "scenario", "n", "regimes", "thresholds", "skips", "mode", "t0", "features",
                 "truncate", "bootstrap", "seed", "level", "out", "adjust_monitoring"}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown field(s): {sorted(extra)}")
        mode = d.get("mode", "treatment-only")
        if mode not in MODES:
            raise SpecError(f"unknown mode {mode!r}")
        try:
            if "regimes" in d:
                regimes = tuple(RegimeSpec.from_dict(r) for r in d["regimes"])
            else:
                regimes = tuple(regime_grid(d.get("thresholds", DEFAULT_THRESHOLDS), KIND_FOR_MODE[mode],
                                            d.get("skips", DEFAULT_SKIPS)))
            features = FeatureSpec.from_config(d.get("features"), d.get("adjust_monitoring"))
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from exc
        if "t0" not in d:
            raise SpecError("'t0' is required")
        trunc = d.get("truncate", DEFAULT_TRUNCATION)
        if isinstance(trunc, str) and trunc.lower() == "none":
            trunc = None
        return cls(
            regimes=regimes, mode=mode, t0=d["t0"], cohort=d.get("cohort"), scenario=d.get("scenario"),
            n=d.get("n"), features=features,
            truncate=None if trunc is None else float(trunc), bootstrap=int(d.get("bootstrap", 0)),
            seed=_seed(d.get("seed", 0)), level=float(d.get("level", 0.95)), out=d.get("out"),
            base_dir=base_dir,
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "AnalysisSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SpecError(f"malformed JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=str(Path(path).parent))


@dataclass
class AnalysisResult:
    spec: AnalysisSpec
    cohort: CohortTable
    estimate: PointEstimate
    report: EstimateReport
    intervals: BootstrapResult | None

    @property
    def converged(self) -> bool:
        return all(f.converged for f in self.estimate.fits.values())

    @property
    def all_support_lost(self) -> bool:
        """True when no regime has a defined survival value at ``t0 + 1``."""
        t0 = self.spec.t0
        return all(c.at(t0 + 1) is None for c in self.estimate.curves.values())

    @property
    def provenance(self) -> str:
        return f"config_sha256={self.spec.sha256} seed={self.spec.seed}"


def load_source(spec: AnalysisSpec) -> CohortTable:
    if spec.cohort is not None:
        return load_cohort(spec.resolve(spec.cohort))
    scenario = load_scenario(spec.resolve(spec.scenario))
    sim_seed, _ = spec.seeds()
    return simulate_cohort(scenario, spec.n, sim_seed)


def run_analysis(spec: AnalysisSpec, cohort: CohortTable | None = None) -> AnalysisResult:
    """Estimate curves (and bootstrap intervals if requested) for every regime."""
    if cohort is None:
        cohort = load_source(spec)
    if spec.t0 >= cohort.horizon:
        raise SpecError(f"t0 = {spec.t0} must be below the horizon {cohort.horizon}")
    est = estimate(cohort, spec.settings)
    intervals = None
    if spec.bootstrap:
        _, boot_seed = spec.seeds()
        intervals = bootstrap_cis(cohort, spec.settings, spec.bootstrap, boot_seed, spec.level)
    meta = {"provenance": {"config_sha256": spec.sha256, "seed": spec.seed},
            "n_patients": cohort.n_patients, "horizon": cohort.horizon,
            "adjust_monitoring": spec.features.adjust_monitoring}
    report = EstimateReport.from_estimate(est, intervals, meta)
    return AnalysisResult(spec, cohort, est, report, intervals)


def run_log(result: AnalysisResult) -> str:
    est = result.estimate
    lines = [f"# {result.provenance}"]
    for target, fit in est.fits.items():
        lines.append(f"model {target}: iterations={fit.iterations} gradient_norm={fit.final_gradient_norm:.3e} "
                     f"converged={fit.converged} ridge={fit.ridge:g}"
                     + "".join(f" warning={w!r}" for w in fit.warnings))
    cap = result.spec.truncate
    lines.append(f"truncation cap={cap if cap is not None else 'none'} truncated_cells={est.n_truncated}")
    for rid, hz in est.hazards.items():
        first = hz.first_undefined
        lines.append(f"regime {rid}: " + ("support through t0" if first is None else f"hazard undefined from t={first}"))
    if result.intervals is not None:
        lines.append(f"bootstrap B={result.intervals.B} failed_replicates={result.intervals.n_failed}")
    return "\n".join(lines) + "\n"


def write_outputs(result: AnalysisResult, out_dir: str | Path) -> list[Path]:
    """Write report, curves, diagnostics, weights and run log into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    head = result.provenance
    est = result.estimate
    bins, followers = weight_diagnostics(est.raw_weights)
    files = {
        "report.json": result.report.to_json() + "\n",
        "curves.csv": frame_to_csv(result.report.curves_frame(), head),
        "risk_differences.csv": frame_to_csv(result.report.rd_frame(), head),
        "crude_curves.csv": frame_to_csv(_crude_frame(est), head),
        "weight_bins.csv": bins.to_csv(header_comment=head),
        "followers.csv": frame_to_csv(follower_frame(followers), head),
        "weights.csv": frame_to_csv(est.raw_weights.to_frame(),
                                    f"{head} mode={est.raw_weights.mode} untruncated"),
        "models.json": json.dumps({"provenance": {"config_sha256": result.spec.sha256, "seed": result.spec.seed},
                                   "models": {k: f.to_dict() for k, f in est.fits.items()}},
                                  indent=2, sort_keys=True) + "\n",
        "run.log": run_log(result),
    }
    written = []
    for name, text in files.items():
        path = out / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)
    return written


def _crude_frame(est: PointEstimate) -> pd.DataFrame:
    rows = [{"regime": rid, "t": h, "survival": s} for rid, c in est.crude.items() for h, s in enumerate(c.full)]
    return pd.DataFrame(rows, columns=["regime", "t", "survival"])
