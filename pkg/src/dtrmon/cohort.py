"""Discrete-time person-period cohort data.

A cohort is stored as padded wide arrays of shape ``(n_patients, horizon + 1)``
indexed by period ``t``.  Row ``t`` of a patient holds ``Y(t)``, the covariates
``Z(t)``, the LOVCF-filled A1c ``I(t)``, and the decisions ``A1(t)``, ``A2(t)``
and ``N(t)`` that follow it.  Cells at or beyond a patient's ``length`` are
padding and carry no meaning.

Rows stop at the first failure (``y = 1``) or censoring (``a2 = 1``) row, or at
the horizon row ``t = K + 1``.  Decisions recorded on terminal rows are
degenerate: by convention ``a1`` repeats the previous value, ``a2 = 0`` and
``n`` repeats the previous monitoring flag.
"""

from __future__ import annotations

import io
import os
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

REQUIRED_COLUMNS = ("id", "t", "y", "a1", "a2", "n", "i")
LAG_CAP = 4

#: Upper edges of the past-monitoring-frequency categories; the last category
#: is the singleton {1}.
FREQ_EDGES = (0.4, 0.5, 0.7)
FREQ_LABELS = ("[0,0.4)", "[0.4,0.5)", "[0.5,0.7)", "[0.7,1)", "{1}")

#: Right-closed A1c band edges used by the monitoring model.
BAND_EDGES = (7.0, 7.5, 8.0, 8.5)
BAND_LABELS = ("<=7", "(7,7.5]", "(7.5,8]", "(8,8.5]", ">8.5")


class CohortError(ValueError):
    """Base class for cohort loading and construction errors."""


class MissingColumn(CohortError):
    pass


class NonContiguousPeriods(CohortError):
    pass


class PostEventRow(CohortError):
    pass


class DomainViolation(CohortError):
    pass


class InvalidCohort(CohortError):
    """Raised by :func:`load_cohort` when invariant checks report violations."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        head = "; ".join(str(v) for v in report.violations[:5])
        more = "" if len(report.violations) <= 5 else f" (+{len(report.violations) - 5} more)"
        super().__init__(f"cohort violates {len(report.violations)} invariant(s): {head}{more}")


class MissingBaseline(CohortError):
    pass


class MissingMeasurement(CohortError):
    pass


class OutOfRange(CohortError):
    pass


@dataclass(frozen=True)
class ZCovariate:
    name: str
    kind: str = "numeric"  # "numeric" or "binary"
    monitored: bool = False

    def __post_init__(self):
        if self.kind not in ("numeric", "binary"):
            raise CohortError(f"covariate {self.name!r}: unknown kind {self.kind!r}")
        if not self.name or self.name in REQUIRED_COLUMNS or self.name.startswith("mon_"):
            raise CohortError(f"invalid covariate name {self.name!r}")


@dataclass(frozen=True)
class PersonPeriodRow:
    patient_id: str
    t: int
    y: int
    z: Mapping[str, float]
    i_obs: float
    n: int
    a1: int
    a2: int
    z_mon: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class PatientTrajectory:
    patient_id: str
    rows: tuple[PersonPeriodRow, ...]
    terminal_reason: str

    def __len__(self):
        return len(self.rows)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CohortTable:
    """Immutable cohort in padded wide layout.

    Attributes
    ----------
    ids : array of str, shape (n,)
    length : int array, shape (n,)
        Number of rows recorded for each patient (rows ``0 .. length-1``).
    y, a1, a2, n : int8 arrays, shape (n, horizon + 1)
    i : float array, shape (n, horizon + 1)
    z, z_mon : dicts of (n, horizon + 1) arrays keyed by covariate name.
    horizon : int
        ``K + 1``, the last period index a trajectory may reach.
    z_schema : tuple of ZCovariate
    """

    ids: np.ndarray
    length: np.ndarray
    y: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    n: np.ndarray
    i: np.ndarray
    horizon: int
    z: Mapping[str, np.ndarray] = field(default_factory=dict)
    z_mon: Mapping[str, np.ndarray] = field(default_factory=dict)
    z_schema: tuple[ZCovariate, ...] = ()

    def __post_init__(self):
        width = self.horizon + 1
        n_pat = len(self.ids)
        for name in ("y", "a1", "a2", "n", "i"):
            arr = getattr(self, name)
            if arr.shape != (n_pat, width):
                raise CohortError(f"{name} has shape {arr.shape}, expected {(n_pat, width)}")
        for cov in self.z_schema:
            if cov.name not in self.z:
                raise CohortError(f"missing values for covariate {cov.name!r}")
            if cov.monitored and cov.name not in self.z_mon:
                raise CohortError(f"missing monitoring flags for covariate {cov.name!r}")
        object.__setattr__(self, "ids", _frozen(np.asarray(self.ids, dtype=object)))
        object.__setattr__(self, "length", _frozen(np.asarray(self.length, dtype=np.int64)))
        for name in ("y", "a1", "a2", "n"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name), dtype=np.int8)))
        object.__setattr__(self, "i", _frozen(np.asarray(self.i, dtype=float)))
        object.__setattr__(self, "z", {k: _frozen(np.asarray(v, dtype=float)) for k, v in self.z.items()})
        object.__setattr__(self, "z_mon", {k: _frozen(np.asarray(v, dtype=np.int8)) for k, v in self.z_mon.items()})
        object.__setattr__(self, "z_schema", tuple(self.z_schema))

    @property
    def n_patients(self) -> int:
        return len(self.ids)

    @property
    def width(self) -> int:
        return self.horizon + 1

    @property
    def K(self) -> int:
        return self.horizon - 1

    @property
    def present(self) -> np.ndarray:
        """Boolean (n, horizon + 1) mask of recorded rows."""
        return np.arange(self.width)[None, :] < self.length[:, None]

    def terminal_reasons(self) -> np.ndarray:
        last = self.length - 1
        rows = np.arange(self.n_patients)
        out = np.full(self.n_patients, "incomplete", dtype=object)
        out[last == self.horizon] = "horizon"
        out[self.a2[rows, last] == 1] = "censored"
        out[self.y[rows, last] == 1] = "failure"
        return out

    def trajectory(self, k: int) -> PatientTrajectory:
        pid = str(self.ids[k])
        rows = []
        for t in range(int(self.length[k])):
            rows.append(PersonPeriodRow(
                patient_id=pid, t=t, y=int(self.y[k, t]),
                z={c.name: float(self.z[c.name][k, t]) for c in self.z_schema},
                i_obs=float(self.i[k, t]), n=int(self.n[k, t]),
                a1=int(self.a1[k, t]), a2=int(self.a2[k, t]),
                z_mon={c.name: int(self.z_mon[c.name][k, t]) for c in self.z_schema if c.monitored},
            ))
        return PatientTrajectory(pid, tuple(rows), str(self.terminal_reasons()[k]))

    def trajectories(self) -> Iterator[PatientTrajectory]:
        for k in range(self.n_patients):
            yield self.trajectory(k)

    def take(self, index: Sequence[int], ids: Sequence[str] | None = None) -> "CohortTable":
        """Patient subset (with repetition allowed, as in bootstrap resampling)."""
        index = np.asarray(index, dtype=np.int64)
        new_ids = self.ids[index] if ids is None else np.asarray(ids, dtype=object)
        return CohortTable(
            ids=new_ids, length=self.length[index],
            y=self.y[index], a1=self.a1[index], a2=self.a2[index], n=self.n[index], i=self.i[index],
            horizon=self.horizon,
            z={k: v[index] for k, v in self.z.items()},
            z_mon={k: v[index] for k, v in self.z_mon.items()},
            z_schema=self.z_schema,
        )

    def __eq__(self, other):
        if not isinstance(other, CohortTable):
            return NotImplemented
        if self.horizon != other.horizon or self.z_schema != other.z_schema:
            return False
        if not (np.array_equal(self.ids, other.ids) and np.array_equal(self.length, other.length)):
            return False
        mask = self.present
        for name in ("y", "a1", "a2", "n", "i"):
            if not np.array_equal(getattr(self, name)[mask], getattr(other, name)[mask]):
                return False
        for cov in self.z_schema:
            if not np.array_equal(self.z[cov.name][mask], other.z[cov.name][mask]):
                return False
            if cov.monitored and not np.array_equal(self.z_mon[cov.name][mask], other.z_mon[cov.name][mask]):
                return False
        return True

    __hash__ = None

    def to_frame(self) -> pd.DataFrame:
        mask = self.present
        pid, t = np.nonzero(mask)
        data = {
            "id": self.ids[pid].astype(str),
            "t": t.astype(np.int64),
            "y": self.y[mask].astype(np.int64),
            "a1": self.a1[mask].astype(np.int64),
            "a2": self.a2[mask].astype(np.int64),
            "n": self.n[mask].astype(np.int64),
            "i": self.i[mask],
        }
        for cov in self.z_schema:
            vals = self.z[cov.name][mask]
            data[cov.name] = vals.astype(np.int64) if cov.kind == "binary" else vals
        for cov in self.z_schema:
            if cov.monitored:
                data[f"mon_{cov.name}"] = self.z_mon[cov.name][mask].astype(np.int64)
        return pd.DataFrame(data)


def _as_schema(z_schema) -> tuple[ZCovariate, ...]:
    if z_schema is None:
        return ()
    if isinstance(z_schema, Mapping):
        return tuple(ZCovariate(name, kind) for name, kind in z_schema.items())
    return tuple(c if isinstance(c, ZCovariate) else ZCovariate(*c) for c in z_schema)


def cohort_from_frame(df: pd.DataFrame, z_schema=None, horizon: int | None = None,
                      validate: bool = True) -> CohortTable:
    """Build a :class:`CohortTable` from long person-period rows.

    Monitoring-flag columns ``mon_<z>`` mark a declared covariate as
    non-systematically monitored.  Structural problems (missing columns,
    gaps, rows after an absorbing event, out-of-domain values) always raise;
    the remaining invariants raise :class:`InvalidCohort` when ``validate``.
    """
    schema = _as_schema(z_schema)
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    missing += [c.name for c in schema if c.name not in df.columns]
    if missing:
        raise MissingColumn(f"missing required column(s): {', '.join(missing)}")
    schema = tuple(ZCovariate(c.name, c.kind, f"mon_{c.name}" in df.columns) for c in schema)

    df = df.copy()
    df["id"] = df["id"].astype(str)
    for col in ("t", "y", "a1", "a2", "n") + tuple(f"mon_{c.name}" for c in schema if c.monitored):
        vals = pd.to_numeric(df[col], errors="coerce")
        if vals.isna().any() or (vals != np.round(vals)).any():
            raise DomainViolation(f"column {col!r} must hold integers")
        df[col] = vals.astype(np.int64)
    for col in ("y", "a1", "a2", "n") + tuple(f"mon_{c.name}" for c in schema if c.monitored):
        bad = ~df[col].isin((0, 1))
        if bad.any():
            row = df[bad].iloc[0]
            raise DomainViolation(f"{col} must be 0 or 1 (id={row['id']}, t={row['t']})")
    df["i"] = pd.to_numeric(df["i"], errors="coerce").astype(float)
    bad = ~(np.isfinite(df["i"]) & (df["i"] > 0))
    if bad.any():
        row = df[bad].iloc[0]
        raise DomainViolation(f"A1c must be a positive number (id={row['id']}, t={row['t']})")
    for cov in schema:
        vals = pd.to_numeric(df[cov.name], errors="coerce").astype(float)
        if not np.isfinite(vals).all():
            raise DomainViolation(f"covariate {cov.name!r} has missing or non-numeric values")
        if cov.kind == "binary" and not vals.isin((0.0, 1.0)).all():
            raise DomainViolation(f"binary covariate {cov.name!r} must be 0 or 1")
        df[cov.name] = vals
    if (df["t"] < 0).any():
        raise DomainViolation("period index t must be >= 0")

    df = df.sort_values(["id", "t"], kind="mergesort").reset_index(drop=True)
    if horizon is None:
        horizon = int(df["t"].max()) if len(df) else 0
    if (df["t"] > horizon).any():
        raise DomainViolation(f"period index exceeds horizon {horizon}")

    ids, first = np.unique(df["id"].to_numpy(dtype=object), return_index=True)
    counts = np.diff(np.append(first, len(df)))
    pos = np.arange(len(df)) - np.repeat(first, counts)
    if not np.array_equal(pos, df["t"].to_numpy()):
        k = int(np.flatnonzero(pos != df["t"].to_numpy())[0])
        raise NonContiguousPeriods(
            f"patient {df['id'].iloc[k]}: periods must run 0,1,2,... without gaps (found t={df['t'].iloc[k]})")
    ends = (df["y"].to_numpy() == 1) | (df["a2"].to_numpy() == 1)
    last_row = np.zeros(len(df), dtype=bool)
    last_row[first + counts - 1] = True
    post = ends & ~last_row
    if post.any():
        k = int(np.flatnonzero(post)[0])
        raise PostEventRow(f"patient {df['id'].iloc[k]}: rows recorded after failure/censoring at t={df['t'].iloc[k]}")

    n_pat, width = len(ids), horizon + 1
    pid = np.repeat(np.arange(n_pat), counts)
    tt = df["t"].to_numpy()

    def wide(col, dtype, fill=0):
        out = np.full((n_pat, width), fill, dtype=dtype)
        out[pid, tt] = df[col].to_numpy(dtype=dtype)
        return out

    cohort = CohortTable(
        ids=ids, length=counts, horizon=horizon,
        y=wide("y", np.int8), a1=wide("a1", np.int8), a2=wide("a2", np.int8), n=wide("n", np.int8),
        i=wide("i", float, np.nan),
        z={c.name: wide(c.name, float, np.nan) for c in schema},
        z_mon={c.name: wide(f"mon_{c.name}", np.int8) for c in schema if c.monitored},
        z_schema=schema,
    )
    if validate:
        report = validate_cohort(cohort)
        if not report.ok:
            raise InvalidCohort(report)
    return cohort


def load_cohort(source, z_schema=None, horizon: int | None = None) -> CohortTable:
    """Read and validate a long-format cohort CSV (``#`` lines are comments)."""
    if isinstance(source, (str, os.PathLike)):
        if not os.path.exists(source):
            raise FileNotFoundError(source)
        if horizon is None:
            horizon = _header_horizon(source)
    df = pd.read_csv(source, dtype={"id": str}, comment="#", float_precision="round_trip",
                     keep_default_na=False, na_values=[""])
    return cohort_from_frame(df, z_schema=z_schema, horizon=horizon)


def _header_horizon(path) -> int | None:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            m = re.search(r"\bhorizon=(\d+)", line)
            if m:
                return int(m.group(1))
    return None


def write_cohort(cohort: CohortTable, dest=None, header_comment: str | None = None) -> str | None:
    """Write the cohort as CSV.  Identical cohorts produce identical bytes.

    The horizon is recorded in a leading ``# horizon=...`` comment so that
    cohorts whose trajectories all end early still load with the right
    horizon.  Returns the CSV text when ``dest`` is None.
    """
    buf = io.StringIO()
    if header_comment:
        for line in header_comment.splitlines():
            buf.write(f"# {line}\n")
    buf.write(f"# horizon={cohort.horizon}\n")
    cohort.to_frame().to_csv(buf, index=False, lineterminator="\n")
    text = buf.getvalue()
    if dest is None:
        return text
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return None


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    patient_id: str
    t: int
    rule: str

    def __str__(self):
        return f"{self.rule} (id={self.patient_id}, t={self.t})"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def by_rule(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for v in self.violations:
            out[v.rule] = out.get(v.rule, 0) + 1
        return out


def validate_cohort(cohort: CohortTable) -> ValidationReport:
    """Check every trajectory invariant; violations are returned, not raised."""
    found: list[tuple[int, int, str]] = []
    present = cohort.present
    width = cohort.width
    last = cohort.length - 1
    is_last = np.arange(width)[None, :] == last[:, None]

    def flag(mask, rule):
        for k, t in zip(*np.nonzero(mask)):
            found.append((int(k), int(t), rule))

    flag((cohort.length < 1)[:, None] & (np.arange(width) == 0)[None, :], "empty_trajectory")
    for name in ("y", "a1", "a2", "n"):
        arr = getattr(cohort, name)
        flag(present & (arr != 0) & (arr != 1), f"domain_{name}")
    flag(present & ~(np.isfinite(cohort.i) & (cohort.i > 0)), "domain_i")
    flag(present[:, :1] & (cohort.y[:, :1] != 0), "baseline_outcome")
    flag(present & (cohort.y == 1) & ~is_last, "non_monotone_outcome")
    flag(present & (cohort.a2 == 1) & ~is_last, "absorbing_censoring")
    prev_pres = present[:, 1:]
    flag(np.pad(prev_pres & (cohort.a1[:, 1:] < cohort.a1[:, :-1]), ((0, 0), (1, 0))), "treatment_monotone")
    stale = prev_pres & (cohort.n[:, :-1] == 0) & (cohort.i[:, 1:] != cohort.i[:, :-1])
    flag(np.pad(stale, ((0, 0), (1, 0))), "lovcf_a1c")
    for cov in cohort.z_schema:
        vals = cohort.z[cov.name]
        flag(present & ~np.isfinite(vals), f"domain_{cov.name}")
        if cov.kind == "binary":
            flag(present & np.isfinite(vals) & (vals != 0) & (vals != 1), f"domain_{cov.name}")
        if cov.monitored:
            mon = cohort.z_mon[cov.name]
            flag(present & (mon != 0) & (mon != 1), f"domain_mon_{cov.name}")
            stale = prev_pres & (mon[:, :-1] == 0) & (vals[:, 1:] != vals[:, :-1])
            flag(np.pad(stale, ((0, 0), (1, 0))), f"lovcf_{cov.name}")
    flag((cohort.length > width)[:, None] & (np.arange(width) == 0)[None, :], "beyond_horizon")
    reasons = cohort.terminal_reasons()
    incomplete = (reasons == "incomplete") & (cohort.length >= 1)
    flag(incomplete[:, None] & is_last, "incomplete_followup")
    if len(set(cohort.ids.tolist())) != cohort.n_patients:
        seen = set()
        for k, pid in enumerate(cohort.ids):
            if pid in seen:
                found.append((k, 0, "duplicate_id"))
            seen.add(pid)
    found.sort()
    return ValidationReport(tuple(Violation(str(cohort.ids[k]), t, rule) for k, t, rule in found))


# ------------------------------------------------------ feature engineering


def carry_forward(values: Sequence[float | None], monitored: Sequence[int]) -> tuple[list[float], list[int]]:
    """Last-observed-value-carried-forward fill with capped staleness lags.

    ``monitored[t] = 1`` means a fresh measurement is taken for period
    ``t + 1``; period 0 is always measured.  Values at periods not preceded by
    a monitoring decision are treated as unobserved and ignored.

    Returns ``(filled, lag)`` where ``lag[t]`` counts periods since the last
    fresh measurement, capped at 4.
    """
    vals = list(values)
    flags = list(monitored)
    if not vals or _missing(vals[0]):
        raise MissingBaseline("the baseline value must be present")
    filled = [float(vals[0])]
    lag = [0]
    for t in range(1, len(vals)):
        if flags[t - 1]:
            if _missing(vals[t]):
                raise MissingMeasurement(f"period {t} was monitored but has no value")
            filled.append(float(vals[t]))
            lag.append(0)
        else:
            filled.append(filled[-1])
            lag.append(min(lag[-1] + 1, LAG_CAP))
    return filled, lag


def _missing(v) -> bool:
    return v is None or (isinstance(v, float) and np.isnan(v))


def freq_category(freq: float) -> int:
    """Index into :data:`FREQ_LABELS` for a past-monitoring frequency in [0, 1]."""
    if not 0.0 <= freq <= 1.0:
        raise OutOfRange(f"monitoring frequency {freq} outside [0, 1]")
    if freq == 1.0:
        return 4
    return int(np.searchsorted(FREQ_EDGES, freq, side="right"))


def a1c_band(value: float) -> int:
    """Index into :data:`BAND_LABELS`; bands are closed on the right."""
    return int(np.searchsorted(BAND_EDGES, value, side="left"))


@dataclass(frozen=True)
class FeatureVector:
    period: int
    monitor_freq: float
    monitor_freq_cat: int
    lovcf_lag_cat: int
    a1c: float
    lag_by_a1c: tuple[float, ...]
    a1c_band: int
    z_values: Mapping[str, float]
    z_lag_cats: Mapping[str, int]
    prior_a1: int
    prior_n: int
    a1: int


def derive_features(trajectory: PatientTrajectory, t: int) -> FeatureVector:
    """Adjustment features for one patient at period ``t``."""
    if not 0 <= t < len(trajectory.rows):
        raise OutOfRange(f"period {t} outside trajectory of length {len(trajectory.rows)}")
    rows = trajectory.rows
    n_hist = [r.n for r in rows[:t]]
    freq = 1.0 if t == 0 else sum(n_hist) / t
    _, lags = carry_forward([r.i_obs for r in rows[: t + 1]], [r.n for r in rows[: t + 1]])
    lag = lags[t]
    a1c = rows[t].i_obs
    z_lags = {}
    for name in rows[t].z_mon:
        _, zl = carry_forward([r.z[name] for r in rows[: t + 1]], [r.z_mon[name] for r in rows[: t + 1]])
        z_lags[name] = zl[t]
    return FeatureVector(
        period=t,
        monitor_freq=freq,
        monitor_freq_cat=freq_category(freq),
        lovcf_lag_cat=lag,
        a1c=a1c,
        lag_by_a1c=tuple(a1c if k == lag else 0.0 for k in range(LAG_CAP + 1)),
        a1c_band=a1c_band(a1c),
        z_values=dict(rows[t].z),
        z_lag_cats=z_lags,
        prior_a1=rows[t - 1].a1 if t > 0 else 0,
        prior_n=rows[t - 1].n if t > 0 else 1,
        a1=rows[t].a1,
    )


def lag_matrix(flags: np.ndarray) -> np.ndarray:
    """Vectorised LOVCF lag categories from (n, width) monitoring flags."""
    lag = np.zeros(flags.shape, dtype=np.int64)
    for t in range(1, flags.shape[1]):
        lag[:, t] = np.where(flags[:, t - 1] == 1, 0, np.minimum(lag[:, t - 1] + 1, LAG_CAP))
    return lag


def frequency_matrix(flags: np.ndarray) -> np.ndarray:
    """Past monitoring frequency ``sum(N(0..t-1)) / t``, set to 1 at t = 0."""
    width = flags.shape[1]
    csum = np.zeros(flags.shape, dtype=float)
    csum[:, 1:] = np.cumsum(flags[:, :-1], axis=1)
    denom = np.arange(width, dtype=float)
    out = np.ones(flags.shape, dtype=float)
    out[:, 1:] = csum[:, 1:] / denom[1:]
    return out


def freq_category_matrix(freq: np.ndarray) -> np.ndarray:
    cat = np.searchsorted(FREQ_EDGES, freq, side="right")
    return np.where(freq == 1.0, 4, cat)


def band_matrix(values: np.ndarray) -> np.ndarray:
    return np.searchsorted(BAND_EDGES, values, side="left")

