"""Structural simulator for cohorts with latent A1c and informative monitoring.

The data-generating process is a set of logistic structural equations
evaluated in temporal order.  Within period ``t`` the order is::

    Y(t), I(t) -> A1(t) -> A2(t) -> U2(t) -> N(t) -> Y(t+1) -> I0(t+1)

with a binary baseline latent ``U1`` and the baseline latent A1c ``I0(0)``
drawn first.  The observed A1c is ``I(t+1) = I0(t+1)`` when ``N(t) = 1`` and
the patient is event-free, and the carried-forward ``I(t)`` otherwise.

Every equation reads its inputs through a restricted view built from
:data:`EQUATION_PARENTS`; in particular the treatment equation cannot see the
latent A1c.

The same :class:`_Engine` runs in two modes.  In sampling mode each node
draws one uniform per patient (always, so that common random numbers stay
aligned across interventions).  In branching mode each node splits every
branch by the node's possible values and multiplies branch masses by the
conditional probabilities, which yields the exact law of the process.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .cohort import CohortTable
from .estimator import hazard_series, survival_curve
from .propensity import Propensities
from .regimes import RegimeSpec, adherence_matrix, regime_requirements
from .weights import cumulative_weights

MAX_BRANCHES = 1_000_000
A1C_FLOOR = 7.0

#: Within-period position of each node; baseline quantities and values
#: carried from earlier periods sit at negative positions.
NODE_POSITION = {
    "u1": -3, "i0": -2, "t": -1, "prev_a1": -1, "prev_n": -1,
    "y": 0, "i": 1, "a1": 2, "a2": 3, "u2": 4, "n": 5, "y_next": 6, "i0_next": 7,
}

#: Node produced by each equation and the parents it may read.
EQUATION_NODE = {
    "treatment": "a1", "censoring": "a2", "u2": "u2",
    "monitoring": "n", "outcome": "y_next", "latent_a1c": "i0_next",
}
EQUATION_PARENTS = {
    "treatment": ("t", "prev_a1", "prev_n", "i"),
    "censoring": ("t", "prev_n", "i", "a1"),
    "u2": ("u1", "i0", "a1"),
    "monitoring": ("t", "prev_n", "i", "a1", "u1", "u2"),
    "outcome": ("t", "prev_n", "i0", "a1", "u1", "u2", "n"),
    "latent_a1c": ("i0", "a1", "u1", "u2", "n"),
}

#: Coefficient name -> parents it multiplies, per equation.
COEFFICIENTS = {
    "treatment": {"intercept": (), "time": ("t",), "prev_monitored": ("prev_n",), "a1c": ("i",),
                  "prev_monitored_by_a1c": ("prev_n", "i")},
    "censoring": {"intercept": (), "time": ("t",), "a1": ("a1",), "a1c": ("i",),
                  "prev_monitored": ("prev_n",)},
    "u2": {"intercept": (), "u1": ("u1",), "a1c": ("i0",), "a1": ("a1",)},
    "monitoring": {"intercept": (), "time": ("t",), "a1": ("a1",), "a1c": ("i",),
                   "prev_monitored": ("prev_n",), "u1": ("u1",), "u2": ("u2",)},
    "outcome": {"intercept": (), "time": ("t",), "a1c": ("i0",), "a1": ("a1",), "u1": ("u1",),
                "u2": ("u2",), "monitored": ("n",), "prev_monitored": ("prev_n",)},
    "latent_a1c": {"persistence": ("i0",), "u1": ("u1",), "u2": ("u2",), "treated": ("a1",),
                   "monitored": ("n",)},
}
#: Non-coefficient settings accepted in each block.
SETTINGS = {
    "treatment": set(), "censoring": {"enabled"}, "u2": {"enabled", "a1c_arrow", "a1_arrow"},
    "monitoring": {"u_arrows"}, "outcome": set(),
    "latent_a1c": {"levels", "cutpoints", "baseline_cutpoints", "baseline_u1", "mean", "sd",
                   "baseline_mean", "baseline_sd"},
}
#: Monitoring effects on later covariates and outcomes that are zeroed when ``nde`` is true.
NDE_ARROWS = (("outcome", "monitored"), ("outcome", "prev_monitored"), ("latent_a1c", "monitored"))


class InvalidConfig(ValueError):
    pass


class StateSpaceTooLarge(RuntimeError):
    pass


class PositivityViolation(RuntimeError):
    pass


def _num(block: Mapping, key: str, default: float = 0.0) -> float:
    v = block.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
        raise InvalidConfig(f"{key!r} must be a finite number, got {v!r}")
    return float(v)


@dataclass(frozen=True)
class ScenarioConfig:
    """Structural-equation coefficients and wiring switches for one scenario."""

    name: str
    horizon: int
    discrete: bool
    nde: bool
    reference_a1c: float
    u1_p: float
    treatment: Mapping[str, float]
    censoring: Mapping[str, float]
    u2: Mapping[str, float]
    monitoring: Mapping[str, float]
    outcome: Mapping[str, float]
    latent_a1c: Mapping
    censoring_enabled: bool = True
    u2_enabled: bool = True
    u_arrows: bool = True
    oracle: Mapping = field(default_factory=dict)
    raw: Mapping = field(default_factory=dict, repr=False)

    @property
    def K(self) -> int:
        return self.horizon - 1

    @property
    def levels(self) -> tuple[float, ...]:
        return tuple(self.latent_a1c.get("levels", ()))

    def coef(self, eq: str, key: str) -> float:
        if self.nde and (eq, key) in NDE_ARROWS:
            return 0.0
        return float(getattr(self, eq).get(key, 0.0))

    @property
    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        if not isinstance(d, Mapping):
            raise InvalidConfig("scenario must be a JSON object")
        known = {"name", "horizon", "mode", "nde", "reference_a1c", "u1", "treatment", "censoring",
                 "u2", "monitoring", "outcome", "latent_a1c", "oracle", "description"}
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown scenario field(s): {sorted(extra)}")
        horizon = d.get("horizon")
        if isinstance(horizon, bool) or not isinstance(horizon, int) or horizon < 1:
            raise InvalidConfig("'horizon' must be an integer >= 1")
        mode = d.get("mode", "discrete")
        if mode not in ("discrete", "continuous"):
            raise InvalidConfig("'mode' must be 'discrete' or 'continuous'")
        blocks = {}
        for eq in COEFFICIENTS:
            block = d.get(eq, {})
            if not isinstance(block, Mapping):
                raise InvalidConfig(f"{eq!r} must be an object")
            unknown = set(block) - set(COEFFICIENTS[eq]) - SETTINGS[eq]
            if unknown:
                raise InvalidConfig(f"{eq}: unknown coefficient(s) {sorted(unknown)}")
            blocks[eq] = {k: _num(block, k) for k in COEFFICIENTS[eq] if k in block}
        u1 = d.get("u1", {})
        u1_p = _num(u1, "p", 0.5) if isinstance(u1, Mapping) else _num({"p": u1}, "p")
        if not 0.0 <= u1_p <= 1.0:
            raise InvalidConfig("u1.p must lie in [0, 1]")
        lat = dict(d.get("latent_a1c", {}))
        latent = dict(blocks["latent_a1c"])
        if mode == "discrete":
            levels = lat.get("levels")
            if not isinstance(levels, list) or len(levels) < 2:
                raise InvalidConfig("discrete latent_a1c needs at least two 'levels'")
            levels = [float(v) for v in levels]
            if any(b <= a for a, b in zip(levels, levels[1:])) or levels[0] < A1C_FLOOR:
                raise InvalidConfig(f"levels must increase and start at or above {A1C_FLOOR}")
            for key in ("cutpoints", "baseline_cutpoints"):
                cuts = lat.get(key)
                if not isinstance(cuts, list) or len(cuts) != len(levels) - 1:
                    raise InvalidConfig(f"latent_a1c.{key} needs {len(levels) - 1} value(s)")
                cuts = [_num({"c": c}, "c") for c in cuts]
                if any(b >= a for a, b in zip(cuts, cuts[1:])):
                    raise InvalidConfig(f"latent_a1c.{key} must be strictly decreasing")
                latent[key] = tuple(cuts)
            latent["levels"] = tuple(levels)
            latent["baseline_u1"] = _num(lat, "baseline_u1")
        else:
            for key, default in (("mean", 7.5), ("sd", 0.3), ("baseline_mean", 7.5), ("baseline_sd", 0.5),
                                 ("baseline_u1", 0.0)):
                latent[key] = _num(lat, key, default)
            if latent["sd"] < 0 or latent["baseline_sd"] < 0:
                raise InvalidConfig("standard deviations must be non-negative")
        u2 = d.get("u2", {})
        mon = d.get("monitoring", {})
        cens = d.get("censoring", {})
        u2_block = dict(blocks["u2"])
        if not u2.get("a1c_arrow", True):
            u2_block.pop("a1c", None)
        if not u2.get("a1_arrow", True):
            u2_block.pop("a1", None)
        oracle = d.get("oracle", {})
        if not isinstance(oracle, Mapping):
            raise InvalidConfig("'oracle' must be an object")
        cfg = cls(
            name=str(d.get("name", "scenario")), horizon=horizon, discrete=mode == "discrete",
            nde=bool(d.get("nde", False)), reference_a1c=_num(d, "reference_a1c", 7.5), u1_p=u1_p,
            treatment=blocks["treatment"], censoring=blocks["censoring"], u2=u2_block,
            monitoring=blocks["monitoring"], outcome=blocks["outcome"], latent_a1c=latent,
            censoring_enabled=bool(cens.get("enabled", True)), u2_enabled=bool(u2.get("enabled", True)),
            u_arrows=bool(mon.get("u_arrows", True)), oracle=dict(oracle), raw=json.loads(json.dumps(d)),
        )
        dependency_audit(cfg)
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ScenarioConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"malformed scenario JSON: {exc}") from exc
        return cls.from_dict(data)


def bundled_scenarios() -> list[str]:
    return sorted(p.name for p in resources.files("dtrmon.scenarios").iterdir() if p.name.endswith(".json"))


def load_scenario(name_or_path: str | Path) -> ScenarioConfig:
    """Load a scenario from a path, or by file name from the bundled set."""
    p = Path(name_or_path)
    if p.exists():
        return ScenarioConfig.from_json(p)
    name = p.name if p.suffix == ".json" else f"{p.name}.json"
    res = resources.files("dtrmon.scenarios") / name
    if res.is_file():
        with resources.as_file(res) as fp:
            return ScenarioConfig.from_json(fp)
    raise FileNotFoundError(str(name_or_path))


def dependency_audit(cfg: ScenarioConfig) -> list[tuple[str, str, str]]:
    """Edges ``(equation, coefficient, parent)`` implied by nonzero coefficients.

    Raises :class:`InvalidConfig` if an equation reads a node that is not
    among its declared parents or that is not strictly earlier in time.
    """
    edges = []
    for eq, coefs in COEFFICIENTS.items():
        node_pos = NODE_POSITION[EQUATION_NODE[eq]]
        for key, parents in coefs.items():
            if cfg.coef(eq, key) == 0.0:
                continue
            for parent in parents:
                if parent not in EQUATION_PARENTS[eq]:
                    raise InvalidConfig(f"{eq} equation may not depend on {parent}")
                if NODE_POSITION[parent] >= node_pos:
                    raise InvalidConfig(f"{eq} equation reads {parent}, which is not earlier in time")
                edges.append((eq, key, parent))
    if any(p == "i0" for eq, _, p in edges if eq == "treatment"):
        raise InvalidConfig("treatment may not depend on the latent A1c")
    return edges


class _View:
    """Read-only access to the parents an equation is allowed to see."""

    __slots__ = ("_data", "_eq")

    def __init__(self, data: Mapping, eq: str):
        self._data = data
        self._eq = eq

    def __getitem__(self, key):
        if key not in EQUATION_PARENTS[self._eq]:
            raise KeyError(f"{self._eq} equation cannot read {key!r}")
        return self._data[key]


def _lin(cfg: ScenarioConfig, eq: str, v: _View, ref: float) -> np.ndarray:
    coefs = COEFFICIENTS[eq]
    out = cfg.coef(eq, "intercept") if "intercept" in coefs else 0.0
    for key, parents in coefs.items():
        c = cfg.coef(eq, key)
        if key == "intercept" or c == 0.0:
            continue
        if eq == "monitoring" and key in ("u1", "u2") and not cfg.u_arrows:
            continue
        term = 1.0
        for p in parents:
            val = v[p]
            if p in ("i", "i0"):
                val = val - ref
            term = term * val
        out = out + c * term
    return out


def treatment_prob(cfg, v):
    p = expit(_lin(cfg, "treatment", v, cfg.reference_a1c))
    return np.where(v["prev_a1"] == 1, 1.0, p)


def censoring_prob(cfg, v):
    if not cfg.censoring_enabled:
        return 0.0
    return expit(_lin(cfg, "censoring", v, cfg.reference_a1c))


def u2_prob(cfg, v):
    if not cfg.u2_enabled:
        return 0.0
    return expit(_lin(cfg, "u2", v, cfg.reference_a1c))


def monitoring_prob(cfg, v):
    return expit(_lin(cfg, "monitoring", v, cfg.reference_a1c))


def outcome_prob(cfg, v):
    eta = _lin(cfg, "outcome", v, cfg.reference_a1c)
    if v["t"] == 0:
        # N(-1) = 1 is a design constant, not a monitoring decision.
        eta = eta - cfg.coef("outcome", "prev_monitored")
    return expit(eta)


def latent_shift(cfg, v, centre):
    out = cfg.coef("latent_a1c", "persistence") * (v["i0"] - centre)
    for key, parent in (("u1", "u1"), ("u2", "u2"), ("treated", "a1"), ("monitored", "n")):
        c = cfg.coef("latent_a1c", key)
        if c:
            out = out + c * v[parent]
    return out


def _ordinal_probs(cuts: Sequence[float], eta) -> np.ndarray:
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    exceed = expit(np.asarray(cuts)[None, :] + eta[:, None])
    upper = np.hstack([np.ones((len(eta), 1)), exceed])
    lower = np.hstack([exceed, np.zeros((len(eta), 1))])
    return np.clip(upper - lower, 0.0, 1.0)


@dataclass(frozen=True)
class Intervention:
    """Overrides applied to the natural course; ``None`` means no intervention."""

    regime: RegimeSpec | None = None

    def treatment(self, t, prev_a1, prev_n, i):
        reg = self.regime
        mon = reg.monitoring
        if mon.kind == "relaxed":
            s = mon.scheduled(t - 1)
            prev_n, i = prev_n * s, i * s
        start = (prev_a1 == 0) & (prev_n == 1) & (i >= reg.rule.threshold)
        return np.where(start, 1, prev_a1).astype(float)

    def monitoring(self, t, natural):
        mon = self.regime.monitoring
        if mon.kind == "static":
            return float(mon.scheduled(t))
        if mon.kind == "relaxed" and mon.scheduled(t):
            return 1.0
        return natural


class _Engine:
    """Joint sampler / exact branching evaluator of the structural equations."""

    def __init__(self, cfg: ScenarioConfig, *, n: int = 1, rng: np.random.Generator | None = None,
                 branching: bool = False, history: bool = True, final_latent: bool = False,
                 max_branches: int = MAX_BRANCHES):
        if branching and not cfg.discrete:
            raise InvalidConfig("exact enumeration requires a discrete scenario")
        self.cfg = cfg
        self.branching = branching
        self.rng = rng
        self.history = history
        self.final_latent = final_latent
        self.max_branches = max_branches
        self.s: dict[str, np.ndarray] = {"mass": np.full(n, 1.0 / n if branching else 1.0)}

    @property
    def size(self) -> int:
        return len(self.s["mass"])

    def _take(self, idx: np.ndarray, mass: np.ndarray):
        self.s = {k: v[idx] for k, v in self.s.items()}
        self.s["mass"] = mass
        if self.size > self.max_branches:
            raise StateSpaceTooLarge(f"more than {self.max_branches} branches")

    def binary(self, p1) -> np.ndarray:
        p1 = np.broadcast_to(np.asarray(p1, dtype=float), (self.size,))
        if not self.branching:
            return (self.rng.random(self.size) < p1).astype(np.int8)
        m = self.s["mass"]
        m0, m1 = m * (1.0 - p1), m * p1
        k0, k1 = np.flatnonzero(m0 > 0), np.flatnonzero(m1 > 0)
        self._take(np.concatenate([k0, k1]), np.concatenate([m0[k0], m1[k1]]))
        return np.concatenate([np.zeros(len(k0), np.int8), np.ones(len(k1), np.int8)])

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        probs = np.asarray(probs, dtype=float)
        if not self.branching:
            u = self.rng.random(self.size)
            cum = np.cumsum(probs, axis=1)
            return np.minimum((u[:, None] >= cum[:, :-1]).sum(axis=1), probs.shape[1] - 1)
        m = self.s["mass"][:, None] * probs
        rows, cols = np.nonzero(m > 0)
        order = np.lexsort((rows, cols))
        rows, cols = rows[order], cols[order]
        self._take(rows, m[rows, cols])
        return cols

    def normal(self) -> np.ndarray:
        return self.rng.standard_normal(self.size)

    def merge(self):
        """Collapse branches with identical state by summing their masses."""
        if not self.branching or self.size == 0:
            return
        keys = [k for k in self.s if k != "mass"]
        cols = []
        for k in keys:
            v = self.s[k]
            cols.append(v.reshape(self.size, -1).astype(float))
        mat = np.nan_to_num(np.hstack(cols), nan=-1.0)
        _, first, inv = np.unique(mat, axis=0, return_index=True, return_inverse=True)
        mass = np.bincount(inv.ravel(), weights=self.s["mass"], minlength=len(first))
        self.s = {k: self.s[k][first] for k in keys}
        self.s["mass"] = mass

    def view(self, eq: str, t: int) -> _View:
        return _View({**self.s, "t": t}, eq)

    def _baseline(self):
        cfg = self.cfg
        self.s["u1"] = self.binary(cfg.u1_p)
        lat = cfg.latent_a1c
        if cfg.discrete:
            eta = np.broadcast_to(lat["baseline_u1"] * self.s["u1"], (self.size,))
            idx = self.categorical(_ordinal_probs(lat["baseline_cutpoints"], eta))
            i0 = np.asarray(lat["levels"])[idx]
        else:
            eps = self.normal()
            i0 = A1C_FLOOR + np.abs(lat["baseline_mean"] - A1C_FLOOR + lat["baseline_u1"] * self.s["u1"]
                                    + lat["baseline_sd"] * eps)
        n = self.size
        self.s.update(i0=i0.astype(float), i=i0.astype(float), prev_a1=np.zeros(n, np.int8),
                      prev_n=np.ones(n, np.int8), alive=np.ones(n, bool),
                      fail=np.full(n, self.cfg.horizon + 1, np.int16),
                      u2=np.zeros(n, np.int8), a1=np.zeros(n, np.int8), n=np.zeros(n, np.int8))
        if self.history:
            w = cfg.horizon + 1
            self.s.update(h_y=np.zeros((n, w), np.int8), h_a1=np.zeros((n, w), np.int8),
                          h_a2=np.zeros((n, w), np.int8), h_n=np.zeros((n, w), np.int8),
                          h_i=np.full((n, w), np.nan), length=np.ones(n, np.int16))
            self.s["h_i"][:, 0] = self.s["i"]

    def _latent_next(self, t: int) -> np.ndarray:
        cfg, lat = self.cfg, self.cfg.latent_a1c
        if cfg.discrete:
            eta = latent_shift(cfg, self.view("latent_a1c", t), cfg.reference_a1c)
            probs = _ordinal_probs(lat["cutpoints"], np.broadcast_to(eta, (self.size,)))
            idx = self.categorical(probs)
            return np.asarray(lat["levels"])[idx]
        eps = self.normal()
        mean = lat["mean"]
        return mean + latent_shift(cfg, self.view("latent_a1c", t), mean) + lat["sd"] * eps

    def run(self, intervention: Intervention | None = None) -> "_Engine":
        cfg = self.cfg
        iv = intervention if intervention is not None and intervention.regime is not None else None
        self._baseline()
        K = cfg.K
        for t in range(K + 1):
            # A1(t)
            if iv is None:
                p = treatment_prob(cfg, self.view("treatment", t))
            else:
                p = iv.treatment(t, self.s["prev_a1"], self.s["prev_n"], self.s["i"])
            p = np.where(self.s["alive"], p, self.s["prev_a1"])
            self.s["a1"] = self.binary(p)
            # A2(t)
            p = 0.0 if iv is not None else censoring_prob(cfg, self.view("censoring", t))
            p = np.where(self.s["alive"], p, 0.0)
            a2 = self.binary(p)
            if self.history:
                live = self.s["alive"]
                self.s["h_a1"][live, t] = self.s["a1"][live]
                self.s["h_a2"][live, t] = a2[live]
                cens = live & (a2 == 1)
                self.s["h_n"][cens, t] = self.s["prev_n"][cens]
            self.s["alive"] = self.s["alive"] & (a2 == 0)
            # U2(t)
            p = np.where(self.s["alive"], u2_prob(cfg, self.view("u2", t)), 0.0)
            self.s["u2"] = self.binary(p)
            # N(t)
            p = monitoring_prob(cfg, self.view("monitoring", t))
            if iv is not None:
                p = iv.monitoring(t, p)
            p = np.where(self.s["alive"], p, 0.0)
            self.s["n"] = self.binary(p)
            # Y(t+1)
            p = np.where(self.s["alive"], outcome_prob(cfg, self.view("outcome", t)), 0.0)
            self.s["y_next"] = self.binary(p)
            # I0(t+1)
            if t < K or not self.branching or self.final_latent:
                i0_next = self._latent_next(t)
                fresh = self.s["alive"] & (self.s["n"] == 1) & (self.s["y_next"] == 0)
                i_next = np.where(fresh, i0_next, self.s["i"])
            else:
                # the final latent value is never used by any estimand
                i0_next = self.s["i0"]
                i_next = self.s["i"]
            s = self.s
            y_next = s.pop("y_next")
            live = s["alive"]
            failing = live & (y_next == 1)
            if self.history:
                s["h_n"][live, t] = s["n"][live]
                rows = live if t == K else failing
                s["h_y"][rows, t + 1] = y_next[rows]
                s["h_a1"][rows, t + 1] = s["a1"][rows]
                s["h_n"][rows, t + 1] = s["n"][rows]
                s["h_i"][live, t + 1] = i_next[live]
                s["length"] = np.where(live, t + 2, s["length"]).astype(np.int16)
            s["fail"] = np.where(failing, t + 1, s["fail"]).astype(np.int16)
            s["alive"] = live & (y_next == 0)
            s["prev_a1"] = np.where(live, s["a1"], s["prev_a1"]).astype(np.int8)
            s["prev_n"] = np.where(live, s["n"], s["prev_n"]).astype(np.int8)
            s["i"] = np.where(s["alive"], i_next, s["i"])
            s["i0"] = np.where(s["alive"], i0_next, s["i0"])
            if self.branching:
                dead = ~s["alive"]
                s["u1"] = np.where(dead, 0, s["u1"]).astype(np.int8)
                for k in ("u2", "a1", "n"):
                    s[k] = np.zeros(self.size, np.int8)
                for k in ("i", "i0"):
                    s[k] = np.where(dead, 0.0, s[k])
                if not self.history:
                    s["prev_a1"] = np.where(dead, 0, s["prev_a1"]).astype(np.int8)
                    s["prev_n"] = np.where(dead, 0, s["prev_n"]).astype(np.int8)
                self.merge()
        return self

    def cohort(self, prefix: str = "P") -> CohortTable:
        s = self.s
        n = self.size
        width = len(str(n))
        ids = np.array([f"{prefix}{k + 1:0{max(6, width)}d}" for k in range(n)], dtype=object)
        return CohortTable(ids=ids, length=s["length"].astype(np.int64), y=s["h_y"], a1=s["h_a1"],
                           a2=s["h_a2"], n=s["h_n"], i=s["h_i"], horizon=self.cfg.horizon)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed))


def simulate_cohort(scenario: ScenarioConfig, n: int, seed=0) -> CohortTable:
    """Draw ``n`` observed trajectories from the natural course of the scenario."""
    if n < 1:
        raise InvalidConfig("n must be >= 1")
    eng = _Engine(scenario, n=n, rng=_rng(seed)).run()
    return eng.cohort()


@dataclass(frozen=True)
class CounterfactualTruth:
    """Counterfactual cumulative risk ``P(Y(h) = 1)`` at horizons ``h = 1 .. K+1``."""

    intervention: RegimeSpec | None
    risk: tuple[float, ...]
    method: str
    mc_se: tuple[float, ...] | None = None

    def at(self, h: int) -> float:
        return 0.0 if h == 0 else self.risk[h - 1]

    def se_at(self, h: int) -> float:
        if self.mc_se is None or h == 0:
            return 0.0
        return self.mc_se[h - 1]


def _risk_from_fail(fail: np.ndarray, mass: np.ndarray, horizon: int) -> tuple[float, ...]:
    total = mass.sum()
    return tuple(float(mass[fail <= h].sum() / total) for h in range(1, horizon + 1))


def _intervention_seed(seed, regime: RegimeSpec | None, crn: bool) -> np.random.SeedSequence:
    base = seed if isinstance(seed, int) else int(np.random.SeedSequence(seed).generate_state(1)[0])
    if crn or regime is None:
        return np.random.SeedSequence(base)
    return np.random.SeedSequence([base, zlib.crc32(regime.regime_id.encode())])


def counterfactual_truth_mc(scenario: ScenarioConfig, intervention: RegimeSpec | None, replicates: int,
                            seed=0, *, crn: bool = False, chunk: int = 250_000) -> CounterfactualTruth:
    """Monte Carlo counterfactual risk under ``intervention`` (natural course if None).

    Each intervention gets its own stream derived from ``seed`` and the
    regime id; with ``crn=True`` all interventions share the master stream,
    so contrasts use common random numbers.
    """
    if replicates < 1:
        raise InvalidConfig("replicates must be >= 1")
    ss = _intervention_seed(seed, intervention, crn)
    n_chunks = -(-replicates // chunk)
    sizes = [chunk] * (n_chunks - 1) + [replicates - chunk * (n_chunks - 1)]
    counts = np.zeros(scenario.horizon)
    for size, child in zip(sizes, ss.spawn(n_chunks)):
        eng = _Engine(scenario, n=size, rng=np.random.default_rng(child), history=False)
        eng.run(Intervention(intervention))
        fail = eng.s["fail"]
        counts += np.array([(fail <= h).sum() for h in range(1, scenario.horizon + 1)])
    risk = counts / replicates
    se = np.sqrt(risk * (1 - risk) / replicates)
    return CounterfactualTruth(intervention, tuple(float(r) for r in risk), "monte-carlo",
                               tuple(float(v) for v in se))


def enumerate_truth(scenario: ScenarioConfig, intervention: RegimeSpec | None,
                    max_branches: int = MAX_BRANCHES) -> CounterfactualTruth:
    """Exact counterfactual risk by summing over every branch of the process."""
    eng = _Engine(scenario, branching=True, history=False, max_branches=max_branches)
    eng.run(Intervention(intervention))
    return CounterfactualTruth(intervention, _risk_from_fail(eng.s["fail"], eng.s["mass"], scenario.horizon),
                               "enumeration", tuple(0.0 for _ in range(scenario.horizon)))


@dataclass(frozen=True)
class ObservedLaw:
    """Distinct observed trajectories with their exact probabilities."""

    cohort: CohortTable
    mass: np.ndarray
    propensities: Propensities


def _columns(cohort: CohortTable, K: int) -> np.ndarray:
    """Observed cells in temporal order ``y, i, a1, a2, n`` per period; -1 marks absent cells."""
    present = cohort.present
    cols = []
    for t in range(K + 1):
        for arr in (cohort.y, cohort.i, cohort.a1, cohort.a2, cohort.n):
            cols.append(np.where(present[:, t], arr[:, t].astype(float), -1.0))
    return np.column_stack(cols)


def _group_ids(cols: np.ndarray) -> list[np.ndarray]:
    """Group label of every trajectory's prefix through each column."""
    out = []
    for c in range(cols.shape[1]):
        _, inv = np.unique(cols[:, : c + 1], axis=0, return_inverse=True)
        out.append(inv.ravel())
    return out


def observed_law(scenario: ScenarioConfig, max_branches: int = MAX_BRANCHES,
                 final_latent: bool = False) -> ObservedLaw:
    """Enumerate the natural course and marginalise over the latent variables.

    True propensities are ratios of prefix probabilities: for a decision
    cell, the mass of the prefix including the observed value divided by the
    mass of the prefix just before it.
    """
    eng = _Engine(scenario, branching=True, history=True, final_latent=final_latent,
                  max_branches=max_branches).run()
    raw = eng.cohort("E")
    cols_full = _columns(raw, scenario.horizon)
    _, first, inv = np.unique(cols_full, axis=0, return_index=True, return_inverse=True)
    mass = np.bincount(inv.ravel(), weights=eng.s["mass"], minlength=len(first))
    cohort = raw.take(first, ids=[f"E{k + 1:06d}" for k in range(len(first))])
    cols = _columns(cohort, scenario.K)
    groups = _group_ids(cols)
    cond = np.ones(cols.shape)
    for c in range(1, cols.shape[1]):
        num = np.bincount(groups[c], weights=mass)[groups[c]]
        den = np.bincount(groups[c - 1], weights=mass)[groups[c - 1]]
        cond[:, c] = num / den
    width = cohort.width
    probs = {name: np.ones((cohort.n_patients, width)) for name in ("treatment", "censoring", "monitoring")}
    for t in range(scenario.K + 1):
        probs["treatment"][:, t] = cond[:, 5 * t + 2]
        probs["censoring"][:, t] = cond[:, 5 * t + 3]
        probs["monitoring"][:, t] = cond[:, 5 * t + 4]
    return ObservedLaw(cohort, mass, Propensities(**probs))


def check_positivity(law: ObservedLaw, regime: RegimeSpec, K: int) -> None:
    """Raise if a regime-consistent history makes the required assignment impossible."""
    cohort, mass = law.cohort, law.mass
    cols = _columns(cohort, K)
    groups = _group_ids(cols)
    req_a1, req_n = regime_requirements(cohort, regime, K)
    adh = adherence_matrix(cohort, regime, K)
    for t in range(K + 1):
        at_risk = cohort.present[:, t] & (cohort.y[:, t] == 0)
        if t > 0:
            at_risk &= adh[:, t - 1]
        checks = [(5 * t + 2, req_a1[:, t]), (5 * t + 3, np.zeros(cohort.n_patients, np.int8))]
        if (req_n[:, t] >= 0).all():
            checks.append((5 * t + 4, req_n[:, t]))
        prefix_ok = np.ones(cohort.n_patients, bool)
        for c, required in checks:
            g_prev = groups[c - 1]
            val = cols[:, c]
            tot = np.bincount(g_prev, weights=mass)
            hit = np.bincount(g_prev, weights=mass * (val == 1))
            p1 = hit[g_prev] / tot[g_prev]
            p_req = np.where(required == 1, p1, 1.0 - p1)
            bad = at_risk & prefix_ok & (p_req <= 0.0)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                node = ("A1", "A2", "N")[(c - 2) % 5]
                raise PositivityViolation(
                    f"{regime.regime_id}: required {node}({t}) = {int(required[k])} has probability 0 "
                    f"after an attainable regime-consistent history")
            # later checks in this period condition on following the earlier assignment
            prefix_ok &= val == required


def ipw_population_curve(scenario: ScenarioConfig, regime: RegimeSpec, mode: str | None = None,
                         law: ObservedLaw | None = None):
    """Population version of the IPW survival curve using the true propensities."""
    law = law or observed_law(scenario)
    mode = mode or regime.mode
    check_positivity(law, regime, scenario.K)
    w = cumulative_weights(law.cohort, [regime], law.propensities, mode, scenario.K, case_weights=law.mass)
    return survival_curve(hazard_series(w, law.cohort, regime, scenario.K, case_weights=law.mass))


def ipw_population_value(scenario: ScenarioConfig, regime: RegimeSpec, mode: str | None = None,
                         t0: int | None = None, law: ObservedLaw | None = None) -> float:
    """Risk at horizon ``t0 + 1`` from the IPW hazard evaluated as an exact expectation."""
    t0 = scenario.K if t0 is None else t0
    curve = ipw_population_curve(scenario, regime, mode, law)
    s = curve.at(t0 + 1)
    if s is None:
        raise PositivityViolation(f"{regime.regime_id}: no population support at t = {t0}")
    return 1.0 - s
