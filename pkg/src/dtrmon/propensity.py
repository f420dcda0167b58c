"""Pooled logistic propensity models and nonparametric stabilising numerators."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .cohort import CohortTable, FeatureVector
from .features import TARGETS, CohortFeatures, FeatureMismatch, FeatureSpec, design, encode, risk_set
from .regimes import RegimeSpec, adherence_matrix

log = logging.getLogger(__name__)

TOL = 1e-8
MAX_ITER = 100
RIDGE = 1e-6
#: Coefficient magnitude beyond which an unpenalised fit is treated as separated.
SEPARATION_BOUND = 25.0


class PropensityError(RuntimeError):
    pass


class Separation(PropensityError):
    pass


class Singular(PropensityError):
    pass


class EmptyRiskSet(PropensityError):
    pass


class NonConvergence(PropensityError):
    pass


@dataclass(frozen=True)
class ModelFit:
    """Fitted pooled logistic model.

    ``coefficients`` is aligned with ``feature_names``; columns found to be
    linear combinations of earlier ones are listed in ``dropped`` and carry a
    zero coefficient.  When the outcome is constant in the risk set the fit
    is degenerate: ``constant`` holds the boundary probability and the
    coefficients are all zero.
    """

    target: str
    feature_names: tuple[str, ...]
    coefficients: tuple[float, ...]
    iterations: int
    final_gradient_norm: float
    converged: bool = True
    ridge: float = 0.0
    dropped: tuple[str, ...] = ()
    constant: float | None = None
    n_obs: int = 0
    n_events: int = 0
    warnings: tuple[str, ...] = ()
    terms: tuple[str, ...] = ()

    @property
    def convergence(self) -> dict:
        return {"iterations": self.iterations, "final_gradient_norm": self.final_gradient_norm,
                "converged": self.converged}

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.coefficients, dtype=float)

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        if X.shape[1] != len(self.feature_names):
            raise FeatureMismatch(f"design has {X.shape[1]} columns, model expects {len(self.feature_names)}")
        if self.constant is not None:
            return np.full(X.shape[0], self.constant)
        return expit(X @ self.beta)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "terms": list(self.terms),
            "feature_names": list(self.feature_names),
            "coefficients": list(self.coefficients),
            "convergence": self.convergence,
            "ridge": self.ridge,
            "dropped": list(self.dropped),
            "constant": self.constant,
            "n_obs": self.n_obs,
            "n_events": self.n_events,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelFit":
        conv = d.get("convergence", {})
        return cls(
            target=d["target"], feature_names=tuple(d["feature_names"]),
            coefficients=tuple(float(c) for c in d["coefficients"]),
            iterations=int(conv.get("iterations", 0)),
            final_gradient_norm=float(conv.get("final_gradient_norm", 0.0)),
            converged=bool(conv.get("converged", True)), ridge=float(d.get("ridge", 0.0)),
            dropped=tuple(d.get("dropped", ())), constant=d.get("constant"),
            n_obs=int(d.get("n_obs", 0)), n_events=int(d.get("n_events", 0)),
            warnings=tuple(d.get("warnings", ())), terms=tuple(d.get("terms", ())),
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelFit":
        return cls.from_dict(json.loads(text))


def log_likelihood(beta: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> float:
    eta = X @ beta
    ll = y * eta - np.logaddexp(0.0, eta)
    return float(ll.sum() if w is None else (w * ll).sum())


def score(beta: np.ndarray, X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Gradient of :func:`log_likelihood`."""
    r = y - expit(X @ beta)
    if w is not None:
        r = w * r
    return X.T @ r


def independent_columns(X: np.ndarray, w: np.ndarray | None = None, tol: float = 1e-9) -> np.ndarray:
    """Indices of columns kept after dropping those aliased with earlier ones.

    Columns are scanned left to right; a column is kept when its residual
    after projection on the kept columns is not negligible.
    """
    G = X.T @ (X if w is None else X * w[:, None])
    keep: list[int] = []
    L = np.zeros((0, 0))
    for j in range(G.shape[0]):
        gjj = G[j, j]
        if gjj <= 0:
            continue
        if keep:
            v = solve_triangular(L, G[keep, j], lower=True)
            resid = gjj - v @ v
        else:
            v = np.zeros(0)
            resid = gjj
        if resid > tol * gjj:
            d = np.sqrt(resid)
            size = len(keep)
            L2 = np.zeros((size + 1, size + 1))
            L2[:size, :size] = L
            L2[size, :size] = v
            L2[size, size] = d
            L = L2
            keep.append(j)
    return np.asarray(keep, dtype=np.int64)


def _newton(X, y, w, ridge, tol, max_iter):
    p_dim = X.shape[1]
    beta = np.zeros(p_dim)

    def objective(b):
        return log_likelihood(b, X, y, w) - ridge * float(b @ b)

    obj = objective(beta)
    grad = score(beta, X, y, w) - 2 * ridge * beta
    it = 0
    while it < max_iter:
        gnorm = float(np.max(np.abs(grad))) if p_dim else 0.0
        if gnorm <= tol:
            return beta, it, gnorm, True
        it += 1
        p = expit(X @ beta)
        hw = p * (1 - p) if w is None else w * p * (1 - p)
        H = X.T @ (X * hw[:, None]) + 2 * ridge * np.eye(p_dim)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise Singular("information matrix is singular") from exc
        if not np.all(np.isfinite(step)):
            raise Singular("non-finite Newton step")
        s = 1.0
        while True:
            cand = beta + s * step
            new = objective(cand)
            if new >= obj - 1e-12 * (1.0 + abs(obj)) or s < 1e-10:
                break
            s *= 0.5
        beta, obj = cand, new
        grad = score(beta, X, y, w) - 2 * ridge * beta
    gnorm = float(np.max(np.abs(grad))) if p_dim else 0.0
    return beta, it, gnorm, gnorm <= tol


def fit_logistic(X: np.ndarray, y: np.ndarray, names: Sequence[str], *, target: str = "treatment",
                 weights: np.ndarray | None = None, tol: float = TOL, max_iter: int = MAX_ITER,
                 on_separation: str = "ridge", terms: Sequence[str] = ()) -> ModelFit:
    """Maximum-likelihood logistic regression by damped Newton iterations.

    Each Newton step is halved until the log-likelihood does not decrease.
    Iteration stops once the max-norm of the score is at most ``tol``.  If
    the unpenalised fit diverges (separation), it is refitted with a ridge
    penalty ``1e-6 * ||beta||^2`` and a warning is recorded, unless
    ``on_separation="raise"``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    names = tuple(names)
    if X.shape[0] == 0:
        raise EmptyRiskSet(f"{target} model has an empty risk set")
    if X.shape[1] != len(names):
        raise FeatureMismatch("column names do not match design width")
    w = None if weights is None else np.asarray(weights, dtype=float)
    n_obs = int(X.shape[0])
    n_events = int(round(float(y.sum() if w is None else (w * y).sum())))
    total = float(len(y) if w is None else w.sum())
    pos = float(y.sum() if w is None else (w * y).sum())
    if pos == 0.0 or pos == total:
        return ModelFit(target, names, tuple(0.0 for _ in names), 0, 0.0, True, 0.0, (),
                        constant=float(pos > 0), n_obs=n_obs, n_events=n_events,
                        warnings=("outcome constant in risk set; boundary probability used",),
                        terms=tuple(terms))

    keep = independent_columns(X, w)
    dropped = tuple(names[j] for j in range(len(names)) if j not in set(keep.tolist()))
    Xk = X[:, keep]
    warns = [f"aliased column dropped: {d}" for d in dropped]
    ridge = 0.0
    beta, it, gnorm, ok = _newton(Xk, y, w, 0.0, tol, max_iter)
    if not ok or np.max(np.abs(beta), initial=0.0) > SEPARATION_BOUND:
        if on_separation == "raise":
            raise Separation(f"{target} model: likelihood appears unbounded (separation)")
        ridge = RIDGE
        warns.append("separation detected; refitted with ridge penalty 1e-6")
        log.warning("%s model: separation detected, refitting with ridge %g", target, ridge)
        beta, it, gnorm, ok = _newton(Xk, y, w, ridge, tol, max_iter)
    if not np.all(np.isfinite(beta)):
        raise Singular(f"{target} model produced non-finite coefficients")
    full = np.zeros(len(names))
    full[keep] = beta
    return ModelFit(target, names, tuple(float(b) for b in full), it, gnorm, ok, ridge, dropped,
                    n_obs=n_obs, n_events=n_events, warnings=tuple(warns), terms=tuple(terms))


def _outcome(cohort: CohortTable, target: str, mask: np.ndarray) -> np.ndarray:
    arr = {"treatment": cohort.a1, "censoring": cohort.a2, "monitoring": cohort.n}[target]
    return arr[mask].astype(float)


def fit_pooled_logistic(cohort: CohortTable, target: str, features: FeatureSpec | None = None, *,
                        case_weights: np.ndarray | None = None, feats: CohortFeatures | None = None,
                        on_separation: str = "ridge") -> ModelFit:
    """Fit one assignment model on person-periods pooled over time."""
    if target not in TARGETS:
        raise FeatureMismatch(f"unknown model target {target!r}")
    features = features or FeatureSpec()
    feats = feats or CohortFeatures.build(cohort)
    mask = risk_set(cohort, target)
    terms = features.terms_for(target)
    X, names = design(cohort, terms, mask, feats)
    y = _outcome(cohort, target, mask)
    w = None
    if case_weights is not None:
        w = np.broadcast_to(np.asarray(case_weights, dtype=float)[:, None], mask.shape)[mask]
    return fit_logistic(X, y, names, target=target, weights=w, on_separation=on_separation, terms=terms)


def predict(fit: ModelFit, features: FeatureVector, z_names: Sequence[str] = (),
            z_monitored: Sequence[str] = ()) -> float:
    """Probability of a positive outcome for one feature vector."""
    row = encode(features, fit.terms, z_names, z_monitored)
    if len(row) != len(fit.feature_names):
        raise FeatureMismatch(f"feature vector encodes {len(row)} columns, model expects {len(fit.feature_names)}")
    return float(fit.predict_matrix(row[None, :])[0])


@dataclass(frozen=True)
class Propensities:
    """Probabilities of the *observed* assignments, each of shape (n, horizon + 1).

    Cells outside the relevant risk set hold 1.0 so that products over time
    can be taken without masking.
    """

    treatment: np.ndarray
    censoring: np.ndarray
    monitoring: np.ndarray

    @property
    def exposure(self) -> np.ndarray:
        return self.treatment * self.censoring


def fit_models(cohort: CohortTable, features: FeatureSpec | None = None, *,
               targets: Sequence[str] = TARGETS, case_weights: np.ndarray | None = None,
               on_separation: str = "ridge") -> dict[str, ModelFit]:
    feats = CohortFeatures.build(cohort)
    return {t: fit_pooled_logistic(cohort, t, features, case_weights=case_weights, feats=feats,
                                   on_separation=on_separation) for t in targets}


def compute_propensities(cohort: CohortTable, fits: Mapping[str, ModelFit]) -> Propensities:
    """Evaluate fitted models at every decision cell of the cohort."""
    feats = CohortFeatures.build(cohort)
    out = {}
    for target, arr in (("treatment", cohort.a1), ("censoring", cohort.a2), ("monitoring", cohort.n)):
        probs = np.ones(arr.shape)
        fit = fits.get(target)
        if fit is not None:
            mask = risk_set(cohort, target)
            X, names = design(cohort, fit.terms, mask, feats)
            if tuple(names) != fit.feature_names:
                raise FeatureMismatch(f"{target} model was fitted on different features")
            p1 = fit.predict_matrix(X)
            obs = arr[mask]
            probs[mask] = np.where(obs == 1, p1, 1.0 - p1)
        out[target] = probs
    return Propensities(**out)


@dataclass(frozen=True)
class NumeratorEstimate:
    regime: RegimeSpec
    t: int
    value: float | None
    n_at_risk: float
    n_adherent: float = 0.0

    @property
    def defined(self) -> bool:
        return self.value is not None


def numerator_series(cohort: CohortTable, regime: RegimeSpec, t_max: int,
                     case_weights: np.ndarray | None = None,
                     adherence: np.ndarray | None = None) -> list[NumeratorEstimate]:
    """Proportions of continuing followers for ``t = 0 .. t_max``."""
    adh = adherence if adherence is not None else adherence_matrix(cohort, regime, t_max)
    cw = np.ones(cohort.n_patients) if case_weights is None else np.asarray(case_weights, dtype=float)
    present = cohort.present
    out = []
    for t in range(t_max + 1):
        at_risk = present[:, t] & (cohort.y[:, t] == 0)
        if t > 0:
            at_risk &= adh[:, t - 1]
        denom = float(cw[at_risk].sum())
        num = float(cw[adh[:, t]].sum())
        if denom == 0.0:
            out.append(NumeratorEstimate(regime, t, None, 0, 0.0))
        else:
            out.append(NumeratorEstimate(regime, t, num / denom, denom, num))
    return out


def estimate_numerator(cohort: CohortTable, regime: RegimeSpec, t: int,
                       case_weights: np.ndarray | None = None) -> NumeratorEstimate:
    """Marginal probability of following ``regime`` at ``t`` among followers through ``t - 1``."""
    return numerator_series(cohort, regime, t, case_weights)[t]
