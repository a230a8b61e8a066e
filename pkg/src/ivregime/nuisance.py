"""Nuisance models: logistic regressions, Cox regression and censoring survival.

All fitters are plain Newton-Raphson with step halving. Models are frozen
once fitted and can be shared freely between estimators.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from ivregime.data import Dataset, InvalidArgumentError
from ivregime.survival import StepSurvival, km_survival

PROB_CLAMP = 1e-10
CENSOR_FLOOR = 1e-3


class SeparationError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class MonotoneLikelihoodError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


# -- design matrices ---------------------------------------------------------

_TERM = re.compile(r"^(1|Z|A|L\d+|A\*L\d+|Z\*L\d+)$")


def design_matrix(columns: Sequence[str], z, L, a) -> np.ndarray:
    """Build rows from term names: ``1``, ``Z``, ``A``, ``Lj`` and ``A*Lj``.

    ``z`` and ``a`` may be scalars or length-n arrays; ``L`` is (n, p) or (p,).
    """
    L = np.atleast_2d(np.asarray(L, dtype=float))
    n = L.shape[0]
    z = np.broadcast_to(np.asarray(z, dtype=float), (n,))
    a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
    out = np.empty((n, len(columns)))
    for k, name in enumerate(columns):
        if not _TERM.match(name):
            raise ConfigurationError(f"unknown design term {name!r}")
        if name == "1":
            out[:, k] = 1.0
        elif name == "Z":
            out[:, k] = z
        elif name == "A":
            out[:, k] = a
        else:
            prefix, _, lname = name.rpartition("*")
            j = int(lname[1:]) - 1
            if not 0 <= j < L.shape[1]:
                raise ConfigurationError(f"{name!r} refers to a missing covariate")
            col = L[:, j]
            if prefix == "A":
                col = a * col
            elif prefix == "Z":
                col = z * col
            out[:, k] = col
    return out


def covariate_terms(p: int) -> list[str]:
    return [f"L{j + 1}" for j in range(p)]


def treatment_design(p: int) -> list[str]:
    """(1, Z, L) for pi(A | Z, L)."""
    return ["1", "Z", *covariate_terms(p)]


def instrument_design(p: int, intercept_only: bool = False) -> list[str]:
    return ["1"] if intercept_only else ["1", *covariate_terms(p)]


def outcome_cox_design(p: int, with_instrument: bool = True) -> list[str]:
    """(Z, L, A, A*L), or (L, A, A*L) when the instrument is left out."""
    lt = covariate_terms(p)
    head = ["Z"] if with_instrument else []
    return [*head, *lt, "A", *(f"A*{x}" for x in lt)]


# -- logistic regression -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class LogisticModel:
    coefficients: np.ndarray
    columns: tuple[str, ...]
    iterations: int = 0

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.coefficients.size:
            raise InvalidArgumentError(
                f"row has {X.shape[1]} entries, model expects {self.coefficients.size}"
            )
        return np.clip(expit(X @ self.coefficients), PROB_CLAMP, 1 - PROB_CLAMP)

    def predict_terms(self, z, L, a=0) -> np.ndarray:
        return self.predict(design_matrix(self.columns, z, L, a))


def _logistic_loglik(X, y, beta):
    eta = X @ beta
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def fit_logistic(X, y, columns: Sequence[str] | None = None, max_iter: int = 100) -> LogisticModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, q = X.shape
    if y.size != n:
        raise InvalidArgumentError("X and y lengths differ")
    if n < q:
        raise InvalidArgumentError("fewer rows than columns")
    if not np.all((y == 0) | (y == 1)):
        raise InvalidArgumentError("response must be binary")
    if y.min() == y.max():
        raise InvalidArgumentError("response contains a single class")
    columns = tuple(columns) if columns is not None else tuple(f"x{k}" for k in range(q))
    beta = np.zeros(q)
    ll = _logistic_loglik(X, y, beta)
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        score = X.T @ (y - p)
        info = (X * (p * (1 - p))[:, None]).T @ X
        if np.max(np.abs(score)) < 1e-8:
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise SeparationError("information matrix is singular") from exc
        scale = 1.0
        while True:
            cand = beta + scale * step
            cand_ll = _logistic_loglik(X, y, cand)
            if cand_ll >= ll - 1e-12 or scale < 1e-10:
                break
            scale /= 2
        beta, ll = cand, cand_ll
        if np.linalg.norm(beta) > 1e3:
            raise SeparationError("coefficients diverged: the classes look perfectly separated")
        if np.max(np.abs(scale * step)) < 1e-10:
            break
    else:
        raise ConvergenceError(f"logistic regression did not converge in {max_iter} iterations")
    p = expit(X @ beta)
    if np.all(np.abs(y - p) < 1e-6):
        raise SeparationError("fitted probabilities reproduce the response: perfect separation")
    return LogisticModel(beta, columns, it)


def predict_logistic(model: LogisticModel, row) -> float:
    row = np.asarray(row, dtype=float).ravel()
    return float(model.predict(row[None, :])[0])


# -- Cox regression ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CoxModel:
    """Breslow-tied Cox fit with its step baseline cumulative hazard."""

    beta: np.ndarray
    columns: tuple[str, ...]
    baseline_times: np.ndarray
    baseline_cumhaz: np.ndarray
    iterations: int = 0
    loglik: float = float("nan")

    def cumhaz0(self, s) -> np.ndarray:
        idx = np.searchsorted(self.baseline_times, s, side="right") - 1
        return np.where(idx >= 0, self.baseline_cumhaz[np.maximum(idx, 0)], 0.0)

    def cumhaz0_left(self, s) -> np.ndarray:
        idx = np.searchsorted(self.baseline_times, s, side="left") - 1
        return np.where(idx >= 0, self.baseline_cumhaz[np.maximum(idx, 0)], 0.0)

    def relative_risk(self, X) -> np.ndarray:
        return np.exp(np.atleast_2d(X) @ self.beta)

    def design(self, z, L, a) -> np.ndarray:
        return design_matrix(self.columns, z, L, a)


def _cox_pieces(X, time, status):
    order = np.argsort(time, kind="stable")
    X, time, status = X[order], time[order], status[order]
    ev_times, d = np.unique(time[status == 1], return_counts=True)
    start = np.searchsorted(time, ev_times, side="left")
    x_events = X[status == 1].sum(axis=0)
    return X, time, status, ev_times, d, start, x_events


def _cox_terms(beta, X, d, start, x_events, need_info=True):
    eta = X @ beta
    shift = eta.max()
    r = np.exp(eta - shift)
    S0 = np.cumsum(r[::-1])[::-1][start]
    S1 = np.cumsum((X * r[:, None])[::-1], axis=0)[::-1][start]
    loglik = float(x_events @ beta - np.sum(d * (np.log(S0) + shift)))
    xbar = S1 / S0[:, None]
    score = x_events - (d[:, None] * xbar).sum(axis=0)
    info = None
    if need_info:
        outer = X[:, :, None] * X[:, None, :] * r[:, None, None]
        S2 = np.cumsum(outer[::-1], axis=0)[::-1][start]
        info = np.einsum("j,jkl->kl", d, S2 / S0[:, None, None] - xbar[:, :, None] * xbar[:, None, :])
    return loglik, score, info


def fit_cox(X, time, status, columns: Sequence[str] | None = None, max_iter: int = 100) -> CoxModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    time = np.asarray(time, dtype=float)
    status = np.asarray(status)
    n, q = X.shape
    if time.size != n or status.size != n:
        raise InvalidArgumentError("design, times and status lengths differ")
    n_events = int(np.sum(status == 1))
    if n_events == 0:
        raise InvalidArgumentError("Cox regression needs at least one event")
    if q >= n_events:
        raise InvalidArgumentError("Cox regression needs more events than columns")
    columns = tuple(columns) if columns is not None else tuple(f"x{k}" for k in range(q))
    Xs, ts, ss, ev_times, d, start, x_events = _cox_pieces(X, time, status)
    beta = np.zeros(q)
    ll, score, info = _cox_terms(beta, Xs, d, start, x_events)
    trace = [(0, ll, float(np.max(np.abs(score))))]
    it = 0
    converged = np.max(np.abs(score)) < 1e-8
    while not converged:
        it += 1
        if it > max_iter:
            raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations", trace)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise MonotoneLikelihoodError("singular information matrix") from exc
        scale = 1.0
        while True:
            cand = beta + scale * step
            cand_ll, _, _ = _cox_terms(cand, Xs, d, start, x_events, need_info=False)
            if cand_ll >= ll - 1e-12 or scale < 1e-10:
                break
            scale /= 2
        beta = cand
        ll, score, info = _cox_terms(beta, Xs, d, start, x_events)
        trace.append((it, ll, float(np.max(np.abs(score)))))
        if np.linalg.norm(beta) > 1e3:
            raise MonotoneLikelihoodError("coefficients diverged (monotone likelihood)")
        converged = np.max(np.abs(score)) < 1e-8 or np.max(np.abs(scale * step)) < 1e-10
    if it and np.min(np.linalg.eigvalsh(info)) < 1e-7 * n_events:
        raise MonotoneLikelihoodError(
            "partial likelihood is flat at the optimum; some coefficient tends to infinity"
        )
    r = np.exp(Xs @ beta)
    S0 = np.cumsum(r[::-1])[::-1][start]
    cumhaz = np.cumsum(d / S0)
    return CoxModel(beta, columns, ev_times, cumhaz, it, ll)


def cox_survival(model: CoxModel, s: float, z, l, a) -> float:
    if s < 0:
        raise InvalidArgumentError("s must be nonnegative")
    x = model.design(z, l, a)
    return float(np.exp(-model.cumhaz0(s) * model.relative_risk(x)[0]))


# -- censoring ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MarginalCensoring:
    """Reverse Kaplan-Meier for P(C >= s), ignoring covariates."""

    km: StepSurvival

    def survival(self, s, z=None, L=None, a=None) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.maximum(np.asarray(self.km.left_limit(s), dtype=float), CENSOR_FLOOR)


@dataclass(frozen=True, eq=False)
class CoxCensoring:
    """P(C >= s | Z, L, A) from a Cox model for the censoring hazard."""

    cox: CoxModel

    def survival(self, s, z, L, a) -> np.ndarray:
        """Evaluated for each subject row at each time: returns (n, len(s))."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        rr = self.cox.relative_risk(self.cox.design(z, L, a))
        out = np.exp(-np.outer(rr, self.cox.cumhaz0_left(s)))
        return np.maximum(out, CENSOR_FLOOR)


# -- the nuisance bundle -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class NuisanceSet:
    fZ: LogisticModel
    piA: LogisticModel
    censor: MarginalCensoring | CoxCensoring
    cox: CoxModel | None = None
    delta_floor: float = 0.05
    propensity: LogisticModel | None = None
    cox_noiv: CoxModel | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.delta_floor > 0:
            raise InvalidArgumentError("delta_floor must be positive")

    def f_instrument(self, z, L) -> np.ndarray:
        """f(Z = z | L) for each row."""
        p1 = self.fZ.predict_terms(0, L)
        z = np.broadcast_to(np.asarray(z), p1.shape)
        return np.where(z == 1, p1, 1 - p1)

    def treat_prob(self, z, L) -> np.ndarray:
        """pi(A = 1 | Z = z, L)."""
        return self.piA.predict_terms(z, L)

    def delta(self, L) -> np.ndarray:
        raw = self.treat_prob(1, L) - self.treat_prob(0, L)
        sign = np.where(raw < 0, -1.0, 1.0)
        return np.where(np.abs(raw) < self.delta_floor, sign * self.delta_floor, raw)


def delta_L(nuisance: NuisanceSet, covariates):
    """Compliance score pi(1|Z=1,L) - pi(1|Z=0,L), floored in absolute value."""
    out = nuisance.delta(covariates)
    return float(out[0]) if np.ndim(covariates) == 1 else out


def censor_survival(nuisance: NuisanceSet, s: float, z, l, a) -> float:
    if isinstance(nuisance.censor, MarginalCensoring):
        return float(nuisance.censor.survival(s))
    return float(nuisance.censor.survival([s], z, l, a)[0, 0])


def fit_nuisances(
    dataset: Dataset,
    *,
    fz_model: str = "full",
    censoring: str = "marginal",
    censor_columns: Sequence[str] | None = None,
    outcome_model: bool = True,
    baselines: bool = True,
    delta_floor: float = 0.05,
) -> NuisanceSet:
    """Fit every nuisance model an estimator may ask for on one dataset.

    ``fz_model`` is ``"full"`` for logit f(Z=1|L) linear in L or
    ``"intercept"`` for the constant model. ``censoring`` is ``"marginal"``
    (reverse Kaplan-Meier) or ``"cox"`` with design ``censor_columns``
    (default Z, L, A).
    """
    if fz_model not in ("full", "intercept"):
        raise ConfigurationError(f"fz_model must be 'full' or 'intercept', got {fz_model!r}")
    p = dataset.p
    L, z, a = dataset.covariates, dataset.instrument, dataset.treatment
    fz_cols = instrument_design(p, intercept_only=fz_model == "intercept")
    fZ = fit_logistic(design_matrix(fz_cols, z, L, a), z, fz_cols)
    pi_cols = treatment_design(p)
    piA = fit_logistic(design_matrix(pi_cols, z, L, a), a, pi_cols)
    if censoring == "marginal":
        censor = MarginalCensoring(km_survival(dataset.time, 1 - dataset.status))
    elif censoring == "cox":
        cols = list(censor_columns) if censor_columns else ["Z", *covariate_terms(p), "A"]
        ccox = fit_cox(design_matrix(cols, z, L, a), dataset.time, 1 - dataset.status, cols)
        censor = CoxCensoring(ccox)
    else:
        raise ConfigurationError(f"censoring must be 'marginal' or 'cox', got {censoring!r}")
    cox = None
    cox_noiv = None
    propensity = None
    if outcome_model:
        cols = outcome_cox_design(p)
        cox = fit_cox(design_matrix(cols, z, L, a), dataset.time, dataset.status, cols)
    if baselines:
        pcols = instrument_design(p)
        propensity = fit_logistic(design_matrix(pcols, z, L, a), a, pcols)
        if outcome_model:
            cols = outcome_cox_design(p, with_instrument=False)
            cox_noiv = fit_cox(design_matrix(cols, z, L, a), dataset.time, dataset.status, cols)
    return NuisanceSet(
        fZ=fZ,
        piA=piA,
        censor=censor,
        cox=cox,
        delta_floor=delta_floor,
        propensity=propensity,
        cox_noiv=cox_noiv,
    )
