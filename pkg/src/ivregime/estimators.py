"""Kaplan-Meier-type value estimators and the derived value functionals.

Every estimator here is a weighted product-limit whose numerator and
denominator are affine in the per-subject treatment-assignment weights
(the indicator ``d(L)`` or its normal-CDF surrogate). :class:`ValueSurface`
exploits that: it precomputes, once per (dataset, nuisance, t), matrices
``M_D``, ``M_R`` and offsets ``d0``, ``r0`` such that for an assignment
vector ``phi``

    D(s) = d0(s) + phi @ M_D[:, s]     R(s) = r0(s) + phi @ M_R[:, s]

so scoring a whole GA population is two matrix products.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from ivregime.data import Dataset, InvalidArgumentError, Regime
from ivregime.nuisance import ConfigurationError, CoxModel, MarginalCensoring, NuisanceSet
from ivregime.smoothing import Bandwidth, index_bandwidths
from ivregime.survival import CLAMP_MODES, StepSurvival, event_grid, product_limit_batch


class Base(enum.Enum):
    IWKME_IV = "IWKME_IV"
    DRKME_IV = "DRKME_IV"
    SIWKME = "SIWKME"
    SAIWKME = "SAIWKME"


_LABELS = {
    (Base.IWKME_IV, True): "SIWKME-IV",
    (Base.IWKME_IV, False): "IWKME-IV",
    (Base.DRKME_IV, True): "SDRKME-IV",
    (Base.DRKME_IV, False): "DRKME-IV",
    (Base.SIWKME, True): "SIWKME",
    (Base.SIWKME, False): "IWKME",
    (Base.SAIWKME, True): "SAIWKME",
    (Base.SAIWKME, False): "AIWKME",
}
_FROM_LABEL = {v: k for k, v in _LABELS.items()}


@dataclass(frozen=True)
class EstimatorKind:
    base: Base
    smoothed: bool = True

    @property
    def label(self) -> str:
        return _LABELS[(self.base, self.smoothed)]

    @property
    def uses_instrument(self) -> bool:
        return self.base in (Base.IWKME_IV, Base.DRKME_IV)

    @property
    def needs_outcome_model(self) -> bool:
        return self.base in (Base.DRKME_IV, Base.SAIWKME)

    @classmethod
    def parse(cls, label: str) -> "EstimatorKind":
        try:
            base, smoothed = _FROM_LABEL[label.strip().upper()]
        except KeyError:
            raise InvalidArgumentError(
                f"unknown method {label!r}; choose from {sorted(_FROM_LABEL)}"
            ) from None
        return cls(base, smoothed)

    def __str__(self):
        return self.label


ALL_SMOOTHED = tuple(EstimatorKind(b, True) for b in Base)


@dataclass
class ValueEstimate:
    value: float
    curve: StepSurvival
    diagnostics: dict = field(default_factory=dict)

    def __float__(self):
        return self.value


def _ess(w: np.ndarray) -> float:
    a = np.abs(w)
    denom = float(np.sum(w * w))
    return float(a.sum() ** 2 / denom) if denom > 0 else 0.0


def _cox_grid(cox: CoxModel, times: np.ndarray):
    left = cox.cumhaz0_left(times)
    jump = cox.cumhaz0(times) - left
    return left, jump


class ValueSurface:
    """Fast evaluation of one estimator at many regimes on fixed data and fits.

    ``smooth`` arguments accept ``None`` (indicator rule), ``"auto"`` (plug-in
    bandwidth recomputed for each eta), a float or a :class:`Bandwidth`.
    """

    def __init__(
        self,
        dataset: Dataset,
        nuisance: NuisanceSet,
        base: Base | EstimatorKind,
        t: float,
        augmentation: bool = True,
        clamp: str = "envelope",
    ):
        if clamp not in CLAMP_MODES:
            raise InvalidArgumentError(f"clamp must be one of {CLAMP_MODES}")
        self.clamp = clamp
        if isinstance(base, EstimatorKind):
            base = base.base
        if not t > 0:
            raise InvalidArgumentError("t must be positive")
        self.base = base
        self.t = float(t)
        self.dataset = dataset
        self.design = dataset.design()
        self.grid = event_grid(dataset, t).times
        n, G = dataset.n, self.grid.size
        A = dataset.treatment.astype(float)
        Z = dataset.instrument.astype(float)
        L = dataset.covariates

        # censoring-weighted counting processes, (n, G)
        time = dataset.time[:, None]
        s = self.grid[None, :]
        Y = (time >= s).astype(float)
        dN = ((time == s) & (dataset.status[:, None] == 1)).astype(float)
        if isinstance(nuisance.censor, MarginalCensoring):
            sc = np.broadcast_to(nuisance.censor.survival(self.grid)[None, :], (n, G))
        else:
            sc = nuisance.censor.survival(self.grid, Z, L, A)
        Yc = Y / sc
        Dc = dN / sc

        if base in (Base.IWKME_IV, Base.DRKME_IV):
            delta = nuisance.delta(L)
            fz = nuisance.f_instrument(Z, L)
            c = (2 * Z - 1) / (delta * fz)
            weight = c * (2 * A - 1)
        elif base in (Base.SIWKME, Base.SAIWKME):
            if nuisance.propensity is None:
                raise ConfigurationError("baseline estimators need the propensity model pi(A|L)")
            p1 = nuisance.propensity.predict_terms(0, L)
            pa = np.where(A == 1, p1, 1 - p1)
            weight = 1.0 / pa
        else:  # pragma: no cover
            raise InvalidArgumentError(base)
        self._weight = weight

        # m_i = (1 - A_i) + (2 A_i - 1) phi_i, so w = b0 + b1 * phi
        b0 = weight * (1 - A)
        b1 = weight * (2 * A - 1)
        self.d0 = b0 @ Dc
        self.r0 = b0 @ Yc
        self.M_D = b1[:, None] * Dc
        self.M_R = b1[:, None] * Yc

        self.augmented = False
        if augmentation and base in (Base.DRKME_IV, Base.SAIWKME):
            XN, XY = self._augmentation(nuisance, A, Z, L)
            self.d0 = self.d0 + XN[0].sum(axis=0)
            self.r0 = self.r0 + XY[0].sum(axis=0)
            self.M_D = self.M_D + (XN[1] - XN[0])
            self.M_R = self.M_R + (XY[1] - XY[0])
            self.augmented = True

    def _augmentation(self, nuisance, A, Z, L):
        """Outcome-model terms for a = 0, 1: lists XN[a], XY[a] of (n, G)."""
        if self.base is Base.DRKME_IV:
            cox = nuisance.cox
            if cox is None:
                raise ConfigurationError("DRKME-IV needs a Cox outcome model")
            left, jump = _cox_grid(cox, self.grid)
            delta = nuisance.delta(L)
            fz = nuisance.f_instrument(Z, L)
            c = (2 * Z - 1) / (delta * fz)
            pi1 = {z: nuisance.treat_prob(z, L) for z in (0, 1)}
            k = 1 - c * (A - pi1[0])
            XN, XY = [], []
            for a in (0, 1):
                sgn = 2 * a - 1
                g1 = np.zeros((self.n_subjects, self.grid.size))
                g2 = np.zeros_like(g1)
                g1p = g2p = None
                for z in (0, 1):
                    rr = cox.relative_risk(cox.design(z, L, a))
                    ST = np.exp(-np.outer(rr, left))
                    dL = np.outer(rr, jump)
                    pa = pi1[z] if a == 1 else 1 - pi1[z]
                    coef = (2 * z - 1) * sgn * pa / delta
                    g1 += coef[:, None] * ST * dL
                    g2 += coef[:, None] * ST
                    if z == 0:
                        g1p = (sgn * pa)[:, None] * ST * dL
                        g2p = (sgn * pa)[:, None] * ST
                XN.append(k[:, None] * g1 - c[:, None] * g1p)
                XY.append(k[:, None] * g2 - c[:, None] * g2p)
            return XN, XY
        cox = nuisance.cox_noiv
        if cox is None:
            raise ConfigurationError("SAIWKME needs a Cox outcome model without the instrument")
        left, jump = _cox_grid(cox, self.grid)
        p1 = nuisance.propensity.predict_terms(0, L)
        XN, XY = [], []
        for a in (0, 1):
            pa = p1 if a == 1 else 1 - p1
            resid = ((A == a) - pa) / pa
            rr = cox.relative_risk(cox.design(0, L, a))
            ST = np.exp(-np.outer(rr, left))
            XN.append(-resid[:, None] * ST * np.outer(rr, jump))
            XY.append(-resid[:, None] * ST)
        return XN, XY

    @property
    def n_subjects(self) -> int:
        return self.dataset.n

    # -- evaluation ----------------------------------------------------------

    def assignment(self, etas: np.ndarray, smooth=None) -> tuple[np.ndarray, np.ndarray | None]:
        """Per-subject treatment weights phi (k, n) and the bandwidths used."""
        etas = np.atleast_2d(np.asarray(etas, dtype=float))
        index = etas @ self.design.T
        if smooth is None:
            return (index >= 0).astype(float), None
        if isinstance(smooth, str):
            if smooth != "auto":
                raise InvalidArgumentError(f"unknown smoothing option {smooth!r}")
            h = index_bandwidths(self.design, etas)
        else:
            h_val = smooth.h if isinstance(smooth, Bandwidth) else float(smooth)
            if not h_val > 0:
                raise InvalidArgumentError("bandwidth must be positive")
            h = np.full(etas.shape[0], h_val)
        return ndtr(index / h[:, None]), h

    def curves(self, etas, smooth=None):
        phi, h = self.assignment(etas, smooth)
        D = self.d0 + phi @ self.M_D
        R = self.r0 + phi @ self.M_R
        if self.grid.size == 0:
            k = phi.shape[0]
            return np.ones((k, 0)), np.zeros(k, int), np.zeros(k, int), phi, h
        values, clamped, skipped = product_limit_batch(D, R, self.clamp)
        return values, clamped, skipped, phi, h

    def values(self, etas, smooth=None) -> np.ndarray:
        """Estimated S*(t; eta) for each row of ``etas``."""
        values = self.curves(etas, smooth)[0]
        if values.shape[1] == 0:
            return np.ones(values.shape[0])
        return values[:, -1]

    def estimate(self, regime: Regime | np.ndarray, smooth=None) -> ValueEstimate:
        eta = regime.eta if isinstance(regime, Regime) else np.asarray(regime, dtype=float)
        if eta.size != self.design.shape[1]:
            raise InvalidArgumentError("regime dimension does not match the covariates")
        values, clamped, skipped, phi, h = self.curves(eta[None, :], smooth)
        curve_vals = values[0]
        A = self.dataset.treatment
        w = self._weight * np.where(A == 1, phi[0], 1 - phi[0])
        value = float(curve_vals[-1]) if curve_vals.size else 1.0
        diagnostics = {
            "clamped": int(clamped[0]),
            "skipped": int(skipped[0]),
            "grid_size": int(self.grid.size),
            "effective_sample_size": _ess(w),
            "bandwidth": None if h is None else float(h[0]),
            "augmented": self.augmented,
        }
        return ValueEstimate(value, StepSurvival(self.grid, curve_vals), diagnostics)

    def objective(self, smooth="auto") -> "Objective":
        return Objective(self, smooth)


class Objective:
    """Callable eta -> estimated value, with a vectorized ``batch`` method."""

    def __init__(self, surface: ValueSurface, smooth="auto"):
        self.surface = surface
        self.smooth = smooth

    def __call__(self, eta) -> float:
        return float(self.surface.values(np.asarray(eta)[None, :], self.smooth)[0])

    def batch(self, etas) -> np.ndarray:
        return self.surface.values(etas, self.smooth)


def _surface(dataset, nuisance, base, t, augmentation=True):
    return ValueSurface(dataset, nuisance, base, t, augmentation=augmentation)


def iwkme_iv(dataset: Dataset, nuisance: NuisanceSet, regime: Regime, t: float, smooth=None) -> ValueEstimate:
    """Instrument-weighted Kaplan-Meier estimate of S*(t; eta)."""
    return _surface(dataset, nuisance, Base.IWKME_IV, t).estimate(regime, smooth)


def drkme_iv(
    dataset: Dataset,
    nuisance: NuisanceSet,
    regime: Regime,
    t: float,
    smooth=None,
    augmentation: bool = True,
) -> ValueEstimate:
    """Doubly robust instrument-weighted Kaplan-Meier estimate.

    ``augmentation=False`` zeroes every outcome-model term, which leaves the
    instrument-weighted estimator.
    """
    if augmentation and nuisance.cox is None:
        raise ConfigurationError("DRKME-IV needs a Cox outcome model")
    return _surface(dataset, nuisance, Base.DRKME_IV, t, augmentation).estimate(regime, smooth)


def siwkme(dataset: Dataset, nuisance: NuisanceSet, regime: Regime, t: float, smooth=None) -> ValueEstimate:
    """Propensity-weighted Kaplan-Meier estimate that ignores the instrument."""
    return _surface(dataset, nuisance, Base.SIWKME, t).estimate(regime, smooth)


def saiwkme(
    dataset: Dataset,
    nuisance: NuisanceSet,
    regime: Regime,
    t: float,
    smooth=None,
    augmentation: bool = True,
) -> ValueEstimate:
    if augmentation and nuisance.cox_noiv is None:
        raise ConfigurationError("SAIWKME needs a Cox outcome model without the instrument")
    return _surface(dataset, nuisance, Base.SAIWKME, t, augmentation).estimate(regime, smooth)


ESTIMATORS = {
    Base.IWKME_IV: iwkme_iv,
    Base.DRKME_IV: drkme_iv,
    Base.SIWKME: siwkme,
    Base.SAIWKME: saiwkme,
}


# -- alternative value functionals -------------------------------------------


def restricted_mean(survival: Callable[[float], float], times, t: float) -> float:
    """Riemann sum of an estimated survival curve over the order statistics up to t.

    ``times`` are the observed follow-up times; the curve is evaluated at 0
    and at each order statistic not exceeding ``t``.
    """
    if not t > 0:
        raise InvalidArgumentError("t must be positive")
    order = np.sort(np.asarray(times, dtype=float))
    pts = np.concatenate([[0.0], order[order <= t]])
    nxt = np.concatenate([pts[1:], [math.inf]])
    widths = np.minimum(nxt, t) - pts
    heights = np.array([1.0] + [float(survival(x)) for x in pts[1:]])
    return float(np.sum(heights * widths))


def quantile_value(curve: StepSurvival, tau: float) -> float:
    """inf{t : S(t) <= 1 - tau} over the curve's jump times; ``inf`` if never reached."""
    if not 0 < tau < 1:
        raise InvalidArgumentError("tau must lie in (0, 1)")
    hit = np.nonzero(curve.values <= 1 - tau)[0]
    return float(curve.times[hit[0]]) if hit.size else math.inf


def multi_objective(value: float, regime: Regime, covariates, lam: float) -> float:
    """Value penalized by ``lam`` times the fraction the regime treats."""
    if lam < 0:
        raise InvalidArgumentError("lambda must be nonnegative")
    treated = regime.decide(covariates)
    return float(value - lam * treated.mean())
