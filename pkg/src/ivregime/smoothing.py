"""Plug-in bandwidth and the normal-CDF surrogate for the regime indicator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from ivregime.data import InvalidArgumentError

C0 = 4.0 ** (1.0 / 3.0)
SD_FLOOR = 1e-8


@dataclass(frozen=True)
class Bandwidth:
    h: float

    def __post_init__(self):
        if not self.h > 0:
            raise InvalidArgumentError("bandwidth must be positive")


def bandwidth(n: int, sd_eta_index: float) -> Bandwidth:
    """h = 4^(1/3) n^(-1/3) sd, with sd floored at 1e-8 for constant rules."""
    if n < 2:
        raise InvalidArgumentError("bandwidth needs n >= 2")
    if sd_eta_index < 0:
        raise InvalidArgumentError("standard deviation must be nonnegative")
    return Bandwidth(C0 * n ** (-1.0 / 3.0) * max(sd_eta_index, SD_FLOOR))


def index_bandwidths(design: np.ndarray, etas: np.ndarray) -> np.ndarray:
    """Bandwidth for each row of ``etas`` from the sample sd of design @ eta.

    ``design`` is the (n, p+1) matrix of (1, L) rows.
    """
    n = design.shape[0]
    sd = np.std(np.atleast_2d(etas) @ design.T, axis=1, ddof=1)
    return C0 * n ** (-1.0 / 3.0) * np.maximum(sd, SD_FLOOR)


def smooth_indicator(eta, covariates, h: float):
    """Phi((1, L) . eta / h); ``covariates`` may be one row or an (n, p) matrix."""
    if not h > 0:
        raise InvalidArgumentError("bandwidth must be positive")
    eta = np.asarray(eta, dtype=float)
    L = np.asarray(covariates, dtype=float)
    index = eta[0] + L @ eta[1:]
    out = ndtr(index / h)
    return float(out) if np.ndim(out) == 0 else out
