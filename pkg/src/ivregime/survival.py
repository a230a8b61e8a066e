"""Product-limit machinery shared by every value estimator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ivregime.data import Dataset, InvalidArgumentError


class DegenerateEstimateError(RuntimeError):
    """Every factor of a product-limit had an empty (zero-weight) risk set."""


@dataclass(frozen=True, eq=False)
class StepSurvival:
    """Right-continuous step function, equal to 1 before the first jump."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape or times.ndim != 1:
            raise InvalidArgumentError("times and values must be 1-d and equally long")
        if times.size and np.any(np.diff(times) <= 0):
            raise InvalidArgumentError("times must be strictly increasing")
        if np.any((values < 0) | (values > 1)) or np.any(np.diff(values) > 0):
            raise InvalidArgumentError("values must lie in [0, 1] and be nonincreasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __call__(self, s):
        idx = np.searchsorted(self.times, s, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)] if self.values.size else 1.0, 1.0)
        return float(out) if np.ndim(out) == 0 else out

    def left_limit(self, s):
        """Value just before ``s``, i.e. S(s-)."""
        idx = np.searchsorted(self.times, s, side="left") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)] if self.values.size else 1.0, 1.0)
        return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class EventGrid:
    times: np.ndarray

    def __len__(self):
        return self.times.size


def event_grid(dataset: Dataset, horizon: float) -> EventGrid:
    if not horizon > 0:
        raise InvalidArgumentError("horizon must be positive")
    t = dataset.time[(dataset.status == 1) & (dataset.time <= horizon)]
    return EventGrid(np.unique(t))


@dataclass
class ProductLimit:
    """Result of a weighted product-limit evaluation.

    ``curve`` holds the estimate at every grid time; ``clamped`` counts hazard
    increments that fell outside [0, 1] and ``skipped`` counts grid points
    with an empty (or nonpositive) weighted risk set.
    """

    value: float
    curve: StepSurvival
    clamped: int = 0
    skipped: int = 0
    extra: dict = field(default_factory=dict)

    def __float__(self):
        return self.value


CLAMP_MODES = ("envelope", "increment")


def product_limit_batch(D: np.ndarray, R: np.ndarray, clamp: str = "envelope"):
    """Cumulative products of ``1 - D/R`` along the last axis.

    ``D`` and ``R`` have shape (k, G). Factors with ``R <= 0`` are skipped.
    With signed weights single increments can leave [0, 1]. ``clamp`` picks
    the repair:

    * ``"envelope"`` multiplies the raw factors and then projects the curve
      onto valid survival functions (clip to [0, 1], running minimum);
    * ``"increment"`` clips each increment to [0, 1] before multiplying.

    Clipping single increments discards every negative increment while
    keeping the positive ones, which drags the estimate down, so the
    envelope is the default.

    Returns the (k, G) survival values, counts of out-of-range increments
    and counts of skipped factors per row. Rows with every factor skipped
    raise.
    """
    if clamp not in CLAMP_MODES:
        raise InvalidArgumentError(f"clamp must be one of {CLAMP_MODES}")
    D = np.atleast_2d(D)
    R = np.atleast_2d(R)
    empty = ~(R > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(empty, 0.0, D / np.where(empty, 1.0, R))
    outside = ((ratio < 0) | (ratio > 1)) & ~empty
    if R.shape[-1] and np.any(empty.all(axis=-1)):
        raise DegenerateEstimateError("weighted risk set is empty at every grid point")
    if clamp == "increment":
        values = np.cumprod(1.0 - np.clip(ratio, 0.0, 1.0), axis=-1)
    else:
        raw = np.cumprod(1.0 - np.minimum(ratio, 1.0), axis=-1)
        values = np.minimum.accumulate(np.clip(raw, 0.0, 1.0), axis=-1)
    return values, outside.sum(axis=-1), empty.sum(axis=-1)


def _subject_grid_matrix(weights, n: int, G: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim == 0:
        return np.full((n, G), float(w))
    if w.ndim == 1:
        if w.size != n:
            raise InvalidArgumentError("per-subject weights must have length n")
        return np.repeat(w[:, None], G, axis=1)
    if w.shape != (n, G):
        raise InvalidArgumentError(f"weights must have shape ({n}, {G})")
    return w


def counting_matrices(dataset: Dataset, grid: EventGrid) -> tuple[np.ndarray, np.ndarray]:
    """dN_i(s) and Y_i(s) on the grid, each of shape (n, G)."""
    s = grid.times[None, :]
    t = dataset.time[:, None]
    dN = ((t == s) & (dataset.status[:, None] == 1)).astype(float)
    Y = (t >= s).astype(float)
    return dN, Y


def weighted_product_limit(
    num_weights, den_weights, dataset: Dataset, grid: EventGrid, t: float, clamp: str = "envelope"
) -> ProductLimit:
    """prod over grid s <= t of (1 - sum w dN(s) / sum v Y(s)).

    Weights may be scalars, per-subject vectors or (n, G) matrices. See
    :func:`product_limit_batch` for ``clamp``.
    """
    if not t > 0:
        raise InvalidArgumentError("t must be positive")
    keep = grid.times <= t
    times = grid.times[keep]
    G = times.size
    if G == 0:
        return ProductLimit(1.0, StepSurvival(times, times.copy()))
    n = dataset.n
    W = _subject_grid_matrix(num_weights, n, grid.times.size)[:, keep]
    V = _subject_grid_matrix(den_weights, n, grid.times.size)[:, keep]
    dN, Y = counting_matrices(dataset, EventGrid(times))
    D = np.sum(W * dN, axis=0)
    R = np.sum(V * Y, axis=0)
    values, clamped, skipped = product_limit_batch(D, R, clamp)
    values = values[0]
    return ProductLimit(float(values[-1]), StepSurvival(times, values), int(clamped[0]), int(skipped[0]))


def km_survival(times, events) -> StepSurvival:
    """Kaplan-Meier estimate; pass ``1 - status`` for the reverse (censoring) curve.

    Ties put events before censorings, so a subject censored at an event time
    is still at risk for that jump.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    if times.size == 0:
        raise InvalidArgumentError("km_survival needs at least one observation")
    if times.shape != events.shape:
        raise InvalidArgumentError("times and events must match")
    ev_times, d = np.unique(times[events == 1], return_counts=True)
    if ev_times.size == 0:
        return StepSurvival(np.array([]), np.array([]))
    sorted_t = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_t, ev_times, side="left")
    values = np.cumprod(1.0 - d / at_risk)
    return StepSurvival(ev_times, np.clip(values, 0.0, 1.0))


def nelson_aalen(times, events) -> tuple[np.ndarray, np.ndarray]:
    """Event times and cumulative hazard sum d_j / n_j."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    ev_times, d = np.unique(times[events == 1], return_counts=True)
    sorted_t = np.sort(times)
    at_risk = times.size - np.searchsorted(sorted_t, ev_times, side="left")
    return ev_times, np.cumsum(d / at_risk)
