"""Observed-data records, validated cohorts and the linear regime class."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np


class InvalidArgumentError(ValueError):
    pass


class DatasetValidationError(ValueError):
    """Raised with the complete list of violations found in a set of rows."""

    def __init__(self, violations: list[tuple[int | None, str]]):
        self.violations = violations
        lines = [f"row {i}: {msg}" if i is not None else msg for i, msg in violations]
        super().__init__("; ".join(lines))


@dataclass(frozen=True)
class Subject:
    time: float
    status: int
    treatment: int
    instrument: int
    covariates: tuple[float, ...]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented cohort of (time, status, treatment, instrument, covariates).

    Arrays are read-only copies; build through :func:`validate_dataset` or
    :meth:`from_arrays` so the invariants are checked.
    """

    time: np.ndarray
    status: np.ndarray
    treatment: np.ndarray
    instrument: np.ndarray
    covariates: np.ndarray

    @classmethod
    def from_arrays(cls, time, status, treatment, instrument, covariates) -> "Dataset":
        covariates = np.asarray(covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = covariates[:, None]
        n = len(np.asarray(time))
        if any(len(np.asarray(x)) != n for x in (status, treatment, instrument, covariates)):
            raise InvalidArgumentError("column lengths differ")
        fast = _validate_columns(time, status, treatment, instrument, covariates)
        if fast is not None:
            return fast
        rows = [
            {
                "time": t,
                "status": s,
                "treatment": a,
                "instrument": z,
                "covariates": list(cov),
            }
            for t, s, a, z, cov in zip(
                np.asarray(time, dtype=float),
                np.asarray(status),
                np.asarray(treatment),
                np.asarray(instrument),
                covariates,
            )
        ]
        return validate_dataset(rows)

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def __len__(self) -> int:
        return self.n

    @property
    def subjects(self) -> list[Subject]:
        return list(iter(self))

    def __iter__(self) -> Iterator[Subject]:
        for i in range(self.n):
            yield Subject(
                float(self.time[i]),
                int(self.status[i]),
                int(self.treatment[i]),
                int(self.instrument[i]),
                tuple(float(x) for x in self.covariates[i]),
            )

    def design(self) -> np.ndarray:
        """(1, L) rows, the augmented covariate vector used by every regime."""
        return np.column_stack([np.ones(self.n), self.covariates])

    def take(self, index) -> "Dataset":
        """Subset or resample rows without re-validating the event requirement."""
        index = np.asarray(index)
        return Dataset(
            _frozen(self.time[index]),
            _frozen(self.status[index]),
            _frozen(self.treatment[index]),
            _frozen(self.instrument[index]),
            _frozen(self.covariates[index]),
        )

    def equals(self, other: "Dataset") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("time", "status", "treatment", "instrument", "covariates")
        )


def _validate_columns(time, status, treatment, instrument, covariates) -> Dataset | None:
    # vectorized happy path; None sends the caller to the row-wise validator
    try:
        t = np.asarray(time, dtype=float)
        cols = [np.asarray(x, dtype=float) for x in (status, treatment, instrument)]
    except (TypeError, ValueError):
        return None
    cov = np.asarray(covariates, dtype=float)
    if t.size == 0 or cov.ndim != 2 or cov.shape[1] == 0:
        return None
    if not (np.all(np.isfinite(t)) and np.all(t >= 0) and np.all(np.isfinite(cov))):
        return None
    if not all(np.all((c == 0) | (c == 1)) for c in cols):
        return None
    if not np.any(cols[0] == 1):
        return None
    return Dataset(
        _frozen(t),
        *(_frozen(c.astype(np.int8)) for c in cols),
        _frozen(cov),
    )


_LCOL = re.compile(r"^L(\d+)$")


def _row_covariates(row: Mapping[str, Any]) -> list:
    if "covariates" in row:
        return list(row["covariates"])
    keys = sorted((int(m.group(1)), k) for k in row if (m := _LCOL.match(k)))
    return [row[k] for _, k in keys]


def _as_binary(value) -> int | None:
    try:
        v = float(value)
    except (TypeError, ValueError):
        return None
    return int(v) if v in (0.0, 1.0) else None


def validate_dataset(rows: Iterable[Mapping[str, Any]]) -> Dataset:
    """Check raw rows and build a :class:`Dataset`.

    Every violation is collected before raising, so callers see the full list
    (row index plus reason) in :class:`DatasetValidationError`.
    """
    rows = list(rows)
    problems: list[tuple[int | None, str]] = []
    if not rows:
        raise DatasetValidationError([(None, "dataset is empty")])
    p = None
    cols: dict[str, list] = {k: [] for k in ("time", "status", "treatment", "instrument", "covariates")}
    for i, row in enumerate(rows):
        try:
            t = float(row["time"])
        except (KeyError, TypeError, ValueError):
            problems.append((i, "time is missing or non-numeric"))
            t = math.nan
        else:
            if not math.isfinite(t) or t < 0:
                problems.append((i, f"time must be finite and >= 0, got {row['time']!r}"))
        binaries = {}
        for field in ("status", "treatment", "instrument"):
            b = _as_binary(row.get(field))
            if b is None:
                problems.append((i, f"{field} must be 0 or 1, got {row.get(field)!r}"))
                b = 0
            binaries[field] = b
        try:
            cov = [float(x) for x in _row_covariates(row)]
        except (TypeError, ValueError):
            problems.append((i, "covariates must be numeric"))
            cov = []
        if not all(math.isfinite(x) for x in cov):
            problems.append((i, "covariates must be finite"))
        if p is None:
            p = len(cov)
            if p == 0:
                problems.append((i, "no covariates"))
        elif len(cov) != p:
            problems.append((i, f"covariate length {len(cov)} differs from dataset p={p}"))
            cov = (cov + [0.0] * p)[:p]
        cols["time"].append(t)
        cols["covariates"].append(cov)
        for field, b in binaries.items():
            cols[field].append(b)
    if not problems and not any(cols["status"]):
        problems.append((None, "no events: every subject is censored"))
    if problems:
        raise DatasetValidationError(problems)
    return Dataset(
        _frozen(np.asarray(cols["time"], dtype=float)),
        _frozen(np.asarray(cols["status"], dtype=np.int8)),
        _frozen(np.asarray(cols["treatment"], dtype=np.int8)),
        _frozen(np.asarray(cols["instrument"], dtype=np.int8)),
        _frozen(np.asarray(cols["covariates"], dtype=float).reshape(len(rows), p)),
    )


@dataclass(frozen=True, eq=False)
class Regime:
    """Unit-norm coefficient vector of the rule I{(1, L) . eta >= 0}."""

    eta: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).ravel()
        if eta.size < 2:
            raise InvalidArgumentError("eta needs an intercept and at least one slope")
        if abs(np.linalg.norm(eta) - 1.0) > 1e-12:
            raise InvalidArgumentError(f"eta must have unit norm, got {np.linalg.norm(eta)!r}")
        object.__setattr__(self, "eta", _frozen(eta))

    @property
    def p(self) -> int:
        return self.eta.size - 1

    def decide(self, covariates) -> np.ndarray:
        """Vectorized decision over an (n, p) covariate matrix."""
        L = np.atleast_2d(np.asarray(covariates, dtype=float))
        if L.shape[1] != self.p:
            raise InvalidArgumentError(f"expected {self.p} covariates, got {L.shape[1]}")
        return (self.eta[0] + L @ self.eta[1:] >= 0).astype(np.int8)

    def tolist(self) -> list[float]:
        return [float(x) for x in self.eta]


def regime_normalize(raw: Sequence[float]) -> Regime:
    raw = np.asarray(raw, dtype=float).ravel()
    norm = np.linalg.norm(raw)
    if not np.isfinite(norm) or norm == 0:
        raise InvalidArgumentError("cannot normalize a zero or non-finite vector")
    eta = raw / norm
    # one more pass removes the last-ulp drift some inputs leave behind
    eta = eta / np.linalg.norm(eta)
    return Regime(eta)


def regime_decide(regime: Regime, covariates: Sequence[float]) -> int:
    cov = np.asarray(covariates, dtype=float).ravel()
    if cov.size != regime.p:
        raise InvalidArgumentError(f"expected {regime.p} covariates, got {cov.size}")
    return int(regime.eta[0] + cov @ regime.eta[1:] >= 0)


def constant_regime(p: int, treatment: int) -> Regime:
    """Everyone gets ``treatment`` (intercept-only rule)."""
    eta = np.zeros(p + 1)
    eta[0] = 1.0 if treatment else -1.0
    return Regime(eta)
