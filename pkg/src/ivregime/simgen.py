"""Synthetic cohorts with an unmeasured confounder and a binary instrument.

Covariates are uniform on [-2, 2]^2, the confounder U enters both treatment
uptake and survival, and survival follows the transformation model

    h(T) = -0.5 L1 + A (L1 - L2) + c_U U + eps,   h(s) = log(e^s - 1) - 2,

so the optimal rule is I{L1 - L2 >= 0} whatever U does.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from ivregime.data import Dataset, InvalidArgumentError, Regime

P = 2
ETA_OPT = np.array([0.0, 1.0, -1.0]) / np.sqrt(2.0)
_V_EPS = 1e-12

SETTINGS = {
    # confounder coefficient in h(T), error law
    "a": (0.5, "extreme"),
    "b": (1.0, "extreme"),
    "c": (0.5, "logistic"),
    "d": (1.0, "logistic"),
}


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    setting: str = "a"
    iv_coefficient: float = 5.0
    u_distribution: str = "bridge"
    z_mechanism: str = "bernoulli"
    censoring: str = "uniform"
    target_censor_rate: float = 0.15
    horizon: float = 2.0
    c0: float | None = None
    confounder_coefficient: float | None = None
    perfect_compliance: bool = False

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise InvalidArgumentError(f"setting must be one of {sorted(SETTINGS)}")
        if self.u_distribution not in ("bridge", "normal", "uniform"):
            raise InvalidArgumentError("u_distribution must be bridge, normal or uniform")
        if self.z_mechanism not in ("bernoulli", "covariate"):
            raise InvalidArgumentError("z_mechanism must be bernoulli or covariate")
        if self.censoring not in ("uniform", "shifted_uniform", "cox"):
            raise InvalidArgumentError("censoring must be uniform, shifted_uniform or cox")
        if not 0 < self.target_censor_rate < 1:
            raise InvalidArgumentError("target_censor_rate must lie in (0, 1)")
        if not self.horizon > 0:
            raise InvalidArgumentError("horizon must be positive")
        if self.c0 is not None and not self.c0 > 0:
            raise InvalidArgumentError("c0 must be positive")

    @property
    def u_coefficient(self) -> float:
        if self.confounder_coefficient is not None:
            return self.confounder_coefficient
        return SETTINGS[self.setting][0]

    @property
    def error_law(self) -> str:
        return SETTINGS[self.setting][1]

    def with_c0(self, c0: float) -> "ScenarioSpec":
        return dataclasses.replace(self, c0=float(c0))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class LatentCohort:
    dataset: Dataset
    U: np.ndarray
    eps: np.ndarray
    T0: np.ndarray
    T1: np.ndarray
    C: np.ndarray

    @property
    def T(self) -> np.ndarray:
        return np.where(self.dataset.treatment == 1, self.T1, self.T0)


# -- primitive samplers ------------------------------------------------------


def _uniform(rng, size):
    return np.clip(rng.random(size), _V_EPS, 1 - _V_EPS)


def sample_bridge(rng: np.random.Generator, size=None, phi: float = 0.5):
    """Bridge-distribution draws by inversion of its closed-form CDF."""
    v = _uniform(rng, size)
    return np.log(np.sin(phi * np.pi * v) / np.sin(phi * np.pi * (1 - v))) / phi


def bridge_density(u, phi: float = 0.5):
    """sin(phi pi) / (2 pi (cosh(phi u) + cos(phi pi))), written to avoid overflow."""
    e = np.exp(-phi * np.abs(np.asarray(u, dtype=float)))
    return np.sin(phi * np.pi) * e / (np.pi * (1 + e * e + 2 * e * np.cos(phi * np.pi)))


def sample_extreme_value(rng: np.random.Generator, size=None):
    """Largest-extreme-value (Gumbel) draws, CDF exp(-exp(-x))."""
    return -np.log(-np.log(_uniform(rng, size)))


def sample_logistic(rng: np.random.Generator, size=None):
    v = _uniform(rng, size)
    return np.log(v / (1 - v))


def _sample_u(spec: ScenarioSpec, rng, n):
    if spec.u_distribution == "bridge":
        return sample_bridge(rng, n)
    if spec.u_distribution == "normal":
        return rng.normal(0.0, 3.14, n)
    return rng.uniform(-5.44, 5.44, n)


def _sample_error(law: str, rng, n):
    return sample_extreme_value(rng, n) if law == "extreme" else sample_logistic(rng, n)


def h_inverse(v):
    """Inverse of h(s) = log(e^s - 1) - 2, i.e. log(1 + e^(v + 2))."""
    return np.logaddexp(0.0, np.asarray(v, dtype=float) + 2.0)


def h_transform(s):
    s = np.asarray(s, dtype=float)
    return np.log(np.expm1(s)) - 2.0


def potential_times(spec: ScenarioSpec, L, U, eps):
    """T*(0) and T*(1) from shared (L, U, eps); the instrument never enters."""
    L = np.atleast_2d(L)
    lin = -0.5 * L[:, 0] + spec.u_coefficient * U + eps
    return h_inverse(lin), h_inverse(lin + L[:, 0] - L[:, 1])


def _latent_draw(spec: ScenarioSpec, n: int, rng: np.random.Generator):
    L = rng.uniform(-2.0, 2.0, (n, P))
    if spec.z_mechanism == "bernoulli":
        Z = (rng.random(n) < 0.5).astype(np.int8)
    else:
        Z = (rng.random(n) < expit(L[:, 0] + L[:, 1])).astype(np.int8)
    U = _sample_u(spec, rng, n)
    if spec.perfect_compliance:
        A = Z.copy()
        rng.random(n)  # keep the stream aligned with the logistic branch
    else:
        pA = expit(-2.5 + L[:, 0] + spec.iv_coefficient * Z - 0.5 * U)
        A = (rng.random(n) < pA).astype(np.int8)
    eps = _sample_error(spec.error_law, rng, n)
    T0, T1 = potential_times(spec, L, U, eps)
    return L, Z, U, A, eps, T0, T1


def _censoring_times(spec: ScenarioSpec, rng, L, A, T):
    n = T.size
    if spec.censoring == "uniform":
        if spec.c0 is None:
            raise InvalidArgumentError("uniform censoring needs a calibrated c0 (see calibrate_c0)")
        return spec.c0 * rng.random(n)
    if spec.censoring == "shifted_uniform":
        # C = T + U(-10, 10), floored at 0 so observed times stay nonnegative
        return np.maximum(T + rng.uniform(-10.0, 10.0, n), 0.0)
    return h_inverse(L[:, 0] + 3.0 * A + sample_extreme_value(rng, n))


def sample_cohort(spec: ScenarioSpec, n: int, rng: np.random.Generator) -> LatentCohort:
    if n < 1:
        raise InvalidArgumentError("n must be positive")
    L, Z, U, A, eps, T0, T1 = _latent_draw(spec, n, rng)
    T = np.where(A == 1, T1, T0)
    C = _censoring_times(spec, rng, L, A, T)
    time = np.minimum(T, C)
    status = (T <= C).astype(np.int8)
    dataset = Dataset.from_arrays(time, status, A, Z, L)
    return LatentCohort(dataset, U, eps, T0, T1, C)


def censoring_fraction(spec: ScenarioSpec, c0: float, T: np.ndarray, V: np.ndarray) -> float:
    return float(np.mean(c0 * V < T))


def calibrate_c0(
    spec: ScenarioSpec,
    target_rate: float | None = None,
    rng: np.random.Generator | int | None = None,
    pilot: int = 200_000,
    c0_max: float = 1e4,
    tol: float = 1e-4,
) -> float:
    """Bisection for the uniform-censoring bound hitting ``target_rate``.

    One pilot cohort (common random numbers) is reused for every trial value,
    so the search is monotone and deterministic for a given seed.
    """
    target = spec.target_censor_rate if target_rate is None else target_rate
    if not 0 < target < 1:
        raise InvalidArgumentError("target_rate must lie in (0, 1)")
    if spec.censoring != "uniform":
        raise InvalidArgumentError("only uniform censoring has a c0 to calibrate")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    _, _, _, A, _, T0, T1 = _latent_draw(spec, pilot, rng)
    T = np.where(A == 1, T1, T0)
    V = rng.random(pilot)
    if censoring_fraction(spec, c0_max, T, V) > target:
        raise CalibrationError(
            f"censoring rate {target} not reachable with c0 <= {c0_max}"
        )
    lo, hi = 0.0, c0_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rate = censoring_fraction(spec, mid, T, V)
        if abs(rate - target) < tol:
            return mid
        if rate > target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError("bisection did not reach the requested tolerance")


@lru_cache(maxsize=64)
def calibrated(spec: ScenarioSpec, seed: int = 20240601) -> ScenarioSpec:
    """``spec`` with c0 filled in (no-op for non-uniform censoring or preset c0)."""
    if spec.censoring != "uniform" or spec.c0 is not None:
        return spec
    return spec.with_c0(calibrate_c0(spec, rng=np.random.default_rng(seed)))


@dataclass(frozen=True, eq=False)
class TestPopulation:
    L: np.ndarray
    T0: np.ndarray
    T1: np.ndarray

    def value(self, regime: Regime, t: float) -> float:
        d = regime.decide(self.L)
        return float(np.mean(np.where(d == 1, self.T1, self.T0) > t))


def draw_population(spec: ScenarioSpec, m: int, rng: np.random.Generator) -> TestPopulation:
    L, _, _, _, _, T0, T1 = _latent_draw(spec, m, rng)
    return TestPopulation(L, T0, T1)


def oracle_value(
    spec: ScenarioSpec,
    regime: Regime,
    t: float | None = None,
    m: int = 1_000_000,
    rng: np.random.Generator | int | None = None,
) -> float:
    """Monte Carlo S*(t; eta): share of fresh subjects with T*(d(L)) > t."""
    if m < 10_000:
        raise InvalidArgumentError("oracle_value needs m >= 10^4")
    t = spec.horizon if t is None else t
    if t <= 0:
        return 1.0
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return draw_population(spec, m, rng).value(regime, t)
