"""Replication harness, accuracy metrics and bootstrap intervals."""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ivregime import __version__
from ivregime.data import Dataset, InvalidArgumentError, Regime, constant_regime
from ivregime.estimators import ALL_SMOOTHED, EstimatorKind, ValueSurface
from ivregime.nuisance import fit_nuisances
from ivregime.optimizer import GAConfig, optimize
from ivregime.simgen import ETA_OPT, ScenarioSpec, calibrated, draw_population, sample_cohort

TEST_SIZE = 10_000
WORKERS_ENV = "IVREGIME_WORKERS"


def _eta(x) -> np.ndarray:
    return x.eta if isinstance(x, Regime) else np.asarray(x, dtype=float)


def misclassification_rate(eta_hat, eta_true, covariates) -> float:
    """Share of test subjects whose decisions differ between the two regimes."""
    L = np.atleast_2d(np.asarray(covariates, dtype=float))
    if L.shape[0] == 0:
        raise InvalidArgumentError("test set is empty")
    X = np.column_stack([np.ones(L.shape[0]), L])
    d_hat = X @ _eta(eta_hat) >= 0
    d_true = X @ _eta(eta_true) >= 0
    return float(np.mean(d_hat != d_true))


def bias_stats(eta_hats: Sequence, eta_true) -> tuple[np.ndarray, np.ndarray]:
    """Component-wise mean of (eta_hat - eta_true) and sample sd of eta_hat."""
    E = np.array([_eta(e) for e in eta_hats], dtype=float)
    truth = _eta(eta_true)
    if E.ndim != 2 or E.shape[1] != truth.size:
        raise InvalidArgumentError("all regimes must share the truth's dimension")
    sd = E.std(axis=0, ddof=1) if E.shape[0] > 1 else np.zeros(truth.size)
    return (E - truth).mean(axis=0), sd


@dataclass
class ReplicationRecord:
    replication: int
    method: str
    eta_hat: list[float]
    value_oracle: float
    mr: float
    estimate: float
    runtime: float = 0.0

    def to_dict(self) -> dict:
        return {
            "replication": self.replication,
            "method": self.method,
            "eta_hat": self.eta_hat,
            "value_oracle": self.value_oracle,
            "mr": self.mr,
            "estimate": self.estimate,
        }


@dataclass
class ReplicationFailure:
    replication: int
    method: str | None
    error: str


def _mean_sd(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    return float(x.mean()), float(x.std(ddof=1)) if x.size > 1 else 0.0


@dataclass
class BenchmarkReport:
    scenario: dict
    n: int
    replications: int
    master_seed: int
    methods: list[str]
    ga_config: dict
    fz_model: str
    records: list[ReplicationRecord] = field(default_factory=list)
    failures: list[ReplicationFailure] = field(default_factory=list)

    def _sorted(self):
        order = {m: i for i, m in enumerate(self.methods)}
        return sorted(self.records, key=lambda r: (order.get(r.method, len(order)), r.replication))

    def summary(self) -> dict:
        out = {}
        for m in self.methods:
            recs = [r for r in self._sorted() if r.method == m]
            entry = {"count": len(recs), "failures": sum(f.method in (m, None) for f in self.failures)}
            if recs:
                bias, sd = bias_stats([r.eta_hat for r in recs], ETA_OPT)
                v_mean, v_sd = _mean_sd([r.value_oracle for r in recs])
                mr_mean, mr_sd = _mean_sd([r.mr for r in recs])
                entry.update(
                    bias=bias.tolist(),
                    eta_sd=sd.tolist(),
                    value_mean=v_mean,
                    value_sd=v_sd,
                    mr_mean=mr_mean,
                    mr_sd=mr_sd,
                    # standard error of the replication mean, for tolerance checks
                    value_se=v_sd / math.sqrt(len(recs)),
                    mr_se=mr_sd / math.sqrt(len(recs)),
                )
            out[m] = entry
        return out

    def to_dict(self) -> dict:
        """Deterministic content: runtimes are left out on purpose."""
        return {
            "version": __version__,
            "scenario": self.scenario,
            "n": self.n,
            "replications": self.replications,
            "master_seed": self.master_seed,
            "methods": self.methods,
            "ga_config": self.ga_config,
            "fz_model": self.fz_model,
            "summary": self.summary(),
            "records": [r.to_dict() for r in self._sorted()],
            "failures": [
                {"replication": f.replication, "method": f.method, "error": f.error}
                for f in sorted(self.failures, key=lambda f: (f.replication, f.method or ""))
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def replication_seeds(master_seed: int, r: int) -> tuple[np.random.SeedSequence, ...]:
    """(cohort, test set, GA) streams for replication ``r``."""
    return tuple(np.random.SeedSequence([master_seed, r]).spawn(3))


def _ga_for(config: GAConfig, seq: np.random.SeedSequence, j: int) -> GAConfig:
    seed = int(seq.generate_state(j + 1, np.uint64)[j])
    return GAConfig(**{**config.__dict__, "seed": seed})


def run_replication(
    spec: ScenarioSpec,
    methods: Sequence[EstimatorKind],
    n: int,
    master_seed: int,
    r: int,
    ga_config: GAConfig | None = None,
    fz_model: str = "full",
    t: float | None = None,
):
    """One replication, reproducible from (master_seed, r) alone."""
    ga_config = ga_config or GAConfig()
    t = spec.horizon if t is None else t
    s_data, s_test, s_ga = replication_seeds(master_seed, r)
    records, failures = [], []
    try:
        cohort = sample_cohort(spec, n, np.random.default_rng(s_data))
        nuisance = fit_nuisances(cohort.dataset, fz_model=fz_model)
    except Exception as exc:  # noqa: BLE001 - recorded, never dropped silently
        return records, [ReplicationFailure(r, None, f"{type(exc).__name__}: {exc}")]
    test = draw_population(spec, TEST_SIZE, np.random.default_rng(s_test))
    for j, kind in enumerate(methods):
        start = time.perf_counter()
        try:
            surface = ValueSurface(cohort.dataset, nuisance, kind, t)
            smooth = "auto" if kind.smoothed else None
            res = optimize(surface.objective(smooth), cohort.dataset.p + 1, _ga_for(ga_config, s_ga, j))
        except Exception as exc:  # noqa: BLE001
            failures.append(ReplicationFailure(r, kind.label, f"{type(exc).__name__}: {exc}"))
            continue
        records.append(
            ReplicationRecord(
                replication=r,
                method=kind.label,
                eta_hat=res.eta_hat.tolist(),
                value_oracle=test.value(res.eta_hat, t),
                mr=misclassification_rate(res.eta_hat, ETA_OPT, test.L),
                estimate=res.value,
                runtime=time.perf_counter() - start,
            )
        )
    return records, failures


def _worker_count(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


def run_benchmark(
    spec: ScenarioSpec,
    methods: Sequence[EstimatorKind] = ALL_SMOOTHED,
    n: int = 500,
    replications: int = 100,
    master_seed: int = 0,
    ga_config: GAConfig | None = None,
    fz_model: str = "full",
    workers: int | None = None,
) -> BenchmarkReport:
    if replications < 1:
        raise InvalidArgumentError("replications must be at least 1")
    if n < 10:
        raise InvalidArgumentError("n must be at least 10")
    ga_config = ga_config or GAConfig()
    methods = list(methods)
    spec = calibrated(spec)
    args = [(spec, methods, n, master_seed, r, ga_config, fz_model) for r in range(replications)]
    workers = _worker_count(workers)
    if workers == 1:
        outcomes = [run_replication(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_replication, *zip(*args)))
    report = BenchmarkReport(
        scenario=spec.to_dict(),
        n=n,
        replications=replications,
        master_seed=master_seed,
        methods=[k.label for k in methods],
        ga_config=dict(ga_config.__dict__),
        fz_model=fz_model,
    )
    for recs, fails in outcomes:
        report.records.extend(recs)
        report.failures.extend(fails)
    return report


# -- bootstrap ---------------------------------------------------------------


@dataclass
class BootstrapResult:
    estimate_vs_treat_all: float
    estimate_vs_treat_none: float
    ci_vs_treat_all: tuple[float, float]
    ci_vs_treat_none: tuple[float, float]
    sd_vs_treat_all: float
    sd_vs_treat_none: float
    level: float
    B: int
    failed: int
    retried: int

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


SearchFn = Callable[[ValueSurface, np.random.Generator], Regime]


def ga_search(config: GAConfig | None = None, smooth="auto") -> SearchFn:
    base = config or GAConfig()

    def search(surface: ValueSurface, rng: np.random.Generator) -> Regime:
        cfg = GAConfig(**{**base.__dict__, "seed": int(rng.integers(0, 2**63))})
        return optimize(surface.objective(smooth), surface.design.shape[1], cfg).eta_hat

    return search


def _differences(dataset: Dataset, kind: EstimatorKind, search: SearchFn, t: float, rng, nuisance_kw):
    nuisance = fit_nuisances(dataset, **nuisance_kw)
    surface = ValueSurface(dataset, nuisance, kind, t)
    smooth = "auto" if kind.smoothed else None
    eta = search(surface, rng)
    p = dataset.p
    v = surface.values(
        np.vstack([eta.eta, constant_regime(p, 1).eta, constant_regime(p, 0).eta]), smooth
    )
    return v[0] - v[1], v[0] - v[2]


def bootstrap_ci(
    dataset: Dataset,
    method: EstimatorKind,
    search: SearchFn | None = None,
    t: float = 2.0,
    B: int = 500,
    level: float = 0.9,
    seed: int = 0,
    max_retries: int = 10,
    nuisance_kw: dict | None = None,
) -> BootstrapResult:
    """Percentile intervals for S(t; eta_hat) - S(t; all-1) and - S(t; all-0).

    Each resample refits every nuisance model and reruns the regime search.
    A failing resample is redrawn up to ``max_retries`` times, then counted.
    """
    if B < 50:
        raise InvalidArgumentError("B must be at least 50")
    if not 0 < level < 1:
        raise InvalidArgumentError("level must lie in (0, 1)")
    search = search or ga_search()
    nuisance_kw = nuisance_kw or {}
    rng = np.random.default_rng(seed)
    point = _differences(dataset, method, search, t, rng, nuisance_kw)
    draws, failed, retried = [], 0, 0
    for _ in range(B):
        for attempt in range(max_retries + 1):
            idx = rng.integers(0, dataset.n, dataset.n)
            try:
                draws.append(_differences(dataset.take(idx), method, search, t, rng, nuisance_kw))
                break
            except Exception:  # noqa: BLE001 - counted below
                if attempt == max_retries:
                    failed += 1
                else:
                    retried += 1
    if len(draws) < 2:
        raise RuntimeError("too few successful bootstrap resamples")
    D = np.array(draws)
    q = [(1 - level) / 2, (1 + level) / 2]
    ci1 = np.quantile(D[:, 0], q)
    ci0 = np.quantile(D[:, 1], q)
    return BootstrapResult(
        estimate_vs_treat_all=float(point[0]),
        estimate_vs_treat_none=float(point[1]),
        ci_vs_treat_all=(float(ci1[0]), float(ci1[1])),
        ci_vs_treat_none=(float(ci0[0]), float(ci0[1])),
        sd_vs_treat_all=float(D[:, 0].std(ddof=1)),
        sd_vs_treat_none=float(D[:, 1].std(ddof=1)),
        level=level,
        B=B,
        failed=failed,
        retried=retried,
    )
