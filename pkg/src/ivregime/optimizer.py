"""Real-coded genetic algorithm on the unit sphere, plus a lattice search oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ivregime.data import InvalidArgumentError, Regime


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 100
    generations: int = 60
    crossover_rate: float = 0.8
    mutation_rate: float = 0.2
    mutation_scale: float = 0.2
    elite_count: int = 2
    seed: int = 0
    stall_generations: int = 15
    tournament_size: int = 3

    def __post_init__(self):
        if self.population_size < 4:
            raise InvalidArgumentError("population_size must be at least 4")
        if not 0 <= self.elite_count < self.population_size:
            raise InvalidArgumentError("elite_count must be below population_size")
        if not (0 <= self.crossover_rate <= 1 and 0 <= self.mutation_rate <= 1):
            raise InvalidArgumentError("rates must lie in [0, 1]")
        if not self.mutation_scale > 0:
            raise InvalidArgumentError("mutation_scale must be positive")
        if self.generations < 1 or self.stall_generations < 1:
            raise InvalidArgumentError("generations and stall_generations must be positive")


@dataclass
class OptimizationResult:
    eta_hat: Regime
    value: float
    history: list[float] = field(default_factory=list)
    evaluations: int = 0
    discarded: int = 0


def _unit_rows(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    bad = ~(norms > 1e-12)
    if np.any(bad):
        x = x.copy()
        x[bad] = rng.standard_normal((int(bad.sum()), x.shape[1]))
        norms = np.linalg.norm(x, axis=1)
    x = x / norms[:, None]
    return x / np.linalg.norm(x, axis=1)[:, None]


class _Evaluator:
    def __init__(self, objective, dim):
        self.single = objective
        self.batch = getattr(objective, "batch", None)
        self.dim = dim
        self.count = 0
        self.discarded = 0

    def __call__(self, etas: np.ndarray) -> np.ndarray:
        self.count += etas.shape[0]
        if self.batch is not None:
            vals = np.asarray(self.batch(etas), dtype=float)
        else:
            vals = np.array([float(self.single(e)) for e in etas])
        bad = ~np.isfinite(vals)
        self.discarded += int(bad.sum())
        return np.where(bad, -np.inf, vals)


def optimize(objective: Callable[[np.ndarray], float], dim: int, config: GAConfig | None = None) -> OptimizationResult:
    """Maximize ``objective`` over unit vectors of length ``dim``.

    Objectives exposing a ``batch(etas)`` method are scored a generation at
    a time. The random stream is consumed only by this driver, so the result
    depends on the seed alone.
    """
    config = config or GAConfig()
    if dim < 1:
        raise InvalidArgumentError("dim must be positive")
    rng = np.random.default_rng(config.seed)
    evaluate = _Evaluator(objective, dim)
    P = config.population_size

    pop = _unit_rows(rng.standard_normal((P, dim)), rng)
    fit = evaluate(pop)
    if not np.any(np.isfinite(fit)):
        raise OptimizationError("objective is non-finite on the whole initial population")
    best_i = int(np.argmax(fit))
    best_eta, best_val = pop[best_i].copy(), float(fit[best_i])
    history = [best_val]
    stall_ref, stall = best_val, 0

    for _ in range(config.generations - 1):
        order = np.argsort(-fit, kind="stable")
        elites = order[: config.elite_count]
        n_child = P - config.elite_count

        contenders = rng.integers(0, P, size=(2, n_child, config.tournament_size))
        winners = np.take_along_axis(contenders, np.argmax(fit[contenders], axis=2)[..., None], axis=2)[..., 0]
        mom, dad = pop[winners[0]], pop[winners[1]]
        cross = rng.random(n_child) < config.crossover_rate
        alpha = rng.random((n_child, dim))
        children = np.where(cross[:, None], alpha * mom + (1 - alpha) * dad, mom)
        mutate = rng.random(n_child) < config.mutation_rate
        noise = rng.normal(0.0, config.mutation_scale, (n_child, dim))
        children = children + mutate[:, None] * noise
        children = _unit_rows(children, rng)

        child_fit = evaluate(children)
        if not np.any(np.isfinite(child_fit)) and not np.any(np.isfinite(fit[elites])):
            raise OptimizationError("a whole generation evaluated to non-finite values")
        pop = np.vstack([pop[elites], children])
        fit = np.concatenate([fit[elites], child_fit])

        j = int(np.argmax(child_fit))
        if child_fit[j] > best_val:
            best_eta, best_val = children[j].copy(), float(child_fit[j])
        history.append(best_val)
        if best_val > stall_ref + 1e-6:
            stall_ref, stall = best_val, 0
        else:
            stall += 1
            if stall >= config.stall_generations:
                break

    return OptimizationResult(
        eta_hat=Regime(best_eta),
        value=best_val,
        history=history,
        evaluations=evaluate.count,
        discarded=evaluate.discarded,
    )


def sphere_lattice(resolution_deg: float = 1.0) -> np.ndarray:
    """Cell-centre (polar, azimuth) lattice mapped to unit 3-vectors."""
    n_theta = int(round(180.0 / resolution_deg))
    n_phi = int(round(360.0 / resolution_deg))
    theta = np.deg2rad((np.arange(n_theta) + 0.5) * resolution_deg)
    phi = np.deg2rad(np.arange(n_phi) * resolution_deg)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    pts = np.stack([np.cos(th), np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph)], axis=-1)
    pts = pts.reshape(-1, 3)
    return pts / np.linalg.norm(pts, axis=1)[:, None]


def grid_search_sphere(objective, dim: int = 3, resolution_deg: float = 1.0, chunk: int = 2048) -> OptimizationResult:
    """Exhaustive argmax of ``objective`` over the 2-sphere lattice."""
    if dim != 3:
        raise InvalidArgumentError("grid_search_sphere only supports dim = 3")
    pts = sphere_lattice(resolution_deg)
    evaluate = _Evaluator(objective, dim)
    vals = np.concatenate([evaluate(pts[i : i + chunk]) for i in range(0, len(pts), chunk)])
    k = int(np.argmax(vals))
    return OptimizationResult(
        eta_hat=Regime(pts[k]),
        value=float(vals[k]),
        history=[float(vals[k])],
        evaluations=evaluate.count,
        discarded=evaluate.discarded,
    )
