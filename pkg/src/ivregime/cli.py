"""Command-line entry point: ``ivregime {simulate,estimate,benchmark}``.

Every flag has a matching key in the optional ``--config`` JSON file; flags
win over the file and the file wins over built-in defaults. Results are
JSON documents with sorted keys so identical runs give identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ivregime import __version__
from ivregime.data import Dataset, DatasetValidationError, validate_dataset
from ivregime.estimators import ALL_SMOOTHED, EstimatorKind, ValueSurface
from ivregime.evaluation import bootstrap_ci, ga_search, run_benchmark
from ivregime.nuisance import fit_nuisances
from ivregime.optimizer import GAConfig, optimize
from ivregime.simgen import ScenarioSpec, calibrated, sample_cohort

REQUIRED_COLUMNS = ("time", "status", "treatment", "instrument")


class SchemaError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# -- CSV ---------------------------------------------------------------------


def _fmt(x) -> str:
    return format(float(x), ".17g")


def load_csv(path, normalize: Sequence[str] | None = None) -> tuple[Dataset, dict[str, list[float]]]:
    """Read ``time,status,treatment,instrument,L1..Lp`` into a Dataset.

    Columns named in ``normalize`` are min-max scaled to [0, 1]; the
    (min, max) used for each is returned alongside the data.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("input file is empty (no header row)") from None
        rows = list(reader)
    missing = [c for c in REQUIRED_COLUMNS if c not in header]
    cov_cols = sorted((h for h in header if h[:1] == "L" and h[1:].isdigit()), key=lambda h: int(h[1:]))
    if not cov_cols:
        missing.append("L1")
    elif cov_cols != [f"L{j}" for j in range(1, len(cov_cols) + 1)]:
        raise SchemaError(f"covariate columns must be L1..Lp without gaps, found {cov_cols}")
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    pos = {h: i for i, h in enumerate(header)}
    columns = list(REQUIRED_COLUMNS) + cov_cols

    problems = []
    values = np.full((len(rows), len(columns)), np.nan)
    for r, row in enumerate(rows):
        if len(row) != len(header):
            problems.append((r, f"expected {len(header)} cells, found {len(row)}"))
            continue
        for j, col in enumerate(columns):
            cell = row[pos[col]].strip()
            try:
                values[r, j] = float(cell)
            except ValueError:
                problems.append((r, f"column {col}: non-numeric value {cell!r}"))
    if problems:
        raise DatasetValidationError(problems)

    scaling = {}
    for col in normalize or ():
        if col not in cov_cols:
            raise SchemaError(f"cannot normalize unknown covariate column {col!r}")
        j = columns.index(col)
        lo, hi = float(values[:, j].min()), float(values[:, j].max())
        if not hi > lo:
            raise SchemaError(f"column {col} is constant; min-max scaling undefined")
        values[:, j] = (values[:, j] - lo) / (hi - lo)
        scaling[col] = [lo, hi]

    records = [dict(zip(columns, v)) for v in values]
    return validate_dataset(records), scaling


def write_csv(path, dataset: Dataset, extra: dict[str, np.ndarray] | None = None) -> None:
    extra = extra or {}
    header = list(REQUIRED_COLUMNS) + [f"L{j + 1}" for j in range(dataset.p)] + list(extra)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            w.writerow(
                [
                    _fmt(dataset.time[i]),
                    int(dataset.status[i]),
                    int(dataset.treatment[i]),
                    int(dataset.instrument[i]),
                    *(_fmt(x) for x in dataset.covariates[i]),
                    *(_fmt(col[i]) for col in extra.values()),
                ]
            )


# -- configuration -----------------------------------------------------------

SCENARIO_KEYS = (
    "setting",
    "iv_coefficient",
    "u_distribution",
    "z_mechanism",
    "censoring",
    "target_censor_rate",
    "horizon",
    "c0",
)
GA_KEYS = tuple(f for f in GAConfig.__dataclass_fields__ if f != "seed")
DEFAULT_METHODS = [k.label for k in ALL_SMOOTHED]

DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {
        **{k: ScenarioSpec.__dataclass_fields__[k].default for k in SCENARIO_KEYS},
        "n": 500,
        "seed": None,
        "output": None,
        "latent_output": None,
    },
    "estimate": {
        "input": None,
        "t": None,
        "methods": DEFAULT_METHODS,
        "seed": 0,
        "normalize": [],
        "censoring_model": "marginal",
        "fz_model": "full",
        "bootstrap": 0,
        "level": 0.9,
        "output": None,
        **{k: GAConfig.__dataclass_fields__[k].default for k in GA_KEYS},
    },
    "benchmark": {
        **{k: ScenarioSpec.__dataclass_fields__[k].default for k in SCENARIO_KEYS},
        "n": 500,
        "replications": 100,
        "methods": DEFAULT_METHODS,
        "seed": None,
        "fz_model": "full",
        "workers": None,
        "output": None,
        **{k: GAConfig.__dataclass_fields__[k].default for k in GA_KEYS},
    },
}
# keys that never change results and so stay out of the echoed config
_NOT_ECHOED = {"output", "latent_output", "workers", "config"}


def _csv_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _add_scenario(p: argparse.ArgumentParser) -> None:
    p.add_argument("--setting", choices=["a", "b", "c", "d"])
    p.add_argument("--iv-coefficient", type=float)
    p.add_argument("--u-distribution", choices=["bridge", "normal", "uniform"])
    p.add_argument("--z-mechanism", choices=["bernoulli", "covariate"])
    p.add_argument("--censoring", choices=["uniform", "shifted_uniform", "cox"])
    p.add_argument("--target-censor-rate", type=float)
    p.add_argument("--horizon", type=float, help="time horizon t (default 2)")
    p.add_argument("--c0", type=float, help="uniform censoring bound; calibrated when omitted")


def _add_ga(p: argparse.ArgumentParser) -> None:
    p.add_argument("--population-size", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--crossover-rate", type=float)
    p.add_argument("--mutation-rate", type=float)
    p.add_argument("--mutation-scale", type=float)
    p.add_argument("--elite-count", type=int)
    p.add_argument("--stall-generations", type=int)
    p.add_argument("--tournament-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivregime", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ivregime {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = dict(argument_default=argparse.SUPPRESS)

    sim = sub.add_parser("simulate", help="write a synthetic cohort to CSV", **common)
    _add_scenario(sim)
    sim.add_argument("--n", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--output", help="cohort CSV path")
    sim.add_argument("--latent-output", help="optional CSV with U, eps, T0, T1, C per subject")

    est = sub.add_parser("estimate", help="estimate optimal regimes from a CSV", **common)
    est.add_argument("--input")
    est.add_argument("--t", type=float, help="time horizon (required)")
    est.add_argument("--methods", type=_csv_list, help="comma-separated estimator labels")
    est.add_argument("--seed", type=int)
    est.add_argument("--normalize", type=_csv_list, help="covariate columns to min-max scale")
    est.add_argument("--censoring-model", choices=["marginal", "cox"])
    est.add_argument("--fz-model", choices=["full", "intercept"])
    est.add_argument("--bootstrap", type=int, help="bootstrap resamples B (0 = off)")
    est.add_argument("--level", type=float)
    est.add_argument("--output")
    _add_ga(est)

    bench = sub.add_parser("benchmark", help="Monte Carlo comparison of estimators", **common)
    _add_scenario(bench)
    bench.add_argument("--n", type=int)
    bench.add_argument("--replications", type=int)
    bench.add_argument("--methods", type=_csv_list)
    bench.add_argument("--seed", type=int, help="master seed (required)")
    bench.add_argument("--fz-model", choices=["full", "intercept"])
    bench.add_argument("--workers", type=int, help="worker processes (env IVREGIME_WORKERS)")
    bench.add_argument("--output")
    _add_ga(bench)

    for p in (sim, est, bench):
        p.add_argument("--config", help="JSON file with any of the flag keys")
    return parser


def resolve_config(command: str, flags: dict[str, Any]) -> dict[str, Any]:
    config = dict(DEFAULTS[command])
    path = flags.get("config")
    if path:
        loaded = json.loads(Path(path).read_text())
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        loaded = loaded.get("config", loaded)  # accept a previous results document
        unknown = sorted(set(loaded) - set(config) - {"command", "version"})
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        config.update({k: v for k, v in loaded.items() if k in config})
    config.update({k: v for k, v in flags.items() if k not in ("config", "command")})
    _validate(command, config)
    return config


def _validate(command: str, c: dict[str, Any]) -> None:
    def need(key, msg=None):
        if c.get(key) is None:
            raise ConfigError(msg or f"--{key.replace('_', '-')} is required for {command}")

    if command in ("simulate", "benchmark"):
        need("seed", "--seed is required" + (" for benchmark runs" if command == "benchmark" else ""))
        need("n")
        if int(c["n"]) < 10:
            raise ConfigError("n must be at least 10")
    if command == "simulate":
        need("output")
    if command == "benchmark" and int(c["replications"]) < 1:
        raise ConfigError("replications must be at least 1")
    if command == "estimate":
        need("input")
        need("t", "--t is required for external data")
        if not float(c["t"]) > 0:
            raise ConfigError("t must be positive")
        if c["bootstrap"] and int(c["bootstrap"]) < 50:
            raise ConfigError("bootstrap needs B >= 50 (or 0 to disable)")
        if not 0 < float(c["level"]) < 1:
            raise ConfigError("level must lie in (0, 1)")
    for label in c.get("methods") or ():
        EstimatorKind.parse(label)


def _scenario(c: dict[str, Any]) -> ScenarioSpec:
    return ScenarioSpec(**{k: c[k] for k in SCENARIO_KEYS})


def _ga(c: dict[str, Any], seed: int) -> GAConfig:
    return GAConfig(seed=seed, **{k: c[k] for k in GA_KEYS})


def _echo(command: str, c: dict[str, Any]) -> dict[str, Any]:
    return {"command": command, **{k: v for k, v in c.items() if k not in _NOT_ECHOED}}


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _emit(doc: dict, output: str | None) -> None:
    text = json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


# -- commands ----------------------------------------------------------------


def cmd_simulate(c: dict[str, Any]) -> dict:
    spec = calibrated(_scenario(c))
    cohort = sample_cohort(spec, int(c["n"]), np.random.default_rng(int(c["seed"])))
    write_csv(c["output"], cohort.dataset)
    if c.get("latent_output"):
        write_csv(
            c["latent_output"],
            cohort.dataset,
            {"U": cohort.U, "eps": cohort.eps, "T0": cohort.T0, "T1": cohort.T1, "C": cohort.C},
        )
    ds = cohort.dataset
    return {
        "version": __version__,
        "config": _echo("simulate", c),
        "c0": spec.c0,
        "n": ds.n,
        "censored_fraction": float(1 - ds.status.mean()),
    }


def cmd_estimate(c: dict[str, Any]) -> dict:
    dataset, scaling = load_csv(c["input"], c.get("normalize"))
    t = float(c["t"])
    nuisance_kw = {"fz_model": c["fz_model"], "censoring": c["censoring_model"]}
    nuisance = fit_nuisances(dataset, **nuisance_kw)
    results = {}
    for j, label in enumerate(c["methods"]):
        kind = EstimatorKind.parse(label)
        seed = int(np.random.SeedSequence([int(c["seed"]), j]).generate_state(1, np.uint64)[0])
        ga = _ga(c, seed)
        surface = ValueSurface(dataset, nuisance, kind, t)
        smooth = "auto" if kind.smoothed else None
        res = optimize(surface.objective(smooth), dataset.p + 1, ga)
        est = surface.estimate(res.eta_hat, smooth)
        entry = {
            "eta_hat": res.eta_hat.tolist(),
            "value": est.value,
            "diagnostics": {
                **est.diagnostics,
                "ga_generations": len(res.history),
                "ga_evaluations": res.evaluations,
                "ga_discarded": res.discarded,
                "ga_best_first": res.history[0],
                "ga_best_last": res.history[-1],
            },
        }
        if c["bootstrap"]:
            boot = bootstrap_ci(
                dataset,
                kind,
                ga_search(ga, smooth),
                t=t,
                B=int(c["bootstrap"]),
                level=float(c["level"]),
                seed=seed,
                nuisance_kw=nuisance_kw,
            )
            entry["bootstrap"] = boot.to_dict()
        results[kind.label] = entry
    return {
        "version": __version__,
        "config": _echo("estimate", c),
        "n": dataset.n,
        "p": dataset.p,
        "normalization": scaling,
        "results": results,
    }


def cmd_benchmark(c: dict[str, Any]) -> dict:
    report = run_benchmark(
        _scenario(c),
        [EstimatorKind.parse(m) for m in c["methods"]],
        n=int(c["n"]),
        replications=int(c["replications"]),
        master_seed=int(c["seed"]),
        ga_config=_ga(c, 0),
        fz_model=c["fz_model"],
        workers=c.get("workers"),
    )
    return {"config": _echo("benchmark", c), **report.to_dict()}


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "benchmark": cmd_benchmark}


def _error_block(exc: BaseException) -> dict:
    block = {"type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, DatasetValidationError):
        block["violations"] = [{"row": r, "message": m} for r, m in exc.violations]
    return {"error": block, "version": __version__}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    flags = vars(ns)
    command = flags.pop("command")
    try:
        config = resolve_config(command, flags)
        doc = COMMANDS[command](config)
        _emit(doc, config.get("output") if command != "simulate" else None)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable block
        sys.stderr.write(json.dumps(_clean(_error_block(exc)), sort_keys=True) + "\n")
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
