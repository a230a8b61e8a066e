import numpy as np
import pytest

from ivregime.nuisance import fit_nuisances
from ivregime.simgen import ScenarioSpec, calibrated, sample_cohort


@pytest.fixture(scope="session")
def spec_a():
    return calibrated(ScenarioSpec("a"))


@pytest.fixture(scope="session")
def cohort_a(spec_a):
    return sample_cohort(spec_a, 500, np.random.default_rng(11))


@pytest.fixture(scope="session")
def nuisance_a(cohort_a):
    return fit_nuisances(cohort_a.dataset)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", []):
        for key, value in getattr(rep, "user_properties", []):
            if key == "criterion" and rep.when == "call":
                lines.append((value[0], f"criterion {value[0]}: {'PASS' if rep.passed else 'FAIL'}  {value[1]}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
