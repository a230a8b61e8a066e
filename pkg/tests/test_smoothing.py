import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivregime.data import regime_decide, regime_normalize
from ivregime.smoothing import bandwidth, index_bandwidths, smooth_indicator


def series_cdf(x, terms=80):
    """Phi(x) from the Taylor series of erf, used as an independent oracle."""
    z = x / math.sqrt(2)
    s = sum((-1) ** k * z ** (2 * k + 1) / (math.factorial(k) * (2 * k + 1)) for k in range(terms))
    return 0.5 + s / math.sqrt(math.pi)


def test_bandwidth_examples():
    assert bandwidth(1000, 1.0).h == pytest.approx(0.158740, abs=1e-6)
    assert bandwidth(4, 1.0).h == pytest.approx(1.0, abs=1e-15)
    assert bandwidth(100, 0.0).h > 0


def test_smooth_indicator_examples():
    eta = np.array([0.0, 1.0])
    assert smooth_indicator(eta, [0.0], 1.0) == 0.5
    assert smooth_indicator(eta, [8.0], 1.0) > 1 - 1e-14
    assert smooth_indicator(eta, [1.0], 1.0) == pytest.approx(0.841345, abs=1e-6)
    for x in (-3.0, -1.2, 0.4, 2.5):
        assert smooth_indicator(eta, [x], 1.0) == pytest.approx(series_cdf(x), abs=1e-12)


def test_converges_to_indicator():
    rng = np.random.default_rng(0)
    reg = regime_normalize([0.2, 1, -0.5])
    L = rng.uniform(-2, 2, (200, 2))
    index = reg.eta[0] + L @ reg.eta[1:]
    L = L[np.abs(index) > 0.05]
    target = np.array([regime_decide(reg, l) for l in L])
    errs = [np.max(np.abs(smooth_indicator(reg.eta, L, h) - target)) for h in (1, 0.1, 0.01)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-6


@given(st.floats(-30, 30), st.floats(1e-3, 10))
@settings(max_examples=200, deadline=None)
def test_symmetry_and_range(x, h):
    eta = np.array([0.0, 1.0])
    a, b = smooth_indicator(eta, [x], h), smooth_indicator(eta, [-x], h)
    assert abs(a + b - 1) <= 1e-14
    assert 0 <= a <= 1


def test_index_bandwidths_per_eta():
    rng = np.random.default_rng(1)
    design = np.column_stack([np.ones(500), rng.uniform(-2, 2, (500, 2))])
    etas = np.array([[1.0, 0, 0], [0, 1, 0]])
    h = index_bandwidths(design, etas)
    assert h[0] == pytest.approx(bandwidth(500, 0.0).h)
    assert h[1] == pytest.approx(bandwidth(500, np.std(design[:, 1], ddof=1)).h)
