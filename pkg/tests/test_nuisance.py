import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.special import expit

from ivregime.data import Dataset
from ivregime.nuisance import (
    ConfigurationError,
    LogisticModel,
    MarginalCensoring,
    MonotoneLikelihoodError,
    NuisanceSet,
    SeparationError,
    censor_survival,
    cox_survival,
    delta_L,
    design_matrix,
    fit_cox,
    fit_logistic,
    fit_nuisances,
    outcome_cox_design,
    predict_logistic,
)
from ivregime.survival import km_survival, nelson_aalen


def loglik(X, y, b):
    eta = X @ b
    return np.sum(y * eta - np.logaddexp(0, eta))


def cox_score(X, time, status, beta):
    """Breslow score by a direct loop over events."""
    score = np.zeros(X.shape[1])
    for i in np.nonzero(status)[0]:
        risk = time >= time[i]
        w = np.exp(X[risk] @ beta)
        score += X[i] - (w @ X[risk]) / w.sum()
    return score


# -- logistic ----------------------------------------------------------------


def test_logistic_intercept_only():
    X = np.ones((8, 1))
    assert fit_logistic(X, np.array([0, 1] * 4)).coefficients[0] == pytest.approx(0, abs=1e-10)
    y = np.array([1, 0, 0, 0] * 2)
    assert fit_logistic(X, y).coefficients[0] == pytest.approx(math.log(1 / 3), abs=1e-10)


def test_logistic_matches_grid_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=20)
    y = (rng.random(20) < expit(0.3 + 1.1 * x)).astype(float)
    X = np.column_stack([np.ones(20), x])
    fit = fit_logistic(X, y).coefficients
    # successive zoom of a dense 2-D grid, no derivatives involved
    centre, half = np.zeros(2), 5.0
    for _ in range(8):
        g0 = np.linspace(centre[0] - half, centre[0] + half, 201)
        g1 = np.linspace(centre[1] - half, centre[1] + half, 201)
        B0, B1 = np.meshgrid(g0, g1, indexing="ij")
        eta = B0[..., None] + B1[..., None] * x
        ll = np.sum(y * eta - np.logaddexp(0, eta), axis=-1)
        k = np.unravel_index(np.argmax(ll), ll.shape)
        centre, half = np.array([g0[k[0]], g1[k[1]]]), half / 10
    np.testing.assert_allclose(fit, centre, atol=1e-4)


def test_logistic_score_vanishes():
    rng = np.random.default_rng(5)
    X = np.column_stack([np.ones(300), rng.normal(size=(300, 3))])
    y = (rng.random(300) < expit(X @ [0.2, -1, 0.5, 0])).astype(float)
    b = fit_logistic(X, y).coefficients
    assert np.max(np.abs(X.T @ (y - expit(X @ b)))) < 1e-6


def test_logistic_errors():
    X = np.column_stack([np.ones(6), [-3, -2, -1, 1, 2, 3]])
    with pytest.raises(SeparationError):
        fit_logistic(X, np.array([0, 0, 0, 1, 1, 1]))
    with pytest.raises(ValueError):
        fit_logistic(X, np.ones(6))


def test_predict_logistic_examples():
    assert predict_logistic(LogisticModel(np.array([0.0]), ("1",)), [1.0]) == 0.5
    m = LogisticModel(np.array([-2.5, 1, 5, -0.5]), ("1", "L1", "Z", "U"))
    assert predict_logistic(m, [1, 0, 1, 0]) == pytest.approx(0.9241418199787566, abs=1e-12)
    assert predict_logistic(LogisticModel(np.array([50.0]), ("1",)), [1.0]) == 1 - 1e-10
    with pytest.raises(ValueError):
        predict_logistic(m, [1, 0])


@given(st.floats(-1e6, 1e6))
@settings(max_examples=100, deadline=None)
def test_predict_logistic_clamped(v):
    p = predict_logistic(LogisticModel(np.array([v]), ("1",)), [1.0])
    assert 1e-10 <= p <= 1 - 1e-10


# -- Cox ---------------------------------------------------------------------


def test_cox_null_model_is_nelson_aalen():
    rng = np.random.default_rng(1)
    time = rng.exponential(size=40).round(1)
    status = rng.integers(0, 2, 40)
    status[0] = 1
    m = fit_cox(np.zeros((40, 1)), time, status)
    assert m.beta[0] == 0
    t, H = nelson_aalen(time, status)
    np.testing.assert_array_equal(m.baseline_times, t)
    np.testing.assert_allclose(m.baseline_cumhaz, H, atol=1e-15)


def test_cox_three_subject_score_root():
    x = np.array([[0.0], [1.0], [0.0]])
    beta = fit_cox(x, np.array([1.0, 2, 3]), np.ones(3)).beta[0]
    root = brentq(lambda b: 1 - math.exp(b) / (math.exp(b) + 2) - math.exp(b) / (math.exp(b) + 1), -5, 5, xtol=1e-14)
    assert abs(beta - root) < 1e-6
    assert root == pytest.approx(math.log(math.sqrt(2)), abs=1e-12)


def test_cox_monotone_likelihood_flagged():
    # the largest covariate value fails first, so the likelihood keeps rising in beta
    with pytest.raises(MonotoneLikelihoodError):
        fit_cox(np.array([[1.0], [0.0], [0.0]]), np.array([1.0, 2, 3]), np.ones(3))


def test_cox_breslow_ties():
    # events at 1 (x=1, x=0), at 2 (x=1), at 3 (x=0); score 2 - 3e^b/(e^b+1) = 0
    x = np.array([[1.0], [0.0], [1.0], [0.0]])
    m = fit_cox(x, np.array([1.0, 1, 2, 3]), np.ones(4))
    assert m.beta[0] == pytest.approx(math.log(2), abs=1e-8)
    np.testing.assert_allclose(m.baseline_cumhaz, [1 / 3, 2 / 3, 5 / 3], atol=1e-8)


def test_cox_score_vanishes_and_survival_identity():
    rng = np.random.default_rng(2)
    n = 200
    X = rng.normal(size=(n, 2))
    T = rng.exponential(1 / np.exp(X @ [0.5, -0.3]))
    C = rng.exponential(2, n)
    time, status = np.minimum(T, C), (T <= C).astype(int)
    m = fit_cox(X, time, status, ["L1", "L2"])
    assert np.max(np.abs(cox_score(X, time, status, m.beta))) < 1e-6
    for s in (0.0, 0.1, 0.5, 2.0):
        l = X[3]
        expect = math.exp(-m.cumhaz0(s) * math.exp(l @ m.beta))
        assert abs(cox_survival(m, s, 0, l[None, :], 0) - expect) < 1e-12
    assert cox_survival(m, m.baseline_times[0] / 2, 0, X[:1], 0) == 1.0


def test_cox_zero_beta_survival():
    x = np.zeros((5, 1))
    m = fit_cox(x, np.array([1.0, 2, 3, 4, 5]), np.array([1, 1, 0, 1, 1]), ["L1"])
    assert cox_survival(m, 2.5, 0, x[:1], 0) == pytest.approx(math.exp(-(1 / 5 + 1 / 4)))


# -- compliance score and censoring -----------------------------------------


def _nuisance(piA: LogisticModel, floor=0.05):
    fz = LogisticModel(np.array([0.0]), ("1",))
    return NuisanceSet(fz, piA, MarginalCensoring(km_survival([1.0, 2.0], [1, 0])), delta_floor=floor)


def test_delta_examples():
    l = np.array([0.0, 0.0])
    piA = LogisticModel(np.array([math.log(0.25), math.log(16.0)]), ("1", "Z"))
    assert delta_L(_nuisance(piA), l) == pytest.approx(0.6, abs=1e-12)
    flat = LogisticModel(np.array([0.3, 0.0]), ("1", "Z"))
    assert delta_L(_nuisance(flat), l) == pytest.approx(0.05)
    assert delta_L(_nuisance(flat, floor=0.1), l) == pytest.approx(0.1)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3))
@settings(max_examples=100, deadline=None)
def test_delta_respects_floor(b0, bz, l1):
    piA = LogisticModel(np.array([b0, bz, 1.0]), ("1", "Z", "L1"))
    assert abs(delta_L(_nuisance(piA), np.array([l1]))) >= 0.05 - 1e-15


def test_censor_survival_at_zero(nuisance_a, cohort_a):
    l = cohort_a.dataset.covariates[0]
    assert censor_survival(nuisance_a, 0.0, 1, l, 1) == 1.0
    cox_nu = fit_nuisances(cohort_a.dataset, censoring="cox")
    assert censor_survival(cox_nu, 0.0, 1, l, 1) == 1.0
    assert 1e-3 <= censor_survival(cox_nu, 3.0, 1, l, 1) <= 1.0


def test_fit_nuisances_options(cohort_a):
    ds = cohort_a.dataset
    nu = fit_nuisances(ds, fz_model="intercept", censoring="cox", censor_columns=["L1", "A"])
    assert nu.fZ.columns == ("1",)
    assert nu.censor.cox.columns == ("L1", "A")
    assert nu.cox.columns == tuple(outcome_cox_design(2))
    assert nu.cox_noiv.columns == ("L1", "L2", "A", "A*L1", "A*L2")
    with pytest.raises(ConfigurationError):
        fit_nuisances(ds, fz_model="bogus")
    with pytest.raises(ConfigurationError):
        fit_nuisances(ds, censoring="weibull")


def test_design_matrix_terms():
    L = np.array([[1.0, 2.0], [3.0, 4.0]])
    X = design_matrix(["1", "Z", "A", "L2", "A*L1", "Z*L2"], np.array([1, 0]), L, 1)
    np.testing.assert_array_equal(X, [[1, 1, 1, 2, 1, 2], [1, 0, 1, 4, 3, 0]])
    with pytest.raises(ConfigurationError):
        design_matrix(["L3"], 0, L, 0)
