import math

import numpy as np
import pytest
from scipy import stats

from copulajm.data import Dataset, ModelSpec, ParamVector, SubjectRecord
from copulajm.likelihood import (
    CENSORED,
    EVENT,
    SURVIVAL_ONLY,
    latent_scores,
    loglik_censored_gaussian,
    loglik_censored_t,
    loglik_event_gaussian,
    loglik_event_t,
    subject_contributions,
    subject_loglik,
    total_loglik,
)
from copulajm.simulation import simulate_dataset, study1_truth, study_spec
from oracles import censored_by_quadrature, joint_log_density, random_case

GAUSS = ModelSpec("gaussian", None, "exchangeable", "constant")
T4 = ModelSpec("t", 4.0, "exchangeable", "constant")


def median_time(theta):
    # F(t) = 1/2 for the intercept-only survival design
    return (math.log(2) * math.exp(-theta.beta2[0])) ** (1 / theta.r)


def one_visit(theta, y, event):
    return SubjectRecord("a", [0], [y], [[1.0]], [1.0], median_time(theta), event)


def test_latent_scores():
    th = ParamVector([2.0], [-1.0], 1.5, 2.0, [0.6], 0.4)
    s = one_visit(th, 2.0, 1)
    st, sy = latent_scores(s, th, "gaussian")
    assert st == pytest.approx(0.0, abs=1e-14) and sy[0] == 0.0
    st, sy = latent_scores(s, th, "t", 4.0)
    assert st == pytest.approx(0.0, abs=1e-14)
    s = one_visit(th, 4.0, 1)
    assert latent_scores(s, th, "gaussian")[1][0] == 1.0
    assert latent_scores(s, th, "t", 4.0)[1][0] == pytest.approx(stats.t.ppf(stats.norm.cdf(1.0), 4), abs=1e-12)


def test_symmetric_closed_cases():
    th = ParamVector([0.0], [0.0], 1.0, 1.0, [0.6], 0.4)
    R = np.array([[1.0, 0.6], [0.6, 1.0]])
    # event at the median with a zero residual: phi_2(0, 0; R) f(t) / phi(0)
    s = one_visit(th, 0.0, 1)
    f_t = 0.5  # exponential density at its median, rate 1
    expected = stats.multivariate_normal(np.zeros(2), R).logpdf([0, 0]) + math.log(f_t) - stats.norm.logpdf(0)
    assert loglik_event_gaussian(s, th, GAUSS, 5) == pytest.approx(expected, abs=1e-13)
    s = one_visit(th, 0.0, 0)
    assert loglik_censored_gaussian(s, th, GAUSS, 5) == pytest.approx(math.log(0.3989422804014327 * 0.5), abs=1e-13)
    assert loglik_censored_t(s, th, T4, 5) == pytest.approx(math.log(0.3989422804014327 * 0.5), abs=1e-13)
    s = one_visit(th, 0.0, 1)
    expected = (stats.multivariate_t(np.zeros(2), R, df=4).logpdf([0, 0]) - 2 * stats.t.logpdf(0, 4)
                + stats.norm.logpdf(0) + math.log(f_t))
    assert loglik_event_t(s, th, T4, 5) == pytest.approx(expected, abs=1e-13)


def test_entry_points_check_routing():
    th = ParamVector([0.0], [0.0], 1.0, 1.0, [0.6], 0.4)
    with pytest.raises(ValueError):
        loglik_event_gaussian(one_visit(th, 0.0, 0), th, GAUSS, 5)
    with pytest.raises(ValueError):
        loglik_censored_t(one_visit(th, 0.0, 0), th, GAUSS, 5)


def test_survival_only_subjects():
    th = ParamVector([1.0], [-1.2], 1.7, 2.0, [0.5], 0.3)
    for spec in (GAUSS, T4):
        for event in (0, 1):
            s = SubjectRecord("z", [], [], np.zeros((0, 1)), [1.0], 2.3, event)
            H = 2.3 ** 1.7 * math.exp(-1.2)
            logf = math.log(1.7) + 0.7 * math.log(2.3) - 1.2 - H
            res = subject_loglik(s, th, spec, 5)
            assert res.path == SURVIVAL_ONLY
            assert res.value == pytest.approx(logf if event else -H, abs=1e-14)


def test_paths():
    th = ParamVector([0.0], [0.0], 1.0, 1.0, [0.6], 0.4)
    assert subject_loglik(one_visit(th, 0.3, 1), th, GAUSS, 5).path == EVENT
    assert subject_loglik(one_visit(th, 0.3, 0), th, GAUSS, 5).path == CENSORED


@pytest.mark.parametrize("family", ["gaussian", "t"])
def test_event_form_matches_copula_construction(family):
    rng = np.random.default_rng(7 if family == "gaussian" else 8)
    for _ in range(10):
        s, th, spec = random_case(rng, family, int(rng.integers(1, 4)), event=1)
        assert subject_loglik(s, th, spec, 5).value == pytest.approx(joint_log_density(s.time, s, th, spec, 5), abs=1e-8)


@pytest.mark.parametrize("family", ["gaussian", "t"])
def test_censored_form_matches_quadrature(family):
    rng = np.random.default_rng(21 if family == "gaussian" else 22)
    for _ in range(5):
        s, th, spec = random_case(rng, family, int(rng.integers(1, 4)), event=0)
        closed = subject_loglik(s, th, spec, 5).value
        quad = censored_by_quadrature(s, th, spec, 5)
        assert abs(math.exp(closed - quad) - 1) <= 1e-6


def test_zero_cross_factorizes_gaussian():
    rng = np.random.default_rng(2)
    th = ParamVector([1.0], [-1.0], 1.4, 1.7, [], 0.45)
    spec = ModelSpec("gaussian", None, "ar1", "zero")
    for event in (0, 1):
        visits = [0, 2, 3]
        y = rng.normal(1.0, 1.7, 3)
        s = SubjectRecord("f", visits, y, np.ones((3, 1)), [1.0], 3.0, event)
        R_y = 0.45 ** np.abs(np.subtract.outer(visits, visits))
        H = 3.0 ** 1.4 * math.exp(-1.0)
        surv = (math.log(1.4) + 0.4 * math.log(3.0) - 1.0 - H) if event else -H
        expected = stats.multivariate_normal(np.ones(3), 1.7 ** 2 * R_y).logpdf(y) + surv
        assert subject_loglik(s, th, spec, 5).value == pytest.approx(expected, abs=1e-10)


def test_zero_cross_does_not_factorize_t():
    th = ParamVector([0.0], [0.0], 1.0, 1.0, [], 0.3)
    spec_t = ModelSpec("t", 4.0, "exchangeable", "zero")
    s = SubjectRecord("g", [0, 1], [2.0, 1.5], np.ones((2, 1)), [1.0], 2.0, 1)
    R_y = np.array([[1.0, 0.3], [0.3, 1.0]])
    separate = stats.multivariate_normal(np.zeros(2), R_y).logpdf([2.0, 1.5]) + math.log(2.0) - 2.0
    assert abs(subject_loglik(s, th, spec_t, 5).value - separate) > 1e-3


def test_t_tends_to_gaussian_per_subject():
    rng = np.random.default_rng(4)
    for _ in range(10):
        s, th, spec = random_case(rng, "gaussian", int(rng.integers(1, 4)), event=int(rng.integers(0, 2)))
        big = spec.with_(copula="t", df=1e6)
        assert abs(subject_loglik(s, th, big, 5).value - subject_loglik(s, th, spec, 5).value) < 1e-4


def test_non_pd_gives_minus_inf():
    th = ParamVector([0.0], [0.0], 1.0, 1.0, [0.95], -0.45)
    s = SubjectRecord("n", [0, 1, 2], [0.1, 0.2, 0.3], np.ones((3, 1)), [1.0], 7.0, 1)
    ds = Dataset([0, 1, 2, 3, 4], [s], ["(Intercept)"], ["(Intercept)"])
    assert total_loglik(ds, th, GAUSS) == -np.inf
    assert subject_loglik(s, th, GAUSS, 5).value == -np.inf


def test_total_is_sum_of_subject_terms():
    truth = study1_truth(0.0225, n=60, seed=3)
    ds = simulate_dataset(truth)
    for spec in (truth.spec, study_spec("t", 3.0), study_spec("gaussian", None, "ar1", "power")):
        th = truth.theta
        contrib = subject_contributions(ds, th, spec)
        single = [subject_loglik(s, th, spec, ds.n_visits).value for s in ds.subjects]
        assert np.allclose(contrib, single, rtol=0, atol=1e-11)
        assert total_loglik(ds, th, spec) == float(np.sum(contrib))


def test_total_deterministic_under_reordering():
    truth = study1_truth(0.0, n=80, seed=5)
    ds = simulate_dataset(truth)
    rev = ds.subset(reversed(ds.subjects))
    a = total_loglik(ds, truth.theta, truth.spec)
    b = total_loglik(rev, truth.theta, truth.spec)
    assert a == pytest.approx(b, abs=1e-9)
    assert a == total_loglik(ds, truth.theta, truth.spec)


def test_gradient_continuous_across_event_routing():
    # a subject's censored and event terms are both smooth in theta; check a
    # finite-difference gradient does not jump under small parameter moves
    truth = study1_truth(0.0225, n=40, seed=9)
    ds = simulate_dataset(truth)
    layout = ds.layout(truth.spec)
    x0 = truth.theta.to_array()

    def grad(x):
        g = np.empty_like(x)
        for k in range(x.size):
            h = 1e-6 * max(1, abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            g[k] = (total_loglik(ds, layout.unpack(xp), truth.spec) - total_loglik(ds, layout.unpack(xm), truth.spec)) / (2 * h)
        return g

    g0 = grad(x0)
    g1 = grad(x0 + 1e-4)
    assert np.all(np.isfinite(g0))
    assert np.max(np.abs(g1 - g0)) < 1e-2 * max(1.0, np.max(np.abs(g0)))


def test_extra_measurement_changes_likelihood_surface():
    th = ParamVector([0.5], [-1.0], 1.3, 1.2, [0.4], 0.3)
    short = SubjectRecord("a", [0], [0.9], [[1.0]], [1.0], 5.0, 0)
    long_ = SubjectRecord("a", [0, 1], [0.9, 1.4], np.ones((2, 1)), [1.0], 5.0, 0)
    layout_ds = Dataset([0, 1, 2, 3, 4], [short], ["(Intercept)"], ["(Intercept)"])
    layout = layout_ds.layout(GAUSS)

    def grad(s):
        ds = Dataset([0, 1, 2, 3, 4], [s], ["(Intercept)"], ["(Intercept)"])
        x = th.to_array()
        g = []
        for k in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[k] += 1e-6
            xm[k] -= 1e-6
            g.append((total_loglik(ds, layout.unpack(xp), GAUSS) - total_loglik(ds, layout.unpack(xm), GAUSS)) / 2e-6)
        return np.array(g)

    assert np.max(np.abs(grad(short) - grad(long_))) > 1e-3


def test_nu_limit_total():
    truth = study1_truth(0.0, n=200, seed=12)
    ds = simulate_dataset(truth)
    g = total_loglik(ds, truth.theta, truth.spec)
    t = total_loglik(ds, truth.theta, truth.spec.with_(copula="t", df=1e6))
    assert abs(g - t) < 5e-2
