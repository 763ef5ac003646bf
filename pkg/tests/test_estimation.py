import math

import numpy as np
import pytest

from copulajm.data import ParamVector
from copulajm.estimation import (
    FitOptions,
    HessianError,
    central_hessian,
    closed_form_profile,
    fit,
    fit_weibull,
    gls_residual_G,
    information_criteria,
    profile_df,
    standard_errors,
)
from copulajm.likelihood import total_loglik
from copulajm.simulation import simulate_dataset, study1_truth, study_spec


def five_point(f, x, k, h):
    def at(d):
        z = x.copy()
        z[k] += d
        return f(z)
    return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)


def test_information_criteria_examples():
    aic, bic = information_criteria(-4282.462, 15, 467)
    # the reference values were computed from an unrounded log-likelihood
    assert aic == pytest.approx(8594.923, abs=2e-3)
    assert bic == pytest.approx(8657.118, abs=2e-3)
    assert information_criteria(-4207.412, 15, 467)[0] == pytest.approx(8444.824, abs=2e-3)
    with pytest.raises(ValueError):
        information_criteria(0.0, 0, 10)


def test_hessian_of_quadratic_toy():
    c = np.array([4.0, 0.25, 9.0])
    H = central_hessian(lambda x: 0.5 * np.sum(c * x * x), np.array([0.3, -2.0, 1.0]))
    assert np.allclose(H, np.diag(c), atol=1e-6)
    se = np.sqrt(np.diag(np.linalg.inv(H)))
    assert np.allclose(se, 1 / np.sqrt(c), rtol=1e-6)


def test_weibull_start_matches_generic_optimizer():
    from scipy import optimize
    rng = np.random.default_rng(1)
    n = 300
    X = np.c_[np.ones(n), rng.integers(0, 2, n)]
    t = (rng.standard_exponential(n) * np.exp(-(X @ [-1.0, 0.7]))) ** (1 / 1.6)
    c = rng.exponential(4.0, n)
    time, event = np.minimum(t, c), (t < c).astype(int)
    b, r = fit_weibull(time, event, X)

    def nll(p):
        rr = math.exp(p[2])
        eta = X @ p[:2]
        return -np.sum(event * (p[2] + (rr - 1) * np.log(time) + eta) - time ** rr * np.exp(eta))

    ref = optimize.minimize(nll, np.zeros(3), method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    assert np.allclose(np.r_[b, math.log(r)], ref.x, atol=1e-5)


@pytest.fixture(scope="module")
def sim_fit():
    truth = study1_truth(0.0, n=200, seed=2)
    ds = simulate_dataset(truth)
    return truth, ds, fit(ds, truth.spec)


def test_fit_recovers_truth(sim_fit):
    truth, ds, res = sim_fit
    assert res.converged
    assert np.all(res.se > 0)
    z = (res.estimates - truth.theta.to_array()) / res.se
    assert np.max(np.abs(z)) < 4
    k = ds.layout(truth.spec).size
    assert res.aic == pytest.approx(-2 * res.loglik + 2 * k)
    assert res.bic == pytest.approx(-2 * res.loglik + k * math.log(len(ds)))


def test_fit_is_stationary(sim_fit):
    truth, ds, res = sim_fit
    layout = ds.layout(truth.spec)
    x = res.estimates
    g = [five_point(lambda a: total_loglik(ds, layout.unpack(a), truth.spec), x, k, 1e-4 * max(1, abs(x[k])))
         for k in range(x.size)]
    assert np.max(np.abs(g)) <= 1e-4 * max(1.0, abs(res.loglik))


def test_standard_errors_reject_non_maximum(sim_fit):
    truth, ds, res = sim_fit
    # far from the optimum along sigma the surface is not concave in every direction
    bad = res.theta.copy()
    bad.sigma = 0.4
    bad.rho_y = 0.9
    with pytest.raises(HessianError) as info:
        standard_errors(ds, truth.spec, bad)
    assert info.value.eigenvalues.size == res.estimates.size


def test_jittered_restarts_agree(sim_fit):
    truth, ds, res = sim_fit
    layout = ds.layout(truth.spec)
    rng = np.random.default_rng(0)
    v = layout.to_unconstrained(res.theta)
    for _ in range(2):
        start = layout.from_unconstrained(v * (1 + rng.uniform(-0.1, 0.1, v.size)))
        again = fit(ds, truth.spec, FitOptions(start=start, compute_se=False))
        assert again.loglik == pytest.approx(res.loglik, abs=1e-4)


def test_zero_cross_truth_gives_small_rho():
    truth = study1_truth(0.0, n=200, seed=8)
    th = truth.theta.copy()
    th.rho_ty = np.array([0.0])
    truth = truth.with_(theta=th)
    ds = simulate_dataset(truth)
    res = fit(ds, truth.spec)
    zero = fit(ds, truth.spec.with_(cross="zero"))
    i = res.names.index("rho_ty")
    assert abs(res.estimates[i]) < 2 * res.se[i]
    assert res.loglik >= zero.loglik - 1e-6


def test_survival_only_fit_equals_weibull_mle():
    truth = study1_truth(0.0225, n=150, seed=6)
    ds = simulate_dataset(truth)
    bare = ds.subset(s.truncated(ds.schedule, -1.0) for s in ds.subjects)
    res = fit(bare, truth.spec.with_(cross="zero"))
    b, r = fit_weibull(ds.time, ds.event, ds.x2)
    layout = ds.layout(truth.spec.with_(cross="zero"))
    assert res.converged and res.k == layout.q + 1
    assert np.allclose(res.theta.beta2, b, atol=1e-4) and res.theta.r == pytest.approx(r, abs=1e-4)


@pytest.fixture(scope="module")
def all_events():
    truth = study1_truth(0.0, n=200, seed=3).with_(follow_up=None)
    ds = simulate_dataset(truth)
    assert np.all(ds.event == 1)
    return truth, ds


def test_closed_form_independence_reduction(all_events):
    truth, ds = all_events
    spec = truth.spec
    cf = closed_form_profile(ds, spec, truth.theta.beta2, truth.theta.r, 0.0, 0.0)
    y, X = ds.stacked_longitudinal()
    b, *_ = np.linalg.lstsq(X, y, rcond=None)
    rss = np.sum((y - X @ b) ** 2)
    assert np.allclose(cf.beta1, b, rtol=1e-10, atol=1e-12)
    assert cf.sigma == pytest.approx(math.sqrt(rss / y.size), rel=1e-10)


def test_closed_form_G_two_ways(all_events):
    truth, ds = all_events
    th = truth.theta
    cf = closed_form_profile(ds, truth.spec, th.beta2, th.r, th.rho_y, th.rho_ty)
    G2 = gls_residual_G(ds, truth.spec, th.rho_y, th.rho_ty, th.beta2, th.r)
    assert cf.G <= 0
    assert cf.G == pytest.approx(G2, rel=1e-10, abs=1e-10)


def test_closed_form_score_equations(all_events):
    truth, ds = all_events
    th = truth.theta
    cf = closed_form_profile(ds, truth.spec, th.beta2, th.r, th.rho_y, th.rho_ty)
    point = ParamVector(cf.beta1, th.beta2, th.r, cf.sigma, th.rho_ty, th.rho_y)
    layout = ds.layout(truth.spec)
    x = point.to_array()
    f = lambda a: total_loglik(ds, layout.unpack(a), truth.spec)  # noqa: E731
    idx = list(range(layout.p)) + [layout.p + layout.q + 1]
    g = np.array([five_point(f, x, k, 1e-3) for k in idx])
    assert np.max(np.abs(g)) <= 1e-8


def test_closed_form_rejects_censoring():
    truth = study1_truth(0.0225, n=30, seed=1)
    ds = simulate_dataset(truth)
    with pytest.raises(ValueError):
        closed_form_profile(ds, truth.spec, truth.theta.beta2, 2.0, 0.4, 0.6)
    with pytest.raises(ValueError):
        closed_form_profile(ds, truth.spec.with_(copula="t", df=4), truth.theta.beta2, 2.0, 0.4, 0.6)


def test_profile_df_limit_and_grid():
    truth = study1_truth(0.0, n=100, seed=4)
    ds = simulate_dataset(truth)
    rows = profile_df(ds, truth.spec, [1e5])
    assert np.isinf(rows[-1].df)
    assert abs(rows[0].loglik - rows[-1].loglik) < 0.5
    with pytest.raises(ValueError):
        profile_df(ds, truth.spec, [2.0])


def test_t_misspecified_fit_runs():
    truth = study1_truth(0.0, n=100, seed=4)
    ds = simulate_dataset(truth)
    res = fit(ds, study_spec("t", 3.0))
    assert res.converged and np.isfinite(res.loglik)
