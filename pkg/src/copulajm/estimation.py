"""Maximum-likelihood fitting of copula joint models.

The optimizer works on an unconstrained reparametrisation (log for ``sigma``
and ``r``, atanh for correlations).  A short Nelder-Mead run from a cheap
starting point is followed by BFGS polishing with central-difference
gradients; standard errors come from a central-difference Hessian in the
original parameter space.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .corr import NotPositiveDefinite, build_R, cholesky
from .data import Dataset, ModelSpec, ParamLayout, ParamVector
from .likelihood import event_score, survival_margin, total_loglik

log = logging.getLogger(__name__)

#: Objective value returned for points outside the likelihood's domain.
BARRIER = 1e12


class HessianError(np.linalg.LinAlgError):
    """The observed information is not positive definite."""

    def __init__(self, eigenvalues):
        self.eigenvalues = np.asarray(eigenvalues)
        super().__init__(f"Hessian of -loglik is not positive definite; eigenvalues {self.eigenvalues}")


@dataclass
class FitOptions:
    """Knobs for :func:`fit`.

    ``start`` is ``"default"`` or an explicit :class:`ParamVector`.
    ``nm_maxfev`` of ``None`` means ``40 * k`` Nelder-Mead evaluations.
    """

    start: str | ParamVector = "default"
    nm_maxfev: int | None = None
    polish_rounds: int = 5
    polish_maxiter: int = 400
    ftol: float = 1e-8
    xtol: float = 1e-6
    grad_step: float = 1e-5
    hessian_step: float = 1e-4
    compute_se: bool = True


@dataclass
class FitResult:
    theta: ParamVector
    names: list[str]
    se: np.ndarray
    loglik: float
    aic: float
    bic: float
    n_iter: int
    n_eval: int
    converged: bool
    hessian_condition: float
    spec: ModelSpec
    n_subjects: int
    k: int
    at_boundary: bool = False
    message: str = ""
    cov: np.ndarray | None = None
    free: np.ndarray | None = None

    @property
    def estimates(self) -> np.ndarray:
        return self.theta.to_array()

    def to_dict(self) -> dict:
        est = self.estimates
        return {
            "model": {"copula": self.spec.copula, "df": self.spec.df, "within": self.spec.within,
                      "cross": self.spec.cross},
            "parameters": [
                {"name": n, "estimate": float(e), "se": None if not np.isfinite(s) else float(s)}
                for n, e, s in zip(self.names, est, self.se)
            ],
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "k": self.k,
            "n": self.n_subjects,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "n_eval": self.n_eval,
            "hessian_condition": self.hessian_condition,
            "at_boundary": self.at_boundary,
            "message": self.message,
        }


def information_criteria(loglik: float, k: int, n: int) -> tuple[float, float]:
    """``(AIC, BIC)`` with ``k`` estimated parameters and ``n`` subjects."""
    if k < 1 or n < 1:
        raise ValueError(f"need k >= 1 and n >= 1, got k={k}, n={n}")
    return -2.0 * loglik + 2.0 * k, -2.0 * loglik + k * math.log(n)


# ---------------------------------------------------------------------------
# starting values
# ---------------------------------------------------------------------------

def fit_weibull(time, event, x2, max_iter: int = 100, tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Censored Weibull proportional-hazards MLE by damped Newton on ``(beta2, log r)``."""
    t = np.asarray(time, dtype=float)
    d = np.asarray(event, dtype=float)
    X = np.asarray(x2, dtype=float)
    logt = np.log(t)
    q = X.shape[1]

    def loglik(b, a):
        r = math.exp(a)
        eta = X @ b
        return float(np.sum(d * (a + (r - 1.0) * logt + eta)) - np.sum(np.exp(r * logt + eta)))

    b = np.zeros(q)
    b[0] = math.log(max(d.sum(), 0.5) / t.sum())
    a = 0.0
    cur = loglik(b, a)
    for _ in range(max_iter):
        r = math.exp(a)
        H = np.exp(r * logt + X @ b)
        rl = r * logt
        g = np.concatenate([X.T @ (d - H), [np.sum(d * (1.0 + rl)) - np.sum(H * rl)]])
        hess = np.empty((q + 1, q + 1))
        hess[:q, :q] = -(X * H[:, None]).T @ X
        hess[:q, q] = hess[q, :q] = -X.T @ (H * rl)
        hess[q, q] = np.sum(d * rl) - np.sum(H * rl * rl) - np.sum(H * rl)
        try:
            step = np.linalg.solve(hess, -g)
        except np.linalg.LinAlgError:
            step = g * 1e-3
        if g @ step < 0:  # not an ascent direction
            step = g * 1e-3
        lam = 1.0
        while lam > 1e-10:
            nb, na = b + lam * step[:q], a + lam * step[q]
            new = loglik(nb, na)
            if np.isfinite(new) and new >= cur - 1e-12:
                break
            lam *= 0.5
        done = abs(new - cur) < tol * (1.0 + abs(cur))
        b, a, cur = nb, na, new
        if done:
            break
    return b, math.exp(a)


def default_start(dataset: Dataset, spec: ModelSpec) -> ParamVector:
    layout = dataset.layout(spec)
    y, X1 = dataset.stacked_longitudinal()
    if y.size > X1.shape[1]:
        beta1, *_ = np.linalg.lstsq(X1, y, rcond=None)
        resid = y - X1 @ beta1
        sigma = float(np.sqrt(resid @ resid / (y.size - X1.shape[1])))
    else:
        beta1 = np.zeros(layout.p)
        sigma = 1.0
    beta2, r = fit_weibull(dataset.time, dataset.event, dataset.x2)
    return ParamVector(beta1, beta2, r, max(sigma, 1e-3), np.full(layout.n_cross, 0.1), 0.1)


# ---------------------------------------------------------------------------
# numerical derivatives
# ---------------------------------------------------------------------------

def central_gradient(f, x, step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        h = step * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (xp[k] - xm[k])
    return g


def central_hessian(f, x, step: float = 1e-4) -> np.ndarray:
    """Symmetric central-difference Hessian with per-coordinate steps ``step * max(1, |x_k|)``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = step * np.maximum(1.0, np.abs(x))
    f0 = f(x)
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        H[i, i] = (f(x + e) - 2.0 * f0 + f(x - e)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + e + ej) - f(x + e - ej) - f(x - e + ej) + f(x - e - ej)) / (4.0 * h[i] * h[j])
    return 0.5 * (H + H.T)


def _covariance(hess: np.ndarray) -> np.ndarray:
    eig = np.linalg.eigvalsh(hess)
    if not np.all(np.isfinite(eig)) or eig.min() <= 0:
        raise HessianError(eig)
    return np.linalg.inv(hess)


def standard_errors(dataset: Dataset, spec: ModelSpec, theta: ParamVector, step: float = 1e-4,
                    free: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Inverse-Hessian standard errors in the original parameter space.

    Returns ``(se, covariance, condition_number)`` over all parameters; entries
    outside ``free`` are NaN.  Raises :class:`HessianError` when the observed
    information is not positive definite.
    """
    layout = dataset.layout(spec)
    full = theta.to_array()
    free = np.arange(full.size) if free is None else np.asarray(free)

    def negll(sub):
        a = full.copy()
        a[free] = sub
        ll = total_loglik(dataset, layout.unpack(a), spec)
        return -ll if np.isfinite(ll) else BARRIER

    hess = central_hessian(negll, full[free], step)
    cov_free = _covariance(hess)
    cov = np.full((full.size, full.size), np.nan)
    cov[np.ix_(free, free)] = cov_free
    se = np.sqrt(np.diag(cov))
    return se, cov, float(np.linalg.cond(hess))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

class _Objective:
    """Negative log-likelihood over the free unconstrained coordinates; remembers the best point."""

    def __init__(self, dataset, spec, layout: ParamLayout, base: np.ndarray, free: np.ndarray):
        self.dataset, self.spec, self.layout = dataset, spec, layout
        self.base, self.free = base, free
        self.n_eval = 0
        self.best_f = np.inf
        self.best_x = None

    def theta(self, x) -> ParamVector:
        v = self.base.copy()
        v[self.free] = x
        return self.layout.from_unconstrained(v)

    def __call__(self, x) -> float:
        self.n_eval += 1
        try:
            ll = total_loglik(self.dataset, self.theta(x), self.spec)
        except (ValueError, FloatingPointError):
            ll = -np.inf
        f = -ll if np.isfinite(ll) else BARRIER
        if f < self.best_f:
            self.best_f, self.best_x = f, np.array(x, dtype=float)
        return f


def _near_boundary(theta: ParamVector, dataset: Dataset, spec: ModelSpec, tol: float = 1e-6) -> bool:
    corr = theta.correlation(spec, dataset.n_visits)
    for grp in dataset.groups:
        try:
            L = cholesky(build_R(corr, grp.visits))
        except NotPositiveDefinite:
            return True
        if np.min(np.diag(L)) ** 2 < tol:
            return True
    return bool(np.any(np.abs(np.r_[theta.rho_ty, theta.rho_y]) > 1 - tol))


def free_parameters(dataset: Dataset, spec: ModelSpec) -> np.ndarray:
    """Indices of estimable parameters; a survival-only dataset fixes the longitudinal block."""
    layout = dataset.layout(spec)
    if dataset.n_measurements.sum() == 0:
        return np.arange(layout.p, layout.p + layout.q + 1)
    return np.arange(layout.size)


def fit(dataset: Dataset, spec: ModelSpec, options: FitOptions | None = None) -> FitResult:
    """Maximise the exact log-likelihood.

    Never raises on numerical failure: the result carries ``converged=False``
    and a diagnostic message instead.
    """
    if len(dataset) == 0:
        raise ValueError("cannot fit an empty dataset")
    opts = options or FitOptions()
    layout = dataset.layout(spec)
    start = default_start(dataset, spec) if isinstance(opts.start, str) else opts.start
    free = free_parameters(dataset, spec)
    base = layout.to_unconstrained(start)
    obj = _Objective(dataset, spec, layout, base, free)
    x = base[free]
    k = free.size
    msgs = []
    n_iter = 0

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        nm = optimize.minimize(obj, x, method="Nelder-Mead",
                               options={"maxfev": opts.nm_maxfev or 40 * k, "xatol": 1e-4,
                                        "fatol": 1e-4, "adaptive": True})
        n_iter += nm.nit
        x = obj.best_x
        f_prev = obj.best_f
        converged = False

        def jac(z):
            return central_gradient(obj, z, opts.grad_step)

        theta_prev = obj.theta(x).to_array()
        for _ in range(opts.polish_rounds):
            res = optimize.minimize(obj, x, jac=jac, method="BFGS",
                                    options={"gtol": 1e-6 * max(1.0, abs(f_prev)),
                                             "maxiter": opts.polish_maxiter})
            n_iter += res.nit
            x = obj.best_x
            f_new = obj.best_f
            theta_new = obj.theta(x).to_array()
            dparam = float(np.max(np.abs(theta_new - theta_prev)))
            if abs(f_new - f_prev) < opts.ftol and dparam < opts.xtol:
                converged = True
                break
            f_prev, theta_prev = f_new, theta_new

    theta = obj.theta(obj.best_x)
    loglik = -obj.best_f
    if obj.best_f >= BARRIER:
        converged = False
        msgs.append("no point with finite log-likelihood was found")
    elif not converged:
        msgs.append(f"polish did not settle within {opts.polish_rounds} rounds")
    at_boundary = _near_boundary(theta, dataset, spec)
    if at_boundary:
        msgs.append("estimate lies at the positive-definiteness boundary")
        converged = False

    se = np.full(layout.size, np.nan)
    cov = None
    cond = float("nan")
    if opts.compute_se and obj.best_f < BARRIER:
        try:
            se, cov, cond = standard_errors(dataset, spec, theta, opts.hessian_step, free)
        except HessianError as exc:
            msgs.append(str(exc))
            converged = False
    aic, bic = information_criteria(loglik, k, len(dataset))
    return FitResult(theta, layout.names, se, loglik, aic, bic, n_iter, obj.n_eval, converged, cond,
                     spec, len(dataset), k, at_boundary, "; ".join(msgs), cov, free)


# ---------------------------------------------------------------------------
# degrees-of-freedom profile
# ---------------------------------------------------------------------------

@dataclass
class ProfileRow:
    df: float  # np.inf marks the Gaussian reference fit
    loglik: float
    converged: bool
    error: str = ""
    fit: FitResult | None = field(default=None, repr=False)


def profile_df(dataset: Dataset, spec: ModelSpec, df_grid: Sequence[float],
               options: FitOptions | None = None, include_gaussian: bool = True) -> list[ProfileRow]:
    """Independent t-copula fits at each fixed df, plus the Gaussian fit as ``df = inf``."""
    if any(not d > 2 for d in df_grid):
        raise ValueError("every df in the grid must exceed 2")
    rows = []
    jobs = [(float(d), spec.with_(copula="t", df=float(d))) for d in df_grid]
    if include_gaussian:
        jobs.append((np.inf, spec.with_(copula="gaussian", df=None)))
    for d, s in jobs:
        try:
            res = fit(dataset, s, options)
            rows.append(ProfileRow(d, res.loglik, res.converged, res.message, res))
        except Exception as exc:  # a failing grid point must not stop the grid
            log.warning("profile fit at df=%s failed: %s", d, exc)
            rows.append(ProfileRow(d, float("nan"), False, str(exc)))
    return rows


# ---------------------------------------------------------------------------
# closed-form profile estimators (all events observed, Gaussian copula)
# ---------------------------------------------------------------------------

@dataclass
class ClosedFormProfile:
    beta1: np.ndarray
    sigma: float
    G: float
    H: float
    n_measurements: int


def closed_form_profile(dataset: Dataset, spec: ModelSpec, beta2, r: float, rho_y: float,
                        rho_ty) -> ClosedFormProfile:
    """Profile MLE of ``(beta1, sigma)`` at fixed survival and correlation parameters.

    With every event time observed the Gaussian-copula log-likelihood is
    quadratic in ``beta1`` and in ``1/sigma``.  Writing the inverse of each
    subject's correlation block as ``[[A, B'], [B, D]]``, the profile
    estimators are ``beta1 = (X'DX)^{-1} X'(sigma B z_t + D y)`` and the
    positive root of ``M sigma^2 + H sigma + 2 G = 0`` with ``M`` the number
    of measurements.
    """
    if spec.copula != "gaussian":
        raise ValueError("closed-form profile requires the Gaussian copula")
    if np.any(dataset.event != 1):
        raise ValueError("closed-form profile requires every event time to be observed")
    theta = ParamVector(np.zeros(len(dataset.long_names)), beta2, r, 1.0, np.atleast_1d(rho_ty)
                        if spec.cross != "zero" else [], rho_y)
    corr = theta.correlation(spec, dataset.n_visits)
    marg = survival_margin(dataset.time, dataset.x2, theta.beta2, theta.r)
    z_t = event_score(marg.cumhaz, "gaussian")
    p = len(dataset.long_names)
    XDX = np.zeros((p, p))
    XDy = np.zeros(p)
    XBz = np.zeros(p)
    yDy = 0.0
    zBy = 0.0
    M = 0
    for i, s in enumerate(dataset.subjects):
        if s.m == 0:
            continue
        Rinv = np.linalg.inv(build_R(corr, s.visits))
        B = Rinv[1:, 0]
        D = Rinv[1:, 1:]
        XDX += s.X1.T @ D @ s.X1
        XDy += s.X1.T @ D @ s.y
        XBz += s.X1.T @ B * z_t[i]
        yDy += s.y @ D @ s.y
        zBy += z_t[i] * (B @ s.y)
        M += s.m
    if M == 0:
        raise ValueError("no longitudinal measurements")
    sol_y = np.linalg.solve(XDX, XDy)
    G = -0.5 * (yDy - XDy @ sol_y)
    H = -(zBy - XBz @ sol_y)
    sigma = (-H + math.sqrt(H * H - 8.0 * M * G)) / (2.0 * M)
    beta1 = np.linalg.solve(XDX, sigma * XBz + XDy)
    return ClosedFormProfile(beta1, sigma, float(G), float(H), M)


def gls_residual_G(dataset: Dataset, spec: ModelSpec, rho_y: float, rho_ty, beta2, r) -> float:
    """``G`` in its residual form ``-1/2 (y - X b~)' D (y - X b~)``, with ``b~`` the D-weighted GLS fit."""
    theta = ParamVector(np.zeros(len(dataset.long_names)), beta2, r, 1.0, np.atleast_1d(rho_ty)
                        if spec.cross != "zero" else [], rho_y)
    corr = theta.correlation(spec, dataset.n_visits)
    blocks = [(s, np.linalg.inv(build_R(corr, s.visits))[1:, 1:]) for s in dataset.subjects if s.m]
    XDX = sum(s.X1.T @ D @ s.X1 for s, D in blocks)
    XDy = sum(s.X1.T @ D @ s.y for s, D in blocks)
    b = np.linalg.solve(XDX, XDy)
    return float(-0.5 * sum((s.y - s.X1 @ b) @ D @ (s.y - s.X1 @ b) for s, D in blocks))
