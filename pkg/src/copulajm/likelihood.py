"""Exact log-likelihood of the Gaussian and Student-t copula joint models.

Each subject contributes the log joint density of its event time and
longitudinal values when the event is observed, and the log of that density
integrated over event times beyond the censoring time otherwise.  Both are
closed form: the event score is split into its conditional law given the
longitudinal scores, so a censored subject only needs a univariate normal or
t tail probability.

Subjects are evaluated in blocks that share an observed-visit pattern, which
lets one Cholesky factor serve the whole block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as sc

from .corr import BlockFactor, NotPositiveDefinite, factor_block
from .data import Dataset, ModelSpec, ParamVector, SubjectRecord
from .special import (
    LOG_SQRT_2PI,
    normal_logpdf,
    normal_to_t_score,
    t_logcdf,
    t_logpdf,
    t_quantile_lower,
)

EVENT = "EventObserved"
CENSORED = "Censored"
SURVIVAL_ONLY = "SurvivalOnly"


@dataclass(frozen=True)
class SubjectLogLik:
    value: float
    path: str


@dataclass(frozen=True)
class Marginals:
    """Per-subject survival-margin quantities at the observed times."""

    eta: np.ndarray
    cumhaz: np.ndarray
    logpdf: np.ndarray


def survival_margin(time, x2, beta2, r) -> Marginals:
    eta = np.asarray(x2) @ np.asarray(beta2)
    t = np.asarray(time, dtype=float)
    H = t ** r * np.exp(eta)
    logf = np.log(r) + (r - 1.0) * np.log(t) + eta - H
    return Marginals(eta, H, logf)


def event_score(cumhaz, family: str, df: float | None = None) -> np.ndarray:
    """Latent score of the event time from its cumulative hazard.

    Gaussian: ``Phi^-1(F(t))`` computed as ``-Phi^-1(S(t))`` from ``log S``,
    which stays finite however far into either tail ``t`` lies.  t family:
    ``Psi^-1(F(t); df)`` with the tail probability clamped away from zero.
    """
    H = np.asarray(cumhaz, dtype=float)
    if family == "gaussian":
        return -sc.ndtri_exp(-H)
    F = -np.expm1(-H)
    S = np.exp(-H)
    lower = F <= 0.5
    return np.where(lower, t_quantile_lower(np.where(lower, F, 0.5), df),
                    -t_quantile_lower(np.where(lower, 0.5, S), df))


def latent_scores(subject: SubjectRecord, theta: ParamVector, family: str = "gaussian",
                  df: float | None = None) -> tuple[float, np.ndarray]:
    """``(score_t, score_y)`` of one subject under the given family."""
    marg = survival_margin([subject.time], subject.x2[None, :], theta.beta2, theta.r)
    st = float(event_score(marg.cumhaz, family, df)[0])
    e = (subject.y - subject.X1 @ theta.beta1) / theta.sigma
    if family == "gaussian":
        return st, e
    return st, normal_to_t_score(e, df)


# ---------------------------------------------------------------------------
# block kernels
# ---------------------------------------------------------------------------

def _gaussian_block(f: BlockFactor, e, st, logf, logS, event, log_sigma):
    m = f.m
    if m == 0:
        return np.where(event == 1, logf, logS)
    u = f.whiten(e)
    log_phi_y = -m * LOG_SQRT_2PI - 0.5 * f.logdet_y - 0.5 * np.sum(u * u, axis=1)
    mu = e @ f.weights
    sd = np.sqrt(f.resid_var)
    x = (st - mu) / sd
    base = log_phi_y - m * log_sigma
    ev = base + logf + normal_logpdf(x) - np.log(sd) - normal_logpdf(st)
    ce = base + sc.log_ndtr(-x)
    return np.where(event == 1, ev, ce)


def _t_block(f: BlockFactor, e, st, logf, logS, event, log_sigma, df):
    m = f.m
    if m == 0:
        return np.where(event == 1, logf, logS)
    w = normal_to_t_score(e, df)
    u = f.whiten(w)
    q = np.sum(u * u, axis=1)
    log_psi_y = (sc.gammaln(0.5 * (df + m)) - sc.gammaln(0.5 * df) - 0.5 * m * np.log(df * np.pi)
                 - 0.5 * f.logdet_y - 0.5 * (df + m) * np.log1p(q / df))
    ratio = np.sum(normal_logpdf(e) - t_logpdf(w, df), axis=1)
    mu = w @ f.weights
    df_c = df + m
    sd = np.sqrt((df + q) * f.resid_var / df_c)
    x = (st - mu) / sd
    base = log_psi_y - m * log_sigma + ratio
    ev = base + logf + t_logpdf(x, df_c) - np.log(sd) - t_logpdf(st, df)
    ce = base + t_logcdf(-x, df_c)
    return np.where(event == 1, ev, ce)


def subject_contributions(dataset: Dataset, theta: ParamVector, spec: ModelSpec) -> np.ndarray:
    """Per-subject log-likelihood terms in dataset order.

    A visit pattern whose correlation block is not positive definite yields
    ``-inf`` for each of its subjects.
    """
    n = len(dataset)
    out = np.empty(n)
    if not (theta.sigma > 0 and theta.r > 0):
        out.fill(-np.inf)
        return out
    marg = survival_margin(dataset.time, dataset.x2, theta.beta2, theta.r)
    st_all = event_score(marg.cumhaz, spec.copula, spec.df)
    corr = theta.correlation(spec, dataset.n_visits)
    log_sigma = np.log(theta.sigma)
    event = dataset.event
    for grp in dataset.groups:
        idx = grp.index
        try:
            f = factor_block(corr, grp.visits)
        except NotPositiveDefinite:
            out[idx] = -np.inf
            continue
        e = (grp.y - grp.X1 @ theta.beta1) / theta.sigma
        args = (f, e, st_all[idx], marg.logpdf[idx], -marg.cumhaz[idx], event[idx], log_sigma)
        if spec.copula == "gaussian":
            out[idx] = _gaussian_block(*args)
        else:
            out[idx] = _t_block(*args, spec.df)
    return out


def total_loglik(dataset: Dataset, theta: ParamVector, spec: ModelSpec) -> float:
    """Sum of subject terms.

    ``np.sum`` reduces a contiguous array with a fixed pairwise tree, so the
    result does not depend on the order in which blocks were evaluated.
    """
    contrib = subject_contributions(dataset, theta, spec)
    if not np.all(np.isfinite(contrib)):
        return -np.inf
    return float(np.sum(contrib))


# ---------------------------------------------------------------------------
# single-subject entry points
# ---------------------------------------------------------------------------

def subject_loglik(subject: SubjectRecord, theta: ParamVector, spec: ModelSpec, n_visits: int) -> SubjectLogLik:
    path = SURVIVAL_ONLY if subject.m == 0 else (EVENT if subject.event else CENSORED)
    return SubjectLogLik(_eval_subject(subject, theta, spec, n_visits), path)


def _eval_subject(subject, theta, spec, n_visits) -> float:
    marg = survival_margin([subject.time], subject.x2[None, :], theta.beta2, theta.r)
    st = event_score(marg.cumhaz, spec.copula, spec.df)
    if subject.m == 0:
        return float(marg.logpdf[0] if subject.event else -marg.cumhaz[0])
    try:
        f = factor_block(theta.correlation(spec, n_visits), subject.visits)
    except NotPositiveDefinite:
        return -np.inf
    e = ((subject.y - subject.X1 @ theta.beta1) / theta.sigma)[None, :]
    args = (f, e, st, marg.logpdf, -marg.cumhaz, np.array([subject.event]), np.log(theta.sigma))
    if spec.copula == "gaussian":
        return float(_gaussian_block(*args)[0])
    return float(_t_block(*args, spec.df)[0])


def _require(subject: SubjectRecord, event: int, spec: ModelSpec, copula: str):
    if subject.event != event:
        raise ValueError(f"subject {subject.id}: expected delta={event}")
    if spec.copula != copula:
        raise ValueError(f"expected a {copula} copula spec")


def loglik_event_gaussian(subject, theta, spec, n_visits) -> float:
    _require(subject, 1, spec, "gaussian")
    return _eval_subject(subject, theta, spec, n_visits)


def loglik_censored_gaussian(subject, theta, spec, n_visits) -> float:
    _require(subject, 0, spec, "gaussian")
    return _eval_subject(subject, theta, spec, n_visits)


def loglik_event_t(subject, theta, spec, n_visits) -> float:
    _require(subject, 1, spec, "t")
    return _eval_subject(subject, theta, spec, n_visits)


def loglik_censored_t(subject, theta, spec, n_visits) -> float:
    _require(subject, 0, spec, "t")
    return _eval_subject(subject, theta, spec, n_visits)
