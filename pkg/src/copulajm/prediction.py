"""Dynamic conditional survival probabilities and mean residual lifetimes.

Given survival to ``t`` and the longitudinal history before ``t``, the
probability of surviving past ``u`` is a ratio of two normal (or t) tail
probabilities of the event score, evaluated with the conditional location
and scale implied by the history.  With a zero cross block this collapses to
the bare Weibull ratio ``S(u) / S(t)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special as sc

from .corr import factor_block
from .data import Dataset, ModelSpec, ParamVector, SubjectRecord
from .likelihood import event_score
from .special import DomainError, WeibullMarginal, normal_to_t_score, t_logcdf

#: Relative quadrature error above which an MRL result is flagged.
MRL_WARN_RTOL = 1e-3


@dataclass(frozen=True)
class _Conditioning:
    """Location, scale and df of the event score given a history (df=inf for Gaussian)."""

    mean: float
    sd: float
    df: float


def _conditioning(history: SubjectRecord, theta: ParamVector, spec: ModelSpec, n_visits: int) -> _Conditioning:
    if history.m == 0:
        return _Conditioning(0.0, 1.0, math.inf if spec.copula == "gaussian" else spec.df)
    f = factor_block(theta.correlation(spec, n_visits), history.visits)
    e = (history.y - history.X1 @ theta.beta1) / theta.sigma
    if spec.copula == "gaussian":
        return _Conditioning(float(e @ f.weights), math.sqrt(f.resid_var), math.inf)
    w = normal_to_t_score(e, spec.df)
    q = float(np.sum(f.whiten(w[None, :]) ** 2))
    df_c = spec.df + f.m
    return _Conditioning(float(w @ f.weights), math.sqrt((spec.df + q) * f.resid_var / df_c), df_c)


def _log_tail(cumhaz, cond: _Conditioning, spec: ModelSpec) -> np.ndarray:
    """log P(event score > score of the time with cumulative hazard ``cumhaz`` | history)."""
    H = np.asarray(cumhaz, dtype=float)
    if spec.copula == "gaussian":
        x = (-event_score(H, "gaussian") + cond.mean) / cond.sd
        return sc.log_ndtr(x)
    x = (-event_score(H, "t", spec.df) + cond.mean) / cond.sd
    return t_logcdf(x, cond.df)


def _marginal(history: SubjectRecord, theta: ParamVector) -> WeibullMarginal:
    return WeibullMarginal(theta.r, float(history.x2 @ theta.beta2))


def survival_prob(u, t: float, history: SubjectRecord, theta: ParamVector, spec: ModelSpec,
                  n_visits: int | None = None, schedule=None) -> np.ndarray | float:
    """``P(T > u | T > t, history)`` for one subject.

    ``history`` must only hold measurements scheduled before ``t``; pass
    ``schedule`` to have that checked.  ``u`` may be a scalar or an array.
    """
    u_arr = np.asarray(u, dtype=float)
    if not t > 0:
        raise DomainError("conditioning time must be positive")
    if np.any(u_arr < t):
        raise DomainError(f"prediction times must be >= t={t}")
    if schedule is not None and history.m and np.asarray(schedule)[history.visits].max() >= t:
        raise DomainError(f"subject {history.id}: history contains measurements at or after t={t}")
    J = n_visits if n_visits is not None else (len(schedule) if schedule is not None else None)
    if J is None:
        raise ValueError("need n_visits or schedule")
    cond = _conditioning(history, theta, spec, J)
    marg = _marginal(history, theta)
    lt = _log_tail(marg.cumhazard(u_arr), cond, spec)
    l0 = _log_tail(marg.cumhazard(t), cond, spec)
    out = np.exp(np.minimum(lt - l0, 0.0))
    out = np.where(u_arr == t, 1.0, out)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MRLResult:
    value: float
    quad_err: float
    warning: bool


def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


_GL = {n: _gauss_legendre(n) for n in (128, 256)}


def mean_residual_lifetime(t: float, history: SubjectRecord, theta: ParamVector, spec: ModelSpec,
                           n_visits: int, nodes: int = 128) -> MRLResult:
    """``E[T - t | T > t, history]`` by Gauss-Legendre quadrature on a compactified axis.

    With ``u = t + c s / (1 - s)`` the half line maps onto ``s`` in (0, 1).
    ``c`` is the time needed for the bare cumulative hazard to grow by one
    from its value at ``t``, which puts the quadrature nodes where the
    conditional survival curve actually falls.  The error estimate is the
    change when the node count is doubled.
    """
    marg = _marginal(history, theta)
    c = float(marg.quantile_from_log_survival(-(marg.cumhazard(t) + 1.0))) - t
    if not c > 0:
        c = 1.0
    cond = _conditioning(history, theta, spec, n_visits)
    l0 = float(_log_tail(marg.cumhazard(t), cond, spec))

    def integral(n):
        if n not in _GL:
            _GL[n] = _gauss_legendre(n)
        s, w = _GL[n]
        u = t + c * s / (1.0 - s)
        pi = np.exp(np.minimum(_log_tail(marg.cumhazard(u), cond, spec) - l0, 0.0))
        return float(np.sum(w * pi * c / (1.0 - s) ** 2))

    value = integral(nodes)
    err = abs(integral(2 * nodes) - value)
    return MRLResult(value, err, err > MRL_WARN_RTOL * abs(value))


@dataclass
class PredictionCurve:
    id: str
    t: float
    u: np.ndarray
    pi: np.ndarray
    mrl: float | None = None
    mrl_err: float | None = None


def prediction_table(dataset: Dataset, ids: Sequence, t_list: Sequence[float], u_grid, theta: ParamVector,
                     spec: ModelSpec, with_mrl: bool = True) -> list[PredictionCurve]:
    """Curves for every ``(id, t)`` pair.

    ``u_grid`` is either a fixed array of horizons (entries below ``t`` are
    dropped and ``t`` itself is prepended) or a callable ``t -> grid``.
    Each subject's history is truncated to measurements before ``t``.
    """
    curves = []
    for sid in ids:
        subj = dataset.subject(sid)
        for t in t_list:
            hist = subj.truncated(dataset.schedule, t)
            grid = np.asarray(u_grid(t) if callable(u_grid) else u_grid, dtype=float)
            grid = np.unique(np.r_[t, grid[grid > t]])
            pi = np.atleast_1d(survival_prob(grid, t, hist, theta, spec, dataset.n_visits))
            curve = PredictionCurve(subj.id, float(t), grid, pi)
            if with_mrl:
                res = mean_residual_lifetime(t, hist, theta, spec, dataset.n_visits)
                curve.mrl, curve.mrl_err = res.value, res.quad_err
            curves.append(curve)
    return curves


def write_curves(curves: Sequence[PredictionCurve], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "t", "u", "pi"])
        for c in curves:
            for u, p in zip(c.u, c.pi):
                w.writerow([c.id, f"{c.t:.6g}", f"{u:.6g}", f"{p:.6g}"])


def write_mrl(curves: Sequence[PredictionCurve], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "t", "mrl", "quad_err"])
        for c in curves:
            if c.mrl is not None:
                w.writerow([c.id, f"{c.t:.6g}", f"{c.mrl:.6g}", f"{c.mrl_err:.6g}"])
