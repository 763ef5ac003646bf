"""Univariate distribution primitives: standard normal, Student-t and Weibull.

Everything here is vectorised over numpy arrays and pure, so it is safe to
call from worker processes or threads.  The normal routines are thin wrappers
over ``scipy.special``; the Student-t quantile inverts the regularized
incomplete beta function directly, which is both faster and more accurate in
the far tails than ``scipy.special.stdtrit``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as sc

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)

#: Probability-integral-transform outputs are clamped to this range before a
#: quantile is applied, so a subject deep in a tail keeps a finite score.
PIT_FLOOR = 1e-300
PIT_CEIL = 1.0 - 1e-16


class DomainError(ValueError):
    """An argument lies outside the domain of a distribution function."""


def _check_prob(p, *, closed: bool = False) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if closed:
        bad = (p < 0) | (p > 1) | np.isnan(p)
    else:
        bad = (p <= 0) | (p >= 1) | np.isnan(p)
    if np.any(bad):
        raise DomainError(f"probability outside {'[0, 1]' if closed else '(0, 1)'}: {p[bad].ravel()[:3]}")
    return p


def _check_df(df) -> float | np.ndarray:
    df_arr = np.asarray(df, dtype=float)
    if np.any(~(df_arr > 0)):
        raise DomainError(f"degrees of freedom must be positive, got {df}")
    return df_arr if df_arr.ndim else float(df_arr)


# ---------------------------------------------------------------------------
# standard normal
# ---------------------------------------------------------------------------

def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - LOG_SQRT_2PI)


def normal_logpdf(x):
    x = np.asarray(x, dtype=float)
    return -0.5 * x * x - LOG_SQRT_2PI


def normal_cdf(x):
    return sc.ndtr(x)


def normal_logcdf(x):
    return sc.log_ndtr(x)


def normal_quantile(p):
    """Inverse of :func:`normal_cdf`; raises :class:`DomainError` at 0 or 1."""
    return sc.ndtri(_check_prob(p))


def normal_quantile_log(logp):
    """Normal quantile of ``exp(logp)``, accurate when ``p`` underflows."""
    logp = np.asarray(logp, dtype=float)
    if np.any(~(logp < 0)):
        raise DomainError("log-probability must be negative")
    return sc.ndtri_exp(logp)


# ---------------------------------------------------------------------------
# Student t
# ---------------------------------------------------------------------------

def t_logpdf(x, df):
    df = _check_df(df)
    x = np.asarray(x, dtype=float)
    return (sc.gammaln(0.5 * (df + 1.0)) - sc.gammaln(0.5 * df)
            - 0.5 * np.log(df * np.pi) - 0.5 * (df + 1.0) * np.log1p(x * x / df))


def t_pdf(x, df):
    return np.exp(t_logpdf(x, df))


def t_cdf(x, df):
    return sc.stdtr(_check_df(df), x)


def t_logcdf(x, df):
    """log of the t cdf.  Uses ``log1p`` on the upper side to keep precision."""
    df = _check_df(df)
    x = np.asarray(x, dtype=float)
    lower = sc.stdtr(df, -np.abs(x))
    with np.errstate(divide="ignore"):
        return np.where(x <= 0, np.log(lower), np.log1p(-lower))


def t_quantile(p, df):
    """Student-t quantile by inversion of the regularized incomplete beta."""
    df = _check_df(df)
    p = _check_prob(p)
    x = t_quantile_lower(np.minimum(p, 1.0 - p), df)
    out = np.where(p < 0.5, x, -x)
    return out if out.ndim else float(out)


def t_quantile_lower(q, df):
    """Quantile for a lower-tail probability ``q`` (no ``1 - p`` round-off).

    With ``x = df / (df + t**2)`` the lower tail is ``I_x(df/2, 1/2) / 2``.
    Near the median that inversion loses digits, so there the complementary
    ``I_{1-x}(1/2, df/2)`` is inverted instead.  ``q`` is clamped into
    ``[PIT_FLOOR, 0.5]`` and the non-positive quantile is returned; callers
    mirror it for upper-tail probabilities.
    """
    q = np.clip(np.asarray(q, dtype=float), PIT_FLOOR, 0.5)
    d = np.broadcast_to(df, q.shape)
    tail = 2.0 * q < 0.5
    x = np.empty(q.shape)
    if np.any(tail):
        b = sc.betaincinv(0.5 * d[tail], 0.5, 2.0 * q[tail])
        x[tail] = np.sqrt(d[tail] * (1.0 / b - 1.0))
    if np.any(~tail):
        y = sc.betaincinv(0.5, 0.5 * d[~tail], 1.0 - 2.0 * q[~tail])
        x[~tail] = np.sqrt(d[~tail] * y / (1.0 - y))
    return -x


def normal_to_t_score(z, df):
    """Map a normal score to the t score with the same probability, Psi^-1(Phi(z))."""
    z = np.asarray(z, dtype=float)
    w = -t_quantile_lower(sc.ndtr(-np.abs(z)), df)
    return np.where(z < 0, -w, w)


# ---------------------------------------------------------------------------
# Weibull proportional hazards marginal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeibullMarginal:
    """Weibull event-time law with hazard ``r t^(r-1) exp(eta)``.

    ``eta`` is the survival linear predictor ``x2' beta2`` and may be an array
    (one entry per subject); all methods broadcast against ``t``.
    """

    shape: float
    eta: float | np.ndarray = 0.0

    def __post_init__(self):
        if not self.shape > 0:
            raise DomainError(f"Weibull shape must be positive, got {self.shape}")

    def cumhazard(self, t):
        t = _check_time(t)
        return t ** self.shape * np.exp(self.eta)

    def hazard(self, t):
        t = _check_time(t)
        r = self.shape
        return r * t ** (r - 1.0) * np.exp(self.eta)

    def log_survival(self, t):
        return -self.cumhazard(t)

    def survival(self, t):
        return np.exp(-self.cumhazard(t))

    def cdf(self, t):
        return -np.expm1(-self.cumhazard(t))

    def logpdf(self, t):
        t = _check_time(t)
        r = self.shape
        with np.errstate(divide="ignore"):
            return np.log(r) + (r - 1.0) * np.log(t) + self.eta - t ** r * np.exp(self.eta)

    def pdf(self, t):
        return np.exp(self.logpdf(t))

    def quantile(self, u):
        u = _check_prob(u, closed=True)
        if np.any(u >= 1):
            raise DomainError("Weibull quantile requires u < 1")
        return (-np.log1p(-u) * np.exp(-self.eta)) ** (1.0 / self.shape)

    def quantile_from_log_survival(self, log_s):
        """Event time whose log-survival equals ``log_s`` (<= 0)."""
        return (-np.asarray(log_s, dtype=float) * np.exp(-self.eta)) ** (1.0 / self.shape)

    @property
    def scale(self):
        """Characteristic life ``exp(-eta / r)``, where ``S = exp(-1)``."""
        return np.exp(-np.asarray(self.eta) / self.shape)


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise DomainError("event times must be non-negative")
    return t


def weibull_survival(t, m: WeibullMarginal):
    return m.survival(t)


def weibull_cdf(t, m: WeibullMarginal):
    return m.cdf(t)


def weibull_pdf(t, m: WeibullMarginal):
    return m.pdf(t)


def weibull_hazard(t, m: WeibullMarginal):
    return m.hazard(t)


def weibull_quantile(u, m: WeibullMarginal):
    return m.quantile(u)
