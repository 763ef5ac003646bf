"""Partitioned correlation matrices and the conditional moments of the event score.

The joint latent vector of one subject is ``(score_t, score_y1, ..., score_ym)``;
row/column 0 of every matrix built here belongs to the event time and the
rest to the observed longitudinal visits, in schedule order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy import special as sc

from .special import t_cdf

WITHIN_STRUCTURES = ("exchangeable", "ar1")
CROSS_STRUCTURES = ("zero", "constant", "power", "unstructured")


class NotPositiveDefinite(np.linalg.LinAlgError):
    """A correlation matrix failed its Cholesky factorization."""


@dataclass(frozen=True)
class CorrelationSpec:
    within: str
    cross: str
    n_visits: int
    rho_y: float = 0.0
    rho_ty: Sequence[float] | float | None = None

    def __post_init__(self):
        if self.within not in WITHIN_STRUCTURES:
            raise ValueError(f"unknown within structure {self.within!r}")
        if self.cross not in CROSS_STRUCTURES:
            raise ValueError(f"unknown cross structure {self.cross!r}")
        if self.n_visits < 1:
            raise ValueError("n_visits must be positive")
        if not -1.0 < self.rho_y < 1.0:
            raise ValueError(f"rho_y={self.rho_y} outside (-1, 1)")
        rt = self.cross_params
        if np.any(np.abs(rt) >= 1.0):
            raise ValueError(f"rho_ty={rt} outside (-1, 1)")

    @property
    def cross_params(self) -> np.ndarray:
        n = n_cross_params(self.cross, self.n_visits)
        if n == 0:
            return np.zeros(0)
        rt = np.atleast_1d(np.asarray(self.rho_ty, dtype=float))
        if rt.size != n:
            raise ValueError(f"cross structure {self.cross!r} needs {n} parameter(s), got {rt.size}")
        return rt


def n_cross_params(cross: str, n_visits: int) -> int:
    return {"zero": 0, "constant": 1, "power": 1, "unstructured": n_visits}[cross]


def cross_vector(spec: CorrelationSpec, visits) -> np.ndarray:
    """Correlations between the event score and each observed visit (0-based indices)."""
    visits = np.asarray(visits, dtype=int)
    rt = spec.cross_params
    if spec.cross == "zero":
        return np.zeros(visits.size)
    if spec.cross == "constant":
        return np.full(visits.size, rt[0])
    if spec.cross == "power":
        # exponent J + 1 - tau with tau the 1-based scheduled index
        return rt[0] ** (spec.n_visits - visits).astype(float)
    return rt[visits]


def within_matrix(spec: CorrelationSpec, visits) -> np.ndarray:
    visits = np.asarray(visits, dtype=int)
    m = visits.size
    if spec.within == "exchangeable":
        R = np.full((m, m), spec.rho_y)
    else:
        lag = np.abs(visits[:, None] - visits[None, :])
        R = spec.rho_y ** lag.astype(float)
    np.fill_diagonal(R, 1.0)
    return R


def build_R(spec: CorrelationSpec, visits) -> np.ndarray:
    """Correlation matrix of ``(event score, observed longitudinal scores)``."""
    visits = np.asarray(visits, dtype=int)
    if visits.size and (visits.min() < 0 or visits.max() >= spec.n_visits):
        raise ValueError(f"visit indices {visits} outside schedule of length {spec.n_visits}")
    m = visits.size
    R = np.eye(m + 1)
    c = cross_vector(spec, visits)
    R[0, 1:] = c
    R[1:, 0] = c
    R[1:, 1:] = within_matrix(spec, visits)
    return R


def cholesky(R: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NotPositiveDefinite` on failure."""
    if R.shape[0] == 0:
        return R.copy()
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(L) > 0):
        raise NotPositiveDefinite("non-positive pivot")
    return L


@dataclass(frozen=True)
class ConditionalMoments:
    mean: np.ndarray | float
    sd: np.ndarray | float
    df: float  # np.inf for the Gaussian family


@dataclass(frozen=True)
class BlockFactor:
    """Factorized pieces of one visit pattern, shared by all its subjects.

    ``weights`` is ``R_y^{-1} c`` so the conditional mean of the event score is
    ``scores @ weights``; ``resid_var`` is ``1 - c' R_y^{-1} c``.
    """

    visits: np.ndarray
    L_y: np.ndarray
    logdet_y: float
    weights: np.ndarray
    resid_var: float

    @property
    def m(self) -> int:
        return self.visits.size

    def whiten(self, scores: np.ndarray) -> np.ndarray:
        """``L_y^{-1} s`` for each row ``s`` of ``scores`` (shape ``(g, m)``)."""
        return linalg.solve_triangular(self.L_y, scores.T, lower=True, check_finite=False).T


def factor_block(spec: CorrelationSpec, visits) -> BlockFactor:
    R = build_R(spec, visits)
    cholesky(R)  # full block must be PD, not just R_y
    R_y = R[1:, 1:]
    L_y = cholesky(R_y)
    c = R[0, 1:]
    if c.size:
        weights = linalg.cho_solve((L_y, True), c, check_finite=False)
        resid_var = 1.0 - float(c @ weights)
    else:
        weights = np.zeros(0)
        resid_var = 1.0
    if not resid_var > 0:
        raise NotPositiveDefinite("conditional variance of the event score is not positive")
    logdet = 2.0 * float(np.sum(np.log(np.diag(L_y)))) if c.size else 0.0
    return BlockFactor(np.asarray(visits, dtype=int), L_y, logdet, weights, resid_var)


def conditional_gaussian(z_y, spec: CorrelationSpec, visits) -> ConditionalMoments:
    """Moments of the event score given longitudinal normal scores ``z_y``.

    ``z_y`` may be one vector or a ``(g, m)`` batch.
    """
    f = factor_block(spec, visits)
    z_y = np.asarray(z_y, dtype=float)
    mean = z_y @ f.weights
    sd = np.full(np.shape(mean), np.sqrt(f.resid_var))
    if np.ndim(mean) == 0:
        mean, sd = float(mean), float(sd)
    return ConditionalMoments(mean, sd, np.inf)


def conditional_t(w_y, df: float, spec: CorrelationSpec, visits) -> ConditionalMoments:
    """Location, scale and df of the event t score given longitudinal t scores."""
    if not df > 2:
        raise ValueError(f"t copula needs df > 2, got {df}")
    f = factor_block(spec, visits)
    w_y = np.asarray(w_y, dtype=float)
    mean = w_y @ f.weights
    if f.m == 0:
        q = np.zeros(np.shape(mean))
    else:
        q = np.sum(f.whiten(np.atleast_2d(w_y)) ** 2, axis=-1).reshape(np.shape(mean))
    sd = np.sqrt((df + q) * f.resid_var / (df + f.m))
    if np.ndim(mean) == 0:
        mean, sd = float(mean), float(sd)
    return ConditionalMoments(mean, sd, float(df + f.m))


def mv_log_density(z, R: np.ndarray, family: str = "gaussian", df: float | None = None):
    """Log density of a centred normal or t vector with correlation/scale matrix ``R``.

    ``z`` has shape ``(d,)`` or ``(g, d)``.
    """
    z = np.asarray(z, dtype=float)
    d = R.shape[0]
    if z.shape[-1] != d:
        raise ValueError(f"score dimension {z.shape[-1]} does not match matrix dimension {d}")
    L = cholesky(R)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    u = linalg.solve_triangular(L, np.atleast_2d(z).T, lower=True).T
    q = np.sum(u * u, axis=-1)
    if family == "gaussian":
        out = -0.5 * d * np.log(2.0 * np.pi) - 0.5 * logdet - 0.5 * q
    elif family == "t":
        if df is None or not df > 0:
            raise ValueError("t family needs a positive df")
        out = (sc.gammaln(0.5 * (df + d)) - sc.gammaln(0.5 * df) - 0.5 * d * np.log(df * np.pi)
               - 0.5 * logdet - 0.5 * (df + d) * np.log1p(q / df))
    else:
        raise ValueError(f"unknown family {family!r}")
    return out if z.ndim > 1 else float(out[0])


def tail_dependence(rho: float, df: float) -> float:
    """Upper (= lower) tail dependence coefficient of a bivariate t copula."""
    if not -1.0 < rho <= 1.0:
        raise ValueError(f"rho={rho} outside (-1, 1]")
    if not df > 0:
        raise ValueError("df must be positive")
    if np.isinf(df):
        return 1.0 if rho == 1.0 else 0.0
    arg = -np.sqrt((df + 1.0) * (1.0 - rho) / (1.0 + rho))
    return float(2.0 * t_cdf(arg, df + 1.0))
