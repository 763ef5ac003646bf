"""Data generation under either copula and the Monte Carlo study harness."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special as sc

from .corr import build_R, cholesky, n_cross_params
from .data import INTERCEPT, Dataset, ModelSpec, ParamLayout, ParamVector, SubjectRecord, design_row
from .estimation import FitOptions, fit
from .prediction import mean_residual_lifetime
from .special import PIT_FLOOR, WeibullMarginal, t_logcdf

log = logging.getLogger(__name__)

SCHEDULE = (0.0, 2.0, 6.0, 12.0, 18.0)
COVARIATE_PROBS = (0.5, 0.5, 0.31, 0.21)
LONG_TERMS = ("time", "time:x1", "x2", "x3", "x4")
SURV_TERMS = ("x1", "x2", "x3", "x4")

#: Censoring rates of the simulation designs and their nominal (dropout, censoring) fractions.
CENSORING_RATES = {0.0: (0.40, 0.60), 0.0225: (0.60, 0.67), 0.061: (0.80, 0.75)}

#: End of follow-up: everyone still event-free just after the last visit is censored there.
FOLLOW_UP = 18.5


class StudyError(RuntimeError):
    """Too many replicate fits failed for the study to be meaningful."""


@dataclass(frozen=True)
class SimTruth:
    theta: ParamVector
    spec: ModelSpec
    covariate_probs: tuple[float, ...] = COVARIATE_PROBS
    schedule: tuple[float, ...] = SCHEDULE
    censoring_rate: float = 0.0
    follow_up: float | None = FOLLOW_UP
    n: int = 200
    seed: int = 1

    def __post_init__(self):
        if not self.censoring_rate >= 0:
            raise ValueError("censoring rate must be non-negative")
        if any(not 0 <= p <= 1 for p in self.covariate_probs):
            raise ValueError("covariate probabilities must lie in [0, 1]")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.follow_up is not None and not self.follow_up > 0:
            raise ValueError("follow-up end must be positive")

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(f"x{k + 1}" for k in range(len(self.covariate_probs)))

    def with_(self, **changes) -> "SimTruth":
        return replace(self, **changes)


def study_spec(copula: str = "gaussian", df: float | None = None, within: str = "exchangeable",
               cross: str = "constant") -> ModelSpec:
    return ModelSpec(copula, df, within, cross, LONG_TERMS, SURV_TERMS)


def study1_truth(censoring_rate: float = 0.0, n: int = 200, seed: int = 1) -> SimTruth:
    """Gaussian-copula design with exchangeable within and constant cross correlation."""
    theta = ParamVector([5, 1, 2, 1, -2, -1], [-5, -4, -2, 2, 1], 2.0, 3.0, [0.6], 0.4)
    return SimTruth(theta, study_spec(), censoring_rate=censoring_rate, n=n, seed=seed)


def study2_truth(censoring_rate: float = 0.0, n: int = 200, seed: int = 1) -> SimTruth:
    """Same margins and correlations as study 1, joined by a t(4) copula."""
    return study1_truth(censoring_rate, n, seed).with_(spec=study_spec("t", 4.0))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class Cohort:
    dataset: Dataset
    event_time: np.ndarray  # uncensored T*
    covariates: np.ndarray


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent stream for replicate ``replicate``; does not depend on execution order."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate,)))


def simulate_cohort(truth: SimTruth, replicate: int = 0, rng: np.random.Generator | None = None) -> Cohort:
    rng = rng or replicate_rng(truth.seed, replicate)
    n, th, spec = truth.n, truth.theta, truth.spec
    schedule = np.asarray(truth.schedule, dtype=float)
    J = schedule.size
    names = truth.covariate_names

    cov = (rng.random((n, len(names))) < np.asarray(truth.covariate_probs)).astype(float)
    L = cholesky(build_R(th.correlation(spec, J), np.arange(J)))
    Z = rng.standard_normal((n, J + 1)) @ L.T
    chi = rng.chisquare(spec.df, n) if spec.copula == "t" else None
    C = rng.standard_exponential(n) / truth.censoring_rate if truth.censoring_rate > 0 else np.full(n, np.inf)

    if spec.copula == "gaussian":
        log_s = sc.log_ndtr(-Z[:, 0])
        e = Z[:, 1:]
    else:
        W = Z / np.sqrt(chi / spec.df)[:, None]
        log_s = t_logcdf(-W[:, 0], spec.df)
        # normal score with the same probability, computed on the smaller tail
        lo = np.maximum(sc.stdtr(spec.df, -np.abs(W[:, 1:])), PIT_FLOOR)
        e = np.where(W[:, 1:] < 0, sc.ndtri(lo), -sc.ndtri(lo))

    by_name = lambda i: dict(zip(names, cov[i]))  # noqa: E731
    x2 = np.array([[1.0, *[by_name(i)[c] for c in spec.survival_terms]] for i in range(n)])
    eta = x2 @ th.beta2
    t_star = WeibullMarginal(th.r, eta).quantile_from_log_survival(log_s)
    end = truth.follow_up if truth.follow_up is not None else np.inf
    obs = np.minimum(np.minimum(t_star, C), end)
    event = ((t_star < C) & (t_star <= end)).astype(int)

    subjects = []
    for i in range(n):
        covs = by_name(i)
        visits = np.flatnonzero(schedule < obs[i])
        X1 = np.array([design_row(spec.longitudinal_terms, schedule[v], covs, "simulate") for v in visits])
        y = X1 @ th.beta1 + th.sigma * e[i, visits] if visits.size else np.zeros(0)
        subjects.append(SubjectRecord(str(i + 1), visits, y, X1.reshape(visits.size, -1), x2[i],
                                      float(obs[i]), int(event[i]), covs))
    ds = Dataset(schedule, subjects, (INTERCEPT, *spec.longitudinal_terms), (INTERCEPT, *spec.survival_terms), names)
    return Cohort(ds, t_star, cov)


def simulate_dataset(truth: SimTruth, replicate: int = 0) -> Dataset:
    """One replicate; identical ``(truth.seed, replicate)`` gives an identical dataset."""
    return simulate_cohort(truth, replicate).dataset


def dropout_fraction(ds: Dataset) -> float:
    """Share of subjects missing at least one scheduled visit."""
    return float(np.mean(ds.n_measurements < ds.n_visits))


def censoring_fraction(ds: Dataset) -> float:
    return float(1.0 - np.mean(ds.event))


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass
class McSummary:
    spec: ModelSpec
    names: list[str]
    truth: np.ndarray
    estimates: np.ndarray  # (N_ok, k)
    ses: np.ndarray
    logliks: np.ndarray
    n_failed: int

    @property
    def n(self) -> int:
        return self.estimates.shape[0]

    @property
    def est(self) -> np.ndarray:
        return self.estimates.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        return np.nanmean(self.ses, axis=0)

    @property
    def sd(self) -> np.ndarray:
        return self.estimates.std(axis=0, ddof=1)

    @property
    def bias(self) -> np.ndarray:
        return self.est - self.truth

    @property
    def rmse(self) -> np.ndarray:
        return np.sqrt(np.mean((self.estimates - self.truth) ** 2, axis=0))

    @property
    def cp(self) -> np.ndarray:
        lo = self.estimates - 1.959963984540054 * self.ses
        hi = self.estimates + 1.959963984540054 * self.ses
        return np.mean((lo <= self.truth) & (self.truth <= hi), axis=0)

    def table(self) -> dict[str, np.ndarray]:
        return {"Est.": self.est, "SE": self.se, "SD": self.sd, "RMSE": self.rmse, "CP": self.cp}


@dataclass
class McStudy:
    summaries: list[McSummary]
    wins: np.ndarray  # wins[a, b]: replicates where spec a had the larger loglik than spec b
    n_replicates: int
    failures: list[tuple[int, str, str]] = field(default_factory=list)


def _truth_for(spec: ModelSpec, truth: SimTruth, J: int) -> np.ndarray:
    """Truth on the fitted spec's parameter layout (cross parameters broadcast when shapes differ)."""
    th = truth.theta
    nc = n_cross_params(spec.cross, J)
    if nc == th.rho_ty.size:
        rt = th.rho_ty
    elif nc == 0:
        rt = np.zeros(0)
    else:
        rt = np.full(nc, th.rho_ty[0] if th.rho_ty.size else 0.0)
    return ParamVector(th.beta1, th.beta2, th.r, th.sigma, rt, th.rho_y).to_array()


def _one_replicate(args):
    truth, specs, k, options = args
    ds = simulate_dataset(truth, k)
    out = []
    for s in specs:
        try:
            res = fit(ds, s, options)
        except Exception as exc:  # recorded, not fatal
            out.append((None, None, math.nan, f"{type(exc).__name__}: {exc}"))
            continue
        ok = res.converged and np.all(np.isfinite(res.se))
        out.append((res.estimates, res.se, res.loglik, "" if ok else (res.message or "not converged")))
    return k, out


def run_mc_study(truth: SimTruth, specs: Sequence[ModelSpec], n_replicates: int,
                 options: FitOptions | None = None, workers: int = 1, max_fail_frac: float = 0.10,
                 first_replicate: int = 0) -> McStudy:
    """Simulate ``n_replicates`` datasets, fit each spec to every one, aggregate.

    A replicate whose fit fails for a spec is excluded from that spec's
    summary.  A study where more than ``max_fail_frac`` of the fits of any
    spec failed raises :class:`StudyError`.
    """
    if n_replicates < 2:
        raise ValueError("need at least two replicates")
    specs = list(specs)
    tasks = [(truth, specs, k, options) for k in range(first_replicate, first_replicate + n_replicates)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_one_replicate, tasks))
    else:
        results = [_one_replicate(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    J = len(truth.schedule)
    summaries, failures = [], []
    ll = np.full((n_replicates, len(specs)), np.nan)
    for j, s in enumerate(specs):
        est, se = [], []
        for row, (k, out) in enumerate(results):
            e, v, l, msg = out[j]
            if msg:
                failures.append((k, s.label, msg))
                continue
            est.append(e)
            se.append(v)
            ll[row, j] = l
        n_fail = n_replicates - len(est)
        if n_fail > max_fail_frac * n_replicates:
            raise StudyError(f"{n_fail} of {n_replicates} fits failed for {s.label}")
        layout = ParamLayout((INTERCEPT, *s.longitudinal_terms), (INTERCEPT, *s.survival_terms), s.cross, J)
        summaries.append(McSummary(s, layout.names, _truth_for(s, truth, J), np.array(est).reshape(-1, layout.size),
                                   np.array(se).reshape(-1, layout.size), ll[:, j], n_fail))
    wins = np.zeros((len(specs), len(specs)), dtype=int)
    for a in range(len(specs)):
        for b in range(len(specs)):
            if a != b:
                wins[a, b] = int(np.sum(ll[:, a] > ll[:, b]))
    return McStudy(summaries, wins, n_replicates, failures)


def write_mc_tables(study: McStudy, out_dir: str | Path, prefix: str = "mc") -> list[Path]:
    """One CSV per fitted spec (rows Est., SE, SD, RMSE, CP) plus a win-count sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in study.summaries:
        p = out_dir / f"{prefix}_{s.spec.label}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["", *s.names])
            w.writerow(["Truth", *[f"{v:.6g}" for v in s.truth]])
            for row, vals in s.table().items():
                w.writerow([row, *[f"{v:.6g}" for v in vals]])
            w.writerow(["n_ok", s.n, *([""] * (len(s.names) - 1))])
        paths.append(p)
    p = out_dir / f"{prefix}_wins.csv"
    labels = [s.spec.label for s in study.summaries]
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["better_than", *labels])
        for a, la in enumerate(labels):
            w.writerow([la, *study.wins[a]])
    paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# residual-lifetime comparison
# ---------------------------------------------------------------------------

@dataclass
class ResidualRow:
    t: float
    n_at_risk: int
    mean_abs: dict[str, float]
    win_rate: dict[tuple[str, str], float]


def survival_only(theta: ParamVector) -> ParamVector:
    """The same parameters with the cross block removed (the survival sub-model)."""
    out = theta.copy()
    out.rho_ty = np.zeros_like(out.rho_ty)
    return out


def residual_lifetime_study(truth: SimTruth, models: dict[str, tuple[ParamVector, ModelSpec]],
                            t_list: Sequence[float] = (2.0, 6.0, 12.0, 18.0), n_new: int = 1000,
                            replicate: int = 10_000) -> list[ResidualRow]:
    """Mean absolute error of predicted residual lifetimes on fresh subjects.

    Fresh subjects are drawn without censoring or follow-up limit so every
    true event time is known.  A subject is at risk at ``t`` when its true
    event time exceeds ``t``; its history is the measurements before ``t``.
    Win rates count the at-risk subjects whose prediction under the first
    model is closer to the truth than under the second.
    """
    fresh = truth.with_(n=n_new, censoring_rate=0.0, follow_up=None)
    cohort = simulate_cohort(fresh, replicate)
    ds = cohort.dataset
    names = list(models)
    rows = []
    for t in t_list:
        risk = np.flatnonzero(cohort.event_time > t)
        err = {name: np.empty(risk.size) for name in names}
        for row, i in enumerate(risk):
            hist = ds.subjects[i].truncated(ds.schedule, t)
            true_res = cohort.event_time[i] - t
            for name in names:
                th, sp = models[name]
                mrl = mean_residual_lifetime(t, hist, th, sp, ds.n_visits).value
                err[name][row] = abs(mrl - true_res)
        mean_abs = {name: float(np.mean(err[name])) if risk.size else math.nan for name in names}
        wins = {(a, b): float(np.mean(err[a] < err[b])) if risk.size else math.nan
                for a in names for b in names if a != b}
        rows.append(ResidualRow(float(t), int(risk.size), mean_abs, wins))
    return rows


def write_residual_table(rows: Sequence[ResidualRow], path: str | Path) -> None:
    names = list(rows[0].mean_abs) if rows else []
    pairs = list(rows[0].win_rate) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "n_at_risk", *[f"mae:{n}" for n in names], *[f"win:{a}>{b}" for a, b in pairs]])
        for r in rows:
            w.writerow([f"{r.t:.6g}", r.n_at_risk, *[f"{r.mean_abs[n]:.6g}" for n in names],
                        *[f"{r.win_rate[p]:.6g}" for p in pairs]])
