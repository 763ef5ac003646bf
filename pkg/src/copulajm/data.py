"""Subject records, model specifications, parameter vectors and CSV ingestion.

File layout
-----------
longitudinal CSV
    ``id,visit_index,time,y`` with ``visit_index`` 1-based into the schedule.
survival CSV
    ``id,event_time,status,<covariates...>``; ``status`` is 1 for an event and
    0 for a censored time.
design config
    YAML/JSON mapping with ``schedule``, ``longitudinal_terms``,
    ``survival_terms``, ``copula``, ``df``, ``within`` and ``cross``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .corr import CROSS_STRUCTURES, WITHIN_STRUCTURES, CorrelationSpec, n_cross_params

INTERCEPT = "(Intercept)"


class DataError(ValueError):
    """Malformed input data; the message names the file and row."""


# ---------------------------------------------------------------------------
# model specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Copula family plus design and correlation structure choices.

    ``df`` is a fixed hyperparameter of the t copula and is never estimated.
    """

    copula: str = "gaussian"
    df: float | None = None
    within: str = "exchangeable"
    cross: str = "constant"
    longitudinal_terms: tuple[str, ...] = ()
    survival_terms: tuple[str, ...] = ()

    def __post_init__(self):
        if self.copula not in ("gaussian", "t"):
            raise ValueError(f"copula must be 'gaussian' or 't', got {self.copula!r}")
        if self.copula == "t":
            if self.df is None or not float(self.df) > 2:
                raise ValueError(f"t copula needs df > 2, got {self.df}")
            object.__setattr__(self, "df", float(self.df))
        else:
            object.__setattr__(self, "df", None)
        if self.within not in WITHIN_STRUCTURES:
            raise ValueError(f"within must be one of {WITHIN_STRUCTURES}, got {self.within!r}")
        if self.cross not in CROSS_STRUCTURES:
            raise ValueError(f"cross must be one of {CROSS_STRUCTURES}, got {self.cross!r}")
        object.__setattr__(self, "longitudinal_terms", tuple(self.longitudinal_terms))
        object.__setattr__(self, "survival_terms", tuple(self.survival_terms))

    @property
    def label(self) -> str:
        fam = "gaussian" if self.copula == "gaussian" else f"t{self.df:g}"
        return f"{fam}-{self.within}-{self.cross}"

    def with_(self, **changes) -> "ModelSpec":
        if changes.get("copula") == "gaussian":
            changes.setdefault("df", None)
        return replace(self, **changes)


def load_design(path: str | Path) -> tuple[np.ndarray, ModelSpec]:
    """Read a design config file; returns ``(schedule, spec)``."""
    path = Path(path)
    try:
        cfg = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise DataError(f"{path}: cannot read design config: {exc}") from None
    if not isinstance(cfg, dict):
        raise DataError(f"{path}: design config must be a mapping")
    return design_from_mapping(cfg, source=str(path))


def design_from_mapping(cfg: dict, source: str = "<design>") -> tuple[np.ndarray, ModelSpec]:
    try:
        schedule = np.asarray(cfg["schedule"], dtype=float)
    except KeyError:
        raise DataError(f"{source}: missing 'schedule'") from None
    if schedule.ndim != 1 or schedule.size == 0 or np.any(np.diff(schedule) <= 0):
        raise DataError(f"{source}: schedule must be a strictly increasing list")
    try:
        spec = ModelSpec(
            copula=str(cfg.get("copula", "gaussian")),
            df=cfg.get("df"),
            within=str(cfg.get("within", "exchangeable")),
            cross=str(cfg.get("cross", "constant")),
            longitudinal_terms=tuple(cfg.get("longitudinal_terms") or ()),
            survival_terms=tuple(cfg.get("survival_terms") or ()),
        )
    except ValueError as exc:
        raise DataError(f"{source}: {exc}") from None
    return schedule, spec


def design_to_mapping(schedule, spec: ModelSpec) -> dict:
    out = {
        "schedule": [float(s) for s in schedule],
        "longitudinal_terms": list(spec.longitudinal_terms),
        "survival_terms": list(spec.survival_terms),
        "copula": spec.copula,
        "within": spec.within,
        "cross": spec.cross,
    }
    if spec.df is not None:
        out["df"] = spec.df
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class ParamVector:
    """Model parameters in their natural (constrained) space."""

    beta1: np.ndarray
    beta2: np.ndarray
    r: float
    sigma: float
    rho_ty: np.ndarray  # length 0 (zero cross), 1, or J (unstructured)
    rho_y: float

    def __post_init__(self):
        self.beta1 = np.asarray(self.beta1, dtype=float).ravel()
        self.beta2 = np.asarray(self.beta2, dtype=float).ravel()
        self.rho_ty = np.atleast_1d(np.asarray(self.rho_ty, dtype=float)).ravel()
        self.r = float(self.r)
        self.sigma = float(self.sigma)
        self.rho_y = float(self.rho_y)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.beta1, self.beta2, [self.r, self.sigma], self.rho_ty, [self.rho_y]])

    def correlation(self, spec: ModelSpec, n_visits: int) -> CorrelationSpec:
        return CorrelationSpec(spec.within, spec.cross, n_visits, self.rho_y,
                               self.rho_ty if self.rho_ty.size else None)

    def copy(self) -> "ParamVector":
        return ParamVector(self.beta1.copy(), self.beta2.copy(), self.r, self.sigma,
                           self.rho_ty.copy(), self.rho_y)


@dataclass(frozen=True)
class ParamLayout:
    """Positions of each parameter block inside the flat parameter array."""

    long_names: tuple[str, ...]
    surv_names: tuple[str, ...]
    cross: str
    n_visits: int

    @property
    def p(self) -> int:
        return len(self.long_names)

    @property
    def q(self) -> int:
        return len(self.surv_names)

    @property
    def n_cross(self) -> int:
        return n_cross_params(self.cross, self.n_visits)

    @property
    def size(self) -> int:
        return self.p + self.q + 3 + self.n_cross

    @property
    def names(self) -> list[str]:
        cross = {0: [], 1: ["rho_ty"]}.get(self.n_cross, [f"rho_ty[{j + 1}]" for j in range(self.n_cross)])
        return ([f"beta1:{n}" for n in self.long_names] + [f"beta2:{n}" for n in self.surv_names]
                + ["r", "sigma"] + cross + ["rho_y"])

    def unpack(self, a) -> ParamVector:
        a = np.asarray(a, dtype=float)
        if a.size != self.size:
            raise ValueError(f"expected {self.size} parameters, got {a.size}")
        p, q, c = self.p, self.q, self.n_cross
        return ParamVector(a[:p], a[p:p + q], a[p + q], a[p + q + 1], a[p + q + 2:p + q + 2 + c], a[-1])

    # log for sigma and r, atanh for correlations; rho_y sits last
    def _positive_slice(self) -> slice:
        return slice(self.p + self.q, self.p + self.q + 2)

    def _corr_slice(self) -> slice:
        return slice(self.p + self.q + 2, self.size)

    def to_unconstrained(self, theta: ParamVector) -> np.ndarray:
        a = theta.to_array()
        v = a.copy()
        v[self._positive_slice()] = np.log(a[self._positive_slice()])
        v[self._corr_slice()] = np.arctanh(a[self._corr_slice()])
        return v

    def from_unconstrained(self, v) -> ParamVector:
        v = np.asarray(v, dtype=float)
        a = v.copy()
        # clips keep exp finite and tanh strictly inside (-1, 1) for huge arguments
        a[self._positive_slice()] = np.exp(np.clip(v[self._positive_slice()], -700.0, 700.0))
        a[self._corr_slice()] = np.clip(np.tanh(v[self._corr_slice()]), -1 + 1e-15, 1 - 1e-15)
        return self.unpack(a)


def to_unconstrained(theta: ParamVector, layout: ParamLayout) -> np.ndarray:
    return layout.to_unconstrained(theta)


def from_unconstrained(v, layout: ParamLayout) -> ParamVector:
    return layout.from_unconstrained(v)


# ---------------------------------------------------------------------------
# subjects and datasets
# ---------------------------------------------------------------------------

@dataclass
class SubjectRecord:
    id: str
    visits: np.ndarray  # 0-based scheduled indices, increasing
    y: np.ndarray
    X1: np.ndarray  # (m, p)
    x2: np.ndarray  # (q,)
    time: float
    event: int
    covariates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.visits = np.asarray(self.visits, dtype=int).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.x2 = np.asarray(self.x2, dtype=float).ravel()
        X1 = np.asarray(self.X1, dtype=float)
        if X1.ndim != 2:
            X1 = X1.reshape(self.visits.size, -1) if X1.size else np.zeros((self.visits.size, 0))
        self.X1 = X1
        if self.X1.shape[0] != self.visits.size:
            raise ValueError(f"subject {self.id}: design has {self.X1.shape[0]} rows for {self.visits.size} visits")
        if self.y.size != self.visits.size:
            raise ValueError(f"subject {self.id}: {self.y.size} values for {self.visits.size} visits")
        if not self.time > 0:
            raise ValueError(f"subject {self.id}: observed time must be positive")
        if self.event not in (0, 1):
            raise ValueError(f"subject {self.id}: event indicator must be 0 or 1")

    @property
    def m(self) -> int:
        return self.visits.size

    def truncated(self, schedule, t: float) -> "SubjectRecord":
        """Copy keeping only measurements scheduled strictly before ``t``."""
        keep = np.asarray(schedule)[self.visits] < t
        return replace(self, visits=self.visits[keep], y=self.y[keep], X1=self.X1[keep])


@dataclass(frozen=True)
class PatternGroup:
    """Subjects sharing one observed-visit pattern, stacked for vectorised evaluation."""

    visits: tuple[int, ...]
    index: np.ndarray  # positions in Dataset.subjects
    y: np.ndarray  # (g, m)
    X1: np.ndarray  # (g, m, p)


class Dataset:
    """Immutable collection of subjects measured on a common visit schedule."""

    def __init__(self, schedule, subjects: Sequence[SubjectRecord], long_names: Sequence[str],
                 surv_names: Sequence[str], covariate_names: Sequence[str] = ()):
        self.schedule = np.asarray(schedule, dtype=float)
        if self.schedule.ndim != 1 or np.any(np.diff(self.schedule) <= 0):
            raise DataError("schedule must be strictly increasing")
        self.subjects = tuple(subjects)
        self.long_names = tuple(long_names)
        self.surv_names = tuple(surv_names)
        self.covariate_names = tuple(covariate_names)
        J = self.schedule.size
        for s in self.subjects:
            if s.m and (s.visits.min() < 0 or s.visits.max() >= J):
                raise DataError(f"subject {s.id}: visit index outside schedule")
            if s.m and np.any(np.diff(s.visits) <= 0):
                raise DataError(f"subject {s.id}: visits must be strictly increasing")
            if s.m and self.schedule[s.visits].max() >= s.time:
                raise DataError(f"subject {s.id}: measurement at or after the observed time {s.time}")
            if s.X1.shape[1] != len(self.long_names) and s.m:
                raise DataError(f"subject {s.id}: longitudinal design has wrong width")
            if s.x2.size != len(self.surv_names):
                raise DataError(f"subject {s.id}: survival design has wrong width")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n_visits(self) -> int:
        return self.schedule.size

    def layout(self, spec: ModelSpec) -> ParamLayout:
        return ParamLayout(self.long_names, self.surv_names, spec.cross, self.n_visits)

    def subject(self, sid) -> SubjectRecord:
        for s in self.subjects:
            if s.id == str(sid):
                return s
        raise KeyError(f"unknown subject id {sid!r}")

    def subset(self, subjects: Iterable[SubjectRecord]) -> "Dataset":
        return Dataset(self.schedule, list(subjects), self.long_names, self.surv_names, self.covariate_names)

    @cached_property
    def time(self) -> np.ndarray:
        return np.array([s.time for s in self.subjects])

    @cached_property
    def event(self) -> np.ndarray:
        return np.array([s.event for s in self.subjects], dtype=int)

    @cached_property
    def x2(self) -> np.ndarray:
        return np.array([s.x2 for s in self.subjects]).reshape(len(self.subjects), len(self.surv_names))

    @cached_property
    def n_measurements(self) -> np.ndarray:
        return np.array([s.m for s in self.subjects], dtype=int)

    @cached_property
    def groups(self) -> tuple[PatternGroup, ...]:
        by_pattern: dict[tuple[int, ...], list[int]] = {}
        for i, s in enumerate(self.subjects):
            by_pattern.setdefault(tuple(int(v) for v in s.visits), []).append(i)
        p = len(self.long_names)
        out = []
        for key in sorted(by_pattern, key=lambda k: (len(k), k)):
            idx = np.array(by_pattern[key], dtype=int)
            m = len(key)
            y = np.array([self.subjects[i].y for i in idx]).reshape(idx.size, m)
            X1 = np.array([self.subjects[i].X1 for i in idx]).reshape(idx.size, m, p)
            out.append(PatternGroup(key, idx, y, X1))
        return tuple(out)

    def stacked_longitudinal(self) -> tuple[np.ndarray, np.ndarray]:
        """All measurements stacked subject by subject: ``(y, X1)``."""
        ys = [s.y for s in self.subjects if s.m]
        Xs = [s.X1 for s in self.subjects if s.m]
        if not ys:
            return np.zeros(0), np.zeros((0, len(self.long_names)))
        return np.concatenate(ys), np.vstack(Xs)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _float(value: str, where: str) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise DataError(f"{where}: not a number: {value!r}") from None
    if math.isnan(x):
        raise DataError(f"{where}: missing value")
    return x


def _read_csv(path: Path, required: Sequence[str]) -> tuple[list[str], list[dict[str, str]]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = [h.strip() for h in (reader.fieldnames or [])]
            reader.fieldnames = header
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from None
    missing = [c for c in required if c not in header]
    if missing and (rows or header):
        raise DataError(f"{path}: missing column(s) {missing}")
    return header, rows


def design_row(terms: Sequence[str], visit_time: float | None, covariates: dict[str, float],
               where: str) -> list[float]:
    row = [1.0]
    for term in terms:
        if term == "time":
            if visit_time is None:
                raise DataError(f"{where}: 'time' is not a survival term")
            row.append(visit_time)
        elif term.startswith("time:"):
            col = term[5:]
            if visit_time is None:
                raise DataError(f"{where}: {term!r} is not a survival term")
            if col not in covariates:
                raise DataError(f"{where}: unknown column {col!r} in term {term!r}")
            row.append(visit_time * covariates[col])
        else:
            if term not in covariates:
                raise DataError(f"{where}: unknown column {term!r}")
            row.append(covariates[term])
    return row


def parse_dataset(longitudinal_file: str | Path | None, survival_file: str | Path,
                  design: str | Path | tuple[np.ndarray, ModelSpec]) -> Dataset:
    """Read the two-file layout into a :class:`Dataset`.

    ``longitudinal_file`` may be ``None`` (or an empty file) for a
    survival-only dataset.  Measurements recorded at or after a subject's
    observed time are rejected.
    """
    schedule, spec = load_design(design) if not isinstance(design, tuple) else design
    schedule = np.asarray(schedule, dtype=float)
    surv_path = Path(survival_file)
    header, srows = _read_csv(surv_path, ["id", "event_time", "status"])
    cov_cols = [c for c in header if c not in ("id", "event_time", "status")]
    needed = set(spec.survival_terms)
    for t in spec.longitudinal_terms:
        if t != "time":
            needed.add(t[5:] if t.startswith("time:") else t)
    unknown = sorted(needed - set(cov_cols))
    if unknown:
        raise DataError(f"{surv_path}: design references missing column(s) {unknown}")

    base: dict[str, dict] = {}
    for lineno, row in enumerate(srows, start=2):
        where = f"{surv_path}, row {lineno}"
        sid = (row.get("id") or "").strip()
        if not sid:
            raise DataError(f"{where}: empty id")
        if sid in base:
            raise DataError(f"{where}: duplicate subject id {sid!r}")
        time = _float(row["event_time"], f"{where}, column event_time")
        if not time > 0:
            raise DataError(f"{where}: event_time must be positive")
        status = _float(row["status"], f"{where}, column status")
        if status not in (0.0, 1.0):
            raise DataError(f"{where}: status must be 0 or 1")
        covs = {}
        for c in cov_cols:
            if c in needed:
                covs[c] = _float(row[c], f"{where}, column {c}")
            else:
                try:
                    covs[c] = float(row[c])
                except (TypeError, ValueError):
                    continue
        base[sid] = {"time": time, "event": int(status), "covs": covs,
                     "x2": design_row(spec.survival_terms, None, covs, where), "meas": {}}

    if longitudinal_file is not None:
        long_path = Path(longitudinal_file)
        _, lrows = _read_csv(long_path, ["id", "visit_index", "time", "y"])
        for lineno, row in enumerate(lrows, start=2):
            where = f"{long_path}, row {lineno}"
            sid = (row.get("id") or "").strip()
            if sid not in base:
                raise DataError(f"{where}: subject {sid!r} absent from survival file")
            vi = _float(row["visit_index"], f"{where}, column visit_index")
            if vi != int(vi) or not 1 <= vi <= schedule.size:
                raise DataError(f"{where}: visit_index {row['visit_index']!r} outside 1..{schedule.size}")
            v = int(vi) - 1
            t = _float(row["time"], f"{where}, column time")
            if abs(t - schedule[v]) > 1e-9 * max(1.0, abs(schedule[v])):
                raise DataError(f"{where}: time {t} does not match scheduled time {schedule[v]}")
            y = _float(row["y"], f"{where}, column y")
            rec = base[sid]
            if v in rec["meas"]:
                raise DataError(f"{where}: duplicate (id, visit) ({sid}, {v + 1})")
            if schedule[v] >= rec["time"]:
                raise DataError(f"{where}: measurement at time {schedule[v]} not before observed time {rec['time']}")
            rec["meas"][v] = (y, design_row(spec.longitudinal_terms, schedule[v], rec["covs"], where))

    p = 1 + len(spec.longitudinal_terms)
    subjects = []
    for sid, rec in base.items():
        visits = sorted(rec["meas"])
        y = [rec["meas"][v][0] for v in visits]
        X1 = np.array([rec["meas"][v][1] for v in visits]).reshape(len(visits), p)
        subjects.append(SubjectRecord(sid, visits, y, X1, rec["x2"], rec["time"], rec["event"], rec["covs"]))
    return Dataset(schedule, subjects, (INTERCEPT, *spec.longitudinal_terms),
                   (INTERCEPT, *spec.survival_terms), cov_cols)


def write_dataset(dataset: Dataset, longitudinal_file: str | Path, survival_file: str | Path) -> None:
    """Serialize in the two-file layout at full ``repr`` precision."""
    with open(longitudinal_file, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "visit_index", "time", "y"])
        for s in dataset.subjects:
            for v, y in zip(s.visits, s.y):
                w.writerow([s.id, int(v) + 1, repr(float(dataset.schedule[v])), repr(float(y))])
    with open(survival_file, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = list(dataset.covariate_names)
        w.writerow(["id", "event_time", "status", *cols])
        for s in dataset.subjects:
            w.writerow([s.id, repr(float(s.time)), s.event, *[repr(float(s.covariates[c])) if c in s.covariates else "" for c in cols]])
