"""AIDS (ddI/ddC trial) fixture: conversion, design variants and lookup.

The public data ship with the R package ``JM`` as the long-format data frame
``aids`` (one row per CD4 measurement, baseline columns repeated).  Export it
with ``scripts/export_aids.R`` or take ``JM/aids.csv`` from the Rdatasets
collection, then run::

    python -m copulajm.aids aids.csv data/aids

which writes ``long.csv``, ``surv.csv`` and the six design variants.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import yaml

from .data import DataError, Dataset, ModelSpec, design_to_mapping, parse_dataset

SCHEDULE = (0.0, 2.0, 6.0, 12.0, 18.0)
LONG_TERMS = ("time", "time:drug", "gender", "prevOI", "AZT")
SURV_TERMS = ("drug", "gender", "prevOI", "AZT")
N_SUBJECTS, N_MEASUREMENTS = 467, 1405

# factor level coded as 1; the other level is 0
CODING = {"drug": "ddI", "gender": "male", "prevOI": "AIDS", "AZT": "failure"}

VARIANTS = {
    "gaussian_constant": ModelSpec("gaussian", None, "exchangeable", "constant", LONG_TERMS, SURV_TERMS),
    "gaussian_power": ModelSpec("gaussian", None, "exchangeable", "power", LONG_TERMS, SURV_TERMS),
    "gaussian_zero": ModelSpec("gaussian", None, "exchangeable", "zero", LONG_TERMS, SURV_TERMS),
    "t4_constant": ModelSpec("t", 4.0, "exchangeable", "constant", LONG_TERMS, SURV_TERMS),
    "t4_power": ModelSpec("t", 4.0, "exchangeable", "power", LONG_TERMS, SURV_TERMS),
    "t4_zero": ModelSpec("t", 4.0, "exchangeable", "zero", LONG_TERMS, SURV_TERMS),
}

ENV_VAR = "COPULAJM_AIDS_DIR"


def _code(col: str, value: str, where: str) -> int:
    v = value.strip().strip('"')
    if v in ("0", "1"):
        return int(v)
    levels = {"drug": ("ddC", "ddI"), "gender": ("female", "male"), "prevOI": ("noAIDS", "AIDS"),
              "AZT": ("intolerance", "failure")}[col]
    if v not in levels:
        raise DataError(f"{where}: unexpected {col} level {value!r}")
    return int(v == CODING[col])


def convert_jm_aids(src: str | Path, out_dir: str | Path, check_counts: bool = True) -> tuple[Path, Path]:
    """Convert the long-format ``aids`` export into the two-file layout."""
    src, out = Path(src), Path(out_dir)
    with open(src, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{src}: empty file")
    need = ("patient", "Time", "death", "CD4", "obstime", *CODING)
    missing = [c for c in need if c not in rows[0]]
    if missing:
        raise DataError(f"{src}: missing column(s) {missing}")

    base: dict[str, dict] = {}
    meas: list[tuple[str, int, float, float]] = []
    for lineno, row in enumerate(rows, start=2):
        where = f"{src}, row {lineno}"
        pid = row["patient"].strip().strip('"')
        info = {"time": float(row["Time"]), "status": int(float(row["death"]))}
        info.update({c: _code(c, row[c], where) for c in CODING})
        if pid in base and base[pid] != info:
            raise DataError(f"{where}: baseline columns differ within patient {pid}")
        base.setdefault(pid, info)
        obstime = float(row["obstime"])
        if obstime not in SCHEDULE:
            raise DataError(f"{where}: obstime {obstime} is not on the schedule {SCHEDULE}")
        meas.append((pid, SCHEDULE.index(obstime) + 1, obstime, float(row["CD4"])))

    if check_counts and (len(base), len(meas)) != (N_SUBJECTS, N_MEASUREMENTS):
        raise DataError(f"{src}: expected {N_SUBJECTS} subjects and {N_MEASUREMENTS} measurements, "
                        f"found {len(base)} and {len(meas)}")

    out.mkdir(parents=True, exist_ok=True)
    surv, long_ = out / "surv.csv", out / "long.csv"
    with open(surv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "event_time", "status", *CODING])
        for pid, info in sorted(base.items(), key=lambda kv: int(kv[0]) if kv[0].isdigit() else kv[0]):
            w.writerow([pid, repr(info["time"]), info["status"], *(info[c] for c in CODING)])
    with open(long_, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "visit_index", "time", "y"])
        for pid, vi, t, y in meas:
            w.writerow([pid, vi, repr(t), repr(y)])
    write_designs(out)
    return long_, surv


def write_designs(out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, spec in VARIANTS.items():
        p = out / f"design_{name}.yaml"
        p.write_text(yaml.safe_dump(design_to_mapping(SCHEDULE, spec), sort_keys=False))
        paths.append(p)
    return paths


def fixture_dir() -> Path | None:
    """Directory holding ``long.csv``/``surv.csv`` or a raw ``aids.csv``, if any."""
    candidates = []
    if os.environ.get(ENV_VAR):
        candidates.append(Path(os.environ[ENV_VAR]))
    candidates.append(Path(__file__).resolve().parents[2] / "data" / "aids")
    for d in candidates:
        if (d / "surv.csv").is_file() and (d / "long.csv").is_file():
            return d
        if (d / "aids.csv").is_file():
            return d
    return None


def load_aids(variant: str = "gaussian_constant", work_dir: str | Path | None = None) -> Dataset:
    """Parse the fixture under one of the six model variants.

    A raw ``aids.csv`` is converted into ``work_dir`` (or next to it) first.
    Raises ``FileNotFoundError`` when no fixture is present.
    """
    d = fixture_dir()
    if d is None:
        raise FileNotFoundError(f"AIDS fixture not found; set {ENV_VAR} or populate data/aids "
                                "(see scripts/export_aids.R)")
    if not (d / "surv.csv").is_file():
        d = Path(work_dir) if work_dir is not None else d
        convert_jm_aids(fixture_dir() / "aids.csv", d)
    return parse_dataset(d / "long.csv", d / "surv.csv", (SCHEDULE, VARIANTS[variant]))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m copulajm.aids", description=__doc__.splitlines()[0])
    p.add_argument("source", help="long-format aids export (CSV)")
    p.add_argument("out", help="output directory")
    p.add_argument("--no-count-check", action="store_true", help="skip the 467/1405 row-count check")
    args = p.parse_args(argv)
    try:
        long_, surv = convert_jm_aids(args.source, args.out, check_counts=not args.no_count_check)
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {long_} and {surv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
