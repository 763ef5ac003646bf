"""Command-line front end.

Exit codes: 0 success, 1 input error, 2 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import DataError, Dataset, ModelSpec, ParamVector, design_to_mapping, load_design, parse_dataset, write_dataset
from .estimation import FitOptions, FitResult, fit, profile_df
from .prediction import prediction_table, write_curves, write_mrl
from .simulation import (
    run_mc_study,
    residual_lifetime_study,
    simulate_cohort,
    study1_truth,
    study2_truth,
    survival_only,
    write_mc_tables,
    write_residual_table,
)

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
DEFAULT_SEED = 20240101

log = logging.getLogger("copulajm")


class InputError(Exception):
    pass


def _stamp(args) -> str | None:
    return None if args.no_timestamp else datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"{out}: cannot create output directory: {exc}") from None
    return out


def _override_spec(spec: ModelSpec, args) -> ModelSpec:
    changes = {}
    for key in ("copula", "within", "cross"):
        if getattr(args, key, None):
            changes[key] = getattr(args, key)
    if getattr(args, "df", None) is not None:
        changes["df"] = args.df
        changes.setdefault("copula", "t")
    if changes.get("copula") == "t" and "df" not in changes and spec.df is None:
        raise InputError("--copula t needs --df")
    try:
        return spec.with_(**changes)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _load(args) -> tuple[Dataset, ModelSpec]:
    schedule, spec = load_design(args.design)
    spec = _override_spec(spec, args)
    ds = parse_dataset(args.long, args.surv, (schedule, spec))
    if len(ds) == 0:
        raise InputError(f"{args.surv}: no subjects")
    return ds, spec


def _fmt(x) -> str:
    return "NA" if x is None or not np.isfinite(x) else f"{x:.6g}"


def fit_table(res: FitResult) -> str:
    width = max(len(n) for n in res.names)
    lines = [f"model {res.spec.label}  n={res.n_subjects}  k={res.k}",
             f"{'parameter':<{width}}  {'estimate':>12}  {'se':>12}"]
    for n, e, s in zip(res.names, res.estimates, res.se):
        lines.append(f"{n:<{width}}  {_fmt(e):>12}  {_fmt(s):>12}")
    lines += [f"loglik {_fmt(res.loglik)}  aic {_fmt(res.aic)}  bic {_fmt(res.bic)}",
              f"converged {res.converged}  iterations {res.n_iter}  evaluations {res.n_eval}"]
    if res.message:
        lines.append(f"note: {res.message}")
    return "\n".join(lines) + "\n"


def _write_report(res: FitResult, out: Path, stamp: str | None, stem: str = "fit") -> None:
    report = res.to_dict()
    if stamp:
        report = {"generated": stamp, **report}
    (out / f"{stem}.json").write_text(json.dumps(report, indent=2) + "\n")
    text = fit_table(res)
    (out / f"{stem}.txt").write_text((f"# generated {stamp}\n" if stamp else "") + text)


def theta_from_report(path: str | Path, ds: Dataset, spec: ModelSpec) -> ParamVector:
    try:
        report = json.loads(Path(path).read_text())
        values = {p["name"]: p["estimate"] for p in report["parameters"]}
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a fit report: {exc}") from None
    layout = ds.layout(spec)
    missing = [n for n in layout.names if n not in values]
    if missing:
        raise InputError(f"{path}: report lacks parameter(s) {missing} for model {spec.label}")
    return layout.unpack([values[n] for n in layout.names])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _truth(args):
    maker = study1_truth if args.study == 1 else study2_truth
    truth = maker(args.censoring_rate, args.n, args.seed)
    if args.within or args.cross:
        spec = truth.spec.with_(within=args.within or truth.spec.within, cross=args.cross or truth.spec.cross)
        th = truth.theta.copy()
        if spec.cross == "zero":
            th.rho_ty = np.zeros(0)
        elif spec.cross == "unstructured":
            th.rho_ty = np.full(len(truth.schedule), th.rho_ty[0])
        truth = truth.with_(spec=spec, theta=th)
    return truth


def cmd_simulate(args) -> int:
    out = _out_dir(args)
    truth = _truth(args)
    cohort = simulate_cohort(truth, args.replicate)
    write_dataset(cohort.dataset, out / "long.csv", out / "surv.csv")
    (out / "design.yaml").write_text(yaml.safe_dump(design_to_mapping(truth.schedule, truth.spec), sort_keys=False))
    print(f"wrote {len(cohort.dataset)} subjects to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    ds, spec = _load(args)
    out = _out_dir(args)
    res = fit(ds, spec, FitOptions())
    _write_report(res, out, _stamp(args))
    sys.stdout.write(fit_table(res))
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_profile_df(args) -> int:
    ds, spec = _load(args)
    out = _out_dir(args)
    grid = [float(g) for g in args.grid.split(",")]
    try:
        rows = profile_df(ds, spec, grid)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    lines = ["df,loglik,converged"]
    for r in rows:
        lines.append(f"{'inf' if np.isinf(r.df) else f'{r.df:g}'},{_fmt(r.loglik)},{int(r.converged)}")
    (out / "profile.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if all(r.converged for r in rows) else EXIT_NONCONVERGED


def cmd_predict(args) -> int:
    ds, spec = _load(args)
    out = _out_dir(args)
    if args.fit:
        theta = theta_from_report(args.fit, ds, spec)
    else:
        res = fit(ds, spec)
        if not res.converged:
            print(f"fit did not converge: {res.message}", file=sys.stderr)
            return EXIT_NONCONVERGED
        theta = res.theta
    ids = [i.strip() for i in args.ids.split(",") if i.strip()]
    for i in ids:
        try:
            ds.subject(i)
        except KeyError as exc:
            raise InputError(str(exc)) from None
    curves = []
    for i in ids:
        ts = [ds.subject(i).time] if args.t is None else [float(x) for x in args.t.split(",")]
        grid = lambda t: np.linspace(t, t + args.horizon, args.points)  # noqa: E731
        curves += prediction_table(ds, [i], ts, grid, theta, spec)
    write_curves(curves, out / "curves.csv")
    write_mrl(curves, out / "mrl.csv")
    for i in ids:
        write_curves([c for c in curves if c.id == i], out / f"curve_{i}.csv")
    print(f"wrote {len(curves)} curves to {out}")
    return EXIT_OK


def _fit_specs(arg: str, base: ModelSpec) -> list[ModelSpec]:
    specs = []
    for tok in arg.split(","):
        tok = tok.strip()
        if tok == "gaussian":
            specs.append(base.with_(copula="gaussian", df=None))
        elif tok.startswith("t"):
            specs.append(base.with_(copula="t", df=float(tok[1:])))
        else:
            raise InputError(f"--fit-copulas: cannot read {tok!r} (use gaussian or t<df>)")
    return specs


def cmd_mc(args) -> int:
    out = _out_dir(args)
    truth = _truth(args)
    specs = _fit_specs(args.fit_copulas, truth.spec)
    study = run_mc_study(truth, specs, args.replicates, workers=args.threads)
    write_mc_tables(study, out)
    for s in study.summaries:
        print(f"{s.spec.label}: {s.n} replicates used, {s.n_failed} failed")
    return EXIT_OK


def cmd_residual_study(args) -> int:
    out = _out_dir(args)
    truth = _truth(args)
    models = {"joint": (truth.theta, truth.spec), "survival": (survival_only(truth.theta), truth.spec)}
    rows = residual_lifetime_study(truth, models, [float(x) for x in args.t_list.split(",")], args.n_new)
    write_residual_table(rows, out / "residual.csv")
    for r in rows:
        print(f"t={r.t:g} at_risk={r.n_at_risk} " + " ".join(f"{k}={v:.6g}" for k, v in r.mean_abs.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _data_args(p):
    p.add_argument("--long", help="longitudinal CSV (omit for survival-only data)")
    p.add_argument("--surv", required=True, help="survival CSV")
    p.add_argument("--design", required=True, help="design config (YAML or JSON)")
    _model_args(p)


def _model_args(p):
    p.add_argument("--copula", choices=("gaussian", "t"))
    p.add_argument("--df", type=float, help="t-copula degrees of freedom")
    p.add_argument("--cross", choices=("zero", "constant", "power", "unstructured"))
    p.add_argument("--within", choices=("exchangeable", "ar1"))


def _common(p):
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--threads", type=int, default=1, help="worker processes for replicate-level work")
    p.add_argument("--no-timestamp", action="store_true", help="omit the generated-at line from reports")


def _study_args(p):
    p.add_argument("--study", type=int, choices=(1, 2), default=1, help="1: Gaussian truth, 2: t(4) truth")
    p.add_argument("--censoring-rate", type=float, default=0.0)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--within", choices=("exchangeable", "ar1"))
    p.add_argument("--cross", choices=("zero", "constant", "power", "unstructured"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="copulajm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one dataset")
    _study_args(p)
    _common(p)
    p.add_argument("--replicate", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a joint model")
    _data_args(p)
    _common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("profile-df", help="profile the log-likelihood over t-copula df")
    _data_args(p)
    _common(p)
    p.add_argument("--grid", default="3,4,5,8,16,40")
    p.set_defaults(func=cmd_profile_df)

    p = sub.add_parser("predict", help="conditional survival curves and mean residual lifetimes")
    _data_args(p)
    _common(p)
    p.add_argument("--ids", required=True, help="comma-separated subject ids")
    p.add_argument("--t", help="comma-separated conditioning times (default: each subject's observed time)")
    p.add_argument("--horizon", type=float, default=6.0)
    p.add_argument("--points", type=int, default=61)
    p.add_argument("--fit", help="fit.json to take parameters from (default: refit)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("mc", help="Monte Carlo simulation study")
    _study_args(p)
    _common(p)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--fit-copulas", default="gaussian,t3", help="e.g. gaussian,t3,t4")
    p.set_defaults(func=cmd_mc)

    p = sub.add_parser("residual-study", help="residual-lifetime comparison on fresh subjects")
    _study_args(p)
    _common(p)
    p.add_argument("--n-new", type=int, default=1000)
    p.add_argument("--t-list", default="2,6,12,18")
    p.set_defaults(func=cmd_residual_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
