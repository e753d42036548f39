"""Command-line interface: ``birdie {bisg,estimate,sensitivity,simulate,evaluate}``.

Every command writes its outputs and a ``manifest.json`` into ``--out``.

Exit codes: 0 success, 2 input error, 3 numerical non-convergence.

Options may also come from ``--config FILE``, a text file of ``key = value``
lines (``#`` starts a comment; keys are option names with ``-`` or ``_``).
Options given on the command line take precedence.

Randomness comes only from ``--seed``. Subsystem seeds are the children of
``numpy.random.SeedSequence(seed)``: child 0 drives simulation, child 1 the
bootstrap, child 2 the posterior draws of the bias bound.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np
import pandas as pd

from . import __version__
from .baseline import ols_estimate, ols_poststratify, thresholding_estimate, weighting_estimate
from .bisg import bisg_predict
from .census import CensusSchemaError, load_census_tables
from .data import DisparityEstimate, ProbMatrix, RecordTable
from .em import bootstrap_pooling, estimate_from_fit, fit_birdie
from .metrics import EvalReport, log_score, map_accuracy, roc_auc, tv_distance, tv_within_race
from .models import MixedModelConvergenceError, OutcomeModelSpec
from .sensitivity import SurnameGroups, bias_bound, refit_with_groups, residual_correlation
from .synth import DagConfig, generate, random_config, true_disparity

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGENCE = 0, 2, 3
SEED_SIMULATE, SEED_BOOTSTRAP, SEED_BIAS_BOUND = 0, 1, 2


class InputError(Exception):
    """Bad or missing input; maps to exit code 2."""


def subsystem_seed(seed: int, which: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed).spawn(3)[which]


# ---- config file -----------------------------------------------------------

def read_config(path) -> dict:
    """Parse ``key = value`` lines into a dict of strings."""
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{n}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


# ---- manifest --------------------------------------------------------------

class Run:
    """Collects inputs/outputs of one command and writes the manifest."""

    def __init__(self, args):
        self.args = args
        self.start = time.perf_counter()
        self.inputs, self.outputs = {}, []
        os.makedirs(args.out, exist_ok=True)

    def input(self, name, path):
        if path is None:
            return None
        if not os.path.exists(path):
            raise InputError(f"input file not found: {path}")
        self.inputs[name] = path
        return path

    def path(self, name):
        p = os.path.join(self.args.out, name)
        self.outputs.append(p)
        return p

    def manifest(self, status="ok", extra=None):
        opts = {k: v for k, v in sorted(vars(self.args).items())
                if k not in ("func", "out", "threads") and not callable(v)}
        blob = json.dumps(opts, sort_keys=True, default=str).encode()
        man = {"command": self.args.command, "inputs": self.inputs,
               "config_hash": hashlib.sha256(blob).hexdigest(), "options": opts,
               "seed": self.args.seed, "version": __version__,
               "wall_time": round(time.perf_counter() - self.start, 6),
               "outputs": sorted(self.outputs), "status": status}
        if extra:
            man.update(extra)
        with open(os.path.join(self.args.out, "manifest.json"), "w") as fh:
            json.dump(man, fh, indent=1, default=str)
            fh.write("\n")


# ---- helpers ---------------------------------------------------------------

def _races_from_census(census_dir):
    path = os.path.join(census_dir, "prior.csv")
    if not os.path.exists(path):
        raise InputError(f"input file not found: {path}")
    return pd.read_csv(path, dtype=str, keep_default_na=False)["race"].tolist()


def _load_tables(run, census_dir, races=None):
    if census_dir is None:
        return None
    if not os.path.isdir(census_dir):
        raise InputError(f"census directory not found: {census_dir}")
    run.inputs["census_dir"] = census_dir
    return load_census_tables(census_dir, races or _races_from_census(census_dir))


def _load_pair(run, args):
    records = RecordTable.read_csv(run.input("records", args.records))
    probs = ProbMatrix.read_csv(run.input("probs", args.probs))
    if probs.n != records.n:
        raise InputError(f"{args.probs} has {probs.n} rows but {args.records} has {records.n}")
    if not np.array_equal(probs.ids, records.ids):
        # align by id
        pos = pd.Index(probs.ids).get_indexer(records.ids)
        if (pos < 0).any():
            raise InputError("probability ids do not match record ids")
        probs = ProbMatrix(probs.probs[pos], probs.races, probs.conditioning, ids=records.ids)
    return probs, records


def _spec(args, records) -> OutcomeModelSpec:
    """Model spec from options; effect level defaults to tract when present, else the finest."""
    alpha = [float(a) for a in str(args.alpha).split(",")]
    level = args.level
    if level is None and args.model != "pooling" and records.levels:
        level = "tract" if "tract" in records.levels else records.levels[0]
    return OutcomeModelSpec(args.model, alpha=alpha[0] if len(alpha) == 1 else alpha,
                            level=None if args.model == "pooling" else level,
                            use_cov=not args.no_cov)


def _fit(args, probs, records, spec, run):
    fit = fit_birdie(probs, records, spec, accel=args.accel, tol=args.tol, max_iter=args.max_iter)
    fit.save(run.path("theta.csv"), run.path("trace.csv"))
    return fit


# ---- commands --------------------------------------------------------------

def cmd_bisg(args, run):
    records = RecordTable.read_csv(run.input("records", args.records))
    tables = _load_tables(run, args.census_dir, args.races.split(",") if args.races else None)
    if args.level not in tables.geo_fallbacks:
        raise InputError(f"level {args.level!r} not among census levels {tables.geo_fallbacks}")
    probs = bisg_predict(tables, records, args.level, unmatched=args.unmatched)
    fell_back = int(np.sum(probs.level_used != args.level))
    if fell_back:
        print(f"warning: {fell_back} record(s) lacked a usable {args.level!r} key and fell back "
              "to a coarser level", file=sys.stderr)
    probs.to_csv(run.path("probs.csv"))
    run.manifest(extra={"fallback_records": fell_back})
    return EXIT_OK


def cmd_estimate(args, run):
    probs, records = _load_pair(run, args)
    tables = _load_tables(run, args.census_dir, list(probs.races))
    code = EXIT_OK
    extra = {}
    if args.method == "weighting":
        est = weighting_estimate(probs, records)
    elif args.method == "thresholding":
        est = thresholding_estimate(probs, records)
    elif args.method == "ols":
        est = ols_estimate(probs, records, args.level)
        if tables is not None:
            est = ols_poststratify(est, tables)
    else:
        spec = _spec(args, records)
        try:
            fit = _fit(args, probs, records, spec, run)
        except MixedModelConvergenceError as e:
            print(f"error: {e}", file=sys.stderr)
            run.manifest(status="nonconverged")
            return EXIT_NONCONVERGENCE
        est = estimate_from_fit(fit, tables)
        fit.updated_probs.to_csv(run.path("updated_probs.csv"))
        extra = {"iterations": fit.iterations, "converged": fit.converged,
                 "log_posterior": fit.log_posterior}
        if args.bootstrap:
            cov = bootstrap_pooling(probs, records, spec, args.bootstrap,
                                    subsystem_seed(args.seed, SEED_BOOTSTRAP), threads=args.threads,
                                    tol=args.tol, max_iter=args.max_iter)
            cov.to_csv(run.path("bootstrap_cov.csv"), float_format="%.17g", lineterminator="\n")
        if not fit.converged:
            print(f"error: EM did not converge in {args.max_iter} iterations; trace written",
                  file=sys.stderr)
            code = EXIT_NONCONVERGENCE
    est.to_csv(run.path("estimate.csv"))
    run.manifest(status="ok" if code == EXIT_OK else "nonconverged", extra=extra)
    return code


def cmd_sensitivity(args, run):
    probs, records = _load_pair(run, args)
    tables = _load_tables(run, args.census_dir, list(probs.races))
    groups = SurnameGroups.read_csv(run.input("groups", args.groups), default=args.default_group)
    spec = _spec(args, records)
    fit = fit_birdie(probs, records, spec, accel=args.accel, tol=args.tol, max_iter=args.max_iter)
    residual_correlation(fit, records, groups).to_csv(
        run.path("residual_correlation.csv"), index=False, float_format="%.17g",
        lineterminator="\n", na_rep="")
    refit = refit_with_groups(probs, records, groups, spec, tables, base_fit=fit,
                              accel=args.accel, tol=args.tol, max_iter=args.max_iter)
    refit.change.to_csv(run.path("refit_change.csv"), index=False, float_format="%.17g",
                        lineterminator="\n", na_rep="")
    refit.estimate.to_csv(run.path("refit_estimate.csv"))
    extra = {"mean_abs_change": refit.mean_abs_change, "max_abs_change": refit.max_abs_change}
    if args.delta_norm is not None and spec.kind != "mixed_effects":
        mass = fit.suffstats.sum(axis=2)

        def quantities(t):
            if t.ndim == 2:
                return t.ravel()
            return (np.einsum("cr,cry->ry", mass, t) / mass.sum(axis=0)[:, None]).ravel()

        names = [f"{r}|{y}" for r in fit.races for y in fit.outcomes]
        rep = bias_bound(fit, probs, records, quantities, args.delta_norm, draws=args.draws,
                         seed=subsystem_seed(args.seed, SEED_BIAS_BOUND), names=names)
        rep.to_csv(run.path("bias_bound.csv"))
    converged = fit.converged and refit.fit.converged
    run.manifest(status="ok" if converged else "nonconverged", extra=extra)
    return EXIT_OK if converged else EXIT_NONCONVERGENCE


def cmd_simulate(args, run):
    if args.dag:
        config = DagConfig.from_json(run.input("dag", args.dag))
    else:
        config = random_config(seed=args.seed, n_races=args.n_races, n_surnames=args.n_surnames,
                               n_geos=args.n_geos, n_covs=args.n_covs, n_outcomes=args.n_outcomes)
    records, tables = generate(config, args.n, seed=subsystem_seed(args.seed, SEED_SIMULATE),
                               delta_norm=args.delta_norm or 0.0)
    records.to_csv(run.path("records.csv"))
    census_dir = os.path.join(args.out, "census")
    tables.save(census_dir)
    run.outputs.extend(os.path.join(census_dir, f) for f in sorted(os.listdir(census_dir)))
    true_disparity(config).to_csv(run.path("truth.csv"))
    config.to_json(run.path("dag.json"))
    run.manifest()
    return EXIT_OK


def cmd_evaluate(args, run):
    est = DisparityEstimate.read_csv(run.input("estimate", args.estimate))
    truth = DisparityEstimate.read_csv(run.input("truth", args.truth))
    tables = _load_tables(run, args.census_dir, list(est.races)) if args.census_dir else None
    if tables is not None:
        marginal = tables.prior
    else:
        marginal = np.full(len(est.races), 1.0 / len(est.races))
    report = EvalReport()
    report.add("tv_distance", tv_distance(est, truth, marginal))
    report.add("tv_within_race", tv_within_race(est, truth), scope="race")
    if args.probs and args.records:
        probs, records = _load_pair(run, args)
        if records.true_race is None:
            raise InputError("records need a true_race column for probability metrics")
        report.add("log_score", log_score(probs, records.true_race))
        report.add("map_accuracy", map_accuracy(probs, records.true_race))
        report.add("roc_auc", roc_auc(probs, records.true_race), scope="race")
    report.to_csv(run.path("eval.csv"))
    run.manifest()
    return EXIT_OK


# ---- parser ----------------------------------------------------------------

def _common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="key = value option file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)


def _model_opts(p):
    p.add_argument("--model", choices=["pooling", "saturated", "mixed"], default="pooling")
    p.add_argument("--level", default=None, help="geo level of model cells (default: finest present)")
    p.add_argument("--no-cov", action="store_true", help="leave cov out of model cells")
    p.add_argument("--alpha", default="1", help="Dirichlet concentration (scalar or comma list)")
    p.add_argument("--accel", choices=["none", "squarem", "anderson"], default="squarem")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="birdie", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bisg", help="BISG race probabilities")
    _common(p)
    p.add_argument("--records", required=True)
    p.add_argument("--census-dir", required=True)
    p.add_argument("--level", required=True)
    p.add_argument("--races", help="comma-separated race labels (default: from prior.csv)")
    p.add_argument("--unmatched", choices=["prior", "drop"], default="prior")
    p.set_defaults(func=cmd_bisg)

    p = sub.add_parser("estimate", help="disparity estimates")
    _common(p)
    p.add_argument("--records", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--method", choices=["weighting", "thresholding", "ols", "birdie"],
                   default="birdie")
    p.add_argument("--census-dir", help="census tables for post-stratification")
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap replicates (pooling)")
    _model_opts(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sensitivity", help="surname-group diagnostics and bias bound")
    _common(p)
    p.add_argument("--records", required=True)
    p.add_argument("--probs", required=True)
    p.add_argument("--groups", required=True, help="surname_groups.csv (surname,group)")
    p.add_argument("--default-group", default="Other")
    p.add_argument("--census-dir")
    p.add_argument("--delta-norm", type=float, help="total input error for the bias bound")
    p.add_argument("--draws", type=int, default=500)
    _model_opts(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("simulate", help="synthetic population with ground truth")
    _common(p)
    p.add_argument("--dag", help="DAG config JSON (default: random desk-scale config)")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--n-races", type=int, default=4)
    p.add_argument("--n-surnames", type=int, default=200)
    p.add_argument("--n-geos", type=int, default=30)
    p.add_argument("--n-covs", type=int, default=2)
    p.add_argument("--n-outcomes", type=int, default=4)
    p.add_argument("--delta-norm", type=float, default=0.0,
                   help="perturb the emitted census surname table by this norm")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="compare estimates against truth")
    _common(p)
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--census-dir", help="race prior for joint tables (default uniform)")
    p.add_argument("--probs")
    p.add_argument("--records")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from the ``--config`` file, if any."""
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    command = next((t for t in argv if not t.startswith("-")), None)
    subs = parser._subparsers._group_actions[0].choices
    if path and command in subs:
        values = read_config(path)
        sub = subs[command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(k for k in values if k not in known)
        if unknown:
            raise InputError(f"{path}: unknown option(s) {unknown}")
        defaults = {}
        for k, v in values.items():
            act = known[k]
            if isinstance(act, argparse._StoreTrueAction):
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
            else:
                defaults[k] = act.type(v) if act.type else v
            act.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        run = Run(args)
        return args.func(args, run)
    except (InputError, FileNotFoundError, CensusSchemaError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
