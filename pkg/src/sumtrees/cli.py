"""Command-line entry point.

Exit codes: 0 success, 64 bad flags, 65 data errors, 66 model archive
errors, 70 internal invariant breach. Failures print one JSON line to
stderr: ``{"error": <kind>, "code": <int>, "message": <text>}``.

All randomness comes from ``--seed``. Chains and replicates receive child
seeds from ``numpy.random.SeedSequence(seed)`` keyed by their index, so a
run is reproducible whatever ``--threads`` is.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import diagnostics, inference, persistence
from .dataset import DataError, build_model_frame, generate_friedman, load_csv, read_predictors
from .priors import Hyperparameters, PriorError, parse_config
from .sampler import InvariantError, SamplerOptions

EXIT_USAGE, EXIT_DATA, EXIT_MODEL, EXIT_INTERNAL = 64, 65, 66, 70


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


# flag -> Hyperparameters field
_HYPER_FLAGS = {
    "num_trees": int, "alpha": float, "beta": float, "k": float, "nu": float, "q": float,
    "prob_grow": float, "prob_prune": float, "prob_change": float, "burn_in": int,
    "post_burn_in": int, "chains": int, "prob_rule_class": float,
}


def _add_data(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", required=required, help="training CSV with a header row")
    g.add_argument("--response", required=required, help="response column name")
    g.add_argument("--positive-level", help="positive class label (implies classification)")
    g.add_argument("--task", choices=("regression", "classification"), help="override task detection")
    g.add_argument("--use-missing-data", action="store_true", help="keep rows with missing predictors")
    g.add_argument("--missing-dummies", action="store_true", help="append M_<col> missingness indicators")
    g.add_argument("--drop-missing", action="store_true", help="drop incomplete rows instead of failing")


def _add_hyper(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("hyperparameters")
    g.add_argument("--config", "--model-config", dest="config", help="key=value hyperparameter file")
    for name, typ in _HYPER_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    g.add_argument("--cov-prior-vec", help="comma-separated positive weights, one per model column")
    g.add_argument("--no-memcache", action="store_true", help="disable per-node split-candidate caching")


def _add_run(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--progress", action="store_true", help="report iterations on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sumtrees", description="Bayesian additive regression trees")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit a model and save an archive")
    _add_data(p), _add_hyper(p), _add_run(p)
    p.add_argument("--out", required=True, help="model archive path")
    p.add_argument("--export-json", help="also write a lossless JSON rendering")
    p.add_argument("--debug-log", help="write every proposal evaluation as JSON lines")
    p.add_argument("--debug-check", action="store_true", help="verify running residuals each iteration")
    p.add_argument("--summary", action="store_true", help="print the in-sample summary block")

    p = sub.add_parser("predict", help="predict new rows from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--intervals", choices=("none", "credible", "prediction"), default="none")
    p.add_argument("--conf", type=float, default=0.95)
    p.add_argument("--draws", type=int, default=1000, help="posterior predictive draws per row")
    p.add_argument("--out", help="CSV path (default stdout)")
    _add_run(p)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    _add_data(p), _add_hyper(p), _add_run(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", help="JSON summary path (default stdout)")
    p.add_argument("--predictions-out", help="CSV of out-of-fold predictions and fold indices")

    p = sub.add_parser("cvgrid", help="grid search over k, (nu, q) and tree count")
    _add_data(p), _add_hyper(p), _add_run(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--grid-k", help="comma list, default 2,3,5")
    p.add_argument("--grid-nu-q", help="comma list of nu:q pairs, default 3:0.9,3:0.99,10:0.75")
    p.add_argument("--grid-num-trees", help="comma list, default 50,200")
    p.add_argument("--out")

    p = sub.add_parser("varsel", help="permutation variable selection")
    _add_data(p), _add_hyper(p), _add_run(p)
    p.add_argument("--permutations", type=int, default=100)
    p.add_argument("--alpha-level", type=float, default=0.05, dest="alpha_level")
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--num-trees-permute", type=int, default=20)
    p.add_argument("--cv-folds", type=int, help="choose the threshold rule by cross-validation")
    p.add_argument("--out")

    p = sub.add_parser("covtest", help="covariate importance permutation test")
    _add_data(p), _add_hyper(p), _add_run(p)
    p.add_argument("--covariates", help="comma list, or ALL; omit for the response-permutation test")
    p.add_argument("--permutations", type=int, default=100)
    p.add_argument("--out")

    p = sub.add_parser("pdp", help="partial dependence grid for one predictor")
    p.add_argument("--model", required=True)
    p.add_argument("--feature", required=True)
    p.add_argument("--out")
    _add_run(p)

    for name, help_ in (("importance", "inclusion proportions"), ("interactions", "interaction counts")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--model", help="use one saved model instead of refitting")
        _add_data(p, required=False), _add_hyper(p), _add_run(p)
        p.add_argument("--replicates", type=int, default=20)
        p.add_argument("--out")

    p = sub.add_parser("diagnostics", help="summary, convergence traces and residuals")
    p.add_argument("--model", required=True)
    p.add_argument("--trace-out", help="CSV of per-iteration series")
    p.add_argument("--residuals-out", help="CSV of (fitted, residual) pairs")
    _add_run(p)

    p = sub.add_parser("rmse-by-trees", help="holdout rmse as a function of tree count")
    _add_data(p), _add_hyper(p), _add_run(p)
    p.add_argument("--tree-counts", default="5,10,20,50,100,200")
    p.add_argument("--replicates", type=int, default=3)
    p.add_argument("--out")

    p = sub.add_parser("simulate-friedman", help="write a Friedman test-function dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export", help="write a model archive as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of numbers: {text!r}") from exc


def _load_frame(args):
    raw = load_csv(args.data, args.response, args.positive_level, args.task)
    if raw.has_missing() and not args.use_missing_data:
        if not args.drop_missing:
            raise DataError("missing predictor values; pass --use-missing-data or --drop-missing")
        raw = raw.drop_missing()
    return build_model_frame(raw, args.use_missing_data, args.missing_dummies)


def _hyper(args, frame=None) -> Hyperparameters:
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            values.update(parse_config(Path(args.config).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
    for name in _HYPER_FLAGS:
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    if getattr(args, "cov_prior_vec", None):
        values["cov_prior_vec"] = tuple(_floats(args.cov_prior_vec))
    if getattr(args, "no_memcache", False):
        values["memcache"] = False
    if getattr(args, "use_missing_data", False):
        values["use_missing_data"] = True
    try:
        hyper = Hyperparameters.from_dict(values)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    if frame is not None and hyper.cov_prior_vec is not None and len(hyper.cov_prior_vec) != frame.p:
        raise UsageError(f"--cov-prior-vec needs {frame.p} weights, got {len(hyper.cov_prior_vec)}")
    return hyper


def _emit_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_jsonable)
    if path:
        Path(path).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serializable: {type(v)}")


def _emit_csv(header: Sequence[str], rows, path: str | None) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    finally:
        if path:
            fh.close()


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> None:
    frame = _load_frame(args)
    hyper = _hyper(args, frame)
    log = open(args.debug_log, "w") if args.debug_log else None
    try:
        opts = SamplerOptions(debug_check=args.debug_check, debug_log=log, progress=args.progress)
        ens = inference.fit(frame, hyper, args.seed, args.threads, opts)
    finally:
        if log:
            log.close()
    persistence.save_model(ens, args.out)
    if args.export_json:
        persistence.export_json(ens, args.export_json)
    if args.summary:
        sys.stdout.write(diagnostics.model_summary(ens, args.threads))


def cmd_predict(args) -> None:
    ens = persistence.load_model(args.model)
    schema = ens.frame.schema
    if schema is None:
        raise DataError("model was trained without a column schema; cannot map new CSV rows")
    x = read_predictors(args.data, schema)
    res = inference.predict(ens, x, args.threads)
    if ens.is_classification:
        header = ["probability", "label"]
        cols = [res.probabilities, inference.label_names(ens, res.labels)]
    else:
        header = ["prediction"]
        cols = [res.point]
    if args.intervals == "credible":
        iv = inference.credible_interval(ens, x, args.conf, draws=res.draws)
    elif args.intervals == "prediction":
        if ens.is_classification:
            raise UsageError("prediction intervals are not available for classification")
        iv = inference.prediction_interval(ens, x, args.conf, args.draws, args.seed, draws=res.draws)
    else:
        iv = None
    if iv is not None:
        header += ["lower", "upper"]
        cols += [iv.lower, iv.upper]
    _emit_csv(header, zip(*cols), args.out)


def cmd_cv(args) -> None:
    frame = _load_frame(args)
    res = inference.k_fold_cv(frame, _hyper(args, frame), args.folds, args.seed, args.threads)
    _emit_json({"folds": args.folds, **res.summary()}, args.out)
    if args.predictions_out:
        _emit_csv(["row", "fold", "prediction"],
                  ((i, int(f), p) for i, (f, p) in enumerate(zip(res.folds, res.predictions))),
                  args.predictions_out)


def cmd_cvgrid(args) -> None:
    frame = _load_frame(args)
    grid = dict(inference.DEFAULT_GRID)
    if args.grid_k:
        grid["k"] = tuple(_floats(args.grid_k))
    if args.grid_num_trees:
        grid["num_trees"] = tuple(int(v) for v in _floats(args.grid_num_trees))
    if args.grid_nu_q:
        try:
            grid["nu_q"] = tuple(tuple(float(x) for x in pair.split(":")) for pair in args.grid_nu_q.split(","))
        except ValueError as exc:
            raise UsageError("--grid-nu-q expects nu:q pairs") from exc
    res = inference.cv_grid_search(frame, _hyper(args, frame), grid, args.folds, args.seed, args.threads)
    b = res.best
    _emit_json({
        "metric": res.metric,
        "best": {"k": b.k, "nu": b.nu, "q": b.q, "num_trees": b.num_trees},
        "cells": [vars(c) for c in res.cells],
    }, args.out)


def cmd_varsel(args) -> None:
    frame = _load_frame(args)
    hyper = _hyper(args, frame)
    common = dict(permutations=args.permutations, alpha=args.alpha_level, replicates=args.replicates,
                  num_trees=args.num_trees_permute, seed=args.seed, threads=args.threads)
    if args.cv_folds:
        cv = inference.var_selection_cv(frame, hyper, folds=args.cv_folds, **common)
        _emit_json({"best_method": cv.best_method, "selected": cv.selected_names,
                    "fold_scores": cv.fold_scores, "mean_scores": cv.mean_scores}, args.out)
        return
    vs = inference.var_selection(frame, hyper, **common)
    _emit_json({
        "names": vs.names, "alpha": vs.alpha, "observed": vs.observed, "null": vs.null,
        "local": vs.selected_names("local"), "global_max": vs.selected_names("global_max"),
        "global_se": vs.selected_names("global_se"), "local_thresholds": vs.local_thresholds,
        "global_max_threshold": vs.global_max_threshold, "global_se_multiplier": vs.global_se_multiplier,
    }, args.out)


def cmd_covtest(args) -> None:
    frame = _load_frame(args)
    if args.covariates is None:
        cov = None
    elif args.covariates.strip() == "ALL":
        cov = "ALL"
    else:
        cov = [c.strip() for c in args.covariates.split(",") if c.strip()]
        for c in cov:
            frame.column_index(c)
    res = inference.cov_importance_test(frame, _hyper(args, frame), cov, args.permutations, args.seed, args.threads)
    _emit_json({"covariates": res.covariates, "statistic": res.statistic, "observed": res.observed,
                "null": res.null, "p_value": res.p_value, "permutations": args.permutations}, args.out)


def cmd_pdp(args) -> None:
    ens = persistence.load_model(args.model)
    if args.feature not in ens.frame.column_names:
        raise DataError(f"unknown feature {args.feature!r}")
    res = inference.partial_dependence(ens, args.feature, threads=args.threads)
    _emit_csv(["percentile", "value", "estimate", "lower", "upper"],
              zip(res.percentiles, res.grid, res.estimate, res.lower, res.upper), args.out)


def _models_or_refit(args):
    if args.model:
        return persistence.load_model(args.model), None
    if not (args.data and args.response):
        raise UsageError("give --model, or --data and --response to refit")
    frame = _load_frame(args)
    return None, inference.importance_report(frame, _hyper(args, frame), args.replicates, args.seed, args.threads)


def cmd_importance(args) -> None:
    ens, rep = _models_or_refit(args)
    if ens is not None:
        props = inference.inclusion_proportions(ens)
        rows = zip(ens.frame.column_names, props, props, props)
    else:
        rows = zip(rep.names, rep.mean, rep.lower, rep.upper)
    _emit_csv(["feature", "proportion", "lower", "upper"], rows, args.out)


def cmd_interactions(args) -> None:
    ens, rep = _models_or_refit(args)
    if ens is not None:
        names, mat = ens.frame.column_names, inference.interaction_counts(ens)
    else:
        names, mat = rep.names, rep.interactions
    _emit_csv(["feature", *names], ([nm, *row] for nm, row in zip(names, mat)), args.out)


def cmd_diagnostics(args) -> None:
    ens = persistence.load_model(args.model)
    sys.stdout.write(diagnostics.model_summary(ens, args.threads))
    if args.trace_out:
        diagnostics.convergence_trace(ens).to_csv(args.trace_out)
    if args.residuals_out:
        fitted, resid = diagnostics.residuals_vs_fitted(ens)
        _emit_csv(["fitted", "residual"], zip(fitted, resid), args.residuals_out)


def cmd_rmse_by_trees(args) -> None:
    frame = _load_frame(args)
    counts = [int(v) for v in _floats(args.tree_counts)]
    out = inference.rmse_by_num_trees(frame, _hyper(args, frame), counts, args.replicates,
                                      seed=args.seed, threads=args.threads)
    _emit_csv(["num_trees", "rmse"], zip(counts, out), args.out)


def cmd_simulate_friedman(args) -> None:
    fr = generate_friedman(args.n, args.p, args.sigma, args.seed)
    _emit_csv([*fr.column_names, "y"], (list(r) + [y] for r, y in zip(fr.matrix, fr.response)), args.out)


def cmd_export(args) -> None:
    persistence.export_json(persistence.load_model(args.model), args.out)


COMMANDS = {
    "train": cmd_train, "predict": cmd_predict, "cv": cmd_cv, "cvgrid": cmd_cvgrid, "varsel": cmd_varsel,
    "covtest": cmd_covtest, "pdp": cmd_pdp, "importance": cmd_importance, "interactions": cmd_interactions,
    "diagnostics": cmd_diagnostics, "rmse-by-trees": cmd_rmse_by_trees,
    "simulate-friedman": cmd_simulate_friedman, "export": cmd_export,
}


def _fail(kind: str, code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "code": code, "message": message}) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    except persistence.ArchiveError as exc:
        return _fail("model", EXIT_MODEL, str(exc))
    except PriorError as exc:
        return _fail("usage", EXIT_USAGE, str(exc))
    except ValueError as exc:  # DataError, TreeError and numeric domain errors
        return _fail("data", EXIT_DATA, str(exc))
    except InvariantError as exc:
        return _fail("internal", EXIT_INTERNAL, str(exc))
    except OSError as exc:
        return _fail("data", EXIT_DATA, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
