"""Command-line front end.

Subcommands: fit, push, invert, sample, lasso, index-set. Every command
is deterministic given (config, seed, worker count). Exit codes: 0 on
success, 1 on configuration or I/O errors, 2 when a fit returns a
usable iterate without meeting its convergence tolerances.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import apps, csv_io
from .admm_dense import fit_dense
from .admm_kr import fit_kr_stage
from .basis import Structure, build_multi_index_set
from .composer import fit_sequential, progress_rows
from .density import gaussian_target, laplace_prior
from .errors import OtmapError
from .maps import (
    SequentialMap,
    compose_forward,
    compose_inverse,
    forward,
    invert as invert_map,
    load_map,
    save_map,
)
from .solver import BasisSpec, SolverConfig, default_workers

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


def _parse_target(spec: str, dim: int):
    """Target specs: gaussian-std | laplace:<rate> | @<json file>."""
    if spec == "gaussian-std":
        return gaussian_target(np.zeros(dim), np.eye(dim))
    if spec.startswith("laplace:"):
        return laplace_prior(float(spec.split(":", 1)[1]), dim)
    if spec.startswith("@"):
        with open(spec[1:]) as fh:
            doc = json.load(fh)
        kind = doc.get("kind")
        if kind == "gaussian":
            return gaussian_target(doc["mean"], doc["cov"])
        if kind == "laplace":
            return laplace_prior(float(doc["rate"]), dim)
        raise OtmapError(f"unknown target kind '{kind}' in {spec[1:]}")
    raise OtmapError(
        f"unknown target '{spec}' (expected gaussian-std, laplace:<rate>, or @file.json)"
    )


def _solver_config(args) -> SolverConfig:
    return SolverConfig(
        rho=args.rho,
        max_iters=args.max_iters,
        tol_primal=args.tol_primal,
        tol_dual=args.tol_dual,
        workers=args.workers,
        strict_reduction=args.strict,
        seed=args.seed,
    )


def _echo_config(args, path) -> None:
    doc = {k: v for k, v in vars(args).items() if k != "func"}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def cmd_fit(args) -> int:
    data, _ = csv_io.read_samples(args.source)
    dim = data.shape[1]
    target = _parse_target(args.target, dim)
    config = _solver_config(args)
    basis = BasisSpec(args.structure, args.order)
    converged = True
    if args.stages > 1 or (args.stages == 1 and basis.structure is not Structure.DENSE):
        if basis.structure is Structure.DENSE:
            raise OtmapError("sequential fitting requires --structure kr or krsv")
        if args.stages > 1:
            seq = fit_sequential(data, target, args.stages, args.theta, basis, config)
            obj = seq
            converged = all(info.get("converged", False) for info in seq.stage_info
                            if "error" not in info)
            history = None
            if args.progress:
                with open(args.progress, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["stage", "theta", "objective_train",
                                "objective_holdout", "admm_iters"])
                    w.writerows(progress_rows(seq))
        else:
            tmap, diag = fit_kr_stage(data, target, basis, args.theta, config)
            obj, converged, history = tmap, diag.converged, diag
    else:
        tmap, diag = fit_dense(data, target, basis, config)
        obj, converged, history = tmap, diag.converged, diag
    save_map(obj, args.out)
    if args.diagnostics and history is not None:
        with open(args.diagnostics, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "primal_res", "dual_res"])
            w.writerows(history.history_rows())
        _echo_config(args, args.diagnostics + ".config.json")
    if not converged:
        print("fit finished without meeting tolerances; map written anyway",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _load_batch_for_map(args):
    obj = load_map(args.map)
    data, header = csv_io.read_samples(args.input)
    if data.shape[1] != obj.dim:
        raise OtmapError(
            f"map has dimension {obj.dim} but {args.input} has {data.shape[1]} columns"
        )
    return obj, data, header


def cmd_push(args) -> int:
    obj, data, header = _load_batch_for_map(args)
    out = compose_forward(obj, data) if isinstance(obj, SequentialMap) else forward(obj, data)
    csv_io.write_samples(args.output, out, header)
    return EXIT_OK


def cmd_invert(args) -> int:
    obj, data, header = _load_batch_for_map(args)
    out = compose_inverse(obj, data) if isinstance(obj, SequentialMap) else invert_map(obj, data)
    csv_io.write_samples(args.output, out, header)
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.params:
        raw = args.params
        if raw.startswith("@"):
            with open(raw[1:]) as fh:
                params = json.load(fh)
        else:
            params = json.loads(raw)
    elif args.kind == "laplace":
        params = {"rate": args.rate, "dim": args.dim}
    elif args.kind == "gaussian":
        params = {"mean": [0.0] * args.dim, "cov": np.eye(args.dim).tolist()}
    else:
        raise OtmapError(f"--params required for kind '{args.kind}'")
    data = apps.sample_source(args.kind, params, args.n, args.seed)
    csv_io.write_samples(args.out, data)
    return EXIT_OK


def _write_summary(path, summary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "median", "q2.5", "q97.5", "mean", "std"])
        for row in summary.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _write_kde_dumps(prefix, method, names, samples) -> None:
    for j, name in enumerate(names):
        path = f"{prefix}_kde_{method}_{name}.csv"
        csv_io.write_samples(path, samples[:, j][:, None], [name])


def cmd_lasso(args) -> int:
    dataset = apps.load_regression_csv(args.data, args.response)
    sigma2 = args.sigma2 if args.sigma2 is not None else apps.residual_variance(dataset)
    rc = EXIT_OK
    if args.method in ("transport", "both"):
        config = SolverConfig(
            max_iters=args.max_iters, workers=args.workers, seed=args.seed
        )
        pushed, _, diag = apps.bayes_lasso_transport(
            dataset, args.lam, sigma2,
            n_prior=args.n_prior, order=args.order, config=config,
        )
        summary = apps.summarize_posterior(pushed, dataset.names, method="transport")
        csv_io.write_samples(
            f"{args.out_prefix}_transport_samples.csv", pushed, list(dataset.names)
        )
        _write_summary(f"{args.out_prefix}_transport_summary.csv", summary)
        if args.kde:
            _write_kde_dumps(args.out_prefix, "transport", dataset.names, pushed)
        if hasattr(diag, "converged") and not diag.converged:
            rc = EXIT_NOT_CONVERGED
    if args.method in ("gibbs", "both"):
        draws = apps.gibbs_lasso(
            dataset, args.lam, sigma2,
            burn_in=args.burn_in, n_samples=args.draws, seed=args.seed,
        )
        summary = apps.summarize_posterior(draws, dataset.names, method="gibbs")
        csv_io.write_samples(
            f"{args.out_prefix}_gibbs_samples.csv", draws, list(dataset.names)
        )
        _write_summary(f"{args.out_prefix}_gibbs_summary.csv", summary)
        if args.kde:
            _write_kde_dumps(args.out_prefix, "gibbs", dataset.names, draws)
    return rc


def cmd_index_set(args) -> int:
    mset = build_multi_index_set(args.structure, args.dim, args.order)
    print(f"structure={mset.structure.value} D={mset.dim} O={mset.order} "
          f"K={mset.size} row_sizes={list(mset.row_sizes)}")
    for row in mset.indices:
        print(" ".join(str(v) for v in row))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otmap",
        description="Fit and apply sample-driven transport maps.",
    )
    parser.add_argument(
        "--config", default=None,
        help="JSON file of defaults for the subcommand; flags override it",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a map from source samples to a target density")
    p.add_argument("--source", required=True, help="CSV of source samples")
    p.add_argument("--target", required=True,
                   help="gaussian-std | laplace:<rate> | @target.json")
    p.add_argument("--structure", default="dense", choices=["dense", "kr", "krsv"])
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--stages", type=int, default=1,
                   help="number of sequential stages (kr/krsv only)")
    p.add_argument("--theta", type=float, default=1.0,
                   help="transport-cost weight per stage")
    p.add_argument("--out", required=True, help="output map JSON")
    p.add_argument("--diagnostics", default=None, help="per-iteration CSV")
    p.add_argument("--progress", default=None, help="per-stage CSV (sequential fits)")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--tol-primal", type=float, default=1e-5)
    p.add_argument("--tol-dual", type=float, default=1e-5)
    p.add_argument("--workers", type=int, default=default_workers())
    p.add_argument("--strict", action="store_true",
                   help="worker-count-independent reduction order")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("push", help="apply a map to a CSV of samples")
    p.add_argument("--map", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_push)

    p = sub.add_parser("invert", help="apply the inverse map to a CSV of samples")
    p.add_argument("--map", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("sample", help="draw seeded samples from a source distribution")
    p.add_argument("--kind", required=True,
                   choices=["laplace", "gaussian", "two_gaussian_mixture"])
    p.add_argument("--params", default=None,
                   help="JSON dict of distribution parameters, or @file.json")
    p.add_argument("--rate", type=float, default=1.0, help="laplace rate shortcut")
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("lasso", help="Bayesian-LASSO posterior via transport and/or Gibbs")
    p.add_argument("--data", required=True, help="regression CSV with header")
    p.add_argument("--response", default="MEDV", help="response column name")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--sigma2", type=float, default=None,
                   help="noise variance; defaults to the least-squares residual variance")
    p.add_argument("--method", default="both", choices=["transport", "gibbs", "both"])
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--n-prior", type=int, default=2000)
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--burn-in", type=int, default=3000)
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--workers", type=int, default=default_workers())
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kde", action="store_true",
                   help="also dump per-coordinate sample files for external KDE plots")
    p.set_defaults(func=cmd_lasso)

    p = sub.add_parser("index-set", help="print a multi-index set (debug)")
    p.add_argument("--structure", default="dense", choices=["dense", "kr", "krsv"])
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--order", type=int, required=True)
    p.set_defaults(func=cmd_index_set)

    return parser


def _apply_config_file(parser, argv):
    """Merge a JSON config under the flags: flags always win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    with open(known.config) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise OtmapError(f"{known.config}: config must be a JSON object")
    for action in parser._subparsers._group_actions:
        for name, sp in action.choices.items():
            sp.set_defaults(**{k: v for k, v in doc.items()
                               if k in {a.dest for a in sp._actions}})
    return argv


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except OtmapError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
