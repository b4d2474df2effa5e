"""Command-line front end: fit, ranks, predict, simulate.

Exit codes: 0 success, 2 argument/usage errors, 3 numeric failures raised by
the estimator.  Modes are 1-based on the command line.  Every command writes
a run manifest (resolved options, input digests, seed, timings, version)
into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .estimator import (EstimationError, estimate_ranks, fit_stefa, load_fit,
                        save_fit)
from .prediction import KernelSpec, predict_stefa, predict_vanilla
from .sieve import BasisSpec, build_design, read_covariates_csv
from .tensor import read_tns, write_tns
from .simlab import PROTOCOLS, run_experiment

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad arguments or unreadable inputs (exit code 2)."""


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, options, inputs, seed, timings) -> None:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "options": options,
        "input_digests": {p: _sha256(p) for p in inputs},
        "seed": seed,
        "timings_seconds": timings,
        "version": __version__,
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _load_tensor(path) -> np.ndarray:
    if not os.path.exists(path):
        raise UsageError(f"tensor file not found: {path}")
    try:
        return read_tns(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _parse_basis(text) -> BasisSpec:
    parts = text.split(":")
    family = parts[0]
    try:
        degree = int(parts[1]) if len(parts) > 1 else 4
        return BasisSpec(family=family, degree=degree)
    except (ValueError, IndexError) as exc:
        raise UsageError(f"bad --basis {text!r}: {exc}") from None


def _parse_covariate_args(args_list, order) -> list:
    """Parse repeated ``m:file.csv`` options (1-based modes) into a per-mode list."""
    paths = [None] * order
    for item in args_list or []:
        mode_s, _, path = item.partition(":")
        try:
            mode = int(mode_s)
        except ValueError:
            raise UsageError(f"bad --covariates {item!r}: expected m:file.csv") from None
        if not 1 <= mode <= order:
            raise UsageError(f"bad --covariates {item!r}: mode {mode} not in "
                             f"[1, {order}]")
        if not os.path.exists(path):
            raise UsageError(f"covariate file not found: {path}")
        paths[mode - 1] = path
    return paths


def _build_designs(cov_paths, spec, dims):
    designs = []
    for m, path in enumerate(cov_paths):
        if path is None:
            designs.append(None)
            continue
        X, _ = read_covariates_csv(path)
        if X.shape[0] != dims[m]:
            raise UsageError(f"covariates for mode {m + 1} have {X.shape[0]} "
                             f"rows, tensor extent is {dims[m]}")
        designs.append(build_design(X, spec))
    return designs


def _parse_ranks(text, order):
    if text == "auto":
        return None
    try:
        ranks = tuple(int(r) for r in text.split(","))
    except ValueError:
        raise UsageError(f"bad --ranks {text!r}") from None
    if len(ranks) != order:
        raise UsageError(f"--ranks needs {order} values, got {len(ranks)}")
    for m, r in enumerate(ranks):
        if r < 1:
            raise UsageError(f"rank for mode {m + 1} must be >= 1, got {r}")
    return ranks


# ---------------------------------------------------------------------------
# subcommands

def cmd_fit(args) -> int:
    t0 = time.time()
    Y = _load_tensor(args.tensor)
    cov_paths = _parse_covariate_args(args.covariates, Y.ndim)
    spec = _parse_basis(args.basis)
    designs = _build_designs(cov_paths, spec, Y.shape)
    ranks = _parse_ranks(args.ranks, Y.ndim)
    fit = fit_stefa(Y, designs, ranks=ranks, max_iter=args.max_iter,
                    tol=args.tol)
    save_fit(fit, designs, args.out)
    inputs = [args.tensor] + [p for p in cov_paths if p]
    _write_manifest(args.out, "fit", _options_dict(args), inputs, args.seed,
                    {"total": time.time() - t0})
    print(f"fit written to {args.out}; ranks {','.join(map(str, fit.ranks))}; "
          f"{fit.iterations_used} iterations"
          + ("" if fit.converged else " (not converged)"))
    return EXIT_OK


def cmd_ranks(args) -> int:
    t0 = time.time()
    Y = _load_tensor(args.tensor)
    cov_paths = _parse_covariate_args(args.covariates, Y.ndim)
    spec = _parse_basis(args.basis)
    designs = _build_designs(cov_paths, spec, Y.shape)
    ranks, profiles = estimate_ranks(Y, designs, k_max=args.kmax,
                                     return_profile=True)
    print(" ".join(str(r) for r in ranks))
    print("mode,k,ratio")
    for m, prof in enumerate(profiles):
        for k, ratio in enumerate(prof, start=1):
            print(f"{m + 1},{k},{ratio:.12g}")
    if args.out:
        inputs = [args.tensor] + [p for p in cov_paths if p]
        _write_manifest(args.out, "ranks", _options_dict(args), inputs,
                        args.seed, {"total": time.time() - t0})
    return EXIT_OK


def cmd_predict(args) -> int:
    t0 = time.time()
    if not os.path.isdir(args.fit):
        raise UsageError(f"fit directory not found: {args.fit}")
    fit, designs = load_fit(args.fit)
    try:
        X_new, _ = read_covariates_csv(args.new_covariates)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read new covariates: {exc}") from None
    if args.bandwidth == "auto":
        spec = KernelSpec(family=args.kernel, bandwidth="auto")
    else:
        try:
            spec = KernelSpec(family=args.kernel, bandwidth=float(args.bandwidth))
        except ValueError as exc:
            raise UsageError(f"bad --bandwidth {args.bandwidth!r}: {exc}") from None
    mode = args.mode - 1
    if args.method == "stefa":
        pred = predict_stefa(fit, designs, X_new, spec, mode=mode)
    else:
        d = designs[mode] if designs else None
        if d is None:
            raise UsageError("vanilla prediction needs training covariates "
                             f"on mode {args.mode}")
        pred = predict_vanilla(fit, d.covariates, X_new, spec, mode=mode)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "prediction.tns")
    write_tns(out_path, pred)
    _write_manifest(args.out, "predict", _options_dict(args),
                    [args.new_covariates], None, {"total": time.time() - t0})
    print(f"prediction written to {out_path}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    t0 = time.time()
    if args.protocol not in PROTOCOLS:
        raise UsageError(f"unknown protocol {args.protocol!r}; choose from "
                         f"{', '.join(sorted(PROTOCOLS))}")
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    try:
        run_experiment(args.protocol, reps=args.reps, seed=args.seed,
                       threads=args.threads, out_dir=args.out, cells=args.cells)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_manifest(args.out, "simulate", _options_dict(args), [], args.seed,
                    {"total": time.time() - t0})
    print(f"results written to {os.path.join(args.out, 'results.csv')}")
    return EXIT_OK


def _options_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------
# argument parsing

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stefa",
        description="Covariate-assisted tensor factor analysis")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the factor model to a tensor")
    p_fit.add_argument("--tensor", required=True)
    p_fit.add_argument("--covariates", action="append", metavar="m:file.csv",
                       help="per-mode covariate CSV, 1-based mode; repeatable")
    p_fit.add_argument("--ranks", default="auto",
                       help="comma-separated per-mode ranks, or 'auto'")
    p_fit.add_argument("--basis", default="legendre:4",
                       help="sieve basis as family:degree")
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--max-iter", type=int, default=50)
    p_fit.add_argument("--tol", type=float, default=1e-8)
    p_fit.set_defaults(func=cmd_fit)

    p_ranks = sub.add_parser("ranks", help="estimate per-mode ranks")
    p_ranks.add_argument("--tensor", required=True)
    p_ranks.add_argument("--covariates", action="append", metavar="m:file.csv")
    p_ranks.add_argument("--basis", default="legendre:4")
    p_ranks.add_argument("--kmax", type=int, default=None)
    p_ranks.add_argument("--out", default=None)
    p_ranks.add_argument("--seed", type=int, default=None)
    p_ranks.set_defaults(func=cmd_ranks)

    p_pred = sub.add_parser("predict", help="predict slices for new covariates")
    p_pred.add_argument("--fit", required=True, help="fit directory")
    p_pred.add_argument("--new-covariates", required=True)
    p_pred.add_argument("--method", choices=("stefa", "vanilla"), default="stefa")
    p_pred.add_argument("--kernel", choices=("gaussian", "epanechnikov"),
                        default="gaussian")
    p_pred.add_argument("--bandwidth", default="auto")
    p_pred.add_argument("--mode", type=int, default=1, help="1-based mode")
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_sim = sub.add_parser("simulate", help="run a named experiment grid")
    p_sim.add_argument("--protocol", required=True)
    p_sim.add_argument("--reps", type=int, default=20)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--threads", type=int, default=1)
    p_sim.add_argument("--cells", action="append", metavar="LABEL",
                       help="restrict to named grid cells; repeatable")
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command == "simulate" and args.seed is None:
        args.seed = int.from_bytes(os.urandom(4), "little")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EstimationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
