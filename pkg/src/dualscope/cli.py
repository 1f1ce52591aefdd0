"""Command-line front end.

Exit codes: 0 ok / observable, 10 unobservable, 2 usage or validation
error, 20 adjoint identity violated, 30 algebraic/behavioural mismatch.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from contextlib import contextmanager

import numpy as np

from . import streams
from .diagnostics import DistinguishConfig, distinguish
from .duality import (
    control_from_dict,
    empirical_reachable_span,
    parse_control,
    verify_adjoint_identity,
    zero_control,
)
from .errors import DualscopeError
from .filtering import propagate_zakai
from .model import DEFAULT_RANK_TOL, ProbabilityMeasure, load_model
from .observability import analyze, nonlinear_closure
from .simulate import TimeGrid, simulate_physical, write_paths_csv

EXIT_OK = 0
EXIT_UNOBSERVABLE = 10
EXIT_USAGE = 2
EXIT_DUALITY_VIOLATION = 20
EXIT_MISMATCH = 30

VIOLATION_SIGMAS = 5.0


class UsageError(Exception):
    pass


def parse_vector(text: str, d: int, name: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise UsageError(f"--{name}: cannot parse {text!r} as comma-separated floats")
    if v.shape != (d,):
        raise UsageError(f"--{name}: expected {d} entries, got {v.size}")
    return v


def parse_probability(text: str, d: int, name: str) -> np.ndarray:
    v = parse_vector(text, d, name)
    try:
        ProbabilityMeasure(v)
    except ValueError:
        raise UsageError(f"--{name}: {text!r} is not a probability vector")
    return v


def _positive_int(value, name):
    if value is None or value < 1:
        raise UsageError(f"--{name} must be a positive integer")
    return value


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def cmd_analyze(args) -> int:
    model = load_model(args.model)
    report = analyze(model, args.tol)
    with _output(args.out) as fh:
        fh.write(_dump(report.to_dict()))
    return EXIT_OK if report.observable else EXIT_UNOBSERVABLE


def cmd_simulate(args) -> int:
    model = load_model(args.model)
    if args.mu is None:
        raise UsageError("--mu is required")
    mu = parse_probability(args.mu, model.d, "mu")
    n_paths = _positive_int(args.paths, "paths")
    grid = TimeGrid(args.T, args.dt)
    threads = args.threads or streams.default_threads()

    def run(start, count):
        b = simulate_physical(model, mu, grid, args.seed, count, start)
        traj = propagate_zakai(model, mu, b.dZ, grid, signed=False)
        return b, traj

    buf = io.StringIO()
    header = True
    for b, traj in streams.map_batches(run, n_paths, threads):
        chunk = io.StringIO()
        write_paths_csv(b, chunk, traj.csv_columns())
        text = chunk.getvalue()
        if not header:
            text = text.split("\n", 1)[1]
        header = False
        buf.write(text)
    with _output(args.out) as fh:
        fh.write(buf.getvalue())
    return EXIT_OK


_DUALITY_KEYS = {"control", "pi0", "c", "n_paths", "seed", "T", "dt"}


def _load_duality_config(path):
    with open(path) as fh:
        raw = json.load(fh)
    unknown = set(raw) - _DUALITY_KEYS
    if unknown:
        raise UsageError(f"unknown keys in experiment config: {sorted(unknown)}")
    return raw


def cmd_duality(args) -> int:
    model = load_model(args.model)
    cfg = _load_duality_config(args.config) if args.config else {}

    if args.pi0 is not None:
        pi0 = parse_vector(args.pi0, model.d, "pi0")
    elif "pi0" in cfg:
        pi0 = np.asarray(cfg["pi0"], dtype=float)
        if pi0.shape != (model.d,):
            raise UsageError(f"pi0 must have {model.d} entries")
    else:
        raise UsageError("--pi0 is required")

    if args.control is not None:
        control = parse_control(args.control, model.m)
    elif "control" in cfg:
        control = control_from_dict(cfg["control"], model.m)
    else:
        control = zero_control(model.m)

    c = args.c if args.c is not None else float(cfg.get("c", 0.0))
    n_paths = _positive_int(args.paths if args.paths is not None else cfg.get("n_paths", 20000), "paths")
    seed = args.seed if args.seed_given else int(cfg.get("seed", args.seed))
    T = args.T if args.T is not None else float(cfg.get("T", 1.0))
    dt = args.dt if args.dt is not None else float(cfg.get("dt", 1e-3))

    check = verify_adjoint_identity(
        model, pi0, control, c, TimeGrid(T, dt), n_paths, seed, args.threads or None
    )
    with _output(args.out) as fh:
        fh.write(_dump(check.to_dict()))
    if check.residual > VIOLATION_SIGMAS * check.std_err:
        print(
            f"adjoint identity violated: residual {check.residual:.3e} > "
            f"{VIOLATION_SIGMAS:g} x std_err {check.std_err:.3e}",
            file=sys.stderr,
        )
        return EXIT_DUALITY_VIOLATION
    return EXIT_OK


def cmd_distinguish(args) -> int:
    model = load_model(args.model)
    if args.mu is None or args.nu is None:
        raise UsageError("--mu and --nu are required")
    mu = parse_probability(args.mu, model.d, "mu")
    nu = parse_probability(args.nu, model.d, "nu")
    cfg = DistinguishConfig(
        T=args.T,
        dt=args.dt,
        n_paths=_positive_int(args.paths, "paths"),
        seed=args.seed,
        tol=args.tol,
        threads=args.threads or 0,
    )
    result = distinguish(model, mu, nu, cfg)
    with _output(args.out) as fh:
        fh.write(_dump(result.to_dict()))
    if not result.consistent:
        print(f"warning: {result.warning}", file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_span(args) -> int:
    model = load_model(args.model)
    n_controls = _positive_int(args.controls, "controls")
    if n_controls < model.d:
        raise UsageError(f"--controls must be at least d = {model.d}")
    est = empirical_reachable_span(
        model,
        n_controls,
        TimeGrid(args.T, args.dt),
        _positive_int(args.paths, "paths"),
        args.seed,
        args.tol,
        deterministic=args.deterministic,
        threads=args.threads or None,
    )
    closure = nonlinear_closure(model, args.tol)
    out = est.to_dict()
    out["closure_dim"] = closure.dim
    out["distance_to_closure"] = closure.max_residual_of(est.subspace)
    with _output(args.out) as fh:
        fh.write(_dump(out))
    return EXIT_OK if est.rank == closure.dim else EXIT_MISMATCH


class _SeedAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.seed_given = True


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tol", type=float, default=DEFAULT_RANK_TOL, help="relative rank tolerance")
    common.add_argument("--seed", type=int, default=0, action=_SeedAction)
    common.add_argument("--threads", type=int, default=None, help="worker threads (env DUALSCOPE_THREADS)")
    common.add_argument("--out", default=None, help="output file (default stdout)")
    common.set_defaults(seed_given=False)

    parser = argparse.ArgumentParser(prog="dualscope", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="algebraic observability report")
    p.add_argument("model")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", parents=[common], help="sample paths and Wonham filter trajectories")
    p.add_argument("model")
    p.add_argument("--mu")
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("duality", parents=[common], help="check the BSDE/Zakai adjoint identity")
    p.add_argument("model")
    p.add_argument("--pi0")
    p.add_argument("--control", help="const:v1,..,vm | zero | feedback:<file.json>")
    p.add_argument("--c", type=float, default=None)
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--paths", type=int, default=None)
    p.add_argument("--config", help="experiment config JSON")
    p.set_defaults(func=cmd_duality)

    p = sub.add_parser("distinguish", parents=[common], help="filter-based distinguishability of two priors")
    p.add_argument("model")
    p.add_argument("--mu")
    p.add_argument("--nu")
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-4)
    p.add_argument("--paths", type=int, default=100)
    p.set_defaults(func=cmd_distinguish)

    p = sub.add_parser("span", parents=[common], help="Monte Carlo estimate of the controllable space")
    p.add_argument("model")
    p.add_argument("--controls", type=int, default=12)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=10000)
    p.add_argument("--deterministic", action="store_true", help="constant controls only")
    p.set_defaults(func=cmd_span)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be positive")
    try:
        return args.func(args)
    except (UsageError, DualscopeError, ValueError, OSError, KeyError, TypeError) as exc:
        print(f"dualscope {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
