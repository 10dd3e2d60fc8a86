"""Command line entry point: ``divflow <subcommand> [options]``.

Exit codes: 0 success, 1 solver failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import time

import numpy as np
import yaml

from .linalg import SingularMatrixError
from .problems import PROBLEMS, ExperimentError, get_problem, run_experiment
from .timestepping import NewtonDivergence
from .vtk import write_vtk

log = logging.getLogger("divflow")

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2
CONFIG_KEYS = ("problem", "k", "levels", "dt", "t_end", "gamma_ratio", "a0", "nitsche", "seed", "output_dir")
DEFAULT_PROBLEM = {"convergence": "example1", "adaptive": "example2",
                   "transient-estimator": "example3", "demo": "example4"}


class ConfigError(ValueError):
    pass


def load_config(path):
    """Read a YAML config; nested mappings are flattened onto the known keys."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    flat = {}

    def walk(d, where):
        for key, val in d.items():
            key = str(key).replace("-", "_")
            if isinstance(val, dict):
                walk(val, f"{where}{key}.")
            elif key in CONFIG_KEYS:
                flat[key] = val
            else:
                raise ConfigError(f"unknown config key {where}{key!r}; allowed: {', '.join(CONFIG_KEYS)}")
    walk(raw, "")
    return flat


def _common(p):
    p.add_argument("--config", help="YAML file with keys " + ", ".join(CONFIG_KEYS))
    p.add_argument("--problem", choices=sorted(PROBLEMS))
    p.add_argument("--levels", type=int)
    p.add_argument("--k", type=int, choices=(1, 2))
    p.add_argument("--dt", type=float)
    p.add_argument("--t-end", dest="t_end", type=float)
    p.add_argument("--gamma", dest="gamma_ratio", type=float, help="Dorfler threshold ratio")
    p.add_argument("--a0", type=float, help="interior penalty")
    p.add_argument("--nitsche", type=float, help="tangential boundary penalty")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="output_dir", help="output directory (default: runs/<problem>-<subcommand>)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="divflow", description="Divergence-conforming doubly-diffusive flow solver.")
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("convergence", help="uniform refinement study"))
    p = sub.add_parser("adaptive", help="estimate/mark/refine loop")
    _common(p)
    p.add_argument("--uniform", action="store_true", help="refine uniformly instead of by marking")
    _common(sub.add_parser("transient-estimator", help="space-time estimator study"))
    p = sub.add_parser("demo", help="time loop for the instability demos")
    _common(p)
    p.add_argument("--steps", type=int, help="number of time steps (default: t_end / dt)")
    p.add_argument("--vtk-every", type=int, default=0, help="write a VTK snapshot every N steps")
    p = sub.add_parser("selftest", help="oracle and property checks")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_options(args):
    """Config file values overridden by explicit flags."""
    opts = load_config(args.config) if getattr(args, "config", None) else {}
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    opts.setdefault("problem", DEFAULT_PROBLEM.get(args.command))
    if opts.get("k") not in (None, 1, 2):
        raise ConfigError("k must be 1 or 2")
    if opts.get("levels") is not None and int(opts["levels"]) < 0:
        raise ConfigError("levels must be nonnegative")
    for key in ("dt", "a0"):
        if opts.get(key) is not None and not float(opts[key]) > 0:
            raise ConfigError(f"{key} must be positive")
    if opts.get("gamma_ratio") is not None and not 0 < float(opts["gamma_ratio"]) < 1:
        raise ConfigError("gamma must lie in (0, 1)")
    if opts.get("output_dir") is None:
        opts["output_dir"] = os.path.join("runs", f"{opts['problem']}-{args.command}")
    return opts


def make_spec(opts):
    kw = {"k": opts.get("k"), "levels": opts.get("levels"), "dt": opts.get("dt"), "t_end": opts.get("t_end"),
          "gamma": opts.get("gamma_ratio"), "a0": opts.get("a0"), "nitsche": opts.get("nitsche"),
          "seed": opts.get("seed")}
    kw = {k: v for k, v in kw.items() if v is not None}
    try:
        return get_problem(opts["problem"], **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _setup_logging(out, verbose):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "divflow.log")
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    fh = logging.FileHandler(path, mode="w")
    fh.setFormatter(fmt)
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(fmt)
    sh.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.addHandler(fh)
    root.addHandler(sh)
    return path, (fh, sh)


def _thread_limit():
    n = os.environ.get("DIVFLOW_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def _snapshot_vtk(rec, path):
    snap = rec.meta.get("snapshot")
    if not snap:
        return None
    mesh, fl = snap[0], snap[1]
    fields = {"u": fl[0], "p": fl[1], "s": fl[2], "c": fl[3]}
    if len(snap) > 2 and snap[2] is not None:
        fields["indicator"] = np.sqrt(snap[2].total)
    return write_vtk(mesh, fields, path)


def _print_rows(rec):
    for r in rec.rows:
        parts = [f"{k}={r[k]:.4g}" if isinstance(r.get(k), float) else f"{k}={r[k]}"
                 for k in ("level", "dof", "e_u", "rate_u", "e_p", "rate_p", "e_s", "rate_s", "e_c", "rate_c",
                           "div_sup", "psi", "eff")
                 if r.get(k) is not None]
        print(" ".join(parts))


def run(args):
    if args.command == "selftest":
        from .selftest import run_selftest
        lines = []

        def out(line):
            print(line, flush=True)
            lines.append(line)
        results = run_selftest(out)
        if args.output_dir:
            os.makedirs(args.output_dir, exist_ok=True)
            with open(os.path.join(args.output_dir, "selftest.txt"), "w") as fh:
                fh.write("\n".join(lines) + "\n")
        return EXIT_OK if all(r.passed for r in results) else EXIT_SOLVER

    opts = resolve_options(args)
    spec = make_spec(opts)
    out = opts["output_dir"]
    logpath, handlers = _setup_logging(out, args.verbose)
    t0 = time.perf_counter()
    try:
        kw = {}
        if args.command == "adaptive":
            kw["uniform"] = args.uniform
        if args.command == "demo":
            kw["steps"] = args.steps
            kw["vtk_every"] = args.vtk_every
        log.info("%s %s: %s", args.command, spec.name, {k: v for k, v in opts.items() if v is not None})
        with _thread_limit():
            rec = run_experiment(spec, args.command, out=out, **kw)
        csv_path = os.path.join(out, "run.csv")
        rec.write_csv(csv_path)
        vtk = rec.meta.get("vtk") or _snapshot_vtk(rec, os.path.join(out, f"{spec.name}_final.vtk"))
        _print_rows(rec)
        print(f"wrote {csv_path}" + (f", {vtk}" if vtk else "") + f", {logpath}")
        log.info("finished in %.1f s", time.perf_counter() - t0)
        return EXIT_OK
    finally:
        for h in handlers:
            logging.getLogger().removeHandler(h)
            h.close()


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"divflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExperimentError, NewtonDivergence, SingularMatrixError) as exc:
        print(f"divflow: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
