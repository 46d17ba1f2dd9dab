"""Command-line front end: ``measurezip <command> ...``.

Exit codes: 0 success, 1 numerical or runtime failure, 2 usage error.
Diagnostics go to stderr; data goes to files or stdout. Every run leaves one
manifest (``<out>.manifest.json`` next to file outputs, or a ``manifest``
member of the JSON printed to stdout) recording the resolved configuration.

Fields whose values depend on the machine rather than the inputs are listed in
``VOLATILE_FIELDS``; everything else is byte-identical across repeated runs
with the same arguments and seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from contextlib import nullcontext
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .compress import CURVE_COLUMNS, choose_m_trace, compress, compression_error2, error_curve
from .kernels import dual_norm2, parse_kernel_spec
from .measures import measure_of_mesh
from .mesh import center_and_scale, load_mesh, save_obj, surface_area
from .nystrom import SamplerConfig
from .registration import DeformationConfig, compressed_match, hausdorff_distance

VOLATILE_FIELDS = ("wall_time", "wall_time_s", "timings", "timestamp", "iteration_times",
                   "mean_iteration_time")


class UsageError(Exception):
    pass


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _int_list(text):
    """``50,100,200`` or ``1..20`` (inclusive) or a mix of both."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _name_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _load_json_arg(value):
    """A JSON file path, or inline JSON text."""
    if os.path.exists(value):
        with open(value, encoding="utf-8") as fh:
            return json.load(fh)
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        raise UsageError(f"{value!r} is neither a readable file nor JSON text") from None


def _kernel(value):
    try:
        return parse_kernel_spec(_load_json_arg(value))
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad kernel config: {exc}") from None


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MEASUREZIP_THREADS")
    if env:
        try:
            return _positive_int(env)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"MEASUREZIP_THREADS: {exc}") from None
    return None


def _manifest(args, config, timings):
    return {
        "command": args.command,
        "argv": list(args.argv),
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "timings": timings,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "volatile_fields": list(VOLATILE_FIELDS),
    }


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _emit(args, config, timings, payload=None, out=None):
    man = _manifest(args, config, timings)
    if out is None:
        payload = dict(payload or {})
        payload["manifest"] = man
        sys.stdout.write(_dumps(payload))
    else:
        _write(out + ".manifest.json", _dumps(man))


def _read_measure_input(args):
    mesh = load_mesh(args.input)
    if args.center_scale is not None:
        mesh = center_and_scale(mesh, args.center_scale)
    return mesh, measure_of_mesh(mesh, args.rep)


def _sampler_cfg(args, m=None):
    return SamplerConfig(S=args.rank, delta=args.delta, lambda_reg=args.lambda_reg,
                         mcmc_iterations=args.mcmc_iters, m_exact=m)


# ---------------------------------------------------------------------------
# commands

def cmd_info(args):
    t0 = time.perf_counter()
    mesh = load_mesh(args.mesh)
    lo, hi = mesh.bounding_box()
    payload = {"n_vertices": mesh.n_vertices, "n_triangles": mesh.n_triangles,
               "bounding_box": {"min": lo.tolist(), "max": hi.tolist(), "size": (hi - lo).tolist()},
               "total_area": surface_area(mesh)}
    _emit(args, {"mesh": args.mesh}, {"total": time.perf_counter() - t0}, payload)


def cmd_hausdorff(args):
    t0 = time.perf_counter()
    a, b = load_mesh(args.a), load_mesh(args.b)
    d = hausdorff_distance(a.vertices, b.vertices)
    _emit(args, {"a": args.a, "b": args.b}, {"total": time.perf_counter() - t0}, {"hausdorff": d})


def _compress_config(args, spec):
    return {"input": args.input, "rep": args.rep, "kernel": spec.to_config(), "sampler": args.sampler,
            "m": args.m, "tau": args.tau, "tau_relative": args.tau_relative, "rank": args.rank,
            "delta": args.delta, "lambda_reg": args.lambda_reg, "mcmc_iters": args.mcmc_iters,
            "growth": args.growth, "nested": not args.independent, "evaluate": args.evaluate,
            "center_scale": args.center_scale, "seed": args.seed}


def _tau(args, n):
    return args.tau * n if args.tau_relative else args.tau


def cmd_compress(args):
    spec = _kernel(args.kernel)
    timings = {}
    t0 = time.perf_counter()
    mesh, mu = _read_measure_input(args)
    timings["load"] = time.perf_counter() - t0
    if args.m is not None and args.m > mu.n:
        raise UsageError(f"--m {args.m} exceeds the {mu.n} atoms of the input")
    t0 = time.perf_counter()
    if args.tau is not None:
        cs = choose_m_trace(mu, spec, _tau(args, mu.n), args.sampler, _sampler_cfg(args), args.seed,
                            args.growth, nested=not args.independent and args.sampler != "kdpp")
        timings["choose_m"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        res = compress(mu, spec, controls=cs, evaluate=False)
    elif args.m is not None:
        res = compress(mu, spec, args.sampler, _sampler_cfg(args, args.m), args.seed)
    else:
        raise UsageError("one of --m or --tau is required")
    timings["compress"] = time.perf_counter() - t0
    out = res.to_dict()
    if args.evaluate:
        t0 = time.perf_counter()
        norm2 = dual_norm2(mu, spec)
        res.squared_error = compression_error2(mu, res.compressed, spec, mu_norm2=norm2)
        out["squared_error"] = res.squared_error
        out["relative_squared_error"] = res.squared_error / norm2 if norm2 > 0 else None
        out["source_norm2"] = norm2
        timings["evaluate"] = time.perf_counter() - t0
    out["n_source"] = mu.n
    out["m"] = res.m
    config = _compress_config(args, spec)
    out["config"] = config
    _write(args.out, _dumps(out))
    _emit(args, config, timings, out=args.out)
    print(f"compressed {mu.n} atoms to {res.m}; trace error {res.trace_error:.6g}"
          + (f", squared error {res.squared_error:.6g}" if args.evaluate else ""), file=sys.stderr)


def cmd_choose_m(args):
    spec = _kernel(args.kernel)
    t0 = time.perf_counter()
    _, mu = _read_measure_input(args)
    tau = _tau(args, mu.n)
    cs = choose_m_trace(mu, spec, tau, args.sampler, _sampler_cfg(args), args.seed, args.growth,
                        nested=not args.independent and args.sampler != "kdpp")
    payload = {"m": cs.m, "tau": tau, "n_source": mu.n, "controls": cs.to_dict(),
               "trajectory": cs.params["trajectory"], "final_trace": cs.params["final_trace"]}
    config = _compress_config(args, spec)
    timings = {"total": time.perf_counter() - t0}
    if args.out:
        payload["config"] = config
        _write(args.out, _dumps(payload))
        _emit(args, config, timings, out=args.out)
    else:
        _emit(args, config, timings, payload)


def cmd_error_curve(args):
    spec = _kernel(args.kernel)
    t0 = time.perf_counter()
    _, mu = _read_measure_input(args)
    if max(args.m) > mu.n:
        raise UsageError(f"m = {max(args.m)} exceeds the {mu.n} atoms of the input")
    bad = [s for s in args.samplers if s not in ("rls", "uniform", "kdpp", "exact_rls")]
    if bad:
        raise UsageError(f"unknown sampler(s): {', '.join(bad)}")
    rows = error_curve(mu, spec, args.m, args.samplers, args.seeds, _sampler_cfg(args),
                       nested=not args.independent, threads=args.resolved_threads or 1)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=CURVE_COLUMNS, lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    _write(args.out, buf.getvalue())
    config = {"input": args.input, "rep": args.rep, "kernel": spec.to_config(), "m": args.m,
              "samplers": args.samplers, "seeds": args.seeds, "rank": args.rank, "delta": args.delta,
              "lambda_reg": args.lambda_reg, "mcmc_iters": args.mcmc_iters, "nested": not args.independent,
              "center_scale": args.center_scale}
    _emit(args, config, {"total": time.perf_counter() - t0}, out=args.out)


def _deformation(args):
    base = {}
    if args.defkernel:
        raw = _load_json_arg(args.defkernel)
        base = raw if isinstance(raw, dict) and "kernel" in raw else {"kernel": raw}
    try:
        kv = parse_kernel_spec(base["kernel"]) if "kernel" in base else parse_kernel_spec({"gaussian": 1.0})
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"bad deformation kernel: {exc}") from None

    def pick(flag, key, default):
        return flag if flag is not None else base.get(key, default)

    try:
        return DeformationConfig(kv, n_steps=int(pick(args.steps, "n_steps", 10)),
                                 lambda_match=float(pick(args.lam, "lambda_match", 100.0)),
                                 max_iters=int(pick(args.iters, "max_iters", 200)),
                                 step_rule=pick(args.optimizer, "step_rule", "backtracking"),
                                 eta=pick(args.eta, "eta", None))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_match(args):
    spec = _kernel(args.kernel)
    cfg = _deformation(args)
    timings = {}
    t0 = time.perf_counter()
    template = load_mesh(args.template)
    target = load_mesh(args.target)
    timings["load"] = time.perf_counter() - t0
    scfg = SamplerConfig(S=args.rank, delta=args.delta, lambda_reg=args.lambda_reg,
                         mcmc_iterations=args.mcmc_iters)
    t0 = time.perf_counter()
    res = compressed_match(template, target, cfg, spec, args.rep, args.m_template, args.m_target,
                           args.sampler, scfg, args.seed)
    timings["match"] = time.perf_counter() - t0
    config = {"template": args.template, "target": args.target, "rep": args.rep, "kernel": spec.to_config(),
              "deformation": cfg.to_dict(), "m_template": args.m_template, "m_target": args.m_target,
              "sampler": args.sampler, "rank": args.rank, "delta": args.delta, "lambda_reg": args.lambda_reg,
              "seed": args.seed}
    out = res.to_dict()
    out["config"] = config
    _write(args.out, _dumps(out))
    if args.deformed:
        save_obj(res.deformed_template, args.deformed)
    _emit(args, config, timings, out=args.out)
    print(f"{res.n_iters} iterations ({res.stop_reason}); Hausdorff {res.hausdorff:.6g}", file=sys.stderr)


# ---------------------------------------------------------------------------
# parser

def _add_sampler_flags(p):
    p.add_argument("--sampler", choices=["uniform", "rls", "kdpp", "exact_rls"], default="rls")
    p.add_argument("--rank", type=_positive_int, default=None, help="target rank S for leverage scores")
    p.add_argument("--delta", type=float, default=0.01)
    p.add_argument("--lambda-reg", type=_nonneg_float, default=0.0,
                   help="ridge for leverage scores; 0 picks it from the spectrum")
    p.add_argument("--mcmc-iters", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=0)


def _add_measure_input(p):
    p.add_argument("--input", required=True)
    p.add_argument("--rep", choices=["current", "varifold"], default="varifold")
    p.add_argument("--kernel", required=True, help="kernel JSON file or inline JSON")
    p.add_argument("--center-scale", type=_positive_float, default=None, metavar="EXTENT",
                   help="center the mesh and scale its largest box edge to EXTENT first")


def _add_growth(p):
    p.add_argument("--growth", choices=["double", "add_one"], default="double")
    p.add_argument("--independent", action="store_true",
                   help="re-draw the control set at every size instead of growing one order")
    p.add_argument("--tau-relative", action="store_true", help="read --tau as a fraction of n")


def build_parser():
    ap = argparse.ArgumentParser(prog="measurezip", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=_positive_int, default=None,
                    help="cap on worker threads (falls back to MEASUREZIP_THREADS)")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", help="mesh statistics")
    p.add_argument("mesh")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("hausdorff", help="Hausdorff distance between two meshes' vertex sets")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=cmd_hausdorff)

    p = sub.add_parser("compress", help="compress a mesh measure onto control points")
    _add_measure_input(p)
    _add_sampler_flags(p)
    size = p.add_mutually_exclusive_group(required=True)
    size.add_argument("--m", type=_positive_int)
    size.add_argument("--tau", type=_nonneg_float)
    _add_growth(p)
    p.add_argument("--out", required=True)
    p.add_argument("--evaluate", action="store_true", help="also compute the exact squared error")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("choose-m", help="pick m by the trace-error threshold")
    _add_measure_input(p)
    _add_sampler_flags(p)
    p.add_argument("--tau", type=_nonneg_float, required=True)
    _add_growth(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_choose_m, m=None, evaluate=False)

    p = sub.add_parser("error-curve", help="squared and trace errors over samplers, sizes and seeds")
    _add_measure_input(p)
    _add_sampler_flags(p)
    p.add_argument("--m", type=_int_list, required=True, help="e.g. 50,100,200")
    p.add_argument("--samplers", type=_name_list, default=["rls", "uniform"])
    p.add_argument("--seeds", type=_int_list, default=[1], help="e.g. 1..20")
    p.add_argument("--independent", action="store_true",
                   help="re-draw controls for every m instead of using prefixes of one draw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_error_curve)

    p = sub.add_parser("match", help="register a template mesh onto a target mesh")
    p.add_argument("--template", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--rep", choices=["current", "varifold"], default="varifold")
    p.add_argument("--kernel", required=True, help="matching kernel JSON file or inline JSON")
    p.add_argument("--defkernel", default=None,
                   help="deformation kernel JSON, optionally with n_steps, lambda_match, max_iters, step_rule")
    p.add_argument("--lambda", dest="lam", type=_positive_float, default=None)
    p.add_argument("--m-template", type=_positive_int, default=None)
    p.add_argument("--m-target", type=_positive_int, default=None)
    p.add_argument("--steps", type=_positive_int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--optimizer", choices=["backtracking", "fixed", "lbfgs"], default=None)
    p.add_argument("--eta", type=_positive_float, default=None)
    _add_sampler_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--deformed", default=None, help="write the deformed template as OBJ")
    p.set_defaults(func=cmd_match)
    return ap


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        args.resolved_threads = _threads(args)
        limit = nullcontext()
        if args.resolved_threads:
            from threadpoolctl import threadpool_limits
            limit = threadpool_limits(args.resolved_threads)
        with limit:
            args.func(args)
    except UsageError as exc:
        print(f"measurezip {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, OSError, np.linalg.LinAlgError, NotImplementedError) as exc:
        print(f"measurezip {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
