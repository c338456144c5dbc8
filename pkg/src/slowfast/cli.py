"""Command-line interface.

Subcommands: certify, slow-manifold, reduce, run.  Exit codes are a stable
contract: 0 success, 1 usage/schema error, 2 certificate infeasible,
3 non-convergence, 4 numeric failure.  All files are written atomically
(temp file + rename); CSV uses '.' decimals, comma separators, a header row,
and 17 significant digits.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys as _sys
import tempfile

import numpy as np

from .certify import assemble_certificate, spectral_gap_check, straightened_constants
from .errors import (ContractionError, ConvergenceError,
                     InfeasibleBudgetError, NoDecayError, SchemaError,
                     SlowfastError)
from .harness import ScenarioSpec, build_scenario_system, run_scenario, scenario_configs
from .manifold import d2h_solve, dh_solve, lp_solve
from .reduction import decompose_orbit, q_along_orbit, straighten
from .systems import EXAMPLES

log = logging.getLogger("slowfast")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_NO_CONVERGENCE = 3
EXIT_NUMERIC = 4


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".slowfast-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _parse_overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise SchemaError(f"override {p!r} is not KEY=VALUE")
        k, v = p.split("=", 1)
        try:
            out[k] = float(v)
        except ValueError as exc:
            raise SchemaError(f"override value {v!r} is not a number") from exc
    return out


def _spec_from_args(args):
    data = {"system": args.system}
    if getattr(args, "scenario", None):
        with open(args.scenario) as fh:
            data = json.load(fh)
        if args.system:
            data["system"] = args.system
    if getattr(args, "eps", None) is not None:
        data["eps"] = args.eps[0] if len(args.eps) == 1 else list(args.eps)
    if getattr(args, "grid", None) is not None:
        data["grid"] = args.grid
    if getattr(args, "m", None) is not None:
        data["m"] = args.m
    if getattr(args, "dt", None) is not None:
        data["dt"] = args.dt
    if getattr(args, "horizon", None) is not None:
        data["horizon"] = args.horizon
    if getattr(args, "derivative", None) is not None:
        data["derivative"] = args.derivative
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        data["out"] = args.out
    if getattr(args, "jobs", None) is not None:
        data["jobs"] = args.jobs
    ov = _parse_overrides(getattr(args, "override", None))
    if ov:
        data["overrides"] = ov
    if not data.get("system"):
        raise SchemaError("--system is required")
    return ScenarioSpec.from_dict(data)


def _prepare(spec):
    sysm = build_scenario_system(spec)
    cfg_int, _ = scenario_configs(spec, sysm)
    ex = EXAMPLES[spec.system]
    cert = assemble_certificate(sysm, cfg_int, seed=spec.seed,
                                x_radius=ex.sampling_radius,
                                overrides=spec.overrides or {})
    cfg_int, cfg_lp = scenario_configs(spec, sysm, cert)
    return sysm, cert, cfg_int, cfg_lp


def _print_hypothesis_table(cert, stream=None):
    stream = stream or _sys.stdout
    rows = cert.hypothesis_table()
    width = max(len(name) for name, _ in rows)
    print(f"{'hypothesis':<{width}}  status", file=stream)
    for name, status in rows:
        print(f"{name:<{width}}  {status}", file=stream)


def cmd_certify(args):
    spec = _spec_from_args(args)
    sysm, cert, cfg_int, _ = _prepare(spec)
    if spec.system == "NF1":
        gap = spectral_gap_check(sysm, lambda y: np.zeros(np.asarray(y).shape[:-1] + (sysm.m,)), 0.5)
        print(f"spectral gap: max Re = {gap.max_real:.6g}, margin = {gap.margin:.6g}")
    _print_hypothesis_table(cert)
    if spec.out:
        _atomic_write(spec.out, cert.to_json() + "\n")
        print(f"wrote {spec.out}")
    required_fail = any(status == "fail" for _, status in cert.hypothesis_table())
    return EXIT_INFEASIBLE if required_fail else EXIT_OK


def cmd_slow_manifold(args):
    spec = _spec_from_args(args)
    sysm, cert, cfg_int, cfg_lp = _prepare(spec)
    h, rep = lp_solve(sysm, cert, cfg_lp, cfg_int)
    fields = {"h": h}
    if spec.derivative >= 1 and sysm.has_derivatives(1):
        fields["dh"], _ = dh_solve(sysm, h, cert, cfg_lp, cfg_int)
    if spec.derivative >= 2 and sysm.has_derivatives(2):
        fields["d2h"], _ = d2h_solve(sysm, h, fields["dh"], cert, cfg_lp, cfg_int)
    out = spec.out or f"slow_manifold_{spec.system}"
    nodes = sysm.domain.node_coords()
    header = [f"y{a}" for a in range(sysm.n)]
    cols = [nodes[:, a] for a in range(sysm.n)]
    for name, gf in fields.items():
        flat = gf.values.reshape(nodes.shape[0], -1)
        for j in range(flat.shape[1]):
            header.append(f"{name}{j}" if flat.shape[1] > 1 else name)
            cols.append(flat[:, j])
    write_csv(out + ".csv", header, zip(*cols))
    payload = {
        "system": spec.system, "eps": spec.eps_list()[0],
        "grid": {"lower": sysm.domain.lower.tolist(),
                 "upper": sysm.domain.upper.tolist(),
                 "points": sysm.domain.shape},
        "certificate": json.loads(cert.to_json()),
        "report": {"converged": rep.converged, "sweeps": rep.iterations,
                   "residuals": rep.residuals,
                   "measured_ratio": rep.measured_ratio,
                   "theoretical_ratio": rep.theoretical_ratio},
    }
    _atomic_write(out + ".json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}.csv and {out}.json (sup |h| = {h.sup_norm():.6g})")
    return EXIT_OK


def cmd_reduce(args):
    spec = _spec_from_args(args)
    point = [float(v) for v in args.point.split(",")]
    sysm, cert, cfg_int, cfg_lp = _prepare(spec)
    ex = EXAMPLES[spec.system]
    h, _ = lp_solve(sysm, cert, cfg_lp, cfg_int)
    dh, _ = dh_solve(sysm, h, cert, cfg_lp, cfg_int)
    ssys = straighten(sysm, h, dh)
    scert = straightened_constants(cert, dh.sup_norm())
    xi = np.asarray(point[: sysm.m])
    eta = np.asarray(point[sysm.m: sysm.m + sysm.n])
    if eta.size != sysm.n:
        raise SchemaError(f"--point needs {sysm.m}+{sysm.n} numbers")
    res = q_along_orbit(ssys, xi, eta, scert, cfg_int)
    out = spec.out or f"reduction_{spec.system}"
    payload = res.to_dict()
    from .reduction import semiconjugacy_residual
    payload["semiconjugacy_residual"] = semiconjugacy_residual(
        ssys, res, t_max=5.0, cfg_int=cfg_int, cert=scert, n_checks=5)
    _atomic_write(out + ".json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    t_max = min(10.0, max(2.0, res.horizon)) if res.horizon > 0 else 5.0
    outer, layer = decompose_orbit(sysm, ssys.h, res, t_max, cfg_int)
    from .integrate import flow
    x0 = np.asarray(ssys.h(eta), dtype=float) + xi
    orbit = flow(sysm, x0, eta, (0.0, t_max), cfg_int, check_domain=False)
    header = (["t"]
              + [f"orbit_x{i}" for i in range(sysm.m)] + [f"orbit_y{a}" for a in range(sysm.n)]
              + [f"outer_x{i}" for i in range(sysm.m)] + [f"outer_y{a}" for a in range(sysm.n)]
              + [f"layer_x{i}" for i in range(sysm.m)] + [f"layer_y{a}" for a in range(sysm.n)])
    rows = np.concatenate([orbit.times[:, None], orbit.fast, orbit.slow,
                           outer.fast, outer.slow, layer.fast, layer.slow], axis=1)
    write_csv(out + ".csv", header, rows)
    print(f"wrote {out}.json and {out}.csv (P = {res.P.tolist()})")
    return EXIT_OK


def cmd_run(args):
    spec = _spec_from_args(args)
    report = run_scenario(spec)
    text = json.dumps(report, indent=2, sort_keys=True)
    if spec.out:
        _atomic_write(spec.out, text + "\n")
        print(f"wrote {spec.out}")
    else:
        print(text)
    for c in report["checks"]:
        print(f"check {c['name']}: {c['status']}")
    return EXIT_OK if report["passed"] else EXIT_NO_CONVERGENCE


def _add_common(p, with_point=False):
    p.add_argument("--system", choices=sorted(EXAMPLES), help="built-in system name")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--eps", type=float, action="append",
                   help="timescale parameter; repeat for a continuation list")
    p.add_argument("--grid", type=int, help="slow grid points per axis")
    p.add_argument("--m", type=int, help="fast quadrature size (NF1)")
    p.add_argument("--dt", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--derivative", type=int, choices=(0, 1, 2))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="certificate constant override")
    if with_point:
        p.add_argument("--point", required=True,
                       help="comma-separated xi,eta coordinates")


def make_parser():
    parser = argparse.ArgumentParser(
        prog="slowfast",
        description="compute, certify and stress-test attracting slow manifolds")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("certify", help="estimate constants and print the hypothesis table")
    _add_common(p)
    p.set_defaults(fn=cmd_certify)
    p = sub.add_parser("slow-manifold", help="solve for h (and derivatives) on the grid")
    _add_common(p)
    p.set_defaults(fn=cmd_slow_manifold)
    p = sub.add_parser("reduce", help="reduction-map query at a point")
    _add_common(p, with_point=True)
    p.set_defaults(fn=cmd_reduce)
    p = sub.add_parser("run", help="full scenario with checks")
    _add_common(p)
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv=None):
    level = os.environ.get("SLOWFAST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_USAGE
    except (InfeasibleBudgetError, ContractionError, NoDecayError) as exc:
        print(f"infeasible: {exc}", file=_sys.stderr)
        return EXIT_INFEASIBLE
    except ConvergenceError as exc:
        print(f"did not converge: {exc}", file=_sys.stderr)
        return EXIT_NO_CONVERGENCE
    except (SlowfastError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=_sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
