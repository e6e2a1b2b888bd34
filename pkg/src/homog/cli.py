"""Command-line front end.

    homog validate|effective|converge|spectrum
          --preset <name> | --config <problem.toml>
          [--out <dir>] [--format csv|json|both] [--seed <int>] ...

Exit codes: 0 success; 1 I/O, parse or usage errors; 2 validation failure;
3 cross-check failure (artifacts still written); 4 convergence/spectrum
thresholds unmet (reports still written); 5 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cell import CellGrid, CorrectorCache
from .coeffs import SamplingPlan, load_problem_toml, validate
from .effective import SlowGrid, assemble_homogenized
from .errors import (
    CrossCheckFailed,
    DegenerateFit,
    HomogError,
    ParseError,
    PeriodicityError,
    ShiftInsideSpectrum,
    SolvabilityViolated,
    SolverDiverged,
    ValidationFailed,
)
from .experiments import (
    RATE_THRESHOLD,
    GridPlan,
    run_resolvent_convergence,
    run_spectrum_convergence,
)
from .scenarios import PRESET_NAMES, Scenario, get_preset

GAP_SHRINK_THRESHOLD = 4.0

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_CROSSCHECK = 3
EXIT_THRESHOLD = 4
EXIT_SOLVER = 5


def build_parser():
    parser = argparse.ArgumentParser(
        prog="homog",
        description="Periodic homogenization engine: validation, effective "
        "coefficients, resolvent and spectrum convergence sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    group = common.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", choices=sorted(PRESET_NAMES), help="bundled scenario")
    group.add_argument("--config", help="problem definition TOML file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument(
        "--format", choices=["csv", "json", "both"], default="both",
        help="report formats to write (default both)",
    )
    common.add_argument("--seed", type=int, default=0, help="probe sampling seed")
    common.add_argument("--length", type=float, default=2.0 * np.pi,
                        help="torus period per axis")
    common.add_argument("--n-cell", type=int, default=0,
                        help="cell grid points per axis (power of two)")
    common.add_argument("--n-slow", type=int, default=0,
                        help="slow grid nodes per axis")
    common.add_argument("--cell-backend", choices=["spectral", "fd"], default=None,
                        help="cell derivative backend")
    common.add_argument("--cell-tol", type=float, default=1e-10,
                        help="cell solver tolerance")

    p_validate = sub.add_parser("validate", parents=[common],
                                help="probe coefficient bounds and structure")
    p_validate.set_defaults(func=cmd_validate)

    p_eff = sub.add_parser("effective", parents=[common],
                           help="assemble homogenized coefficients")
    p_eff.add_argument("--dump-correctors", action="store_true",
                       help="also write corrector samples as JSON")
    p_eff.set_defaults(func=cmd_effective)

    sweep = argparse.ArgumentParser(add_help=False)
    sweep.add_argument("--eps-n", default="8,16,32,64,128",
                       help="comma list of N with eps = length/N")
    sweep.add_argument("--nphys-per-period", type=int, default=16,
                       help="fine-grid nodes per fast period")
    sweep.add_argument("--lam-re", type=float, default=-1.0)
    sweep.add_argument("--lam-im", type=float, default=0.0)

    p_conv = sub.add_parser("converge", parents=[common, sweep],
                            help="resolvent convergence sweep (Theorem-rate check)")
    p_conv.add_argument("--rhs", default=None,
                        help="semicolon-separated component expressions for f")
    p_conv.set_defaults(func=cmd_converge)

    p_spec = sub.add_parser("spectrum", parents=[common, sweep],
                            help="eigenvalue convergence sweep")
    p_spec.add_argument("--k", type=int, default=3, help="eigenvalues tracked (<= 10)")
    p_spec.set_defaults(func=cmd_spectrum)
    return parser


def load_scenario(args):
    if args.preset:
        scenario = get_preset(args.preset)
    else:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"problem file not found: {path}")
        cs = load_problem_toml(path)
        scenario = Scenario(
            name=path.stem,
            description=f"problem file {path}",
            cs=cs,
            rhs=("sin(x1)",) * cs.bstruct.n,
        )
    return scenario


def _json_text(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write(out_dir, name, text):
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _default_cell_grid(args, d):
    n_cell = args.n_cell or (128 if d == 1 else 32)
    return CellGrid(d=d, n_cell=n_cell)


def _default_slow_grid(args, cs):
    d = cs.bstruct.d
    if args.n_slow:
        n_slow = args.n_slow
    else:
        fields = (cs.A, cs.V, cs.G) + tuple(cs.a) + tuple(cs.b)
        has_x = any(f.has_var("x") for f in fields)
        n_slow = (5 if d == 1 else 2) if has_x else 1
    return SlowGrid(d=d, length=args.length, counts=(n_slow,) * d)


def cmd_validate(args):
    scenario = load_scenario(args)
    plan = SamplingPlan(seed=args.seed)
    try:
        report = validate(scenario.cs, plan)
    except ValidationFailed as err:
        text = _json_text(err.report.to_dict())
        sys.stdout.write(text)
        _write(args.out, "validate.json", text)
        sys.stderr.write(f"validation failed: {err.report}\n")
        return EXIT_VALIDATION
    text = _json_text(report.to_dict())
    sys.stdout.write(text)
    _write(args.out, "validate.json", text)
    return EXIT_OK


def _corrector_dump(cache, slow_grid):
    def arr(a):
        return [[[[float(v.real), float(v.imag)] for v in row] for row in node]
                for node in a]

    nodes = slow_grid.nodes()
    payload = {"x_nodes": [[float(v) for v in node] for node in nodes]}
    entries = []
    for node in nodes:
        corr = cache.get(node)
        entries.append(
            {
                "lambda0": arr(corr.lambda0),
                "lambda1": arr(corr.lambda1),
                "residual0": corr.residual0,
                "residual1": corr.residual1,
            }
        )
    payload["correctors"] = entries
    payload["n_cell"] = cache.grid.n_cell
    payload["backend"] = cache.backend
    return payload


def cmd_effective(args):
    scenario = load_scenario(args)
    cs = scenario.cs
    plan = SamplingPlan(seed=args.seed)
    report = validate(cs, plan)  # ValidationFailed -> exit 2 via dispatcher

    d = cs.bstruct.d
    cell_grid = _default_cell_grid(args, d)
    slow_grid = _default_slow_grid(args, cs)
    backend = args.cell_backend or "spectral"
    cache = CorrectorCache(cs, cell_grid, backend=backend, tol=args.cell_tol)

    exit_code = EXIT_OK
    try:
        hc = assemble_homogenized(
            cs, slow_grid, cell_grid, backend=backend, tol=args.cell_tol, cache=cache
        )
    except CrossCheckFailed as err:
        sys.stderr.write(f"cross-check failed: {err}\n")
        hc = err.payload
        exit_code = EXIT_CROSSCHECK

    payload = {
        "scenario": scenario.name,
        "validation": report.to_dict(),
        "grid": {"n_cell": cell_grid.n_cell, "backend": backend,
                 "slow_counts": list(slow_grid.counts), "length": args.length},
        "coefficients": hc.to_dict(),
    }
    text = _json_text(payload)
    sys.stdout.write(text)
    _write(args.out, "effective.json", text)
    if args.dump_correctors:
        _write(args.out, "correctors.json", _json_text(_corrector_dump(cache, slow_grid)))
    return exit_code


def _eps_list(args):
    try:
        denominators = [int(tok) for tok in str(args.eps_n).split(",") if tok.strip()]
    except ValueError:
        raise ValueError(f"bad --eps-n list {args.eps_n!r}") from None
    if any(n < 1 for n in denominators):
        raise ValueError("--eps-n entries must be positive integers")
    return [args.length / n for n in denominators]


def _grid_plan(args):
    return GridPlan(
        domain_length=args.length,
        nphys_per_period=args.nphys_per_period,
        n_cell=args.n_cell,
        n_slow=args.n_slow,
        cell_backend=args.cell_backend or "fd",
        cell_tol=args.cell_tol,
    )


def cmd_converge(args):
    scenario = load_scenario(args)
    cs = scenario.cs
    validate(cs, SamplingPlan(seed=args.seed))
    eps_list = _eps_list(args)
    if len(eps_list) < 3:
        raise ValueError("converge needs an eps list of length >= 3")
    lam = complex(args.lam_re, args.lam_im)
    rhs = tuple(s.strip() for s in args.rhs.split(";")) if args.rhs else scenario.rhs
    plan = _grid_plan(args)

    report = run_resolvent_convergence(cs, plan, lam, rhs, eps_list)
    payload = {"scenario": scenario.name, "report": report.to_dict()}
    if args.format in ("json", "both"):
        text = _json_text(payload)
        sys.stdout.write(text)
        _write(args.out, "converge.json", text)
    if args.format in ("csv", "both"):
        _write(args.out, "converge.csv", report.csv_text())

    ok = (
        report.rate_L2 >= RATE_THRESHOLD
        and report.rate_W1 >= RATE_THRESHOLD
        and not report.floor_contaminated
    )
    if not ok:
        sys.stderr.write(
            f"rates below threshold or floor-contaminated: "
            f"rate_L2={report.rate_L2:.3f} rate_W1={report.rate_W1:.3f} "
            f"floor_contaminated={report.floor_contaminated}\n"
        )
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_spectrum(args):
    scenario = load_scenario(args)
    cs = scenario.cs
    validate(cs, SamplingPlan(seed=args.seed))
    if not 1 <= args.k <= 10:
        raise ValueError("--k must be between 1 and 10")
    eps_list = _eps_list(args)
    if len(eps_list) < 2:
        raise ValueError("spectrum needs an eps list of length >= 2")
    plan = _grid_plan(args)

    report = run_spectrum_convergence(cs, plan, args.k, eps_list)
    payload = {"scenario": scenario.name, "report": report.to_dict()}
    if args.format in ("json", "both"):
        text = _json_text(payload)
        sys.stdout.write(text)
        _write(args.out, "spectrum.json", text)
    if args.format in ("csv", "both"):
        _write(args.out, "spectrum.csv", report.csv_text())

    factors = report.shrink_factors()
    if all(f >= GAP_SHRINK_THRESHOLD for f in factors):
        return EXIT_OK
    sys.stderr.write(
        "gap shrink factors below threshold: "
        + ", ".join("inf" if np.isinf(f) else f"{f:.2f}" for f in factors)
        + "\n"
    )
    return EXIT_THRESHOLD


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else 0
    try:
        return args.func(args)
    except ValidationFailed as err:
        sys.stderr.write(f"validation failed: {err.report}\n")
        return EXIT_VALIDATION
    except CrossCheckFailed as err:
        sys.stderr.write(f"cross-check failed: {err}\n")
        return EXIT_CROSSCHECK
    except (ShiftInsideSpectrum, SolverDiverged, SolvabilityViolated) as err:
        sys.stderr.write(f"solver failure: {err}\n")
        return EXIT_SOLVER
    except (ParseError, PeriodicityError, DegenerateFit) as err:
        sys.stderr.write(f"error: {err}\n")
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as err:
        sys.stderr.write(f"error: {err}\n")
        return EXIT_USAGE
    except HomogError as err:
        sys.stderr.write(f"error: {err}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
