"""Command line front end: construct, certify, heis.

Exit codes: 0 success, 1 a requested certification check failed, 2 invalid
input (flags, files, formats), 3 infeasible budget parameters.
"""

from __future__ import annotations

import argparse
import os
import sys

from .core import (
    BoxDomain,
    InfeasibleBudgetError,
    LogModulus,
    PiecewiseLinearModulus,
    PowerModulus,
)
from .harness import (
    CHECK_NAMES,
    FunctionFileError,
    certify_function,
    default_output_dir,
    load_certificate,
    load_function,
    run_construct,
    sibling_certificate_path,
    write_json,
)
from .heisenberg import (
    GraphMap,
    HPoint,
    cc_dist_bounds,
    characteristic_fraction,
    circulation_counterexample,
    holder_transfer_check,
    koranyi_dist,
)
from .lusin import BuildConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3


def _floats(text: str, count: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}")
    if count is not None and len(vals) != count:
        raise argparse.ArgumentTypeError(f"expected {count} numbers, got {len(vals)}")
    return vals


def _point(text: str) -> HPoint:
    return HPoint(*_floats(text, 3))


def _modulus_spec(text: str):
    kind, _, rest = text.partition(":")
    if kind == "log":
        return LogModulus()
    if kind == "power":
        return PowerModulus(float(rest))
    if kind == "pwl":
        knots = tuple(tuple(float(v) for v in k.split(",")) for k in rest.split(";"))
        return PiecewiseLinearModulus(knots)
    raise ValueError(f"unknown modulus spec {text!r} (use log, power:B or pwl:...)")


def _domain(text: str) -> BoxDomain:
    vals = _floats(text)
    if len(vals) % 2 or not vals:
        raise ValueError("domain needs an even number of coordinates: lows then highs")
    n = len(vals) // 2
    return BoxDomain(vals[:n], vals[n:])


def _checks(text: str) -> tuple[str, ...]:
    names = tuple(v.strip() for v in text.split(",") if v.strip())
    unknown = set(names) - set(CHECK_NAMES)
    if unknown:
        raise ValueError(f"unknown checks: {sorted(unknown)}")
    return names or CHECK_NAMES


def _print_csv(header, rows):
    print(",".join(header))
    for row in rows:
        print(",".join(str(v) for v in row))


def cli_construct(ns) -> int:
    cfg = BuildConfig(
        eps=ns.eps,
        sigma=ns.sigma,
        tau=ns.tau,
        theta=ns.theta,
        grid=ns.grid,
        stages=ns.stages,
        quantile=ns.quantile,
        refine_max=ns.refine_max,
        seed=ns.seed,
        modulus=_modulus_spec(ns.modulus),
    )
    dom = _domain(ns.domain)
    paths, _, cert = run_construct(ns.field, dom, cfg, ns.out, ns.name)
    print(f"function    {paths['function']}")
    print(f"certificate {paths['certificate']}")
    print(f"manifest    {paths['manifest']}")
    print(f"coverage_fraction {cert.coverage_fraction():.6f}")
    print(f"residual_fraction {cert.residual_fraction():.6f}")
    print(f"term_count {cert.term_count}")
    print(f"budgets_ok {cert.budgets_ok()}")
    return EXIT_OK if cert.budgets_ok() else EXIT_CHECK_FAILED


def cli_certify(ns) -> int:
    g, dom = load_function(ns.function)
    cert_path = ns.certificate or sibling_certificate_path(ns.function)
    cert = load_certificate(cert_path)
    report = certify_function(
        g, dom, cert, checks=_checks(ns.checks), pairs=ns.pairs, seed=ns.seed
    )
    out = ns.report or os.path.splitext(ns.function)[0] + ".report.json"
    write_json(out, report)
    for name, res in report["checks"].items():
        verdict = "pass" if res["passed"] else "FAIL"
        worst = res.get("worst")
        print(f"{name}: {verdict} (worst {worst:.6g}, bound {res.get('bound')})")
    print(f"report {out}")
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def cli_heis(ns) -> int:
    if ns.heis_cmd == "dist":
        dk = koranyi_dist(ns.p, ns.q)
        bounds = cc_dist_bounds(
            ns.p, ns.q, waypoints=ns.waypoints, iter_cap=ns.iter_cap, seed=ns.seed
        )
        _print_csv(
            ("koranyi", "cc_lower", "cc_upper", "loose"),
            [(repr(dk), repr(bounds.lower), repr(bounds.upper), bounds.loose)],
        )
        return EXIT_OK
    if ns.heis_cmd == "counterexample":
        a, b = circulation_counterexample()
        _print_csv(("path_a", "path_b", "difference"), [(a, b, b - a)])
        return EXIT_OK
    # graph analyze
    g, dom = load_function(ns.function)
    if g.dimension != 2 or g.order != 1:
        raise ValueError("graph analysis expects a first-order planar function")
    G = GraphMap.from_sum(dom, g)
    frac = characteristic_fraction(G, ns.tau, grid=ns.grid)
    report = holder_transfer_check(G, seed=ns.seed)
    rows = [
        ("characteristic_fraction", repr(frac)),
        ("tau", repr(ns.tau)),
        ("alpha_u", repr(report["alpha_u"])),
        ("alpha_graph", repr(report["alpha_graph"])),
        ("transfer_gap", repr(report["gap"])),
        ("transfer_passed", report["passed"]),
        ("status", report["status"]),
    ]
    _print_csv(("quantity", "value"), rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lusinkit",
        description="Construct functions with prescribed a.e. derivatives and "
        "analyze horizontal graphs in the first Heisenberg group.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("construct", help="run a construction and persist it")
    c.add_argument("--field", required=True, help="catalog field name")
    c.add_argument("--domain", default="0,0,1,1", help="lows then highs, e.g. 0,0,1,1")
    c.add_argument("--grid", type=int, default=64, help="stage-1 cells per axis")
    c.add_argument("--eps", type=float, default=0.05)
    c.add_argument("--sigma", type=float, default=0.5)
    c.add_argument("--tau", type=float, default=1e-3)
    c.add_argument("--theta", type=float, default=0.5)
    c.add_argument(
        "--modulus", default="log", help="log, power:BETA or pwl:t0,v0;t1,v1;..."
    )
    c.add_argument("--stages", type=int, default=4)
    c.add_argument("--quantile", type=float, default=0.995)
    c.add_argument("--refine-max", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=None, help="output directory")
    c.add_argument("--name", default="function", help="basename for output files")
    c.set_defaults(func=cli_construct)

    v = sub.add_parser("certify", help="re-verify a saved function by sampling")
    v.add_argument("function", help="path to a saved function file")
    v.add_argument("--certificate", default=None)
    v.add_argument("--checks", default=",".join(CHECK_NAMES))
    v.add_argument("--pairs", type=int, default=20_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", default=None, help="report path")
    v.set_defaults(func=cli_certify)

    h = sub.add_parser("heis", help="Heisenberg group utilities")
    hs = h.add_subparsers(dest="heis_cmd", required=True)

    d = hs.add_parser("dist", help="Koranyi distance and CC bounds")
    d.add_argument("p", type=_point, help="x,y,t")
    d.add_argument("q", type=_point, help="x,y,t")
    d.add_argument("--waypoints", type=int, default=16)
    d.add_argument("--iter-cap", type=int, default=200)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cli_heis)

    ga = hs.add_parser("graph", help="analyze a saved graph height function")
    ga.add_argument("action", choices=("analyze",))
    ga.add_argument("function", help="path to a saved function file")
    ga.add_argument("--tau", type=float, default=1e-3)
    ga.add_argument("--grid", type=int, default=None)
    ga.add_argument("--seed", type=int, default=0)
    ga.set_defaults(func=cli_heis)

    ce = hs.add_parser("counterexample", help="two lifts of one planar loop")
    ce.set_defaults(func=cli_heis)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    if ns.command == "construct" and ns.out is None:
        ns.out = default_output_dir()
    try:
        return ns.func(ns)
    except InfeasibleBudgetError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FunctionFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
