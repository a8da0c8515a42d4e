"""lipcert command line: bounds | lipschitz | certify-radius | stability | bench.

Outputs are JSON (and CSV where noted) with 12 significant digits and no
timing information, so identical inputs give byte-identical files.

Exit codes: 0 success, 2 input error, 3 solver failure, 4 nothing to
certify, 5 infeasible.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .lipschitz import MarginError, certify_radius, global_lipschitz, local_lipschitz
from .lmi import INFEASIBLE
from .network import InputRegion, Network, NetworkSchemaError, load_network
from .relaxation import propagate_bounds

log = logging.getLogger("lipcert")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_NOTHING, EXIT_INFEASIBLE = 0, 2, 3, 4, 5
SWEEP_HEADER = ["eps", "L_local", "L_global", "ratio"]


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- formatting

def fmt(x: float) -> str:
    return f"{x:.12g}"


def _round(obj):
    """Round every float to 12 significant digits; non-finite values become null."""
    if isinstance(obj, float) or isinstance(obj, np.floating):
        x = float(obj)
        return float(fmt(x)) if math.isfinite(x) else None
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist())
    return obj


def dumps(doc) -> str:
    return json.dumps(_round(doc), indent=1, sort_keys=True) + "\n"


def _emit(text: str, path: Optional[str]) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------- inputs

def _floats(text: str, what: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise CliError(f"{what}: expected a comma separated list of numbers, got {text!r}") from None
    if not vals:
        raise CliError(f"{what}: empty list")
    return np.array(vals)


def _net(args) -> Network:
    if not args.net:
        raise CliError("--net is required")
    try:
        return load_network(args.net)
    except OSError as exc:
        raise CliError(f"cannot read {args.net}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{args.net}: invalid JSON: {exc}") from None
    except NetworkSchemaError as exc:
        raise CliError(f"{args.net}: {exc}") from None


def _center(args, net: Network) -> np.ndarray:
    if args.center is None:
        return np.zeros(net.n_in)
    c = _floats(args.center, "--center")
    if c.size != net.n_in:
        raise CliError(f"--center has {c.size} entries, network expects {net.n_in}")
    return c


def _eps(value: float) -> float:
    if not (value >= 0 and math.isfinite(value)):
        raise CliError(f"--eps must be a finite nonnegative number, got {value}")
    return value


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, jobs=args.jobs)


# ---------------------------------------------------------------- commands

def cmd_bounds(args) -> int:
    net = _net(args)
    if args.eps is None:
        raise CliError("bounds needs --eps")
    region = InputRegion.ball(_center(args, net), _eps(args.eps))
    bounds = propagate_bounds(net, region)
    doc = {"region": {"lower": region.lower, "upper": region.upper}, "bounds": bounds.to_json()}
    _emit(dumps(doc), args.out)
    return EXIT_OK


def _local_L(job):
    net, center, eps, solver = job
    cert = local_lipschitz(net, InputRegion.ball(center, eps), solver)
    return cert.report.status, cert.L


def cmd_lipschitz(args) -> int:
    net = _net(args)
    cfg = _config(args)
    if args.eps is None and args.sweep is None and not args.global_:
        raise CliError("lipschitz needs --eps, --sweep or --global")
    if args.eps is not None and args.sweep is not None:
        raise CliError("--eps and --sweep are mutually exclusive")
    center = _center(args, net)
    doc = {}
    rows = []
    L_global = float("nan")
    if args.global_ or args.sweep is not None:
        g = global_lipschitz(net, cfg.solver)
        if not g.ok:
            _emit(dumps({"global": g.to_json()}), args.out)
            raise CliError(f"global solve failed: {g.report.status}", EXIT_SOLVER)
        L_global = g.L
        doc["global"] = g.to_json()
    if args.eps is not None:
        cert = local_lipschitz(net, InputRegion.ball(center, _eps(args.eps)), cfg.solver)
        doc["local"] = cert.to_json()
        if not cert.ok:
            _emit(dumps(doc), args.out)
            raise CliError(f"local solve failed: {cert.report.status}", EXIT_SOLVER)
        rows.append((float(args.eps), cert.L, L_global, cert.L / L_global if args.global_ else float("nan")))
    elif args.sweep is not None:
        grid = sorted(float(_eps(e)) for e in _floats(args.sweep, "--sweep"))
        jobs = [(net, center, e, cfg.solver) for e in grid]
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
                results = list(ex.map(_local_L, jobs))
        else:
            results = [_local_L(j) for j in jobs]
        failed = [e for e, (status, _) in zip(grid, results) if status != "optimal"]
        for e, (status, L) in zip(grid, results):
            rows.append((e, L, L_global, L / L_global))
        if failed:
            doc["failed"] = failed
    else:
        rows.append((float("inf"), L_global, L_global, 1.0))
    doc["rows"] = [dict(zip(SWEEP_HEADER, r)) for r in rows]
    _emit(dumps(doc), args.out)
    if args.csv:
        _emit(_csv(SWEEP_HEADER, rows), args.csv)
    if doc.get("failed"):
        raise CliError(f"solver failure at eps {doc['failed']}", EXIT_SOLVER)
    return EXIT_OK


def _read_input(path: str):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from None
    if isinstance(doc, list):
        return np.array(doc, dtype=float), None
    if not isinstance(doc, dict) or "x" not in doc:
        raise CliError(f"{path}: expected {{\"x\": [...], \"label\": optional}}")
    return np.array(doc["x"], dtype=float), doc.get("label")


def cmd_certify_radius(args) -> int:
    net = _net(args)
    cfg = _config(args)
    if not args.input:
        raise CliError("certify-radius needs --input")
    x, label = _read_input(args.input)
    if x.ndim != 1 or x.size != net.n_in:
        raise CliError(f"input has shape {x.shape}, network expects {net.n_in} entries")
    try:
        res = certify_radius(net, x, label, eps_max=cfg.radius_eps_max, tol=cfg.radius_tol,
                             max_iter=cfg.radius_max_iter, config=cfg.solver)
    except MarginError as exc:
        raise CliError(str(exc), EXIT_NOTHING) from None
    except RuntimeError as exc:
        raise CliError(str(exc), EXIT_SOLVER) from None
    _emit(dumps(res.to_json()), args.out)
    return EXIT_OK


def cmd_stability(args) -> int:
    from .stability import (NoEquilibriumError, find_equilibrium, load_plant, max_region,
                            reachable_csv, simulate_reachable, stability_lmi)

    if args.rho is not None and not 0.0 < args.rho <= 1.0:
        raise CliError(f"--rho must lie in (0, 1], got {args.rho}")
    rho = 1.0 if args.rho is None else args.rho
    net = _net(args)
    cfg = _config(args)
    if not args.plant:
        raise CliError("stability needs --plant")
    try:
        plant = load_plant(args.plant)
        plant.check_controller(net)
    except OSError as exc:
        raise CliError(f"cannot read {args.plant}: {exc.strerror}") from None
    except ValueError as exc:
        raise CliError(f"{args.plant}: {exc}") from None
    if not args.bisect and args.eps is None:
        raise CliError("stability needs --bisect or --eps")
    guess = None if args.center is None else _center(args, net)
    try:
        x_eq = find_equilibrium(plant, net, guess)
    except NoEquilibriumError as exc:
        raise CliError(str(exc), EXIT_NOTHING) from None
    doc = {"equilibrium": x_eq}
    if args.bisect:
        search = max_region(plant, net, x_eq, rho, eps_min=cfg.region_eps_min, eps_max=cfg.region_eps_max,
                            tol=cfg.region_tol, config=cfg.solver)
        doc["search"] = {"eps": search.eps, "trace": [{"eps": e, "status": s} for e, s in search.trace]}
        cert = search.certificate
        if cert is None:
            doc["certificate"] = None
            _emit(dumps(doc), args.out)
            sys.stderr.write("no certificate\n")
            return EXIT_INFEASIBLE
    else:
        cert = stability_lmi(plant, net, x_eq, _eps(args.eps), rho, cfg.solver, min_trace=True)
        if not cert.ok:
            doc["certificate"] = cert.to_json()
            _emit(dumps(doc), args.out)
            if cert.report.status == INFEASIBLE:
                sys.stderr.write("no certificate\n")
                return EXIT_INFEASIBLE
            raise CliError(f"solver failure: {cert.report.status}", EXIT_SOLVER)
    doc["certificate"] = cert.to_json()
    states = simulate_reachable(plant, net, cert.ellipsoid, cfg.steps, cfg.samples, cfg.seed)
    V = np.stack([cert.ellipsoid.value(s) for s in states])
    doc["simulation"] = {
        "steps": cfg.steps,
        "samples": cfg.samples,
        "max_level_ratio": float(V.max() / cert.level) if cert.level > 0 else 0.0,
    }
    _emit(dumps(doc), args.out)
    if args.csv:
        _emit(reachable_csv(states), args.csv)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .oracle import BudgetExceeded, exact_local_lipschitz_enum, sample_lipschitz_lb

    net = _net(args)
    cfg = _config(args)
    grid = [0.1, 0.5, 1.0] if args.sweep is None else sorted(float(e) for e in _floats(args.sweep, "--sweep"))
    center = _center(args, net)
    rows = []
    for eps in grid:
        region = InputRegion.ball(center, _eps(eps))
        cert = local_lipschitz(net, region, cfg.solver)
        lb = sample_lipschitz_lb(net, region, cfg.pairs, cfg.seed)
        try:
            exact = exact_local_lipschitz_enum(net, region).value
        except (BudgetExceeded, ValueError):
            exact = float("nan")
        rows.append({"eps": eps, "sample_lb": lb.value, "exact": exact, "L_certified": cert.L,
                     "status": cert.report.status})
    _emit(dumps({"rows": rows}), args.out)
    if args.csv:
        keys = ["eps", "sample_lb", "exact", "L_certified", "status"]
        _emit(_csv(keys, [[r[k] for k in keys] for r in rows]), args.csv)
    return EXIT_OK


COMMANDS = {
    "bounds": cmd_bounds,
    "lipschitz": cmd_lipschitz,
    "certify-radius": cmd_certify_radius,
    "stability": cmd_stability,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--net", help="network JSON file")
    common.add_argument("--config", help="JSON or TOML config (default: $LIPCERT_CONFIG)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", help="output JSON path (default stdout)")
    common.add_argument("--csv", help="output CSV path")
    common.add_argument("--center", help="comma separated center / equilibrium guess")
    common.add_argument("--eps", type=float, help="l-infinity radius")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lipcert", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("bounds", parents=[common], help="pre-activation boxes")
    lp = sub.add_parser("lipschitz", parents=[common], help="local/global Lipschitz bounds")
    lp.add_argument("--global", dest="global_", action="store_true")
    lp.add_argument("--sweep", help="comma separated eps grid")
    rp = sub.add_parser("certify-radius", parents=[common], help="certified l-infinity radius")
    rp.add_argument("--input", help='JSON {"x": [...], "label": optional}')
    sp_ = sub.add_parser("stability", parents=[common], help="closed-loop stability certificate")
    sp_.add_argument("--plant", help='JSON {"A": [[...]], "B": [[...]]}')
    sp_.add_argument("--rho", type=float, help="decay rate in (0, 1], default 1")
    sp_.add_argument("--bisect", action="store_true", help="search the largest certified eps")
    bp = sub.add_parser("bench", parents=[common], help="certified bound against the oracles")
    bp.add_argument("--sweep", help="comma separated eps grid")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs is not None and args.jobs < 1:
        sys.stderr.write("lipcert: --jobs must be at least 1\n")
        return EXIT_INPUT
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        sys.stderr.write(f"lipcert: {exc}\n")
        return exc.code
    except ConfigError as exc:
        sys.stderr.write(f"lipcert: config: {exc}\n")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
