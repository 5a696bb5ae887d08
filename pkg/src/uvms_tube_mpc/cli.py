"""Command-line entry point.

Exit status: 0 on success, 1 when a pipeline stage fails (infeasibility, tube
or constraint violation), 2 on bad input.  Set ``UVMS_LOG_LEVEL`` (e.g.
``INFO``) for progress messages on standard error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import yaml

from . import bounds as bd
from . import scenario as sc
from .errors import ConfigError, UvmsError

log = logging.getLogger("uvms_tube_mpc")

LOG_ENV = "UVMS_LOG_LEVEL"


class _BadInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _BadInput(message)


def _plain(obj):
    """Convert numpy scalars/arrays and tuples to YAML-friendly builtins."""
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and math.isinf(obj):
        return ".inf" if obj > 0 else "-.inf"
    return obj


def _write_doc(path, doc: dict) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(_plain(doc), fh, sort_keys=False)


def _config(args, **overrides):
    path = args.config or sc.shipped_config_path()
    if not os.path.exists(path):
        raise ConfigError(f"{path}: no such file")
    return sc.load_config(path, **overrides)


# --- commands -------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.renominalize:
        overrides["renominalize"] = True
    cfg = _config(args, **overrides)
    ctl = sc.synthesize(cfg)
    traj = sc.run_closed_loop(cfg, ctl, strict=True)
    traj.write_csv(args.out)
    counts = sc.fhocp_status_counts(traj)
    log.info("wrote %d rows to %s; FHOCP statuses %s", traj.rows, args.out, counts)
    return 0


def cmd_bounds(args) -> int:
    cfg = _config(args)
    jb, lb = sc.estimate_scenario_bounds(cfg, samples=args.samples, seed=args.seed)
    _write_doc(args.out, bd.bounds_report(jb, lb))
    return 0


def cmd_gains(args) -> int:
    try:
        with open(args.bounds) as fh:
            doc = yaml.safe_load(fh)
        jb, lb = bd.bounds_from_report(doc)
    except (OSError, yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{args.bounds}: cannot read bounds report: {exc}") from None
    if args.w_tilde is not None:
        tube = bd.kinematic_tube(jb, lb, args.w_tilde, args.sigma_under)
        doc = {"level": "kinematic", **tube.to_dict()}
    else:
        tube = bd.tube_gains(jb, lb, args.d_tilde, args.sigma_under)
        doc = {"level": "dynamic", **tube.to_dict()}
    _write_doc(args.out, doc)
    return 0


def cmd_tube_check(args) -> int:
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = _config(args, **overrides)
    report = sc.monte_carlo_tube_check(cfg, args.runs, workers=args.workers)
    _write_doc(args.out, report)
    if report["failures"]:
        for line in report["failures"]:
            print(f"tube-check: {line}", file=sys.stderr)
        return 1
    if report["violations"]:
        print(f"tube-check: {report['violations']} tube violations", file=sys.stderr)
        return 1
    return 0


FIGURES = {
    "fig3_position_errors": ["t"] + [f"chi_{i}" for i in (1, 2, 3)] + [f"chibar_{i}" for i in (1, 2, 3)],
    "fig4_orientation_errors": ["t"] + [f"chi_{i}" for i in (4, 5, 6)] + [f"chibar_{i}" for i in (4, 5, 6)],
}


def cmd_plot_data(args) -> int:
    try:
        with open(args.log, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"{args.log}: {exc}") from None
    if not rows:
        raise ConfigError(f"{args.log}: empty log")
    header, data = rows[0], rows[1:]
    index = {name: j for j, name in enumerate(header)}
    n_in = sum(1 for name in header if name.startswith("u_"))
    figures = dict(FIGURES)
    figures["fig5_inputs"] = ["t"] + [f"u_{i}" for i in range(1, n_in + 1)]
    missing = [c for cols in figures.values() for c in cols if c not in index]
    if missing:
        raise ConfigError(f"{args.log}: missing columns {', '.join(sorted(set(missing)))}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, cols in figures.items():
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            extra = []
            if name == "fig5_inputs":
                # body linear, body angular and joint velocity norms
                blocks = [(1, 3), (4, 6)] + ([(7, n_in)] if n_in > 6 else [])
                extra = [f"norm_{b}" for b in ("nu1", "nu2", "qdot")[:len(blocks)]]
            w.writerow(cols + extra)
            for r in data:
                vals = [r[index[c]] for c in cols]
                if extra:
                    for lo, hi in blocks:
                        s = sum(float(r[index[f"u_{i}"]]) ** 2 for i in range(lo, hi + 1))
                        vals.append(repr(math.sqrt(s)))
                w.writerow(vals)
    return 0


# --- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uvms-tube-mpc", description="Tube-based robust NMPC for UVMS force control.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run the closed-loop scenario and write a trajectory CSV")
    s.add_argument("--config", help="scenario YAML (default: the shipped Girona500 scenario)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--renominalize", action="store_true",
                   help="re-anchor the nominal state to the plant at every period")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bounds", help="estimate Jacobian and Lipschitz bounds")
    b.add_argument("--config")
    b.add_argument("--samples", type=int, default=10_000)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bounds)

    g = sub.add_parser("gains", help="tube gains and radii from a bounds report")
    g.add_argument("--bounds", required=True)
    g.add_argument("--sigma-under", type=float, default=1.0)
    level = g.add_mutually_exclusive_group()
    level.add_argument("--d-tilde", type=float, default=0.0, help="dynamic-level disturbance bound")
    level.add_argument("--w-tilde", type=float, help="kinematic-level disturbance bound")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gains)

    t = sub.add_parser("tube-check", help="Monte-Carlo tube invariance check")
    t.add_argument("--config")
    t.add_argument("--runs", type=int, default=100)
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tube_check)

    d = sub.add_parser("plot-data", help="per-figure series files from a trajectory CSV")
    d.add_argument("--log", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_plot_data)
    return p


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except _BadInput as exc:
        print(f"uvms-tube-mpc: error: {exc}", file=sys.stderr)
        return 2
    if getattr(args, "runs", 1) < 1 or getattr(args, "samples", 1) < 1:
        print("uvms-tube-mpc: error: counts must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"uvms-tube-mpc: config: {exc}", file=sys.stderr)
        return 2
    except UvmsError as exc:
        print(f"uvms-tube-mpc: {exc.stage}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"uvms-tube-mpc: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
