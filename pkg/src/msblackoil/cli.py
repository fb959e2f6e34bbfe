"""Command-line entry point: run, upscale, basis and compare."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gmsfem as gm
from . import homogenization as hom
from . import runner
from .config import METHODS, SimulationConfig, dump_config, load_config
from .errors import BlackOilError, ConfigurationError, DataError
from .report import ProductionReport, compare_reports, saturation_errors

log = logging.getLogger("msblackoil")


def _config(args) -> SimulationConfig:
    cfg = load_config(args.config) if args.config else SimulationConfig()
    if args.method:
        cfg = cfg.replace("method", name=args.method)
    if args.seed is not None:
        cfg = cfg.replace("method", seed=args.seed)
    if args.output_dir:
        cfg = cfg.replace("output", directory=args.output_dir)
    return cfg


def _out(cfg: SimulationConfig) -> Path:
    path = Path(cfg.output.directory)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    (out / "config.ini").write_text(dump_config(cfg))
    result = runner.simulate(cfg, output_dir=out)
    summary = {
        "method": result.method,
        "steps": len(result.steps),
        "max_newton_iterations": int(result.newton_iterations.max(initial=0)),
        "max_conservation_error": result.max_conservation_error,
        "final_cumulative": dict(zip(("gas_mscf", "oil_stb", "water_stb"),
                                     result.report.cumulative[-1].tolist())),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_upscale(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    problem = runner.build_problem(cfg)
    tables = hom.build_effective_tables(problem.grid, problem.perm, problem.porosity,
                                        problem.rock_index, problem.rocks, cfg.method.table_samples)
    hom.write_tables(tables, out / "effective_tables.txt")
    for t in tables:
        kxx, kyy = np.diag(t.permeability)
        print(f"block {t.block}: porosity {t.porosity:.4f} k_xx {kxx:.4g} k_yy {kyy:.4g}")
    return 0


def cmd_basis(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    problem = runner.build_problem(cfg)
    bases = runner.build_bases(problem, cfg)
    gm.write_bases(bases, out / "bases.txt")
    for eid, b in sorted(bases.items()):
        d = gm.spectral_diagnostics(b)
        print(f"edge {eid}: retained {b.n_keep}/{b.eigenvalues.size} "
              f"lambda_min {b.eigenvalues[0]:.4g} orthonormality {d['orthonormality']:.1e} "
              f"residual {d['residual']:.1e}")
    return 0


def cmd_compare(args) -> int:
    if args.reports:
        if len(args.reports) != 2:
            raise ConfigurationError("compare takes exactly two production CSV files")
        a, b = (ProductionReport.read_csv(p) for p in args.reports)
        metrics = {"production": compare_reports(a, b)}
    else:
        cfg = _config(args)
        out = _out(cfg)
        problem = runner.build_problem(cfg)
        result = runner.simulate(cfg, problem, output_dir=out / cfg.method.name)
        ref = runner.simulate(cfg.replace("method", name=args.reference), problem,
                              output_dir=out / args.reference)
        metrics = {"production": compare_reports(result.report, ref.report),
                   "water_saturation_l2": {str(t): v for t, v in
                                           saturation_errors(result.snapshots, ref.snapshots).items()}}
        (out / "comparison.json").write_text(json.dumps(metrics, indent=2))
    print(json.dumps(metrics, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msblackoil", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="configuration file (defaults describe the desk benchmark)")
    common.add_argument("-o", "--output-dir", help="output directory")
    common.add_argument("--seed", type=int, help="seed for randomized snapshots")
    common.add_argument("-m", "--method", choices=METHODS, help="override the configured method")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run a simulation").set_defaults(func=cmd_run)
    sub.add_parser("upscale", parents=[common],
                   help="compute effective property tables only").set_defaults(func=cmd_upscale)
    sub.add_parser("basis", parents=[common],
                   help="compute multiscale bases only").set_defaults(func=cmd_basis)
    p = sub.add_parser("compare", parents=[common],
                       help="compare two production CSVs, or a run against a reference run")
    p.add_argument("reports", nargs="*", help="two production CSV files")
    p.add_argument("--reference", choices=METHODS, default="fine", help="reference method")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BlackOilError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
