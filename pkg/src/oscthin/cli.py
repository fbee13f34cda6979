"""Command-line front end: cell, solve-eps, solve-limit and study.

One JSON config file describes a whole study; each command reads the
sections it needs and ignores the rest.  Outputs are plain structured text
or CSV so they diff cleanly and plot with any external tool.

Exit codes: 0 success, 2 config error, 3 solver non-convergence, 4 I/O
error.  OSCTHIN_THREADS selects the worker count for parallel ladders
(default 1).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import fem, geometry, homogenize, limit1d, solve, study
from .geometry import MeshingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

THREADS_ENV = "OSCTHIN_THREADS"


class ConfigError(ValueError):
    """Raised when the config file cannot be parsed or validated."""


def parse_config(path):
    """Load and validate a study config from a JSON file."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config is not valid JSON at line {exc.lineno}: {exc.msg}") from exc
    try:
        return study.StudyConfig.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"config is missing or mistypes a field: {exc}") from exc
    except ValueError as exc:
        if "p must exceed 1" in str(exc):
            raise ConfigError("p must exceed 1") from exc
        raise ConfigError(str(exc)) from exc


def _apply_overrides(config, args):
    if args.p is not None:
        if not args.p > 1.0:
            raise ConfigError("p must exceed 1")
        config.p = args.p
    if args.resolution is not None:
        r = args.resolution
        if r < 4:
            raise ConfigError("resolution must be at least 4")
        config.cell_nx, config.cell_ny = 4 * r, r
        config.thin_nx_per_period, config.thin_ny = r, max(2, r // 2)
    if args.eps is not None:
        config.epsilons = (args.eps,)
    threads = os.environ.get(THREADS_ENV)
    if threads:
        config.max_workers = max(1, int(threads))
    config.__post_init__()
    return config


def _field_path(out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def write_field(mesh, values, path):
    """Nodal field export: one record per line, index then coordinates then value."""
    with open(path, "w") as fh:
        fh.write("index x1 x2 value\n")
        for k in range(mesh.num_nodes):
            x, y = mesh.nodes[k]
            fh.write(f"{k} {float(x)!r} {float(y)!r} {float(values[k])!r}\n")


def read_field(path):
    """Read a field written by write_field: (nodes array, values array)."""
    with open(path) as fh:
        fh.readline()
        rows = [line.split() for line in fh if line.strip()]
    data = np.array(rows, dtype=float)
    return data[:, 1:3], data[:, 3]


def _pick_eps(config, args):
    if args.eps is not None:
        return args.eps
    return min(config.epsilons)


def _cmd_cell(config, args):
    mesh = geometry.build_cell_mesh(config.profile, config.cell_nx,
                                    config.cell_ny)
    cell = homogenize.solve_cell(mesh, config.p, config.solver)
    sys.stdout.write(homogenize.format_cell_summary(cell))
    if args.out:
        homogenize.write_cell_summary(cell, _field_path(args.out, "cell_summary.txt"))
        geometry.write_mesh(mesh, _field_path(args.out, "cell_mesh.txt"))
        write_field(mesh, cell.phi, _field_path(args.out, "cell_phi.txt"))
    return EXIT_OK


def _cmd_solve_eps(config, args):
    eps = _pick_eps(config, args)
    mesh = geometry.build_thin_mesh(config.profile, eps,
                                    config.thin_nx_per_period, config.thin_ny)
    u, diag = study.solve_thin(mesh, config.p, config.load, config.solver)
    cell_mesh = geometry.build_cell_mesh(config.profile, config.cell_nx,
                                         config.cell_ny)
    cell = homogenize.solve_cell(cell_mesh, config.p, config.solver)

    n1 = config.limit_elements
    fhat = fem.integrate_load_fibers(config.load, config.profile, eps, n1 + 1)
    fbar = homogenize.rescale_forcing(fhat, cell.cell_measure,
                                      config.profile.period)
    u0, _ = limit1d.solve_homogenized(
        limit1d.Limit1DProblem(coeff=cell.coeff_flux, p=config.p,
                               forcing=fbar, n=n1), config.solver)
    du0 = limit1d.nodal_derivative(u0)

    stations = study.flux_stations(config.flux_stations)
    profile = study.flux_profile(mesh, u, config.p, eps, config.flux_stations)
    smoothed = study.box_smooth(profile, 1.0 / config.flux_stations,
                                eps * config.profile.period)
    target = study.flux_target(cell, du0, config.flux_stations)

    out = args.out or "."
    write_field(mesh, u, _field_path(out, "u_eps.txt"))
    with open(_field_path(out, "flux_profile.csv"), "w") as fh:
        fh.write("x1,flux,smoothed,target\n")
        for rec in zip(stations, profile, smoothed, target):
            fh.write(",".join(repr(float(v)) for v in rec) + "\n")
    print(f"solved eps={eps!r}: {mesh.num_nodes} nodes, "
          f"{diag.total_iterations} Newton iterations, "
          f"final residual {diag.final_residual:.3e}")
    return EXIT_OK


def _cmd_solve_limit(config, args):
    eps = _pick_eps(config, args)
    cell_mesh = geometry.build_cell_mesh(config.profile, config.cell_nx,
                                         config.cell_ny)
    cell = homogenize.solve_cell(cell_mesh, config.p, config.solver)
    n1 = config.limit_elements
    fhat = fem.integrate_load_fibers(config.load, config.profile, eps, n1 + 1)
    fbar = homogenize.rescale_forcing(fhat, cell.cell_measure,
                                      config.profile.period)
    u0, diag = limit1d.solve_homogenized(
        limit1d.Limit1DProblem(coeff=cell.coeff_flux, p=config.p,
                               forcing=fbar, n=n1), config.solver)
    out = args.out or "."
    limit1d.write_solution(u0, _field_path(out, "u0.csv"))
    print(f"solved limit problem (coefficient {cell.coeff_flux!r}, "
          f"forcing from eps={eps!r}): {diag.total_iterations} Newton iterations")
    return EXIT_OK


def _cmd_study(config, args):
    report = study.run_study(config)
    out = args.out or "."
    study.write_report_csv(report, _field_path(out, "study.csv"))
    study.write_report_json(report, _field_path(out, "study.json"))
    failed = [row for row in report.rows if row.status != "ok"]
    print(f"study finished: {len(report.rows)} rows "
          f"({len(failed)} failed), written to {out}")
    if failed:
        for row in failed:
            print(f"  eps={row.eps!r} level={row.level}: {row.status}",
                  file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


_COMMANDS = {
    "cell": _cmd_cell,
    "solve-eps": _cmd_solve_eps,
    "solve-limit": _cmd_solve_limit,
    "study": _cmd_study,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="oscthin",
        description="Homogenization pipeline for the thin oscillating domain")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--eps", type=float, default=None,
                        help="override the oscillation parameter")
    parser.add_argument("--p", type=float, default=None,
                        help="override the exponent p")
    parser.add_argument("--resolution", type=int, default=None,
                        help="override mesh resolution (rows of the cell mesh)")
    parser.add_argument("--verbose", action="store_true",
                        help="log solver progress")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config)
        config = _apply_overrides(config, args)
        return _COMMANDS[args.command](config, args)
    except (ConfigError, MeshingError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (solve.SolveError, homogenize.UnconvergedCellError) as exc:
        print(f"solver error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error ({args.command}): {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
