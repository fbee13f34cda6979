"""Convergence and corrector harness for the oscillating thin domain.

For each oscillation parameter on the ladder the driver solves the thin
problem, builds the limit problem from the fiber-integrated load and the
cell solve, and measures how far the thin solution and its scaled gradient
are from the limit solution and the two-scale corrector.  The corrector is
assembled per partition cell from averages of the limit derivative and the
cell perturbation gradient looked up at the periodically wrapped point.

Flux profiles converge only weakly, so they are compared after a moving
average at the oscillation scale - the discrete stand-in for testing
against dual functions.
"""

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem, geometry, homogenize, limit1d, solve

REPORT_COLUMNS = (
    "eps", "level", "node_count", "err_u", "err_corrector", "err_naive",
    "flux_discrepancy", "newton_iterations", "wall_time", "status",
)


@dataclass(frozen=True)
class PartitionSpec:
    """Partition of (0, 1) into cells of width period/2^level.

    The final cell is the remainder when the width does not divide 1; all
    averages use actual cell widths.
    """

    level: int
    edges: np.ndarray

    @classmethod
    def dyadic(cls, level, period):
        if level < 0:
            raise ValueError(f"partition level must be >= 0, got {level}")
        width = period * 2.0 ** (-level)
        count = int(np.floor(1.0 / width + 1e-12))
        edges = np.arange(count + 1) * width
        if edges.size == 0 or edges[-1] < 1.0 - 1e-12:
            edges = np.append(edges, 1.0)
        else:
            edges[-1] = 1.0
        return cls(level=level, edges=edges)

    def __post_init__(self):
        edges = np.ascontiguousarray(self.edges, dtype=float)
        if edges[0] != 0.0 or edges[-1] != 1.0 or np.any(np.diff(edges) <= 0):
            raise ValueError("partition edges must increase from 0 to 1")
        object.__setattr__(self, "edges", edges)

    @property
    def widths(self):
        return np.diff(self.edges)

    def __len__(self):
        return len(self.edges) - 1


@dataclass(frozen=True)
class LoadSpec:
    """Serializable closed-form load f(x1) or f(x1, x2).

    kinds: "constant" -> value;  "cos_pi" -> value*cos(k*pi*x1);
    "linear" -> offset + value*x1.  Any kind is multiplied by
    (1 + x2_coeff*x2), which covers the x2-dependent cases.
    """

    kind: str
    value: float = 1.0
    k: int = 1
    offset: float = 0.0
    x2_coeff: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "cos_pi", "linear"):
            raise ValueError(f"unknown load kind {self.kind!r}")

    def __call__(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        if self.kind == "constant":
            base = np.full(x1.shape, self.value)
        elif self.kind == "cos_pi":
            base = self.value * np.cos(self.k * np.pi * x1)
        else:
            base = self.offset + self.value * x1
        if self.x2_coeff != 0.0:
            return base * (1.0 + self.x2_coeff * np.asarray(x2, dtype=float))
        return base

    def to_dict(self):
        return {"kind": self.kind, "value": self.value, "k": self.k,
                "offset": self.offset, "x2_coeff": self.x2_coeff}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class StudyConfig:
    """Everything one study run needs; ladders are walked in the given order."""

    profile: geometry.ProfileSpec
    p: float
    load: LoadSpec
    epsilons: tuple
    partition_levels: tuple
    cell_nx: int = 128
    cell_ny: int = 32
    thin_nx_per_period: int = 32
    thin_ny: int = 16
    limit_elements: int = 512
    flux_stations: int = 250
    solver: solve.SolveOptions = field(default_factory=solve.SolveOptions)
    max_workers: int = 1

    def __post_init__(self):
        if not self.p > 1.0:
            raise ValueError(f"p must exceed 1, got {self.p}")
        eps = tuple(float(e) for e in self.epsilons)
        if not eps:
            raise ValueError("the oscillation ladder must not be empty")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("the oscillation ladder must be strictly decreasing")
        levels = tuple(int(v) for v in self.partition_levels)
        if not levels:
            raise ValueError("the partition ladder must not be empty")
        if any(v < 0 for v in levels):
            raise ValueError("partition levels must be nonnegative")
        self.epsilons = eps
        self.partition_levels = levels

    def to_dict(self):
        return {
            "profile": {
                "period": self.profile.period,
                "mean": self.profile.mean,
                "cos_coeffs": list(self.profile.cos_coeffs),
                "sin_coeffs": list(self.profile.sin_coeffs),
            },
            "p": self.p,
            "load": self.load.to_dict(),
            "epsilons": list(self.epsilons),
            "partition_levels": list(self.partition_levels),
            "cell_mesh": {"nx": self.cell_nx, "ny": self.cell_ny},
            "thin_mesh": {"nx_per_period": self.thin_nx_per_period,
                          "ny": self.thin_ny},
            "limit_elements": self.limit_elements,
            "flux_stations": self.flux_stations,
            "solver": {
                "residual_tol": self.solver.residual_tol,
                "max_newton": self.solver.max_newton,
                "continuation_deltas": list(self.solver.continuation_deltas),
                "linear_tol": self.solver.linear_tol,
            },
            "max_workers": self.max_workers,
        }

    @classmethod
    def from_dict(cls, data):
        prof = data["profile"]
        profile = geometry.ProfileSpec(
            period=float(prof["period"]), mean=float(prof["mean"]),
            cos_coeffs=tuple(prof.get("cos_coeffs", ())),
            sin_coeffs=tuple(prof.get("sin_coeffs", ())))
        solver_data = data.get("solver", {})
        solver = solve.SolveOptions(**{
            key: (tuple(val) if key == "continuation_deltas" else val)
            for key, val in solver_data.items()
        })
        cell = data.get("cell_mesh", {})
        thin = data.get("thin_mesh", {})
        return cls(
            profile=profile,
            p=float(data["p"]),
            load=LoadSpec.from_dict(data["load"]),
            epsilons=tuple(data["epsilons"]),
            partition_levels=tuple(data["partition_levels"]),
            cell_nx=int(cell.get("nx", 128)),
            cell_ny=int(cell.get("ny", 32)),
            thin_nx_per_period=int(thin.get("nx_per_period", 32)),
            thin_ny=int(thin.get("ny", 16)),
            limit_elements=int(data.get("limit_elements", 512)),
            flux_stations=int(data.get("flux_stations", 250)),
            solver=solver,
            max_workers=int(data.get("max_workers", 1)),
        )


@dataclass
class StudyRow:
    eps: float
    level: int
    node_count: int
    err_u: float
    err_corrector: float
    err_naive: float
    flux_discrepancy: float
    newton_iterations: int
    wall_time: float
    status: str = "ok"


@dataclass
class StudyReport:
    config: StudyConfig
    rows: list

    def canonical(self):
        """Copy with timings zeroed; the numerically reproducible content."""
        rows = [replace(r, wall_time=0.0) for r in self.rows]
        return StudyReport(config=self.config, rows=rows)


class _ThinFunctional:
    """Anisotropic thin-problem callbacks for the Newton driver."""

    def __init__(self, mesh, p, load):
        self.mesh = mesh
        self.p = p
        self.load = load
        self.eps = mesh.eps

    def _params(self, delta):
        return fem.FluxParams(p=self.p, delta=delta, eps_weight=self.eps)

    def energy(self, u, delta):
        return fem.assemble_energy(self.mesh, u, self._params(delta), self.load)

    def residual(self, u, delta):
        return fem.assemble_residual(self.mesh, u, self._params(delta), self.load)

    def jacobian(self, u, delta):
        return fem.assemble_jacobian(self.mesh, u, self._params(delta))


def solve_thin(mesh, p, load, opts=None):
    """Converged thin-domain solution; the boundary condition is natural."""
    if mesh.eps is None:
        raise ValueError("solve_thin needs a thin mesh (eps attached)")
    opts = opts or solve.SolveOptions()
    functional = _ThinFunctional(mesh, p, load)
    return solve.newton_solve(functional, np.zeros(mesh.num_nodes),
                              solve.ConstraintSet(), opts)


def _cumulative_linear_integral(samples):
    """Antiderivative data of the piecewise-linear interpolant on [0, 1]."""
    n = len(samples) - 1
    h = 1.0 / n
    cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (samples[:-1] + samples[1:]))])

    def integral_to(t):
        t = np.asarray(t, dtype=float)
        k = np.clip((t * n).astype(np.int64), 0, n - 1)
        frac = t - k * h
        slope = (samples[k + 1] - samples[k]) * n
        return cum[k] + samples[k] * frac + 0.5 * slope * frac * frac

    return integral_to


def partition_average(samples, part):
    """Exact mean of the piecewise-linear interpolant over each cell."""
    samples = np.asarray(samples, dtype=float)
    integral_to = _cumulative_linear_integral(samples)
    upper = integral_to(part.edges[1:])
    lower = integral_to(part.edges[:-1])
    return (upper - lower) / part.widths


def corrector_field(cell, du0, part, eps, mesh):
    """Two-scale corrector gradient, one 2-vector per thin-mesh triangle.

    Each triangle (evaluated at its barycenter) gets the partition average
    of the limit derivative times the cell response (1,0) + grad(phi)
    looked up at the periodically wrapped barycenter.
    """
    coeffs = partition_average(du0, part)
    bary = mesh.barycenters()
    cell_idx = np.clip(
        np.searchsorted(part.edges, bary[:, 0], side="right") - 1,
        0, len(part) - 1)
    period = cell.mesh.width
    wrapped_x = np.mod(bary[:, 0] / eps, period)
    wrapped_x = np.minimum(wrapped_x, np.nextafter(period, 0.0))
    wrapped = np.column_stack([wrapped_x, bary[:, 1]])
    tri = geometry.locate_points(cell.mesh, wrapped)
    gphi = fem.element_gradients(cell.mesh, cell.phi)[tri]
    response = gphi + np.array([1.0, 0.0])
    return coeffs[cell_idx][:, None] * response


def error_u(mesh, u_eps, u0, p):
    """L^p distance between the thin solution and the limit solution.

    The limit solution is interpolated onto the thin mesh through the first
    coordinate only (it carries no vertical dependence).
    """
    grid = np.linspace(0.0, 1.0, len(u0))
    u0_nodes = np.interp(mesh.nodes[:, 0], grid, np.asarray(u0, dtype=float))
    return fem.lp_norm(mesh, np.asarray(u_eps) - u0_nodes, p)


def error_corrector(mesh, u_eps, c_field, p, eps):
    """L^p distance between the scaled gradient and a per-triangle field."""
    params = fem.FluxParams(p=p, delta=0.0, eps_weight=eps)
    gs = fem.scaled_gradient(fem.element_gradients(mesh, u_eps), params)
    diff = gs - np.asarray(c_field, dtype=float)
    mag = np.sqrt((diff * diff).sum(axis=1))
    return float((mesh.areas * mag ** p).sum() ** (1.0 / p))


def naive_gradient_field(du0, mesh):
    """The no-oscillation comparison field (du0(x1), 0) per triangle."""
    grid = np.linspace(0.0, 1.0, len(du0))
    bary = mesh.barycenters()
    vals = np.interp(bary[:, 0], grid, np.asarray(du0, dtype=float))
    return np.column_stack([vals, np.zeros_like(vals)])


def flux_stations(n1):
    """Interior station grid used for flux profiles (midpoints of n1 cells)."""
    return (np.arange(n1) + 0.5) / n1


def flux_profile(mesh, u_eps, p, eps, n1):
    """First component of the fiber-integrated flux at each station.

    Integrates |grad_eps u|^(p-2) grad_eps u . (1,0) over each vertical
    fiber of the thin mesh; outside the domain the integrand extends by
    zero, which the fiber clipping realizes automatically.
    """
    params = fem.FluxParams(p=p, delta=0.0, eps_weight=eps)
    gs = fem.scaled_gradient(fem.element_gradients(mesh, u_eps), params)
    a1 = fem.p_flux(gs, params)[:, 0]
    out = np.empty(n1)
    for i, station in enumerate(flux_stations(n1)):
        tri, lengths = geometry.fiber_segments(mesh, axis=0, value=station)
        out[i] = float((lengths * a1[tri]).sum())
    return out


def flux_target(cell, du0, n1):
    """Homogenized flux the profiles converge to, at the same stations."""
    grid = np.linspace(0.0, 1.0, len(du0))
    du_at = np.interp(flux_stations(n1), grid, np.asarray(du0, dtype=float))
    scale = cell.coeff_flux * cell.cell_measure / cell.mesh.width
    return scale * fem.p_flux_scalar(du_at, cell.p)


def box_smooth(values, spacing, window):
    """Moving average with a box kernel, truncated and renormalized at the ends."""
    values = np.asarray(values, dtype=float)
    half = int(round(0.5 * window / spacing))
    if half < 1:
        return values.copy()
    n = len(values)
    cum = np.concatenate([[0.0], np.cumsum(values)])
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) + half + 1, 0, n)
    return (cum[hi] - cum[lo]) / (hi - lo)


def _dual_norm(values, spacing, p):
    """Discrete L^q norm with q = p/(p-1) on a uniform station grid."""
    q = p / (p - 1.0)
    return float((spacing * np.abs(values) ** q).sum() ** (1.0 / q))


def _study_rows_for_eps(config, cell, eps):
    start = time.perf_counter()
    mesh = geometry.build_thin_mesh(config.profile, eps,
                                    config.thin_nx_per_period, config.thin_ny)
    u_eps, diag = solve_thin(mesh, config.p, config.load, config.solver)

    n1 = config.limit_elements
    fhat = fem.integrate_load_fibers(config.load, config.profile, eps, n1 + 1)
    fbar = homogenize.rescale_forcing(fhat, cell.cell_measure,
                                      config.profile.period)
    prob = limit1d.Limit1DProblem(coeff=cell.coeff_flux, p=config.p,
                                  forcing=fbar, n=n1)
    u0, _ = limit1d.solve_homogenized(prob, config.solver)
    du0 = limit1d.nodal_derivative(u0)

    e_u = error_u(mesh, u_eps, u0, config.p)
    e_naive = error_corrector(mesh, u_eps, naive_gradient_field(du0, mesh),
                              config.p, eps)

    profile = flux_profile(mesh, u_eps, config.p, eps, config.flux_stations)
    target = flux_target(cell, du0, config.flux_stations)
    spacing = 1.0 / config.flux_stations
    smoothed = box_smooth(profile, spacing, eps * config.profile.period)
    discrepancy = _dual_norm(smoothed - target, spacing, config.p)

    corrector_errors = []
    for level in config.partition_levels:
        part = PartitionSpec.dyadic(level, config.profile.period)
        c_field = corrector_field(cell, du0, part, eps, mesh)
        corrector_errors.append(
            error_corrector(mesh, u_eps, c_field, config.p, eps))
    wall = time.perf_counter() - start
    return [StudyRow(
        eps=eps, level=level, node_count=mesh.num_nodes,
        err_u=e_u, err_corrector=e_c, err_naive=e_naive,
        flux_discrepancy=discrepancy,
        newton_iterations=diag.total_iterations, wall_time=wall)
        for level, e_c in zip(config.partition_levels, corrector_errors)]


def run_study(config):
    """Walk the oscillation ladder and aggregate the per-row measurements.

    A failing ladder entry is recorded in its rows' status and the study
    continues; rows are merged back in ladder order regardless of how the
    entries were scheduled.
    """
    cell_mesh = geometry.build_cell_mesh(config.profile, config.cell_nx,
                                         config.cell_ny)
    cell = homogenize.solve_cell(cell_mesh, config.p, config.solver)

    def job(eps):
        try:
            return _study_rows_for_eps(config, cell, eps)
        except Exception as exc:  # recorded per-row, study continues
            return [StudyRow(eps=eps, level=level, node_count=0,
                             err_u=np.nan, err_corrector=np.nan,
                             err_naive=np.nan, flux_discrepancy=np.nan,
                             newton_iterations=0, wall_time=0.0,
                             status=f"{type(exc).__name__}: {exc}")
                    for level in config.partition_levels]

    if config.max_workers > 1:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            chunks = list(pool.map(job, config.epsilons))
    else:
        chunks = [job(eps) for eps in config.epsilons]
    rows = [row for chunk in chunks for row in chunk]
    return StudyReport(config=config, rows=rows)


def write_report_csv(report, path):
    """Comma-separated report, one row per (eps, level) with a header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            writer.writerow([repr(row.eps), row.level, row.node_count,
                             repr(row.err_u), repr(row.err_corrector),
                             repr(row.err_naive), repr(row.flux_discrepancy),
                             row.newton_iterations, repr(row.wall_time),
                             row.status])


def read_report_csv(path):
    """Rows of a written report as a list of StudyRow."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        assert tuple(header) == REPORT_COLUMNS, f"unexpected header {header}"
        rows = []
        for rec in reader:
            rows.append(StudyRow(
                eps=float(rec[0]), level=int(rec[1]), node_count=int(rec[2]),
                err_u=float(rec[3]), err_corrector=float(rec[4]),
                err_naive=float(rec[5]), flux_discrepancy=float(rec[6]),
                newton_iterations=int(rec[7]), wall_time=float(rec[8]),
                status=rec[9]))
    return rows


def write_report_json(report, path):
    """Structured-object report mirroring the config plus all row fields."""
    payload = {
        "config": report.config.to_dict(),
        "rows": [vars(row) for row in report.rows],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report_json(path):
    with open(path) as fh:
        payload = json.load(fh)
    config = StudyConfig.from_dict(payload["config"])
    rows = [StudyRow(**row) for row in payload["rows"]]
    return StudyReport(config=config, rows=rows)


def format_report(report):
    """Report as CSV text (handy for stdout)."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(REPORT_COLUMNS)
    for row in report.rows:
        writer.writerow([repr(row.eps), row.level, row.node_count,
                         repr(row.err_u), repr(row.err_corrector),
                         repr(row.err_naive), repr(row.flux_discrepancy),
                         row.newton_iterations, repr(row.wall_time), row.status])
    return buf.getvalue()
