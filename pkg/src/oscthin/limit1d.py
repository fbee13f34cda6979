"""Homogenized 1-D Neumann problem on the unit interval.

P1 elements on a uniform grid with the same damped Newton driver and the
same flux regularization as the 2-D solves, so the quantities being
compared across the pipeline share one discretization convention.  The
forcing arrives as nodal samples (it comes out of fiber quadrature, not a
closed form) and is treated as its piecewise-linear interpolant; with the
two-point Gauss rule per element the load integrals are then exact.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem, solve

# two-point Gauss rule on the reference element [0, 1]
_GAUSS_T = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GAUSS_W = np.array([0.5, 0.5])


@dataclass(frozen=True)
class Limit1DProblem:
    """Data of the limit problem: coefficient, exponent, forcing samples.

    forcing holds n+1 nodal samples on the uniform grid over [0, 1].
    """

    coeff: float
    p: float
    forcing: np.ndarray
    n: int

    def __post_init__(self):
        if not self.coeff > 0.0:
            raise ValueError(f"coefficient must be positive, got {self.coeff}")
        if not self.p > 1.0:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if self.n < 2:
            raise ValueError(f"need at least 2 elements, got {self.n}")
        forcing = np.ascontiguousarray(self.forcing, dtype=float)
        if forcing.shape != (self.n + 1,):
            raise ValueError(
                f"forcing needs {self.n + 1} samples, got {forcing.shape}")
        object.__setattr__(self, "forcing", forcing)

    @property
    def grid(self):
        return np.linspace(0.0, 1.0, self.n + 1)


class _LimitFunctional:
    """Energy, residual and jacobian of the discrete 1-D problem."""

    def __init__(self, prob):
        self.prob = prob
        self.h = 1.0 / prob.n
        f = prob.forcing
        # forcing at the Gauss points of each element (exact interpolation)
        self.f_gauss = (f[:-1, None] * (1.0 - _GAUSS_T)[None, :]
                        + f[1:, None] * _GAUSS_T[None, :])

    def _gauss_values(self, u):
        return (u[:-1, None] * (1.0 - _GAUSS_T)[None, :]
                + u[1:, None] * _GAUSS_T[None, :])

    def energy(self, u, delta):
        p, q = self.prob.p, self.prob.coeff
        slopes = np.diff(u) / self.h
        flux = self.h * (q / p) * ((delta * delta + slopes * slopes) ** (p / 2.0))
        ug = self._gauss_values(u)
        dens = (delta * delta + ug * ug) ** (p / 2.0) / p - self.f_gauss * ug
        return float(flux.sum() + (self.h * (dens @ _GAUSS_W)).sum())

    def residual(self, u, delta):
        p, q = self.prob.p, self.prob.coeff
        n = self.prob.n
        slopes = np.diff(u) / self.h
        a = q * fem._power_weight(slopes * slopes, p, delta) * slopes
        res = np.zeros(n + 1)
        res[:-1] -= a
        res[1:] += a
        ug = self._gauss_values(u)
        s = fem._power_weight(ug * ug, p, delta) * ug - self.f_gauss
        res[:-1] += self.h * ((s * (1.0 - _GAUSS_T)[None, :]) @ _GAUSS_W)
        res[1:] += self.h * ((s * _GAUSS_T[None, :]) @ _GAUSS_W)
        return res

    def jacobian(self, u, delta):
        p, q = self.prob.p, self.prob.coeff
        if p < 2.0 and delta == 0.0:
            raise ValueError("jacobian with p < 2 requires delta > 0")
        n = self.prob.n
        slopes = np.diff(u) / self.h
        den = delta * delta + slopes * slopes
        ratio = np.divide(p - 2.0, den, out=np.zeros_like(den), where=den > 0.0)
        stiff = (q / self.h) * fem._power_weight(slopes * slopes, p, delta) \
            * (1.0 + ratio * slopes * slopes)
        ug = self._gauss_values(u)
        mden = delta * delta + ug * ug
        mratio = np.divide(p - 2.0, mden, out=np.zeros_like(mden),
                           where=mden > 0.0)
        mprime = fem._power_weight(ug * ug, p, delta) * (1.0 + mratio * ug * ug)
        basis = np.stack([1.0 - _GAUSS_T, _GAUSS_T])
        mass = np.einsum("eg,ag,bg,g->eab", mprime, basis, basis,
                         _GAUSS_W) * self.h

        elems = np.arange(n)
        rows, cols, vals = [], [], []
        for a in range(2):
            for b in range(2):
                sign = 1.0 if a == b else -1.0
                rows.append(elems + a)
                cols.append(elems + b)
                vals.append(sign * stiff + mass[:, a, b])
        jac = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n + 1, n + 1))
        return jac.tocsr()


def solve_homogenized(prob, opts=None):
    """Nodal solution of the limit problem plus solver diagnostics.

    The Neumann conditions are natural, and the zeroth-order term makes the
    problem well posed without constraints.
    """
    opts = opts or solve.SolveOptions()
    functional = _LimitFunctional(prob)
    return solve.newton_solve(functional, np.zeros(prob.n + 1),
                              solve.ConstraintSet(), opts)


def nodal_derivative(values):
    """Recovered derivative samples on the same uniform grid.

    Element slopes averaged at interior nodes, one-sided at the ends;
    second-order accurate at interior nodes for smooth limits.
    """
    values = np.asarray(values, dtype=float)
    n = len(values) - 1
    slopes = np.diff(values) * n
    out = np.empty(n + 1)
    out[0] = slopes[0]
    out[-1] = slopes[-1]
    out[1:-1] = 0.5 * (slopes[:-1] + slopes[1:])
    return out


def scale_invariance_check(prob, c, opts=None):
    """Sanity report around the limit problem's coefficient dependence.

    Confirms that scaling the coefficient by c > 0 moves a non-constant
    solution, while the constant-forcing solution is coefficient
    independent; also reports the self-convergence gap when the grid is
    doubled.
    """
    if not c > 0.0:
        raise ValueError(f"scaling factor must be positive, got {c}")
    from dataclasses import replace

    base, _ = solve_homogenized(prob, opts)
    scaled, _ = solve_homogenized(replace(prob, coeff=c * prob.coeff), opts)

    ones = np.ones(prob.n + 1)
    const_base, _ = solve_homogenized(replace(prob, forcing=ones), opts)
    const_scaled, _ = solve_homogenized(
        replace(prob, forcing=ones, coeff=c * prob.coeff), opts)

    fine_forcing = np.interp(np.linspace(0.0, 1.0, 2 * prob.n + 1),
                             prob.grid, prob.forcing)
    fine, _ = solve_homogenized(
        replace(prob, forcing=fine_forcing, n=2 * prob.n), opts)

    return {
        "coeff_sensitivity": float(np.abs(base - scaled).max()),
        "constant_deviation": float(
            max(np.abs(const_base - 1.0).max(), np.abs(const_scaled - 1.0).max())),
        "constant_gap": float(np.abs(const_base - const_scaled).max()),
        "refinement_gap": float(np.abs(base - fine[::2]).max()),
    }


def write_solution(values, path):
    """Structured-text export of (abscissa, value) pairs."""
    values = np.asarray(values, dtype=float)
    grid = np.linspace(0.0, 1.0, len(values))
    with open(path, "w") as fh:
        fh.write("x u0\n")
        for x, v in zip(grid, values):
            fh.write(f"{float(x)!r} {float(v)!r}\n")


def read_solution(path):
    """Read a file written by write_solution: header line, then x/value pairs."""
    with open(path) as fh:
        fh.readline()
        rows = [line.split() for line in fh if line.strip()]
    data = np.array(rows, dtype=float)
    return data[:, 0], data[:, 1]
