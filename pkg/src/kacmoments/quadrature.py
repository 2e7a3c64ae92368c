"""Shared quadrature machinery: node caches, graded grids, uniform cubic splines.

Every time or space integral in the package is governed by a single
:class:`QuadratureSpec`, so tolerances and grid resolutions can be tuned in
one place and echoed into reports.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import roots_legendre


class NumericError(RuntimeError):
    """A quadrature failed to converge; carries the residual estimate."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class QuadratureSpec:
    """Grids, truncation radii and tolerances for all numeric integrals.

    pad_sigmas
        Half-width of tabulation domains, in units of sqrt(t) around the
        relevant points (start point, measure support).
    window_sigmas
        Half-width of the moving spatial-convolution window, in units of
        sqrt(u) for the elapsed time u of one kernel application.
    n_times
        Number of intervals of the remaining-time lattice (uniform in
        sqrt(s), i.e. the graded grid {t * (i/n)^2}).
    n_time_quad
        Gauss-Legendre nodes for each nested time integral on the general
        (absolutely continuous) path.
    n_time_quad_atoms
        Same, for the atom-only fast path where the integrand carries the
        full 1/sqrt(u) diagonal singularity.
    n_space_quad
        Gauss-Legendre nodes per window segment of a spatial convolution.
    n_states
        Number of state-grid points for tabulated recursions.
    panel_nodes
        Gauss-Legendre nodes per panel for generic 1-D integrals
        (potentials, kernel checks).
    series_tol
        Relative truncation threshold for method-of-images series.
    tail_tol
        Target for Laplace-transform tail truncation, e^(-alpha T) < tail_tol.
    check_points
        Points per axis of the lattice used by the kernel self-checks
        (spanning +-4 sqrt(t) around the reference point).
    """

    pad_sigmas: float = 8.0
    window_sigmas: float = 7.0
    n_times: int = 64
    n_time_quad: int = 12
    n_time_quad_atoms: int = 32
    n_space_quad: int = 24
    n_states: int = 141
    panel_nodes: int = 32
    series_tol: float = 1e-15
    tail_tol: float = 1e-14
    check_points: int = 9

    def __post_init__(self):
        if self.n_times < 8 or self.n_states < 9:
            raise ValueError("quadrature grids too coarse to be meaningful")


DEFAULT_SPEC = QuadratureSpec()


@lru_cache(maxsize=64)
def gauss_01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to [0, 1]."""
    x, w = roots_legendre(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_panel(n: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    x, w = gauss_01(n)
    return a + (b - a) * x, (b - a) * w


def gauss_panels(n: int, edges) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated Gauss-Legendre rule over consecutive panels."""
    edges = np.asarray(edges, dtype=float)
    xs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b > a:
            x, w = gauss_panel(n, a, b)
            xs.append(x)
            ws.append(w)
    if not xs:
        return np.empty(0), np.empty(0)
    return np.concatenate(xs), np.concatenate(ws)


@lru_cache(maxsize=64)
def _sin2_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    # u = sin^2(pi phi / 2) grades both endpoints quadratically, which
    # absorbs 1/sqrt(u) diagonal singularities and sqrt(s-u) profile kinks.
    phi, w = gauss_01(n)
    frac = np.sin(0.5 * np.pi * phi) ** 2
    jac = 0.5 * np.pi * np.sin(np.pi * phi)
    return frac, jac * w


def graded_time_rule(n: int, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for int_0^s du with both endpoints graded."""
    frac, w = _sin2_rule(n)
    return s * frac, s * w


def time_lattice(t: float, n: int) -> np.ndarray:
    """The graded remaining-time lattice {t * (i/n)^2}, increasing."""
    return t * (np.arange(n + 1) / n) ** 2


class UniformCubicSpline:
    """Not-a-knot cubic interpolation on a uniform grid.

    The tridiagonal system depends only on the grid, so its LU
    factorisation is computed once and reused across every fit; this is
    what makes per-node refits inside the moment recursion affordable.
    Fitting accepts a batch of profiles (rows); evaluation clamps points
    to the grid range (callers keep real mass away from the edges).
    """

    def __init__(self, lo: float, hi: float, n_intervals: int):
        if not hi > lo:
            raise ValueError("spline range must have positive length")
        self.lo = float(lo)
        self.hi = float(hi)
        self.n = int(n_intervals)
        self.h = (self.hi - self.lo) / self.n
        self.grid = np.linspace(self.lo, self.hi, self.n + 1)
        n = self.n
        A = np.zeros((n + 1, n + 1))
        for i in range(1, n):
            A[i, i - 1:i + 2] = (1.0, 4.0, 1.0)
        A[0, :3] = (1.0, -2.0, 1.0)
        A[n, n - 2:] = (1.0, -2.0, 1.0)
        self._lu = lu_factor(A)

    def fit(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (values, second derivatives) for one or many profiles."""
        v = np.atleast_2d(np.asarray(values, dtype=float))
        rhs = np.zeros_like(v)
        rhs[:, 1:-1] = 6.0 * (v[:, :-2] - 2.0 * v[:, 1:-1] + v[:, 2:]) / self.h ** 2
        sig = lu_solve(self._lu, rhs.T).T
        return v, sig

    def _locate(self, x):
        xi = np.clip(x, self.lo, self.hi)
        idx = np.minimum(((xi - self.lo) / self.h).astype(np.int64), self.n - 1)
        return xi, idx

    def eval_one(self, coef, x):
        """Evaluate a single fitted profile at an array of points."""
        v, sig = coef
        v, sig = v[0], sig[0]
        xi, idx = self._locate(np.asarray(x, dtype=float))
        d = xi - (self.lo + idx * self.h)
        y0, y1 = v[idx], v[idx + 1]
        s0, s1 = sig[idx], sig[idx + 1]
        b = (y1 - y0) / self.h - self.h * (2.0 * s0 + s1) / 6.0
        return y0 + d * (b + d * (0.5 * s0 + d * (s1 - s0) / (6.0 * self.h)))

    def eval_batch(self, coef, x):
        """Evaluate profile i at points x[i, ...]; shapes must align on axis 0."""
        v, sig = coef
        rows = v.shape[0]
        xi, idx = self._locate(np.asarray(x, dtype=float))
        d = xi - (self.lo + idx * self.h)
        flat = idx.reshape(rows, -1)
        take = lambda a, f: np.take_along_axis(a, f, axis=1).reshape(xi.shape)
        y0, y1 = take(v, flat), take(v, flat + 1)
        s0, s1 = take(sig, flat), take(sig, flat + 1)
        b = (y1 - y0) / self.h - self.h * (2.0 * s0 + s1) / 6.0
        return y0 + d * (b + d * (0.5 * s0 + d * (s1 - s0) / (6.0 * self.h)))

    def eval_columns(self, coef, x):
        """Evaluate all profiles at each scalar of x: returns (len(x), rows)."""
        v, sig = coef
        xi, idx = self._locate(np.asarray(x, dtype=float))
        d = (xi - (self.lo + idx * self.h))[:, None]
        y0, y1 = v[:, idx].T, v[:, idx + 1].T
        s0, s1 = sig[:, idx].T, sig[:, idx + 1].T
        b = (y1 - y0) / self.h - self.h * (2.0 * s0 + s1) / 6.0
        return y0 + d * (b + d * (0.5 * s0 + d * (s1 - s0) / (6.0 * self.h)))


class SegmentedCubicSpline:
    """Piecewise cubic interpolation with derivative breaks at fixed knots.

    One not-a-knot cubic per segment, sharing endpoint values, so profiles
    with genuine derivative kinks (iterates of atomic measures kink at the
    atom) are represented exactly instead of being smoothed over.  With a
    single segment this is just UniformCubicSpline.
    """

    def __init__(self, boundaries, n_total: int):
        bounds = sorted(float(b) for b in boundaries)
        if len(bounds) < 2:
            raise ValueError("need at least two boundaries")
        total = bounds[-1] - bounds[0]
        self.segments = []
        self.offsets = []
        grids = []
        off = 0
        for a, b in zip(bounds[:-1], bounds[1:]):
            n = max(8, int(round(n_total * (b - a) / total)))
            seg = UniformCubicSpline(a, b, n)
            self.segments.append(seg)
            self.offsets.append(off)
            grids.append(seg.grid if off == 0 else seg.grid[1:])
            off += n  # interior boundary nodes are shared
        self.grid = np.concatenate(grids)
        self.lo, self.hi = bounds[0], bounds[-1]
        self.inner = np.asarray(bounds[1:-1])
        self.h = max(seg.h for seg in self.segments)

    def fit(self, values):
        v = np.atleast_2d(np.asarray(values, dtype=float))
        out = []
        for seg, off in zip(self.segments, self.offsets):
            out.append(seg.fit(v[:, off:off + seg.n + 1]))
        return out

    def _select(self, per_segment, x):
        xi = np.asarray(x, dtype=float)
        if len(self.segments) == 1:
            return per_segment[0]
        seg_idx = np.searchsorted(self.inner, xi, side="right")
        out = per_segment[0]
        for i in range(1, len(self.segments)):
            out = np.where(seg_idx == i, per_segment[i], out)
        return out

    def eval_one(self, coefs, x):
        return self._select([seg.eval_one(c, x)
                             for seg, c in zip(self.segments, coefs)], x)

    def eval_batch(self, coefs, x):
        return self._select([seg.eval_batch(c, x)
                             for seg, c in zip(self.segments, coefs)], x)
