"""Transition densities of the built-in one-dimensional diffusions.

Four families are provided: free Brownian motion, Brownian motion with
constant drift, Brownian motion reflected at 0, and Brownian motion killed
on leaving an interval (method-of-images Dirichlet kernel).  Each kernel
knows its reference measure (Lebesgue on its state space), its alpha-potential
density in closed form, and how much mass it has lost to the cemetery.

Kernels are frozen dataclasses: immutable after construction, safe to share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .quadrature import (
    DEFAULT_SPEC,
    NumericError,
    QuadratureSpec,
    gauss_panel,
    gauss_panels,
)

_INF = float("inf")
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class DomainError(ValueError):
    """A state lies outside the kernel's state space."""


@dataclass(frozen=True)
class StateSpace:
    """An interval state space with per-endpoint boundary behaviour."""

    kind: str  # "full-line" | "half-line" | "interval"
    lower: float = -_INF
    upper: float = _INF
    lower_boundary: str = "none"  # "none" | "reflecting" | "killing"
    upper_boundary: str = "none"

    def __post_init__(self):
        if self.kind not in ("full-line", "half-line", "interval"):
            raise ValueError(f"unknown state space kind {self.kind!r}")
        if not self.lower < self.upper:
            raise ValueError("state space needs lower < upper")
        n_finite = int(math.isfinite(self.lower)) + int(math.isfinite(self.upper))
        expected = {"full-line": 0, "half-line": 1, "interval": 2}[self.kind]
        if n_finite != expected:
            raise ValueError(f"{self.kind} needs {expected} finite endpoint(s)")
        for end, behaviour in ((self.lower, self.lower_boundary),
                               (self.upper, self.upper_boundary)):
            if not math.isfinite(end) and behaviour != "none":
                raise ValueError("infinite endpoints carry no boundary behaviour")
            if behaviour not in ("none", "reflecting", "killing"):
                raise ValueError(f"unknown boundary behaviour {behaviour!r}")

    def contains(self, x) -> np.ndarray:
        """Membership mask; killing boundaries are excluded (open ends)."""
        x = np.asarray(x, dtype=float)
        lo_ok = x > self.lower if self.lower_boundary == "killing" else x >= self.lower
        hi_ok = x < self.upper if self.upper_boundary == "killing" else x <= self.upper
        return lo_ok & hi_ok

    def clip(self, lo: float, hi: float) -> tuple[float, float]:
        return max(lo, self.lower), min(hi, self.upper)


def _gauss(d: np.ndarray, t) -> np.ndarray:
    return np.exp(-d * d / (2.0 * t)) / np.sqrt(2.0 * np.pi * t)


@dataclass(frozen=True)
class TransitionKernel:
    """Base class; subclasses implement the density/potential formulas."""

    family = "abstract"
    conservative = True
    symmetric = True

    @property
    def space(self) -> StateSpace:
        raise NotImplementedError

    def _check_points(self, *points):
        for p in points:
            arr = np.asarray(p, dtype=float)
            if not np.all(self.space.contains(arr)):
                raise DomainError(
                    f"point outside the {self.family} state space "
                    f"[{self.space.lower}, {self.space.upper}]")

    def density(self, t, x, y) -> np.ndarray:
        """p_t(x, y); broadcasts over array arguments."""
        raise NotImplementedError

    def potential(self, alpha: float, x, y) -> np.ndarray:
        """Closed-form r_alpha(x, y) = int_0^inf e^(-alpha t) p_t(x, y) dt."""
        raise NotImplementedError

    def survival(self, t, x) -> np.ndarray:
        """int p_t(x, y) m(dy); 1 for conservative families."""
        if self.conservative:
            return np.ones_like(np.broadcast_arrays(np.asarray(t, float),
                                                    np.asarray(x, float))[0])
        raise NotImplementedError

    def drift_shift(self, u: float) -> float:
        """Mean displacement over elapsed time u (centres quadrature windows)."""
        return 0.0

    def potential_numeric(self, alpha: float, x: float, y: float,
                          spec: QuadratureSpec = DEFAULT_SPEC) -> tuple[float, float]:
        """Laplace-transform quadrature of the density, with tail estimate.

        Substitutes t = u^2 on the head to remove the 1/sqrt(t) diagonal
        singularity, uses log-spaced panels on the body, truncates where
        e^(-alpha t) falls below spec.tail_tol, and returns (value, error
        estimate) with the analytic Gaussian tail bound included.
        """
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        t_cut = -math.log(spec.tail_tol) / alpha
        t_head = min(1.0, t_cut / 4.0)
        # in u = sqrt(t) the integrand peaks at the scale of |x - y|; a
        # geometric ladder of panels from that scale up keeps the head
        # resolved however close to the diagonal the evaluation sits
        d = abs(float(np.asarray(y)) - float(np.asarray(x)))
        root_head = math.sqrt(t_head)
        cuts = {0.0, root_head}
        step = max(d / 2.0, root_head / 256.0)
        while step < root_head:
            cuts.add(step)
            step *= 3.0
        u_nodes, u_w = gauss_panels(spec.panel_nodes, np.asarray(sorted(cuts)))
        ts = u_nodes ** 2
        head = np.sum(2.0 * u_nodes * u_w * np.exp(-alpha * ts)
                      * self.density(ts, x, y))
        body = 0.0
        edges = np.geomspace(t_head, t_cut, 9)
        for a, b in zip(edges[:-1], edges[1:]):
            tn, tw = gauss_panel(spec.panel_nodes, a, b)
            body += np.sum(tw * np.exp(-alpha * tn) * self.density(tn, x, y))
        tail = math.exp(-alpha * t_cut) / (alpha * math.sqrt(2.0 * math.pi * t_cut))
        value = float(head + body)
        if not math.isfinite(value):
            raise NumericError("Laplace quadrature diverged", residual=value)
        return value, tail + 1e-12 * abs(value)


@dataclass(frozen=True)
class BrownianKernel(TransitionKernel):
    """Standard Brownian motion on the real line."""

    family = "brownian"

    @property
    def space(self) -> StateSpace:
        return StateSpace("full-line")

    def density(self, t, x, y):
        t = np.asarray(t, dtype=float)
        return _gauss(np.asarray(y, float) - np.asarray(x, float), t)

    def potential(self, alpha, x, y):
        root = math.sqrt(2.0 * alpha)
        d = np.abs(np.asarray(y, float) - np.asarray(x, float))
        return np.exp(-root * d) / root


@dataclass(frozen=True)
class DriftBrownianKernel(TransitionKernel):
    """Brownian motion with constant drift b: X_t = x + b t + W_t."""

    drift: float = 0.0
    family = "brownian-drift"
    symmetric = False

    @property
    def space(self) -> StateSpace:
        return StateSpace("full-line")

    def density(self, t, x, y):
        t = np.asarray(t, dtype=float)
        d = np.asarray(y, float) - np.asarray(x, float) - self.drift * t
        return _gauss(d, t)

    def potential(self, alpha, x, y):
        # int_0^inf e^(-alpha t) g_t(d - b t) dt = e^(b d - |d| c) / c,
        # c = sqrt(b^2 + 2 alpha).
        c = math.sqrt(self.drift ** 2 + 2.0 * alpha)
        d = np.asarray(y, float) - np.asarray(x, float)
        return np.exp(self.drift * d - c * np.abs(d)) / c

    def drift_shift(self, u):
        return self.drift * u

    @property
    def dual(self) -> "DriftBrownianKernel":
        return DriftBrownianKernel(drift=-self.drift)


@dataclass(frozen=True)
class ReflectedBrownianKernel(TransitionKernel):
    """Brownian motion reflected at 0, on the half-line [0, inf)."""

    family = "reflected-brownian"

    @property
    def space(self) -> StateSpace:
        return StateSpace("half-line", lower=0.0, lower_boundary="reflecting")

    def density(self, t, x, y):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return _gauss(x - y, t) + _gauss(x + y, t)

    def potential(self, alpha, x, y):
        root = math.sqrt(2.0 * alpha)
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return (np.exp(-root * np.abs(x - y)) + np.exp(-root * (x + y))) / root


@dataclass(frozen=True)
class KilledBrownianKernel(TransitionKernel):
    """Brownian motion killed on first exit from the interval (lower, upper).

    Method-of-images series truncated where the discarded Gaussian tail is
    below series_tol of the leading term; the image count is derived from
    the elapsed time and the interval length.
    """

    lower: float = -1.0
    upper: float = 1.0
    conservative = False

    family = "killed-brownian"

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)
                and self.lower < self.upper):
            raise ValueError("killed-brownian needs a finite interval")

    @property
    def space(self) -> StateSpace:
        return StateSpace("interval", self.lower, self.upper,
                          lower_boundary="killing", upper_boundary="killing")

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def _n_images(self, t_max: float, tol: float = 1e-17) -> int:
        # Gaussian displacement beyond which terms fall below tol.
        reach = math.sqrt(max(2.0 * t_max * math.log(1.0 / tol), 0.0))
        return max(1, int(math.ceil((reach + self.length) / (2.0 * self.length))))

    def density(self, t, x, y):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        n = self._n_images(float(np.max(t)))
        out = np.zeros(np.broadcast_shapes(t.shape, x.shape, y.shape))
        for k in range(-n, n + 1):
            shift = 2.0 * k * self.length
            out += _gauss(y - x + shift, t) - _gauss(y + x - 2.0 * self.lower + shift, t)
        return np.maximum(out, 0.0)

    def potential(self, alpha, x, y):
        root = math.sqrt(2.0 * alpha)
        n = max(1, int(math.ceil(40.0 / (root * 2.0 * self.length))) + 1)
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        out = np.zeros(np.broadcast_shapes(x.shape, y.shape))
        for k in range(-n, n + 1):
            shift = 2.0 * k * self.length
            out += (np.exp(-root * np.abs(y - x + shift))
                    - np.exp(-root * np.abs(y + x - 2.0 * self.lower + shift)))
        return np.maximum(out, 0.0) / root

    def survival(self, t, x):
        """P_x(exit time > t): exact image-series integral via normal cdfs."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, float)
        rt = np.sqrt(t)
        n = self._n_images(float(np.max(t)))
        xs = 2.0 * self.lower - x  # reflected start of the image charge
        out = np.zeros(np.broadcast_shapes(t.shape, x.shape))
        for k in range(-n, n + 1):
            shift = 2.0 * k * self.length
            out += ndtr((self.upper - x + shift) / rt) - ndtr((self.lower - x + shift) / rt)
            out -= ndtr((self.upper - xs + shift) / rt) - ndtr((self.lower - xs + shift) / rt)
        return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class ExtendedKernel:
    """A kernel together with its cemetery mass p_t(x, Delta)."""

    base: TransitionKernel

    def cemetery_mass(self, t, x) -> np.ndarray:
        return np.clip(1.0 - self.base.survival(t, x), 0.0, 1.0)

    def survival_mass(self, t, x) -> np.ndarray:
        return self.base.survival(t, x)


@dataclass(frozen=True)
class DualPair:
    """A kernel and its dual, p_hat_t(x, y) = p_t(y, x)."""

    forward: TransitionKernel
    dual: TransitionKernel


def make_kernel(family: str, **params) -> TransitionKernel:
    """Construct a built-in kernel by family name."""
    if family == "brownian":
        return BrownianKernel()
    if family == "brownian-drift":
        return DriftBrownianKernel(drift=float(params.get("drift", 0.0)))
    if family == "reflected-brownian":
        return ReflectedBrownianKernel()
    if family == "killed-brownian":
        lo, hi = params["domain"]
        return KilledBrownianKernel(lower=float(lo), upper=float(hi))
    raise ValueError(f"unknown kernel family {family!r}")


def drift_pair(b: float) -> DualPair:
    """The built-in dual pair: drift b forward, drift -b backward."""
    return DualPair(DriftBrownianKernel(drift=b), DriftBrownianKernel(drift=-b))


# ---------------------------------------------------------------------------
# spec'd operations


def eval_density(kernel: TransitionKernel, t: float, x: float, y: float) -> float:
    """p_t(x, y) with argument validation."""
    if t <= 0:
        raise ValueError("time must be positive")
    kernel._check_points(x, y)
    return float(kernel.density(t, x, y))


def survival_mass(kernel: ExtendedKernel | TransitionKernel, t: float, x: float) -> float:
    """Mass remaining in the state space at time t, started from x."""
    base = kernel.base if isinstance(kernel, ExtendedKernel) else kernel
    if t <= 0:
        raise ValueError("time must be positive")
    base._check_points(x)
    return float(base.survival(t, x))


def potential_density(kernel: TransitionKernel, alpha: float, x: float, y: float) -> float:
    """r_alpha(x, y) by the closed form of the family."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    kernel._check_points(x, y)
    return float(kernel.potential(alpha, x, y))


def _integration_edges(kernel: TransitionKernel, centre_points, scale: float,
                       spec: QuadratureSpec) -> np.ndarray:
    """Panel edges covering the kernel mass around the given points."""
    pts = sorted(float(p) for p in np.atleast_1d(centre_points))
    reach = spec.pad_sigmas * scale
    lo, hi = kernel.space.clip(pts[0] - reach, pts[-1] + reach)
    inner = [p for p in pts if lo < p < hi]
    edges = [lo] + inner + [hi]
    # subdivide long stretches so each panel resolves the kernel scale
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        k = max(1, int(math.ceil((b - a) / (2.0 * scale))))
        out.extend(np.linspace(a, b, k + 1)[:-1])
    out.append(edges[-1])
    return np.asarray(out)


def check_chapman_kolmogorov(kernel: TransitionKernel, t: float, s: float,
                             pairs=None, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Max residual of int p_t(x,.) p_s(., y) dm = p_{t+s}(x, y) on a lattice."""
    if pairs is None:
        pairs = default_lattice(kernel, t + s, spec)
    worst = 0.0
    for x, y in pairs:
        shift = kernel.drift_shift(t)
        edges = _integration_edges(kernel, [x + shift, y], math.sqrt(t + s), spec)
        z, w = gauss_panels(spec.panel_nodes, edges)
        lhs = float(np.sum(w * kernel.density(t, x, z) * kernel.density(s, z, y)))
        rhs = float(kernel.density(t + s, x, y))
        worst = max(worst, abs(lhs - rhs))
    return worst


def check_symmetry(kernel: TransitionKernel, t: float, pairs=None,
                   spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Max |p_t(x,y) - p_t(y,x)| on the lattice (0 for symmetric families)."""
    if pairs is None:
        pairs = default_lattice(kernel, t, spec)
    worst = 0.0
    for x, y in pairs:
        worst = max(worst, abs(float(kernel.density(t, x, y))
                               - float(kernel.density(t, y, x))))
    return worst


def check_resolvent_equation(kernel: TransitionKernel, alpha: float, beta: float,
                             pairs=None, spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Max residual of the resolvent identity over the state-pair grid.

    r_{a^b}(x,y) = r_{avb}(x,y) + |a-b| int r_alpha(x,z) r_beta(z,y) m(dz).
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("rates must be positive")
    if alpha == beta:
        raise ValueError("resolvent identity is vacuous for alpha == beta")
    if pairs is None:
        pairs = default_lattice(kernel, 1.0, spec)
    scale = 1.0 / math.sqrt(2.0 * min(alpha, beta))
    worst = 0.0
    for x, y in pairs:
        edges = _integration_edges(kernel, [x, y], 6.0 * scale, spec)
        # kinks of r_alpha sit on the diagonal: split panels at x and y
        z, w = gauss_panels(spec.panel_nodes, edges)
        cross = float(np.sum(w * kernel.potential(alpha, x, z)
                             * kernel.potential(beta, z, y)))
        lhs = float(kernel.potential(min(alpha, beta), x, y))
        rhs = float(kernel.potential(max(alpha, beta), x, y)) + abs(alpha - beta) * cross
        worst = max(worst, abs(lhs - rhs))
    return worst


def check_duality(pair: DualPair, t: float, f, g, support: tuple[float, float],
                  spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """Residual of the weak duality identity for test functions f, g.

    Both sides are tensor quadratures of the explicit densities over the
    common compact support.
    """
    lo, hi = support
    x, wx = gauss_panel(2 * spec.panel_nodes, lo, hi)
    y, wy = gauss_panel(2 * spec.panel_nodes, lo, hi)
    fx = np.asarray(f(x), dtype=float)
    gx = np.asarray(g(x), dtype=float)
    fy = np.asarray(f(y), dtype=float)
    gy = np.asarray(g(y), dtype=float)
    p_fwd = pair.forward.density(t, x[:, None], y[None, :])
    p_dual = pair.dual.density(t, x[:, None], y[None, :])
    lhs = float(np.einsum("i,ij,j->", wx * gx, p_fwd, wy * fy))
    rhs = float(np.einsum("i,ij,j->", wx * fx, p_dual, wy * gy))
    return abs(lhs - rhs)


def default_lattice(kernel: TransitionKernel, t: float,
                    spec: QuadratureSpec = DEFAULT_SPEC,
                    centre: float | None = None) -> list[tuple[float, float]]:
    """The (n x n) state-pair lattice spanning +-4 sqrt(t) around a centre."""
    space = kernel.space
    if centre is None:
        if space.kind == "interval":
            centre = 0.5 * (space.lower + space.upper)
        elif space.kind == "half-line":
            centre = space.lower + 2.0 * math.sqrt(t)
        else:
            centre = 0.0
    reach = 4.0 * math.sqrt(t)
    lo, hi = space.clip(centre - reach, centre + reach)
    if space.kind == "interval":
        # keep lattice points strictly inside the killing boundary
        pad = 0.02 * (hi - lo)
        lo, hi = lo + pad, hi - pad
    pts = np.linspace(lo, hi, spec.check_points)
    return [(float(a), float(b)) for a in pts for b in pts]
