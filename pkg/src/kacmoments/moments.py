"""The moment engine: nested time-space quadrature behind every formula.

Everything reduces to one primitive, the step

    (K_mu g)(x, t) = int_0^t int p_s(x, y) g(y, t - s) mu(dy) ds,

iterated k times.  Intermediate iterates are tabulated on a state grid
crossed with a remaining-time lattice graded like sqrt(s), and interpolated
with cubic splines in sqrt(s) and in the state.  Chains whose measures are
purely atomic collapse to nested 1-D time quadratures and skip the state
grid entirely.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import permutations
from typing import Callable

import numpy as np

from .kernels import (
    BrownianKernel,
    DomainError,
    ExtendedKernel,
    KilledBrownianKernel,
    TransitionKernel,
)
from .measures import KatoReport, RevuzMeasure
from .quadrature import (
    DEFAULT_SPEC,
    NumericError,
    QuadratureSpec,
    SegmentedCubicSpline,
    UniformCubicSpline,
    gauss_01,
    graded_time_rule,
    time_lattice,
)

_INF = float("inf")


@dataclass(frozen=True)
class Terminal:
    """A terminal reward f on the state space plus its cemetery value."""

    kind: str = "constant"  # "constant" | "indicator" | "identity" | "callable"
    params: tuple = (1.0,)
    cemetery: float = 1.0
    fn: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "indicator", "identity", "callable"):
            raise ValueError(f"unknown terminal kind {self.kind!r}")
        if self.cemetery < 0:
            raise ValueError("cemetery value must be nonnegative")
        if self.kind == "callable" and self.fn is None:
            raise ValueError("callable terminal needs fn")

    @classmethod
    def one(cls) -> "Terminal":
        return cls("constant", (1.0,), 1.0)

    @classmethod
    def constant(cls, value: float, cemetery: float | None = None) -> "Terminal":
        return cls("constant", (float(value),),
                   float(value) if cemetery is None else float(cemetery))

    @classmethod
    def indicator(cls, lo: float, hi: float, inside: float = 1.0,
                  cemetery: float = 0.0) -> "Terminal":
        return cls("indicator", (float(lo), float(hi), float(inside)), cemetery)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "constant":
            return np.full_like(x, self.params[0])
        if self.kind == "indicator":
            lo, hi, inside = self.params
            return np.where((x >= lo) & (x <= hi), inside, 0.0)
        if self.kind == "identity":
            return x
        return np.asarray(self.fn(x), dtype=float)

    @property
    def edges(self) -> tuple[float, ...]:
        if self.kind == "indicator":
            return tuple(e for e in self.params[:2] if math.isfinite(e))
        return ()

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"


@dataclass(frozen=True)
class MomentRequest:
    """One moment evaluation: kernel, ordered measures, start, horizon, mode."""

    kernel: TransitionKernel
    measures: tuple[RevuzMeasure, ...]
    start: float
    horizon: float
    order_mode: str = "ordered"  # "ordered" | "permutation-sum" | "identical-power"
    terminal: Terminal | None = None

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if not self.measures:
            raise ValueError("at least one measure is required")
        if self.order_mode not in ("ordered", "permutation-sum", "identical-power"):
            raise ValueError(f"unknown order mode {self.order_mode!r}")
        if self.order_mode == "identical-power":
            first = self.measures[0]
            if any(m != first for m in self.measures[1:]):
                raise ValueError("identical-power mode requires equal measures")
        if not np.all(self.kernel.space.contains(self.start)):
            raise DomainError("start point outside the state space")

    @property
    def k(self) -> int:
        return len(self.measures)

    @property
    def effective_terminal(self) -> Terminal:
        return self.terminal if self.terminal is not None else Terminal.one()


@dataclass(frozen=True)
class MomentResult:
    """A computed moment with an a-posteriori error estimate."""

    value: float
    error_estimate: float
    grid_profile: tuple | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.value < -1e-12:
            raise NumericError(f"moment came out negative: {self.value}")


@dataclass(frozen=True)
class ExpBoundReport:
    """Exponential-moment bound c1^(1 + t/t_alpha) next to the moment series."""

    alpha: float
    s_alpha: float
    t_alpha: float
    c: float
    c1: float
    t_values: tuple[float, ...]
    bounds: tuple[float, ...]
    series: tuple[float, ...]
    tails: tuple[float, ...]

    def bound(self, t: float) -> float:
        return self.c1 ** (1.0 + t / self.t_alpha)


def problem_key(kernel: TransitionKernel, measures, x: float, t: float,
                mode: str, terminal: Terminal | None = None,
                extra: tuple = ()) -> str:
    """A stable digest identifying one moment problem, for cross-checks."""
    parts = (repr(kernel), tuple(repr(m) for m in measures), float(x), float(t),
             mode, repr(terminal), extra)
    return hashlib.sha1(repr(parts).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# tabulation machinery


def _chain_domain(kernel: TransitionKernel, measures, x: float, t: float,
                  terminal: Terminal, spec: QuadratureSpec):
    """Padded hull of the start point and every measure's mass."""
    pts = [float(x)]
    for mu in measures:
        pts.extend(float(a) for a in mu.atom_locations)
        if mu.density is not None:
            lo, hi = mu.support
            if math.isfinite(lo):
                pts.append(lo)
            if math.isfinite(hi):
                pts.append(hi)
    pts.extend(terminal.edges)
    pad = spec.pad_sigmas * math.sqrt(t) + abs(kernel.drift_shift(t))
    lo, hi = kernel.space.clip(min(pts) - pad, max(pts) + pad)
    atoms = tuple(sorted({float(a) for mu in measures for a in mu.atom_locations}))
    return lo, hi, atoms


class _Tables:
    """Tabulated chain iterates on (extra points + state grid) x time lattice."""

    __slots__ = ("grid", "extra")

    def __init__(self, grid, extra):
        self.grid = grid    # (n_s+1, n_y) or None on the atom-only path
        self.extra = extra  # (n_s+1, n_extra)


class _ChainBuilder:
    """Builds and caches chain iterates for one (kernel, horizon, domain).

    Tables are keyed by the inner suffix of the measure chain, so
    evaluations that share an inner structure (all permutations of a
    measure tuple, successive powers k) reuse each other's work.
    """

    def __init__(self, kernel: TransitionKernel, t: float, lo: float, hi: float,
                 extra_pts: tuple[float, ...], spec: QuadratureSpec):
        self.kernel = kernel
        self.t = float(t)
        self.spec = spec
        self.lo, self.hi = float(lo), float(hi)
        self.extra = np.asarray(extra_pts, dtype=float)
        self.s_lat = time_lattice(self.t, spec.n_times)
        self.w_lat = np.sqrt(self.s_lat)
        self.wspline = UniformCubicSpline(0.0, self.w_lat[-1], spec.n_times)
        # spline segments break at atom locations: iterates kink there
        bounds = [self.lo, *(a for a in self.extra if self.lo < a < self.hi),
                  self.hi]
        self.yspline = SegmentedCubicSpline(bounds, spec.n_states - 1)
        self.Y = self.yspline.grid
        self.E = np.concatenate([self.Y, self.extra])
        self._tables: dict = {}
        self._window_cache: dict = {}

    # -- window tensors -----------------------------------------------------

    def _windows(self, u: np.ndarray, points: np.ndarray, edges: tuple,
                 support: tuple[float, float], tau: np.ndarray | None = None):
        """Gauss nodes/weights of the moving convolution window.

        Window of half-width window_sigmas * sqrt(u) around each point
        (shifted by the kernel drift), clipped to the tabulation domain and
        the measure support, split at density edges.  When tau is given,
        extra splits bracket every chain atom at the scale sqrt(tau): the
        iterates being integrated concentrate there as the remaining time
        vanishes, and an unsplit Gauss rule cannot resolve that spike.
        Degenerate segments get zero width and drop out automatically.
        """
        spec = self.spec
        gx, gw = gauss_01(spec.n_space_quad)
        half = spec.window_sigmas * np.sqrt(u)
        drift = self.kernel.drift_shift(1.0)  # mean displacement per unit time
        centre = points[None, :] + drift * u[:, None]
        w_lo = np.maximum(centre - half[:, None], max(self.lo, support[0]))
        w_hi = np.minimum(centre + half[:, None], min(self.hi, support[1]))
        w_hi = np.maximum(w_hi, w_lo)
        cuts = [np.full_like(w_lo, e) for e in edges]
        if tau is not None and self.extra.size:
            spike = (spec.window_sigmas * np.sqrt(np.maximum(tau, 0.0)))[:, None]
            for a in self.extra:
                cuts.extend((np.full_like(w_lo, a) - spike,
                             np.full_like(w_lo, a),
                             np.full_like(w_lo, a) + spike))
        if cuts:
            inner = np.sort(np.clip(np.stack(cuts), w_lo, w_hi), axis=0)
            bounds = [w_lo] + list(inner) + [w_hi]
        else:
            bounds = [w_lo, w_hi]
        zs, ws = [], []
        for a, b in zip(bounds[:-1], bounds[1:]):
            span = b - a
            zs.append(a[:, :, None] + span[:, :, None] * gx[None, None, :])
            ws.append(span[:, :, None] * gw[None, None, :])
        return np.concatenate(zs, axis=2), np.concatenate(ws, axis=2)

    def _level_tensors(self, mu: RevuzMeasure):
        """Precomputed kernel*weight tensors for one measure, all lattice rows.

        Density windows are only precomputed when the chain carries no
        atoms; otherwise the spatial rule depends on the remaining time
        (spike splits) and is built row by row in _apply_level.
        """
        key = mu
        if key in self._window_cache:
            return self._window_cache[key]
        spec = self.spec
        frac, fw = graded_time_rule(spec.n_time_quad, 1.0)
        S = np.repeat(self.s_lat[1:], spec.n_time_quad)
        U = np.maximum((self.s_lat[1:, None] * frac[None, :]).ravel(), 1e-300)
        DU = (self.s_lat[1:, None] * fw[None, :]).ravel()
        TAU = np.maximum(S - U, 0.0)
        entry = {"U": U, "DU": DU, "TAU": TAU}
        if mu.density is not None and self.extra.size == 0:
            Z, W = self._windows(U, self.E, mu.density.edges, mu.support)
            P = self.kernel.density(U[:, None, None], self.E[None, :, None], Z)
            entry["Z"] = Z
            entry["PW"] = P * W
        if mu.atoms:
            locs = mu.atom_locations
            PA = self.kernel.density(U[:, None, None], self.E[None, :, None],
                                     locs[None, None, :])
            entry["PA"] = PA * mu.atom_weights[None, None, :]
            entry["atom_cols"] = np.asarray(
                [int(np.where(self.extra == a)[0][0]) for a in locs])
        # keep at most a couple of these tensors alive; they are large
        if len(self._window_cache) > 2:
            self._window_cache.clear()
        self._window_cache[key] = entry
        return entry

    # -- terminal level -----------------------------------------------------

    def _terminal_table(self, terminal: Terminal) -> _Tables:
        n_s = self.spec.n_times
        if terminal.is_constant:
            c = terminal.params[0]
            if self.kernel.conservative and terminal.cemetery == c:
                vals = np.full((n_s + 1, self.E.size), c)
            else:
                surv = self.kernel.survival(
                    np.maximum(self.s_lat[:, None], 1e-300), self.E[None, :])
                surv[0] = 1.0
                vals = c * surv + terminal.cemetery * (1.0 - surv)
        else:
            vals = np.empty((n_s + 1, self.E.size))
            # s -> 0 limit of E_y[f(X_s)] is the half-sum at jump points
            eps = 1e-9 * (self.hi - self.lo)
            vals[0] = 0.5 * (terminal(self.E - eps) + terminal(self.E + eps))
            sup = (self.lo, self.hi) if terminal.kind != "indicator" else \
                (max(self.lo, terminal.params[0]), min(self.hi, terminal.params[1]))
            for m in range(1, n_s + 1):
                s = np.array([self.s_lat[m]])
                Z, W = self._windows(s, self.E, terminal.edges, (self.lo, self.hi))
                P = self.kernel.density(s[:, None, None], self.E[None, :, None], Z)
                vals[m] = np.sum(P * W * terminal(Z), axis=2)[0]
                if not self.kernel.conservative and terminal.cemetery != 0.0:
                    vals[m] += terminal.cemetery * (
                        1.0 - self.kernel.survival(self.s_lat[m], self.E))
        return _Tables(grid=vals[:, :self.Y.size], extra=vals[:, self.Y.size:])

    def _split_u_rule(self, s: float, n_main: int):
        """Time rule that keeps spike evaluations spatially resolvable.

        The ac integrand at elapsed time u carries the previous iterate at
        remaining time tau = s - u, whose atom spikes have width sqrt(tau);
        below tau_c = (4 h_grid)^2 the state spline cannot represent them.
        So the graded rule covers u in [0, s - tau_c] and the boundary
        layer tau in [0, tau_c] is integrated by Simpson on three nodes,
        where the iterate is either zero (tau = 0) or wide enough.
        """
        tau_c = min(0.5 * s, (4.0 * self.yspline.h) ** 2)
        u_main, du_main = graded_time_rule(n_main, s - tau_c)
        u_layer = np.array([s, s - 0.5 * tau_c, s - tau_c])
        w_layer = np.array([tau_c / 6.0, 4.0 * tau_c / 6.0, tau_c / 6.0])
        u = np.maximum(np.concatenate([u_main, u_layer]), 1e-300)
        du = np.concatenate([du_main, w_layer])
        return u, du, np.maximum(s - u, 0.0)

    def _ac_contribution(self, mu: RevuzMeasure, tco, u, du, tau,
                         points: np.ndarray) -> np.ndarray:
        """Density part of one step at the given u-rule, for several points."""
        g_tau = self.wspline.eval_columns(tco, np.sqrt(tau))
        yco = self.yspline.fit(g_tau[:, :self.Y.size])
        Z, W = self._windows(u, points, mu.density.edges, mu.support, tau=tau)
        PW = self.kernel.density(u[:, None, None], points[None, :, None], Z) * W
        hz = self.yspline.eval_batch(yco, Z) * mu.density(Z)
        return np.einsum("uev,uev,u->e", PW, hz, du, optimize=True)

    # -- one chain level ----------------------------------------------------

    def tables(self, terminal: Terminal, inner: tuple[RevuzMeasure, ...]) -> _Tables:
        """Iterate for the given inner measure suffix (innermost first)."""
        key = (terminal, inner)
        if key in self._tables:
            return self._tables[key]
        if not inner:
            tab = self._terminal_table(terminal)
        else:
            prev = self.tables(terminal, inner[:-1])
            tab = self._apply_level(inner[-1], prev)
        self._tables[key] = tab
        return tab

    def _apply_level(self, mu: RevuzMeasure, prev: _Tables) -> _Tables:
        spec = self.spec
        n_s, n_u = spec.n_times, spec.n_time_quad
        n_y, n_e = self.Y.size, self.E.size
        ten = self._level_tensors(mu)
        prev_all = np.concatenate([prev.grid, prev.extra], axis=1)
        tco = self.wspline.fit(prev_all.T)
        g_tau = self.wspline.eval_columns(tco, np.sqrt(ten["TAU"]))  # (B, n_e)
        out = np.zeros((n_s + 1, n_e))
        for m in range(1, n_s + 1):
            rows = slice((m - 1) * n_u, m * n_u)
            du = ten["DU"][rows]
            acc = np.zeros(n_e)
            if mu.density is not None:
                if "PW" in ten:
                    yco = self.yspline.fit(g_tau[rows, :n_y])
                    hz = self.yspline.eval_batch(yco, ten["Z"][rows])
                    hz *= mu.density(ten["Z"][rows])
                    acc += np.einsum("uev,uev,u->e", ten["PW"][rows], hz, du,
                                     optimize=True)
                else:
                    us, dus, taus = self._split_u_rule(self.s_lat[m], n_u)
                    acc += self._ac_contribution(mu, tco, us, dus, taus, self.E)
            if mu.atoms:
                g_at = g_tau[rows][:, n_y + ten["atom_cols"]]
                acc += np.einsum("uea,ua,u->e", ten["PA"][rows], g_at, du,
                                 optimize=True)
            out[m] = acc
        return _Tables(grid=out[:, :n_y], extra=out[:, n_y:])

    # -- final evaluation at the start point ---------------------------------

    def final(self, terminal: Terminal, measures_outer_first,
              x: float) -> tuple[float, float]:
        """Apply the outermost measure at (x, t); returns (value, error est)."""
        meas = tuple(measures_outer_first)
        inner = tuple(reversed(meas[1:]))
        prev = self.tables(terminal, inner)
        full = self._eval_point(meas[0], prev, x, self.spec.n_time_quad_atoms)
        coarse = self._eval_point(meas[0], prev, x,
                                  max(8, 2 * self.spec.n_time_quad_atoms // 3))
        err = abs(full - coarse) + 1e-9 * abs(full)
        return full, err

    def _eval_point(self, mu: RevuzMeasure, prev: _Tables, x: float,
                    n_u: int) -> float:
        u, du = graded_time_rule(n_u, self.t)
        u = np.maximum(u, 1e-300)
        tau = np.maximum(self.t - u, 0.0)
        prev_all = np.concatenate([prev.grid, prev.extra], axis=1)
        tco = self.wspline.fit(prev_all.T)
        n_y = self.Y.size
        total = 0.0
        pt = np.array([x])
        if mu.density is not None:
            if self.extra.size:
                us, dus, taus = self._split_u_rule(self.t, n_u)
            else:
                us, dus, taus = u, du, tau
            total += float(self._ac_contribution(mu, tco, us, dus, taus, pt)[0])
        if mu.atoms:
            g_tau = self.wspline.eval_columns(tco, np.sqrt(tau))
            locs, wts = mu.atom_locations, mu.atom_weights
            cols = [int(np.where(self.extra == a)[0][0]) for a in locs]
            pa = self.kernel.density(u[:, None], np.full((1,), x)[None, :], locs[None, :])
            total += float(np.sum(du * np.sum(
                pa * wts[None, :] * g_tau[:, [n_y + c for c in cols]], axis=1)))
        return total

    def profile(self, terminal: Terminal, measures_outer_first):
        """The top-level iterate on (state, remaining time) for debugging dumps."""
        inner = tuple(reversed(tuple(measures_outer_first)))
        tab = self.tables(terminal, inner)
        return self.Y.copy(), self.s_lat.copy(), tab.grid.copy()


class _AtomChain:
    """Fast path for purely atomic chains: exact in space, 1-D in time."""

    def __init__(self, kernel: TransitionKernel, t: float,
                 atoms: tuple[float, ...], spec: QuadratureSpec):
        self.kernel = kernel
        self.t = float(t)
        self.spec = spec
        self.locs = np.asarray(atoms)
        self.s_lat = time_lattice(self.t, spec.n_times)
        self.wspline = UniformCubicSpline(0.0, math.sqrt(self.t), spec.n_times)
        self._tables: dict = {}

    def tables(self, terminal: Terminal, inner: tuple[RevuzMeasure, ...]) -> np.ndarray:
        key = (terminal, inner)
        if key in self._tables:
            return self._tables[key]
        if not inner:
            c, cem = terminal.params[0], terminal.cemetery
            if self.kernel.conservative and cem == c:
                tab = np.full((self.spec.n_times + 1, self.locs.size), c)
            else:
                surv = self.kernel.survival(
                    np.maximum(self.s_lat[:, None], 1e-300), self.locs[None, :])
                surv[0] = 1.0
                tab = c * surv + cem * (1.0 - surv)
        else:
            prev = self.tables(terminal, inner[:-1])
            tab = self._apply(inner[-1], prev)
        self._tables[key] = tab
        return tab

    def _apply(self, mu: RevuzMeasure, prev: np.ndarray) -> np.ndarray:
        spec = self.spec
        tco = self.wspline.fit(prev.T)
        out = np.zeros_like(prev)
        locs, wts = mu.atom_locations, mu.atom_weights
        for m in range(1, spec.n_times + 1):
            s = self.s_lat[m]
            u, du = graded_time_rule(spec.n_time_quad_atoms, s)
            u = np.maximum(u, 1e-300)
            g = self.wspline.eval_columns(tco, np.sqrt(np.maximum(s - u, 0.0)))
            cols = [int(np.where(self.locs == a)[0][0]) for a in locs]
            p = self.kernel.density(u[:, None, None], self.locs[None, :, None],
                                    locs[None, None, :])
            out[m] = np.einsum("uea,ua,u->e", p * wts[None, None, :],
                               g[:, cols], du)
        return out

    def final(self, terminal: Terminal, measures_outer_first, x: float):
        meas = tuple(measures_outer_first)
        prev = self.tables(terminal, tuple(reversed(meas[1:])))
        full = self._eval(meas[0], prev, x, self.spec.n_time_quad_atoms)
        coarse = self._eval(meas[0], prev, x,
                            max(8, 2 * self.spec.n_time_quad_atoms // 3))
        return full, abs(full - coarse) + 1e-9 * abs(full)

    def _eval(self, mu: RevuzMeasure, prev: np.ndarray, x: float, n_u: int) -> float:
        u, du = graded_time_rule(n_u, self.t)
        u = np.maximum(u, 1e-300)
        tco = self.wspline.fit(prev.T)
        g = self.wspline.eval_columns(tco, np.sqrt(np.maximum(self.t - u, 0.0)))
        locs, wts = mu.atom_locations, mu.atom_weights
        cols = [int(np.where(self.locs == a)[0][0]) for a in locs]
        p = self.kernel.density(u[:, None], np.full(1, x)[None, :], locs[None, :])
        return float(np.sum(du * np.sum(p * wts[None, :] * g[:, cols], axis=1)))


@lru_cache(maxsize=12)
def _builder(kernel, t, lo, hi, extra, spec) -> _ChainBuilder:
    return _ChainBuilder(kernel, t, lo, hi, extra, spec)


@lru_cache(maxsize=24)
def _atom_builder(kernel, t, atoms, spec) -> _AtomChain:
    return _AtomChain(kernel, t, atoms, spec)


def clear_caches():
    """Drop all tabulation caches (mainly for memory-sensitive callers)."""
    _builder.cache_clear()
    _atom_builder.cache_clear()


def _ordered_value(kernel, measures, terminal, x, t,
                   spec) -> tuple[float, float, object]:
    """Core ordered-product evaluation; returns (value, error, builder)."""
    atomic = all(m.is_atomic for m in measures) and terminal.is_constant
    if atomic:
        atoms = tuple(sorted({float(a) for mu in measures
                              for a in mu.atom_locations}))
        chain = _atom_builder(kernel, float(t), atoms, spec)
    else:
        lo, hi, atoms = _chain_domain(kernel, measures, x, t, terminal, spec)
        chain = _builder(kernel, float(t), lo, hi, atoms, spec)
    value, err = chain.final(terminal, measures, float(x))
    return max(value, 0.0), err, chain


# ---------------------------------------------------------------------------
# public operations


def terminal_expectation(kernel: TransitionKernel | ExtendedKernel,
                         terminal: Terminal, s: float, y: float,
                         spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """E_y[f(X_s)] including the cemetery contribution; s = 0 returns f(y)."""
    base = kernel.base if isinstance(kernel, ExtendedKernel) else kernel
    if s < 0:
        raise ValueError("time must be nonnegative")
    if s == 0:
        return float(terminal(y))
    if terminal.is_constant:
        surv = float(base.survival(s, y))
        return terminal.params[0] * surv + terminal.cemetery * (1.0 - surv)
    lo, hi = base.space.clip(y - 10.0 * math.sqrt(s) - abs(base.drift_shift(s)),
                             y + 10.0 * math.sqrt(s) + abs(base.drift_shift(s)))
    from .quadrature import gauss_panels
    edges = sorted({lo, hi, *(e for e in terminal.edges if lo < e < hi)})
    z, w = gauss_panels(2 * spec.panel_nodes, np.asarray(edges))
    val = float(np.sum(w * base.density(s, y, z) * terminal(z)))
    if not base.conservative:
        val += terminal.cemetery * (1.0 - float(base.survival(s, y)))
    return val


def kac_step(kernel: TransitionKernel, mu: RevuzMeasure, g, x: float, t: float,
             spec: QuadratureSpec = DEFAULT_SPEC) -> float:
    """One explicit step int_0^t int p_s(x,y) g(y, t-s) mu(dy) ds.

    The callable g(y, tau) must be vectorized in its first argument.  This
    is the direct, non-tabulated form of the engine primitive; the moment
    recursion uses the tabulated equivalent internally.
    """
    if t <= 0:
        raise ValueError("horizon must be positive")
    u, du = graded_time_rule(spec.n_time_quad_atoms, t)
    u = np.maximum(u, 1e-300)
    tau = np.maximum(t - u, 0.0)
    total = 0.0
    if mu.atoms:
        locs, wts = mu.atom_locations, mu.atom_weights
        p = kernel.density(u[:, None], np.full(1, float(x))[None, :], locs[None, :])
        gv = np.stack([np.asarray(g(locs, tv), dtype=float) for tv in tau])
        total += float(np.sum(du * np.sum(p * wts[None, :] * gv, axis=1)))
    if mu.density is not None:
        from .quadrature import gauss_panels
        half = spec.window_sigmas * np.sqrt(u)
        centre = x + kernel.drift_shift(1.0) * u
        acc = 0.0
        for i in range(u.size):
            lo = max(mu.support[0], kernel.space.lower, centre[i] - half[i])
            hi = min(mu.support[1], kernel.space.upper, centre[i] + half[i])
            if hi <= lo:
                continue
            edges = sorted({lo, hi, *(e for e in mu.density.edges if lo < e < hi)})
            z, w = gauss_panels(spec.n_space_quad, np.asarray(edges))
            integ = kernel.density(u[i], x, z) * mu.density(z) \
                * np.asarray(g(z, tau[i]), dtype=float)
            acc += du[i] * float(np.sum(w * integ))
        total += acc
    return total


def ordered_product_moment(request: MomentRequest,
                           spec: QuadratureSpec = DEFAULT_SPEC) -> MomentResult:
    """E_x of the time-ordered product integral with terminal reward."""
    terminal = request.effective_terminal
    if terminal.is_constant and terminal.params[0] == 0.0 and terminal.cemetery == 0.0:
        return MomentResult(0.0, 0.0, meta={"shortcut": "zero terminal"})
    value, err, chain = _ordered_value(request.kernel, request.measures, terminal,
                                       request.start, request.horizon, spec)
    profile = None
    if isinstance(chain, _ChainBuilder):
        profile = chain.profile(terminal, request.measures)
    meta = {"problem_key": problem_key(request.kernel, request.measures,
                                       request.start, request.horizon,
                                       "ordered", terminal)}
    return MomentResult(value, err, grid_profile=profile, meta=meta)


def kth_moment(request: MomentRequest,
               spec: QuadratureSpec = DEFAULT_SPEC) -> MomentResult:
    """E_x[A_t^k] = k! times one ordered evaluation with equal measures."""
    if request.order_mode != "identical-power":
        raise ValueError("kth_moment expects identical-power mode")
    terminal = request.effective_terminal
    k = request.k
    value, err, _ = _ordered_value(request.kernel, request.measures, terminal,
                                   request.start, request.horizon, spec)
    fact = math.factorial(k)
    out = fact * value
    if not math.isfinite(out):
        if value > 0:
            log_out = math.lgamma(k + 1) + math.log(value)
            raise NumericError(
                f"k-th moment overflows float range (log value {log_out:.3f})")
        raise NumericError("k-th moment is not finite")
    meta = {"problem_key": problem_key(request.kernel, request.measures,
                                       request.start, request.horizon,
                                       "identical-power", terminal)}
    return MomentResult(out, fact * err, meta=meta)


def permutation_sum_moment(request: MomentRequest,
                           spec: QuadratureSpec = DEFAULT_SPEC,
                           factorial_cap: int = 6) -> MomentResult:
    """Sum of ordered evaluations over all measure orderings.

    Equals E_x[f(X_t) prod_i A_t^(i)].  Shared inner suffixes across the
    permutations are reused from the chain cache, so the k! blowup costs
    far fewer than k! full chains.
    """
    k = request.k
    if k > factorial_cap:
        raise ValueError(f"permutation sum with k={k} exceeds the cap "
                         f"{factorial_cap} ({math.factorial(k)} orderings)")
    terminal = request.effective_terminal
    total, err_total = 0.0, 0.0
    for perm in permutations(request.measures):
        v, e, _ = _ordered_value(request.kernel, perm, terminal,
                                 request.start, request.horizon, spec)
        total += v
        err_total += e
    meta = {"problem_key": problem_key(request.kernel, request.measures,
                                       request.start, request.horizon,
                                       "permutation-sum", terminal)}
    return MomentResult(total, err_total, meta=meta)


def mixed_second_moment(kernel: TransitionKernel, mu_a: RevuzMeasure,
                        mu_b: RevuzMeasure, x: float, t: float,
                        spec: QuadratureSpec = DEFAULT_SPEC) -> MomentResult:
    """E_x[A_t B_t]: the two-ordering sum, i.e. the permutation sum at k=2."""
    req = MomentRequest(kernel, (mu_a, mu_b), x, t, order_mode="permutation-sum")
    return permutation_sum_moment(req, spec)


def first_moment_with_terminal(kernel: TransitionKernel, mu: RevuzMeasure,
                               terminal: Terminal, x: float, t: float,
                               spec: QuadratureSpec = DEFAULT_SPEC) -> MomentResult:
    """E_x[f(X_t) A_t]: the ordered product with a single measure."""
    req = MomentRequest(kernel, (mu,), x, t, order_mode="ordered",
                        terminal=terminal)
    return ordered_product_moment(req, spec)


def moment_sequence(kernel: TransitionKernel, mu: RevuzMeasure, x: float,
                    t: float, k_max: int,
                    spec: QuadratureSpec = DEFAULT_SPEC) -> list[float]:
    """E_x[A_t^k] for k = 1..k_max, sharing one chain of tables."""
    out = []
    for k in range(1, k_max + 1):
        req = MomentRequest(kernel, (mu,) * k, x, t, order_mode="identical-power")
        out.append(kth_moment(req, spec).value)
    return out


def dispatch(request: MomentRequest,
             spec: QuadratureSpec = DEFAULT_SPEC) -> MomentResult:
    """Run the operation selected by the request's order mode."""
    if request.order_mode == "ordered":
        return ordered_product_moment(request, spec)
    if request.order_mode == "identical-power":
        return kth_moment(request, spec)
    return permutation_sum_moment(request, spec)


def restrict_to_domain(request: MomentRequest, domain: tuple[float, float],
                       exterior_value: float | None = None) -> MomentRequest:
    """Rewrite a free-kernel request for the process killed outside domain.

    The kernel becomes the Dirichlet interval kernel, measures are
    restricted to the open interval (atoms on the boundary are domain
    errors), and the terminal's constant value outside the domain is
    routed to the cemetery.
    """
    lo, hi = float(domain[0]), float(domain[1])
    base = request.kernel
    if isinstance(base, KilledBrownianKernel):
        if lo < base.lower or hi > base.upper:
            raise DomainError("killed domain must lie inside the kernel domain")
    elif not isinstance(base, BrownianKernel):
        raise DomainError(
            f"no killed variant available for family {base.family!r}")
    if not (base.space.lower <= lo < hi <= base.space.upper):
        raise DomainError("killed domain must be a sub-interval of the state space")
    kernel = KilledBrownianKernel(lower=lo, upper=hi)
    measures = tuple(mu.restricted(lo, hi) for mu in request.measures)
    terminal = request.effective_terminal
    if terminal.kind == "indicator":
        t_lo, t_hi, _ = terminal.params
        if t_lo < lo or t_hi > hi:
            raise DomainError("indicator terminal must be supported inside "
                              "the killed domain")
    elif terminal.kind not in ("constant",):
        raise DomainError("killed variant needs a terminal that is constant "
                          "outside the domain")
    outside = exterior_value
    if outside is None:
        outside = terminal.cemetery if not terminal.is_constant else terminal.params[0]
    terminal = Terminal(terminal.kind, terminal.params, float(outside), terminal.fn)
    return MomentRequest(kernel, measures, request.start, request.horizon,
                         request.order_mode, terminal)


def killed_variant(request: MomentRequest, domain: tuple[float, float],
                   exterior_value: float | None = None,
                   spec: QuadratureSpec = DEFAULT_SPEC) -> MomentResult:
    """Moments of the functional stopped at the exit time from domain."""
    return dispatch(restrict_to_domain(request, domain, exterior_value), spec)


_S_GRID = tuple(0.05 * i for i in range(1, 61))


def exponential_bound(kernel: TransitionKernel, mu: RevuzMeasure,
                      report: KatoReport, x: float, t_values,
                      k_max: int = 12,
                      spec: QuadratureSpec = DEFAULT_SPEC) -> ExpBoundReport:
    """Exponential-moment bound and the truncated moment series.

    Picks the report's alpha-star (falling back to later ladder rungs when
    the sup there leaves no feasible s), tunes s over a grid refined by
    golden section to minimise the bound at the largest requested time, and
    sums E_x[A_t^k]/k! for k <= k_max with a geometric tail estimate.
    """
    if not report.in_extended_kato or report.alpha_star is None:
        raise NumericError("measure is not in the numeric extended Kato class")
    from .measures import default_kato_grid, potential_profile

    t_values = tuple(float(t) for t in t_values)
    t_max = max(t_values)
    grid = default_kato_grid(kernel, mu)
    ladder = [a for a in report.alphas if a >= report.alpha_star]
    alpha = sup_u = None
    for cand in ladder:
        q = potential_profile(kernel, mu, cand, grid, spec).sup_estimate
        if math.exp(_S_GRID[0]) * q < 1.0:
            alpha, sup_u = cand, q
            break
    if alpha is None:
        raise NumericError("no s_alpha achieves c = e^s * sup U_alpha mu < 1")

    def bound_exponent(s: float) -> float:
        c = math.exp(s) * sup_u
        return (1.0 + t_max * alpha / s) * (-math.log1p(-c))

    feas = [s for s in _S_GRID if math.exp(s) * sup_u < 1.0]
    best = min(feas, key=bound_exponent)
    lo = max(feas[0], best - 0.05)
    hi = min(feas[-1], best + 0.05)
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    for _ in range(40):
        c1p = b - gr * (b - a)
        c2p = a + gr * (b - a)
        if bound_exponent(c1p) < bound_exponent(c2p):
            b = c2p
        else:
            a = c1p
    s_alpha = 0.5 * (a + b)
    c = math.exp(s_alpha) * sup_u
    c1 = 1.0 / (1.0 - c)
    t_alpha = s_alpha / alpha

    series, tails, bounds = [], [], []
    for t in t_values:
        terms = [1.0]
        for k in range(1, k_max + 1):
            req = MomentRequest(kernel, (mu,) * k, x, t,
                                order_mode="identical-power")
            terms.append(kth_moment(req, spec).value / math.factorial(k))
        ratios = [terms[i + 1] / terms[i] for i in range(len(terms) - 3,
                                                         len(terms) - 1)
                  if terms[i] > 0]
        rho = max(ratios) if ratios else 0.0
        if rho >= 1.0:
            raise NumericError(f"moment series ratio {rho:.3f} >= 1 at t={t}",
                               residual=rho)
        tail = terms[-1] * rho / (1.0 - rho) if rho > 0 else 0.0
        series.append(sum(terms))
        tails.append(tail)
        bounds.append(c1 ** (1.0 + t / t_alpha))
    return ExpBoundReport(alpha=alpha, s_alpha=s_alpha, t_alpha=t_alpha, c=c,
                          c1=c1, t_values=t_values, bounds=tuple(bounds),
                          series=tuple(series), tails=tuple(tails))
