"""Path-simulation oracle for the moment engine.

Gaussian increments are exact in distribution for the free, drifted and
reflected walks; the killed walk detects exits either at grid times or with
a Brownian-bridge correction.  Additive functionals are accumulated online
(no path storage), and results are reproducible bit for bit for a fixed
(seed, stream layout, path count): paths are split into fixed-size chunks,
each chunk owns a counter-based Philox stream spawned from (seed,
stream_id, chunk index), and the reduction runs in chunk order regardless
of how many workers execute the chunks.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import Density

CHUNK = 16384  # paths per stream; part of the reproducibility contract


class ConfigurationError(ValueError):
    """Mismatched engine/oracle configurations refuse to be compared."""


@dataclass(frozen=True)
class PathScheme:
    """How to simulate: family, step size, killing mode, RNG identity."""

    family: str = "brownian"
    step: float = 1e-4
    seed: int = 0
    stream_id: int = 0
    drift: float = 0.0
    domain: tuple[float, float] | None = None
    killing_detection: str = "grid-crossing"  # or "bridge-corrected"

    def __post_init__(self):
        if self.family not in ("brownian", "brownian-drift",
                               "reflected-brownian", "killed-brownian"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.family == "killed-brownian" and self.domain is None:
            raise ValueError("killed-brownian needs a domain")
        if self.killing_detection not in ("grid-crossing", "bridge-corrected"):
            raise ValueError(f"unknown killing detection {self.killing_detection!r}")


@dataclass(frozen=True)
class Occupation:
    """A_t = int_0^t f(X_s) ds, trapezoid on the path grid."""

    weight: Density | Callable = None
    label: str = "occupation"

    def describe(self) -> str:
        if isinstance(self.weight, Density) or self.weight is None:
            return f"occupation({self.weight!r})"
        return f"occupation(<{self.label}>)"


@dataclass(frozen=True)
class LocalTime:
    """Local time at a point, by epsilon-occupation or downcrossing counts."""

    location: float = 0.0
    eps: float = 0.01
    method: str = "epsilon-occupation"  # or "downcrossing"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.method not in ("epsilon-occupation", "downcrossing"):
            raise ValueError(f"unknown local time method {self.method!r}")

    def describe(self) -> str:
        return f"localtime({self.location},{self.eps},{self.method})"


@dataclass(frozen=True)
class Composite:
    """A weighted sum of functionals, one PCAF per (estimator, scale) part."""

    parts: tuple = ()

    def __post_init__(self):
        if not self.parts:
            raise ValueError("composite estimator needs at least one part")

    def describe(self) -> str:
        inner = ",".join(f"{s}*{e.describe()}" for e, s in self.parts)
        return f"composite({inner})"


@dataclass(frozen=True)
class Discounted:
    """int_0^T e^(-alpha s) w(X_s) dA_s against a base functional A."""

    alpha: float
    base: object = None  # Occupation | LocalTime
    weight: Density | Callable | None = None
    label: str = "1"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def describe(self) -> str:
        base = self.base.describe() if self.base is not None else "?"
        return f"discounted({self.alpha},{base},<{self.label}>)"


@dataclass(frozen=True)
class McEstimate:
    """Monte Carlo mean with standard error and reproducibility metadata."""

    mean: float
    std_error: float
    n_paths: int
    config_digest: str
    warnings: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict, compare=False)


def _digest(*parts) -> str:
    return hashlib.sha1(repr(parts).encode()).hexdigest()[:16]


def _weight_values(weight, x: np.ndarray) -> np.ndarray:
    if weight is None:
        return np.ones_like(x)
    return np.asarray(weight(x), dtype=float)


class _Accumulator:
    """Online state for one estimator along one chunk of paths."""

    def __init__(self, estimator, n: int, x0: float, dt: float):
        self.est = estimator
        self.dt = dt
        self.value = np.zeros(n)
        if isinstance(estimator, LocalTime) and estimator.method == "downcrossing":
            self.phase = (np.full(n, x0) >= estimator.location + estimator.eps)
            self.count = np.zeros(n)
        if isinstance(estimator, Discounted):
            self.inner = _Accumulator(estimator.base, n, x0, dt)
        if isinstance(estimator, Composite):
            self.members = [_Accumulator(e, n, x0, dt) for e, _ in estimator.parts]

    def _rate(self, x: np.ndarray) -> np.ndarray:
        est = self.est
        if isinstance(est, Occupation):
            return _weight_values(est.weight, x)
        # epsilon-occupation local time is itself an occupation integral
        return (np.abs(x - est.location) <= est.eps) / (2.0 * est.eps)

    def step(self, x_old, x_new, alive_old, alive_new, t_old, t_new):
        est = self.est
        if isinstance(est, Composite):
            self.value[:] = 0.0
            for member, (_, scale) in zip(self.members, est.parts):
                member.step(x_old, x_new, alive_old, alive_new, t_old, t_new)
                self.value += scale * member.value
            return
        if isinstance(est, Discounted):
            before = self.inner.value.copy()
            self.inner.step(x_old, x_new, alive_old, alive_new, t_old, t_new)
            inc = self.inner.value - before
            disc = 0.5 * (math.exp(-est.alpha * t_old)
                          * _weight_values(est.weight, x_old)
                          + math.exp(-est.alpha * t_new)
                          * _weight_values(est.weight, x_new))
            self.value += inc * disc
            return
        if isinstance(est, LocalTime) and est.method == "downcrossing":
            hi = est.location + est.eps
            crossed = self.phase & (x_new <= est.location) & alive_old
            self.count += crossed
            self.phase = np.where(x_new >= hi, True,
                                  np.where(crossed, False, self.phase))
            # excursions exceeding eps arrive at rate 1/(2 eps) per unit
            # local time, so the downcrossing count needs the factor 2
            self.value = 2.0 * est.eps * self.count
            return
        contrib = 0.5 * self.dt * (self._rate(x_old) * alive_old
                                   + self._rate(x_new) * alive_new)
        self.value += contrib


def _chunk_rng(scheme: PathScheme, chunk_idx: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=scheme.seed,
                                 spawn_key=(scheme.stream_id, chunk_idx))
    return np.random.Generator(np.random.Philox(seq))


def _simulate_chunk(scheme: PathScheme, estimators, x: float, t: float,
                    n: int, chunk_idx: int):
    """Simulate one chunk; returns (accumulators, X_t, alive)."""
    steps = max(1, round(t / scheme.step))
    dt = t / steps
    rng = _chunk_rng(scheme, chunk_idx)
    X = np.full(n, float(x))
    alive = np.ones(n, dtype=bool)
    accs = [_Accumulator(e, n, x, dt) for e in estimators]
    lo, hi = scheme.domain if scheme.domain else (-np.inf, np.inf)
    bridge = scheme.killing_detection == "bridge-corrected"
    killed_family = scheme.family == "killed-brownian"
    for k in range(steps):
        t_old, t_new = k * dt, (k + 1) * dt
        dw = rng.standard_normal(n) * math.sqrt(dt)
        if scheme.family == "brownian-drift":
            dw += scheme.drift * dt
        x_new = X + dw
        if scheme.family == "reflected-brownian":
            x_new = np.abs(x_new)
        alive_new = alive.copy()
        if killed_family:
            inside = (x_new > lo) & (x_new < hi)
            alive_new &= inside
            if bridge:
                u = rng.random(n)
                surv_lo = -np.expm1(np.clip(-2.0 * (X - lo) * (x_new - lo) / dt,
                                            -700, 0.0))
                surv_hi = -np.expm1(np.clip(-2.0 * (hi - X) * (hi - x_new) / dt,
                                            -700, 0.0))
                alive_new &= (u < surv_lo * surv_hi) | ~alive
            x_new = np.where(alive_new, x_new, X)  # freeze at the kill step
        for acc in accs:
            acc.step(X, x_new, alive, alive_new, t_old, t_new)
        X, alive = x_new, alive_new
    return accs, X, alive


def _run(scheme: PathScheme, estimators, x: float, t: float, n_paths: int,
         per_path, workers: int = 1):
    """Common chunked driver; reduction is in chunk order, so results do
    not depend on the worker count."""
    chunks = [(i, min(CHUNK, n_paths - i * CHUNK))
              for i in range((n_paths + CHUNK - 1) // CHUNK)]

    def one(args):
        idx, n = args
        accs, X, alive = _simulate_chunk(scheme, estimators, x, t, n, idx)
        return per_path(accs, X, alive)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, chunks))
    else:
        results = [one(c) for c in chunks]
    return np.concatenate(results)


def estimate_moment(scheme: PathScheme, estimators, x: float, t: float,
                    powers=1, terminal=None, n_paths: int = 10000,
                    workers: int = 1) -> McEstimate:
    """Mean and standard error of f(X_t) * prod_i A_i(t)^(k_i).

    estimators may be a single estimator or a tuple; powers likewise.  The
    terminal callable is evaluated at X_t for surviving paths and replaced
    by terminal_cemetery (meta key, default 0 with a terminal, 1 without)
    for killed ones.
    """
    if n_paths < 2:
        raise ValueError("need at least two paths for a standard error")
    ests = estimators if isinstance(estimators, (tuple, list)) else (estimators,)
    pows = powers if isinstance(powers, (tuple, list)) else (powers,) * len(ests)
    if len(pows) != len(ests):
        raise ValueError("powers must align with estimators")
    terminal_fn, cemetery = None, 1.0
    if terminal is not None:
        terminal_fn, cemetery = terminal, getattr(terminal, "cemetery", 0.0)

    warnings = []
    steps = max(1, round(t / scheme.step))
    if abs(steps * scheme.step - t) > 1e-12 * max(t, 1.0):
        warnings.append(f"step adjusted to t/{steps}")
    for e in ests:
        if isinstance(e, LocalTime) and e.eps <= math.sqrt(t / steps):
            warnings.append(
                f"eps={e.eps} at or below path resolution sqrt(dt)="
                f"{math.sqrt(t / steps):.2e}; local time biased")

    def per_path(accs, X, alive):
        vals = np.ones(X.size)
        for acc, p in zip(accs, pows):
            if p != 0:
                vals = vals * acc.value ** p
        if terminal_fn is not None:
            fx = np.where(alive, np.asarray(terminal_fn(X), dtype=float), cemetery)
            vals = vals * fx
        return vals  # with no terminal, f == 1 including at the cemetery

    values = _run(scheme, ests, x, t, n_paths, per_path, workers)
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n_paths))
    digest = _digest(scheme, tuple(e.describe() for e in ests), x, t,
                     tuple(pows), repr(terminal), n_paths)
    return McEstimate(mean, se, n_paths, digest, tuple(warnings))


def estimate_discounted(scheme: PathScheme, estimator: Discounted, x: float,
                        n_paths: int = 10000, horizon: float | None = None,
                        workers: int = 1) -> McEstimate:
    """Mean of int_0^T e^(-alpha s) w(X_s) dA_s with tail-truncation budget."""
    if horizon is None:
        horizon = -math.log(1e-6) / estimator.alpha
    values = _run(scheme, (estimator,), x, horizon, n_paths,
                  lambda accs, X, alive: accs[0].value.copy(), workers)
    mean = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n_paths))
    trunc = math.exp(-estimator.alpha * horizon) * max(1.0, abs(mean))
    digest = _digest(scheme, estimator.describe(), x, horizon, n_paths)
    return McEstimate(mean, math.hypot(se, trunc), n_paths, digest,
                      meta={"horizon": horizon, "raw_std_error": se})


def check_additivity(scheme: PathScheme, estimator, x: float, t: float,
                     s: float, n_paths: int = 1000) -> float:
    """Max over paths of |A_{t+s} - A_t - A_s restarted at t|.

    The restarted functional is re-accumulated on the same trajectory from
    time t on, so occupation-type estimators must agree to floating-point
    resummation and downcrossing counts to one straddling crossing.
    """
    if t <= 0 or s <= 0:
        raise ValueError("both time arguments must be positive")

    worst = 0.0
    chunks = [(i, min(CHUNK, n_paths - i * CHUNK))
              for i in range((n_paths + CHUNK - 1) // CHUNK)]
    for idx, n in chunks:
        steps = max(1, round((t + s) / scheme.step))
        dt = (t + s) / steps
        split = round(t / dt)
        rng = _chunk_rng(scheme, idx)
        X = np.full(n, float(x))
        alive = np.ones(n, dtype=bool)
        total = _Accumulator(estimator, n, x, dt)
        restart = None
        a_t = None
        lo, hi = scheme.domain if scheme.domain else (-np.inf, np.inf)
        for k in range(steps):
            dw = rng.standard_normal(n) * math.sqrt(dt)
            if scheme.family == "brownian-drift":
                dw += scheme.drift * dt
            x_new = X + dw
            if scheme.family == "reflected-brownian":
                x_new = np.abs(x_new)
            alive_new = alive.copy()
            if scheme.family == "killed-brownian":
                alive_new &= (x_new > lo) & (x_new < hi)
                x_new = np.where(alive_new, x_new, X)
            total.step(X, x_new, alive, alive_new, k * dt, (k + 1) * dt)
            if restart is not None:
                restart.step(X, x_new, alive, alive_new, k * dt, (k + 1) * dt)
            X, alive = x_new, alive_new
            if k + 1 == split:
                a_t = total.value.copy()
                restart = _Accumulator(estimator, n, 0.0, dt)
                if isinstance(estimator, LocalTime) and estimator.method == "downcrossing":
                    restart.phase = X >= estimator.location + estimator.eps
        dev = np.max(np.abs(total.value - a_t - restart.value))
        worst = max(worst, float(dev))
    return worst


@dataclass(frozen=True)
class CompareResult:
    z: float
    verdict: str  # "pass" | "fail"
    engine_value: float
    mc_mean: float
    combined_sigma: float


def compare(engine, mc: McEstimate, bias_budget: float = 0.0,
            z_max: float = 3.0) -> CompareResult:
    """z-score of engine value against the Monte Carlo estimate.

    The denominator combines the MC standard error, the engine's own error
    estimate and an explicit bias budget (local-time epsilon bias, step
    discretisation).  Comparisons between results built from different
    problems are refused when both sides carry a problem key.
    """
    ek = getattr(engine, "meta", {}).get("problem_key")
    mk = mc.meta.get("problem_key")
    if ek is not None and mk is not None and ek != mk:
        raise ConfigurationError("engine and Monte Carlo problem keys differ")
    sigma = math.sqrt(mc.std_error ** 2 + engine.error_estimate ** 2
                      + bias_budget ** 2)
    diff = engine.value - mc.mean
    if sigma == 0.0:
        if diff != 0.0:
            raise ConfigurationError(
                "zero combined uncertainty but unequal values")
        return CompareResult(0.0, "pass", engine.value, mc.mean, 0.0)
    z = diff / sigma
    return CompareResult(float(z), "pass" if abs(z) <= z_max else "fail",
                         engine.value, mc.mean, sigma)


def richardson_bias(scheme: PathScheme, estimators, x: float, t: float,
                    powers=1, terminal=None, n_paths: int = 20000) -> float:
    """Discretisation-bias budget from a half-resolution comparison."""
    coarse = PathScheme(scheme.family, scheme.step * 2.0, scheme.seed,
                        scheme.stream_id + 101, scheme.drift, scheme.domain,
                        scheme.killing_detection)
    fine = PathScheme(scheme.family, scheme.step, scheme.seed,
                      scheme.stream_id + 202, scheme.drift, scheme.domain,
                      scheme.killing_detection)
    a = estimate_moment(fine, estimators, x, t, powers, terminal, n_paths)
    b = estimate_moment(coarse, estimators, x, t, powers, terminal, n_paths)
    return abs(a.mean - b.mean) + a.std_error + b.std_error


def dump_paths(scheme: PathScheme, estimators, x: float, t: float,
               n_paths: int, path: str, stride: int = 1):
    """Write the first paths as CSV: time, state, alive flag, functionals."""
    ests = estimators if isinstance(estimators, (tuple, list)) else (estimators,)
    steps = max(1, round(t / scheme.step))
    dt = t / steps
    rng = _chunk_rng(scheme, 0)
    n = min(n_paths, CHUNK)
    X = np.full(n, float(x))
    alive = np.ones(n, dtype=bool)
    accs = [_Accumulator(e, n, x, dt) for e in ests]
    lo, hi = scheme.domain if scheme.domain else (-np.inf, np.inf)
    with open(path, "w") as fh:
        fh.write("path,time,state,alive," + ",".join(
            f"A{i}" for i in range(len(ests))) + "\n")
        def emit(k):
            for p in range(n):
                row = [str(p), f"{k * dt:.10g}", f"{X[p]:.10g}",
                       "1" if alive[p] else "0"]
                row += [f"{acc.value[p]:.10g}" for acc in accs]
                fh.write(",".join(row) + "\n")
        emit(0)
        for k in range(steps):
            dw = rng.standard_normal(n) * math.sqrt(dt)
            if scheme.family == "brownian-drift":
                dw += scheme.drift * dt
            x_new = X + dw
            if scheme.family == "reflected-brownian":
                x_new = np.abs(x_new)
            alive_new = alive.copy()
            if scheme.family == "killed-brownian":
                alive_new &= (x_new > lo) & (x_new < hi)
                x_new = np.where(alive_new, x_new, X)
            for acc in accs:
                acc.step(X, x_new, alive, alive_new, k * dt, (k + 1) * dt)
            X, alive = x_new, alive_new
            if (k + 1) % stride == 0:
                emit(k + 1)
