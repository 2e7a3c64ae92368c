"""Configuration-driven command line front end.

A single JSON run file declares the kernel, named measures, a task list and
the Monte Carlo settings; subcommands execute task subsets and emit a
report whose rows echo every number needed to reproduce them.  Exit status
is 0 when no task failed, 1 on task failures, 2 on configuration errors,
3 on I/O errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

from . import __version__
from .kernels import (
    DomainError,
    DualPair,
    check_chapman_kolmogorov,
    check_duality,
    check_resolvent_equation,
    check_symmetry,
    make_kernel,
)
from .measures import Density, RevuzMeasure, kato_classify
from .moments import (
    MomentRequest,
    Terminal,
    dispatch,
    exponential_bound,
    killed_variant,
    problem_key,
    restrict_to_domain,
)
from .montecarlo import (
    Composite,
    LocalTime,
    Occupation,
    PathScheme,
    compare,
    estimate_moment,
)
from .quadrature import NumericError

SCHEMA_VERSION = 1
CSV_COLUMNS = ("task", "op", "engine_value", "engine_error", "mc_mean",
               "mc_std_error", "z", "verdict", "wall_time_s", "note")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


def _find_line(raw: str, needle: str) -> int | None:
    idx = raw.find(f'"{needle}"')
    if idx < 0:
        idx = raw.find(needle)
    if idx < 0:
        return None
    return raw.count("\n", 0, idx) + 1


@dataclass
class RunConfig:
    raw: dict
    text: str
    kernel: object
    measures: dict
    tasks: list
    mc: dict
    output: dict

    @property
    def digest(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _support_bounds(pair) -> tuple[float, float]:
    lo, hi = pair
    return (-math.inf if lo is None else float(lo),
            math.inf if hi is None else float(hi))


def _build_density(block: dict, raw: str) -> tuple[Density | None, tuple]:
    kind = block.get("kind")
    support = _support_bounds(block.get("support", (None, None)))
    if kind == "constant":
        return Density("constant", (float(block["level"]),)), support
    if kind == "indicator":
        lo, hi = float(block["lo"]), float(block["hi"])
        dens = Density("indicator", (lo, hi, float(block.get("level", 1.0))))
        if not math.isfinite(support[0]):
            support = (lo, hi)
        return dens, support
    if kind == "gauss":
        c, w = float(block["centre"]), float(block["width"])
        dens = Density("gauss", (c, w, float(block.get("weight", 1.0))))
        if not math.isfinite(support[0]):
            support = (c - 10 * w, c + 10 * w)
        return dens, support
    raise ConfigError(f"unknown density kind {kind!r}", _find_line(raw, str(kind)))


def _build_measure(name: str, block: dict, raw: str) -> RevuzMeasure:
    density, support = (None, None)
    if "density" in block:
        density, support = _build_density(block["density"], raw)
    if "support" in block:
        support = _support_bounds(block["support"])
    atoms = tuple((float(a), float(w)) for a, w in block.get("atoms", ()))
    if density is None and not atoms:
        raise ConfigError(f"measure {name!r} is empty", _find_line(raw, name))
    if support is None:
        locs = [a for a, _ in atoms]
        support = (min(locs) - 1.0, max(locs) + 1.0)
    try:
        return RevuzMeasure(density, atoms, support)
    except (ValueError, DomainError) as exc:
        raise ConfigError(f"measure {name!r}: {exc}", _find_line(raw, name))


def _build_terminal(block: dict | None) -> Terminal | None:
    if block is None:
        return None
    kind = block.get("kind", "constant")
    if kind == "constant":
        return Terminal.constant(float(block.get("value", 1.0)),
                                 block.get("cemetery"))
    if kind == "indicator":
        return Terminal.indicator(float(block.get("lo", -math.inf)),
                                  float(block.get("hi", math.inf)),
                                  float(block.get("inside", 1.0)),
                                  float(block.get("cemetery", 0.0)))
    raise ConfigError(f"unknown terminal kind {kind!r}")


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise IOError(f"cannot read configuration: {exc}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno)
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {raw.get('schema')!r}"
                          f" (expected {SCHEMA_VERSION})",
                          _find_line(text, "schema"))
    kblock = raw.get("kernel")
    if not isinstance(kblock, dict) or "family" not in kblock:
        raise ConfigError("kernel block with a family is required",
                          _find_line(text, "kernel"))
    try:
        kernel = make_kernel(kblock["family"], drift=kblock.get("drift", 0.0),
                             domain=kblock.get("domain", (-1.0, 1.0)))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"kernel: {exc}", _find_line(text, str(kblock["family"])))
    measures = {name: _build_measure(name, block, text)
                for name, block in raw.get("measures", {}).items()}
    tasks = raw.get("tasks", [])
    if not isinstance(tasks, list):
        raise ConfigError("tasks must be a list", _find_line(text, "tasks"))
    seen = set()
    for task in tasks:
        tid = task.get("id")
        if not tid or tid in seen:
            raise ConfigError(f"task id {tid!r} missing or duplicated",
                              _find_line(text, str(tid)))
        seen.add(tid)
        for name in _task_measure_names(task):
            if name not in measures:
                raise ConfigError(f"unknown measure {name!r}",
                                  _find_line(text, name))
    return RunConfig(raw=raw, text=text, kernel=kernel, measures=measures,
                     tasks=tasks, mc=raw.get("mc", {}), output=raw.get("output", {}))


def _task_measure_names(task: dict) -> list[str]:
    names = []
    if "measure" in task:
        names.append(task["measure"])
    names.extend(task.get("measures", ()))
    return names


@dataclass
class Row:
    task: str
    op: str
    engine_value: float = math.nan
    engine_error: float = math.nan
    mc_mean: float = math.nan
    mc_std_error: float = math.nan
    z: float = math.nan
    verdict: str = "n/a"
    wall_time_s: float = 0.0
    note: str = ""
    detail: dict = field(default_factory=dict)


def _measure_estimator(mu: RevuzMeasure, eps: float):
    """Pathwise realization of the PCAF with Revuz measure mu."""
    parts = []
    for a, w in mu.atoms:
        parts.append((LocalTime(location=a, eps=eps), w))
    if mu.density is not None:
        parts.append((Occupation(weight=mu.density), 1.0))
    if len(parts) == 1 and parts[0][1] == 1.0:
        return parts[0][0]
    return Composite(parts=tuple(parts))


def _task_requests(cfg: RunConfig, task: dict):
    op = task["op"]
    x = float(task.get("x", 0.0))
    t = float(task.get("t", 1.0))
    names = _task_measure_names(task)
    k = int(task.get("k", len(names) if len(names) > 1 else 1))
    mode = task.get("mode")
    if mode is None:
        mode = "identical-power" if len(names) <= 1 else "permutation-sum"
    if len(names) == 1 and mode == "identical-power":
        measures = (cfg.measures[names[0]],) * k
    else:
        measures = tuple(cfg.measures[n] for n in names)
    terminal = _build_terminal(task.get("terminal"))
    req = MomentRequest(cfg.kernel, measures, x, t, mode, terminal)
    if "killed-domain" in task:
        req = restrict_to_domain(req, tuple(task["killed-domain"]),
                                 task.get("exterior-value"))
    return req


def _run_moment_task(cfg: RunConfig, task: dict, row: Row,
                     with_mc: bool, seed_override, workers: int):
    req = _task_requests(cfg, task)
    result = dispatch(req)
    row.engine_value = result.value
    row.engine_error = result.error_estimate
    if not with_mc:
        return
    if req.order_mode == "ordered" and len(set(req.measures)) > 1:
        raise ConfigError("mc-compare supports identical-power and "
                          "permutation-sum modes only")
    mc_block = dict(cfg.mc)
    mc_block.update(task.get("mc", {}))
    if not mc_block:
        raise ConfigError(f"task {task['id']!r} needs an mc block")
    seed = int(seed_override if seed_override is not None
               else mc_block.get("seed", 0))
    eps = float(mc_block.get("eps", 0.01))
    kernel = req.kernel
    scheme_kwargs = dict(step=float(mc_block.get("dt", 1e-4)), seed=seed)
    if kernel.family == "killed-brownian":
        scheme_kwargs.update(family="killed-brownian",
                             domain=(kernel.lower, kernel.upper),
                             killing_detection=mc_block.get(
                                 "killing", "bridge-corrected"))
    elif kernel.family == "brownian-drift":
        scheme_kwargs.update(family="brownian-drift", drift=kernel.drift)
    else:
        scheme_kwargs.update(family=kernel.family)
    scheme = PathScheme(**scheme_kwargs)
    if req.order_mode == "identical-power":
        ests = (_measure_estimator(req.measures[0], eps),)
        pows = (req.k,)
    else:
        ests = tuple(_measure_estimator(m, eps) for m in req.measures)
        pows = (1,) * len(ests)
    terminal = req.terminal
    mc = estimate_moment(scheme, ests, req.start, req.horizon, pows,
                         terminal, int(mc_block.get("n-paths", 10000)),
                         workers=workers)
    bias = float(mc_block.get("bias-budget", 0.0))
    cmp_res = compare(result, mc, bias_budget=bias)
    row.mc_mean = mc.mean
    row.mc_std_error = mc.std_error
    row.z = cmp_res.z
    row.verdict = cmp_res.verdict
    if mc.warnings:
        row.note = "; ".join(mc.warnings)


def _run_kernel_check(cfg: RunConfig, task: dict, row: Row):
    kernel = cfg.kernel
    tol = float(task.get("tolerance", 1e-6))
    residuals = {}
    for (t, s) in task.get("time-pairs", ((0.5, 0.5), (0.2, 1.0))):
        residuals[f"ck({t},{s})"] = check_chapman_kolmogorov(kernel, t, s)
    if kernel.symmetric:
        residuals["symmetry(1.0)"] = check_symmetry(kernel, 1.0)
    for (a, b) in task.get("alpha-pairs", ((1.0, 2.0), (1.0, 3.0))):
        residuals[f"resolvent({a},{b})"] = check_resolvent_equation(kernel, a, b)
    if kernel.family == "brownian-drift":
        pair = DualPair(kernel, kernel.dual)
        f = Terminal.indicator(0.0, 1.0)
        residuals["duality(1.0)"] = check_duality(pair, 1.0, f, f, (0.0, 1.0))
    worst = max(residuals.values())
    row.engine_value = worst
    row.engine_error = 0.0
    row.verdict = "pass" if worst < tol else "fail"
    row.detail = {k: float(v) for k, v in residuals.items()}


def _run_kato(cfg: RunConfig, task: dict, row: Row):
    mu = cfg.measures[task["measure"]]
    kwargs = {}
    if "alphas" in task:
        kwargs["alphas"] = tuple(float(a) for a in task["alphas"])
    report = kato_classify(cfg.kernel, mu, **kwargs)
    row.engine_value = report.alpha_star if report.alpha_star is not None else math.nan
    row.engine_error = report.margin
    row.verdict = "pass" if report.in_extended_kato else "fail"
    row.detail = {"in_extended_kato": report.in_extended_kato,
                  "s00_verdict": report.s00_verdict,
                  "sup_curve": dict(zip(map(str, report.alphas),
                                        report.sup_curve))}


def _run_exp_bound(cfg: RunConfig, task: dict, row: Row):
    mu = cfg.measures[task["measure"]]
    x = float(task.get("x", 0.0))
    t_values = tuple(float(t) for t in task.get("t-values", (1.0,)))
    report = kato_classify(cfg.kernel, mu)
    bound = exponential_bound(cfg.kernel, mu, report, x, t_values,
                              k_max=int(task.get("series-cap", 12)))
    row.engine_value = bound.series[-1]
    row.engine_error = bound.tails[-1]
    below = all(s <= b + tail for s, b, tail
                in zip(bound.series, bound.bounds, bound.tails))
    row.verdict = "pass" if below else "fail"
    row.detail = {"alpha": bound.alpha, "s_alpha": bound.s_alpha,
                  "t_alpha": bound.t_alpha, "c": bound.c, "c1": bound.c1,
                  "bounds": list(bound.bounds), "series": list(bound.series)}


def execute_task(cfg: RunConfig, task: dict, seed_override, workers: int) -> Row:
    row = Row(task=task.get("id", "?"), op=task.get("op", "?"))
    start = time.perf_counter()
    try:
        op = task["op"]
        if op == "kernel-check":
            _run_kernel_check(cfg, task, row)
        elif op == "kato":
            _run_kato(cfg, task, row)
        elif op == "exp-bound":
            _run_exp_bound(cfg, task, row)
        elif op == "moment":
            _run_moment_task(cfg, task, row, task.get("mc-compare", False),
                             seed_override, workers)
        elif op == "mc-compare":
            _run_moment_task(cfg, task, row, True, seed_override, workers)
        else:
            raise ConfigError(f"unknown op {op!r}")
    except (NumericError, DomainError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        row.verdict = "fail"
        row.note = f"{type(exc).__name__}: {exc}"
    row.wall_time_s = time.perf_counter() - start
    return row


def run_tasks(cfg: RunConfig, task_filter=None, seed_override=None,
              workers: int = 1) -> list[Row]:
    tasks = [t for t in cfg.tasks
             if task_filter is None or t.get("id") == task_filter]
    if task_filter is not None and not tasks:
        raise ConfigError(f"no task with id {task_filter!r}")
    return [execute_task(cfg, t, seed_override, workers) for t in tasks]


def _fmt(x: float) -> str:
    return "" if (isinstance(x, float) and math.isnan(x)) else f"{x:.17g}"


def write_report(rows: list[Row], cfg: RunConfig, path: str | None,
                 fmt: str) -> str:
    header = {"tool": "kacmoments", "version": __version__,
              "config_digest": cfg.digest}
    if fmt == "json":
        payload = {
            "header": header,
            "config": cfg.raw,
            "rows": [{
                "task": r.task, "op": r.op,
                "engine_value": r.engine_value, "engine_error": r.engine_error,
                "mc_mean": r.mc_mean, "mc_std_error": r.mc_std_error,
                "z": r.z, "verdict": r.verdict,
                "wall_time_s": r.wall_time_s, "note": r.note,
                "detail": r.detail,
            } for r in rows],
        }
        def clean(o):
            if isinstance(o, float) and math.isnan(o):
                return None
            if isinstance(o, dict):
                return {k: clean(v) for k, v in o.items()}
            if isinstance(o, list):
                return [clean(v) for v in o]
            return o
        text = json.dumps(clean(payload), indent=2)
    elif fmt == "csv":
        lines = [f"# tool=kacmoments version={__version__} "
                 f"config_digest={cfg.digest}",
                 ",".join(CSV_COLUMNS)]
        for r in rows:
            lines.append(",".join([
                r.task, r.op, _fmt(r.engine_value), _fmt(r.engine_error),
                _fmt(r.mc_mean), _fmt(r.mc_std_error), _fmt(r.z),
                r.verdict, f"{r.wall_time_s:.17g}",
                r.note.replace(",", ";")]))
        text = "\n".join(lines) + "\n"
    else:
        raise ConfigError(f"unknown output format {fmt!r}")
    if path:
        try:
            with open(path, "w") as fh:
                fh.write(text)
        except OSError as exc:
            raise IOError(f"cannot write report: {exc}")
    return text


def _common_args(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--task", default=None, help="run only this task id")
    p.add_argument("--out", default=None, help="report destination")
    p.add_argument("--seed-override", type=int, default=None)
    p.add_argument("--workers", type=int,
                   default=int(os.environ.get("KACMOMENTS_WORKERS", "1")))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kacmoments",
        description="moment formulas for additive functionals, with checks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
            ("run", "execute every task in the configuration"),
            ("kernel-check", "kernel self-consistency residuals"),
            ("kato", "Kato-class classification tables"),
            ("moment", "engine-only moment tasks"),
            ("mc-compare", "engine vs Monte Carlo comparisons"),
            ("exp-bound", "exponential moment bound reports")):
        p = sub.add_parser(name, help=doc)
        _common_args(p)
    return parser


_OP_FILTER = {"kernel-check": ("kernel-check",), "kato": ("kato",),
              "moment": ("moment",), "mc-compare": ("mc-compare", "moment"),
              "exp-bound": ("exp-bound",)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "run":
            tasks = cfg.tasks
        else:
            ops = _OP_FILTER[args.command]
            tasks = [t for t in cfg.tasks if t.get("op") in ops]
            if args.command == "mc-compare":
                tasks = [t for t in tasks
                         if t.get("op") == "mc-compare" or t.get("mc-compare")]
        sub_cfg = RunConfig(cfg.raw, cfg.text, cfg.kernel, cfg.measures,
                            tasks, cfg.mc, cfg.output)
        rows = run_tasks(sub_cfg, args.task, args.seed_override, args.workers)
        fmt = cfg.output.get("format", "json")
        out = args.out if args.out is not None else cfg.output.get("path")
        text = write_report(rows, cfg, out, fmt)
        if cfg.output.get("verbosity", 1) > 0:
            if out:
                for r in rows:
                    print(f"{r.task}: {r.verdict}"
                          + (f" (z={r.z:.2f})" if not math.isnan(r.z) else ""))
            else:
                print(text)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except IOError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    return 1 if any(r.verdict == "fail" for r in rows) else 0


if __name__ == "__main__":
    sys.exit(main())
