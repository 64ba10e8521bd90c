"""Command-line driver for the simulated tomography experiments.

Subcommands ``phantom``, ``project``, ``reconstruct`` and ``compare`` read
one INI file (``--config``) with the sections ``[testbed]``,
``[problem]``, ``[solver]`` and ``[compare]``.  Every key is optional.
Problem and solver keys that are absent take defaults that depend on the
solver they are resolved for.  Invalid configuration exits with status 2
and names the offending field; a failed run exits with status 1.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import objectives as ob
from . import operators as op
from . import solvers as so
from . import tomo
from .core import BilevelProblem, SolverDivergence, StepSchedule, f1_at_levels, matched_levels
from .feasibility import box_projector, free_projector, nonneg_projector

SOLVERS = ("fiba", "iiba", "inc", "fista")
PRIMARIES = ("lsq", "lsq-huber", "l1")
SECONDARIES = ("haar", "tv", "none")
CONSTRAINTS = ("none", "nonneg", "box")
PROBLEM_KEYS = ("primary", "secondary", "constraint", "start")

# FIBA and FISTA steps are scaled to the projector norm of the default
# geometry; everything else follows the published protocols.
SOLVER_DEFAULTS = {
    "fiba": dict(primary="lsq", secondary="haar", constraint="none", start="zero",
                 max_iter="400", lam="0.5", lam_exponent="0.1", mu="100", mu_exponent="1",
                 mu_ratio="0.01", zeta="1e6", zeta_exponent="0.1", tv_iterations="10"),
    "fista": dict(primary="lsq", secondary="haar", constraint="none", start="zero",
                  max_iter="400", lam="0.5", gamma="1"),
    "iiba": dict(primary="l1", secondary="tv", constraint="nonneg", start="consistent",
                 max_iter="200", subsets="4", alpha="search", eps="search", grid_budget="20",
                 mu="calibrate", mu_ratio="0.1", tv_iterations="5"),
    "inc": dict(primary="l1", secondary="tv", constraint="nonneg", start="consistent",
                max_iter="200", subsets="4", alpha="search", eps="search", grid_budget="20"),
}
SOLVER_KEYS = {"name"} | {k for d in SOLVER_DEFAULTS.values() for k in d} - set(PROBLEM_KEYS)


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is ``section.key``."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def _number(path, raw, kind=float, lo=None, strict=False):
    try:
        v = kind(raw)
    except ValueError:
        what = "an integer" if kind is int else "a number"
        raise ConfigError(path, f"expected {what}, got {raw!r}") from None
    if kind is float and math.isnan(v):
        raise ConfigError(path, "NaN is not allowed")
    if lo is not None and (v <= lo if strict else v < lo):
        raise ConfigError(path, f"must be {'>' if strict else '>='} {lo}, got {raw!r}")
    return v


def _choice(path, raw, options):
    if raw not in options:
        raise ConfigError(path, f"expected one of {', '.join(options)}, got {raw!r}")
    return raw


def _list(path, raw, kind, lo):
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if not items:
        raise ConfigError(path, "empty list")
    return tuple(_number(path, s, kind, lo) for s in items)


def _solver_value(key, raw):
    path = f"solver.{key}"
    if key in ("max_iter", "tv_iterations", "subsets", "grid_budget"):
        return _number(path, raw, int, 1)
    if key in ("alpha", "eps"):
        return raw if raw == "search" else _number(path, raw, lo=0.0, strict=True)
    if key == "mu":
        return raw if raw == "calibrate" else _number(path, raw, lo=0.0)
    if key in ("gamma", "lam_exponent", "mu_exponent", "zeta_exponent"):
        return _number(path, raw, lo=0.0)
    return _number(path, raw, lo=0.0, strict=True)


@dataclass(frozen=True)
class Testbed:
    side: int = 128
    n_angles: int = 64
    n_det: int = 128
    noise: float = 0.1
    unit: float = 200.0
    seed: int = 0
    data: str = ""


@dataclass(frozen=True)
class ProblemSpec:
    primary: str
    secondary: str
    constraint: str
    box_lower: float = 0.0
    box_upper: float = math.inf
    start: str = "zero"


@dataclass(frozen=True)
class SolverSpec:
    name: str
    max_iter: int
    params: dict = field(default_factory=dict)

    def get(self, key):
        return self.params[key]


@dataclass(frozen=True)
class CompareSpec:
    mode: str = "regularization"
    gammas: tuple = (100.0, 10.0, 1.5, 1.0, 0.0)
    subsets: tuple = (1, 4, 16)
    levels: int = 25


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed testbed and comparison settings plus the raw problem/solver keys.

    Problem and solver settings are resolved per solver, so the same file
    drives single reconstructions and comparisons.
    """

    testbed: Testbed
    compare: CompareSpec
    solver_name: str = "fiba"
    raw_problem: dict = field(default_factory=dict)
    raw_solver: dict = field(default_factory=dict)

    @property
    def solver(self):
        return self.solver_for(self.solver_name)

    @property
    def problem(self):
        return self.problem_for(self.solver_name)

    def solver_for(self, name):
        params = {k: _solver_value(k, self.raw_solver.get(k, v))
                  for k, v in SOLVER_DEFAULTS[name].items() if k not in PROBLEM_KEYS}
        return SolverSpec(name, params.pop("max_iter"), params)

    def problem_for(self, name):
        d, p = SOLVER_DEFAULTS[name], self.raw_problem
        pr = ProblemSpec(
            primary=_choice("problem.primary", p.get("primary", d["primary"]), PRIMARIES),
            secondary=_choice("problem.secondary", p.get("secondary", d["secondary"]),
                              SECONDARIES),
            constraint=_choice("problem.constraint", p.get("constraint", d["constraint"]),
                               CONSTRAINTS),
            box_lower=_number("problem.box_lower", p.get("box_lower", "0")),
            box_upper=_number("problem.box_upper", p.get("box_upper", "inf")),
            start=_choice("problem.start", p.get("start", d["start"]), ("zero", "consistent")),
        )
        if pr.constraint == "box" and not pr.box_lower <= pr.box_upper:
            raise ConfigError("problem.box_upper", "must be >= problem.box_lower")
        return pr

    def check(self, name):
        """Validate the settings resolved for solver ``name``."""
        tb, pr, sv = self.testbed, self.problem_for(name), self.solver_for(name)
        if name in ("fiba", "fista") and pr.primary == "l1":
            raise ConfigError("problem.primary",
                              f"{name} needs a differentiable primary (lsq or lsq-huber)")
        if pr.secondary == "haar" and tb.side & (tb.side - 1):
            raise ConfigError("problem.secondary",
                              f"haar needs a power-of-two side, got {tb.side}")
        if name == "fista" and sv.get("gamma") > 0:
            if pr.constraint != "none":
                raise ConfigError("solver.gamma", "the regularized baseline is unconstrained; "
                                                  "set problem.constraint = none or gamma = 0")
            if pr.secondary != "haar":
                raise ConfigError("problem.secondary", "fista with gamma > 0 uses the haar norm")
        if name in ("iiba", "inc") and sv.get("subsets") > tb.n_angles:
            raise ConfigError("solver.subsets", f"at most n_angles = {tb.n_angles} subsets")


def _section(cp, name, allowed):
    if not cp.has_section(name):
        return {}
    sec = dict(cp.items(name))
    for key in sec:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown key")
    return sec


def load_config(path=None, seed=None):
    """Parse and validate an INI file into an :class:`ExperimentConfig`."""
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError("file", str(exc).splitlines()[0]) from None
    for name in cp.sections():
        if name not in ("testbed", "problem", "solver", "compare"):
            raise ConfigError(name, "unknown section")

    t = _section(cp, "testbed", set(Testbed.__dataclass_fields__))
    tb = Testbed(
        side=_number("testbed.side", t.get("side", "128"), int, 2),
        n_angles=_number("testbed.n_angles", t.get("n_angles", "64"), int, 1),
        n_det=_number("testbed.n_det", t.get("n_det", "128"), int, 1),
        noise=_number("testbed.noise", t.get("noise", "0.1"), lo=0.0, strict=True),
        unit=_number("testbed.unit", t.get("unit", "200"), lo=0.0, strict=True),
        seed=_number("testbed.seed", t.get("seed", "0"), int, 0),
        data=t.get("data", ""),
    )
    if not tb.noise < 1:
        raise ConfigError("testbed.noise", "must be below 1")
    if seed is not None:
        if seed < 0:
            raise ConfigError("--seed", "must be nonnegative")
        tb = replace(tb, seed=seed)

    c = _section(cp, "compare", {"mode", "gammas", "subsets", "levels"})
    cm = CompareSpec(
        mode=_choice("compare.mode", c.get("mode", "regularization"),
                     ("regularization", "incremental")),
        gammas=_list("compare.gammas", c.get("gammas", "100, 10, 1.5, 1, 0"), float, 0.0),
        subsets=_list("compare.subsets", c.get("subsets", "1, 4, 16"), int, 1),
        levels=_number("compare.levels", c.get("levels", "25"), int, 1),
    )
    if cm.mode == "incremental" and max(cm.subsets) > tb.n_angles:
        raise ConfigError("compare.subsets", f"at most n_angles = {tb.n_angles} subsets")

    s = _section(cp, "solver", SOLVER_KEYS)
    name = _choice("solver.name", s.pop("name", "fiba"), SOLVERS)
    for key, raw in s.items():
        _solver_value(key, raw)
    p = _section(cp, "problem", set(PROBLEM_KEYS) | {"box_lower", "box_upper"})
    cfg = ExperimentConfig(tb, cm, name, p, s)
    cfg.check(name)
    return cfg


# --------------------------------------------------------------------------
# Problem assembly
# --------------------------------------------------------------------------

@dataclass
class Setup:
    """Data for one experiment; ``reference`` is the phantom when simulated."""

    geometry: tomo.Geometry
    side: int
    data: tomo.Sinogram
    reference: object = None


def acquire(tb):
    """Simulated study, or measured data read from ``tb.data``."""
    if tb.data:
        sino = tomo.read_sinogram(tb.data)
        return Setup(sino.geometry, tb.side, sino)
    st = tomo.simulated_study(tb.side, tb.n_angles, tb.n_det, tb.noise, tb.seed, tb.unit)
    return Setup(st.geometry, st.side, st.noisy, st.phantom)


def build_problem(setup, pr, subsets=1, tv_iterations=10):
    """Return ``(problem, model, secondary operator)``."""
    P = tomo.projector(setup.geometry, setup.side)
    model = ob.LinearResidualModel.from_projector(P, setup.data, subsets)
    if pr.primary == "lsq":
        f0 = lambda x: ob.lsq_value(model, x)
        g0 = lambda x: ob.lsq_grad(model, x)
        comps = ob.lsq_row_oracle(model)
    elif pr.primary == "lsq-huber":
        hp = ob.huber_setup(model)
        f0 = lambda x: ob.huber_value(model, hp, x)
        g0 = lambda x: ob.huber_grad(model, hp, x)
        comps = ob.huber_component_oracle(model, hp)
    else:
        f0 = lambda x: ob.l1_value(model, x)
        g0 = lambda x: ob.l1_subgrad(model, x)
        comps = ob.l1_component_oracle(model)
    if pr.secondary == "haar":
        op1 = op.haar_prox_operator(op.HaarTransform(setup.side))
        f1 = op1.value
    elif pr.secondary == "tv":
        op1 = op.tv_iterated_operator(model.n, tv_iterations)
        f1 = op.tv_value
    else:
        op1 = op.identity_operator()
        f1 = lambda x: 0.0
    if pr.constraint == "nonneg":
        project = nonneg_projector()
    elif pr.constraint == "box":
        project = box_projector(pr.box_lower, pr.box_upper)
    else:
        project = free_projector()
    return BilevelProblem(f0, f1, project, g0, comps), model, op1


def start_point(model, pr):
    return so.consistent_start(model) if pr.start == "consistent" else np.zeros(model.n)


@dataclass
class RunResult:
    method: str
    trace: object
    x: np.ndarray
    best_x: np.ndarray
    params: dict
    status: str = "ok"


class _BestTracker:
    """Relative-error monitor that also keeps the best iterate."""

    def __init__(self, ref):
        self.ref, self.best, self.err = ref, None, math.inf

    def __call__(self, x):
        e = tomo.relative_error(x, self.ref)
        if e < self.err:
            self.err, self.best = e, x.copy()
        return e


def _run(method, make_runner, setup, max_iter, params):
    tracker = _BestTracker(setup.reference) if setup.reference is not None else None
    runner = make_runner({"rel_error": tracker} if tracker else {})
    status = "ok"
    try:
        runner.run(max_iter)
    except SolverDivergence as exc:
        status = f"aborted: {exc}"
    best = tracker.best if tracker is not None and tracker.best is not None else runner.x
    return RunResult(method, runner.trace, runner.x, best, params, status)


def run_fiba_method(setup, pr, sv, method="fiba"):
    prob, model, op1 = build_problem(setup, pr, tv_iterations=sv.get("tv_iterations"))
    x0 = start_point(model, pr)
    lam, mu = sv.get("lam"), sv.get("mu")
    if mu == "calibrate":
        mu = so.calibrate_mu(lambda x: prob.project(x - lam * prob.grad0(x)), op1, x0,
                             sv.get("mu_ratio"))
    sl = StepSchedule(lam, sv.get("lam_exponent"))
    sm = StepSchedule(mu, sv.get("mu_exponent"))
    sz = StepSchedule(sv.get("zeta"), sv.get("zeta_exponent"))
    return _run(method, lambda mon: so.FibaRunner(prob, op1, sl, sm, sz, x0, monitors=mon),
                setup, sv.max_iter, {"lam": lam, "mu": mu})


def run_fista_method(setup, pr, sv, gamma, method="fista"):
    prob, model, _ = build_problem(setup, pr)
    x0 = start_point(model, pr)
    lam = sv.get("lam")
    H = op.HaarTransform(setup.side) if gamma > 0 else None
    project = prob.project if gamma == 0 and pr.constraint != "none" else None

    def make_runner(mon):
        # zero iterations: only assembles the runner with the right prox
        return so.run_fista(prob, lam, x0, 0, gamma=gamma, H=H, project=project,
                            monitors=mon)[2]

    return _run(method, make_runner, setup, sv.max_iter, {"lam": lam, "gamma": gamma})


def incremental_setup(setup, pr, sv, s, seed):
    """Problem, start point and ``(alpha, eps, lam)`` shared by INC-s and IIBA-s."""
    prob, model, op1 = build_problem(setup, pr, s, sv.params.get("tv_iterations", 5))
    x0 = start_point(model, pr)
    alpha, eps = sv.get("alpha"), sv.get("eps")
    if alpha == "search" or eps == "search":
        default = so.GridSearchParams()
        grid = so.GridSearchParams(
            alphas=default.alphas if alpha == "search" else (alpha,),
            epsilons=default.epsilons if eps == "search" else (eps,),
            budget=sv.get("grid_budget"))
        alpha, eps, lam = so.grid_search_lambda(prob, prob.grad0, x0, grid, seed)
    else:
        lam = alpha * so.incremental_base_step(prob.f0, prob.grad0, x0, s)
    return prob, op1, x0, alpha, eps, lam


def run_incremental_method(setup, pr, sv, s, bilevel, seed, prepared=None):
    prob, op1, x0, alpha, eps, lam = prepared or incremental_setup(setup, pr, sv, s, seed)
    params = {"alpha": alpha, "eps": eps, "lam": lam, "subsets": s}
    if bilevel:
        mu = sv.get("mu")
        if mu == "calibrate":
            order = list(range(s))
            mu = so.calibrate_mu(
                lambda x: prob.project(op.incremental_subgrad(prob.components, lam, x, order)),
                op1, x0, sv.get("mu_ratio"))
        params["mu"] = mu
        sl, sm = so.iiba_defaults(lam, eps, mu)
        make_runner = lambda mon: so.IibaRunner(prob, op1, sl, sm, x0, seed, monitors=mon)
        method = f"iiba-{s}"
    else:
        sl, sm = StepSchedule(lam, eps), StepSchedule.constant(0.0)
        make_runner = lambda mon: so.IibaRunner(prob, op.identity_operator(), sl, sm, x0, seed,
                                                monitors=mon)
        method = f"inc-{s}"
    return _run(method, make_runner, setup, sv.max_iter, params)


def reconstruct(cfg, setup=None):
    setup = setup or acquire(cfg.testbed)
    sv, pr = cfg.solver, cfg.problem
    if sv.name == "fiba":
        return run_fiba_method(setup, pr, sv)
    if sv.name == "fista":
        return run_fista_method(setup, pr, sv, sv.get("gamma"))
    return run_incremental_method(setup, pr, sv, sv.get("subsets"), sv.name == "iiba",
                                  cfg.testbed.seed)


def compare(cfg, setup=None):
    """Run the comparison of ``cfg.compare.mode``; returns ``(results, groups)``.

    ``regularization`` runs FIBA and FISTA for every ``gamma``;
    ``incremental`` runs INC-s and IIBA-s for every subset count.
    ``groups`` lists the method names compared on common primary levels.
    """
    cm = cfg.compare
    names = ("fiba", "fista") if cm.mode == "regularization" else ("iiba",)
    for name in names:
        cfg.check(name)
    setup = setup or acquire(cfg.testbed)
    if cm.mode == "regularization":
        results = [run_fiba_method(setup, cfg.problem_for("fiba"), cfg.solver_for("fiba"))]
        pr, sv = cfg.problem_for("fista"), cfg.solver_for("fista")
        for g in cm.gammas:
            results.append(run_fista_method(setup, pr, sv, g, f"fista-g{g:g}"))
        return results, [tuple(r.method for r in results)]
    pr, sv = cfg.problem_for("iiba"), cfg.solver_for("iiba")
    results, groups = [], []
    for s in cm.subsets:
        prepared = incremental_setup(setup, pr, sv, s, cfg.testbed.seed)
        pair = [run_incremental_method(setup, pr, sv, s, b, cfg.testbed.seed, prepared)
                for b in (False, True)]
        results += pair
        groups.append(tuple(r.method for r in pair))
    return results, groups


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _write_image(out, stem, x):
    tomo.write_image(out / f"{stem}.bimg", x)
    tomo.write_pgm(out / f"{stem}.pgm", x)


def _write_result(out, r, suffix=""):
    r.trace.to_csv(out / f"trace{suffix}.csv")
    if "rel_error" in r.trace.extra:
        _write_rows(out / f"quality{suffix}.csv", ("k", "rel_error"),
                    zip(r.trace.k, r.trace.extra["rel_error"]))
    _write_image(out, f"recon{suffix}", r.x)
    _write_rows(out / f"params{suffix}.csv", ("key", "value"),
                sorted(r.params.items()) + [("status", r.status)])


SUMMARY_HEADER = ("method", "iterations", "best_rel_error", "best_rel_error_k", "best_f0",
                  "final_f0", "final_f1", "status")


def summary_rows(results):
    rows = []
    for r in results:
        tr = r.trace
        err = tr.extra.get("rel_error")
        kb = int(np.argmin(err)) if err else -1
        best_err = err[kb] if err else math.nan
        if len(tr):
            vals = (min(tr.f0), tr.f0[-1], tr.f1[-1])
        else:
            vals = (math.nan,) * 3
        rows.append((r.method, len(tr), best_err, kb) + vals + (r.status,))
    return rows


def write_compare(out, results, groups, n_levels):
    by_name = {r.method: r for r in results}
    _write_rows(out / "summary.csv", SUMMARY_HEADER, summary_rows(results))
    _write_rows(out / "phase_plane.csv", ("method", "k", "f0", "f1"),
                ((r.method, k, a, b) for r in results
                 for k, a, b in zip(r.trace.k, r.trace.f0, r.trace.f1)))
    matched = []
    for gi, names in enumerate(groups):
        traces = [by_name[n].trace for n in names]
        levels = matched_levels(traces, n_levels)
        values = [f1_at_levels(t, levels) for t in traces]
        for j, level in enumerate(levels):
            for name, v in zip(names, values):
                matched.append((gi, j, level, name, v[j]))
    _write_rows(out / "matched.csv", ("group", "level_index", "f0_level", "method", "f1"),
                matched)
    for r in results:
        _write_result(out, r, f"_{r.method}")
        _write_image(out, f"best_{r.method}", r.best_x)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_phantom(cfg, out):
    _write_image(out, "phantom", tomo.shepp_logan(cfg.testbed.side, cfg.testbed.unit))


def cmd_project(cfg, out):
    tb = cfg.testbed
    st = tomo.simulated_study(tb.side, tb.n_angles, tb.n_det, tb.noise, tb.seed, tb.unit)
    tomo.write_sinogram(out / "sinogram_clean.bsin", st.clean)
    tomo.write_sinogram(out / "sinogram.bsin", st.noisy)
    _write_rows(out / "noise.csv", ("target", "achieved", "n0", "unit", "seed"),
                [(tb.noise, st.achieved, st.n0, tb.unit, tb.seed)])


def cmd_reconstruct(cfg, out):
    r = reconstruct(cfg)
    _write_result(out, r)
    if r.status != "ok":
        raise RuntimeError(r.status)


def cmd_compare(cfg, out):
    results, groups = compare(cfg)
    write_compare(out, results, groups, cfg.compare.levels)


COMMANDS = {"phantom": cmd_phantom, "project": cmd_project,
            "reconstruct": cmd_reconstruct, "compare": cmd_compare}


def main(argv=None):
    ap = argparse.ArgumentParser(prog="bilevel",
                                 description="Bilevel tomographic reconstruction experiments.")
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", type=Path, default=None, help="INI configuration file")
    ap.add_argument("--seed", type=int, default=None, help="override testbed.seed")
    ap.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"bilevel: config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        if args.config is not None and Path(exc.filename or "") == args.config:
            print(f"bilevel: config error: file: {exc}", file=sys.stderr)
            return 2
        print(f"bilevel: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"bilevel: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0
