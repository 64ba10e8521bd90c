"""Abstract three-step bilevel iteration and its stopping criterion.

One iteration maps ``x_k`` through

    x_{k+1/3} = O0(lam_k, x_k)
    x_{k+2/3} = O1(mu_k, x_{k+1/3})
    x_{k+1}   = P(x_{k+2/3})

where ``O0`` and ``O1`` are optimality operators for the primary and
secondary objectives and ``P`` projects onto the primary feasible set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "BilevelProblem",
    "BilevelRunner",
    "bilevel_runner",
    "OperatorMeta",
    "SolverDivergence",
    "SolverTrace",
    "StepSchedule",
    "StopResult",
    "StoppingParams",
    "check_finite",
    "common_beta",
    "f1_at_levels",
    "identity_projector",
    "matched_levels",
    "ratio_of_sums",
    "run_bilevel",
    "sigma0",
    "sigma1",
    "stopping_procedure",
]


class SolverDivergence(RuntimeError):
    """An iterate became non-finite; ``substep`` names where."""

    def __init__(self, substep, k):
        super().__init__(f"non-finite iterate produced by {substep} at iteration {k}")
        self.substep = substep
        self.k = k


def check_finite(x, substep, k):
    if not np.all(np.isfinite(x)):
        raise SolverDivergence(substep, k)
    return x


@dataclass(frozen=True)
class StepSchedule:
    """``value(k) = base / (k + 1) ** exponent``; ``constant`` forces exponent 0."""

    base: float
    exponent: float = 0.0
    kind: str = "power"

    def __post_init__(self):
        if self.kind not in ("constant", "power"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base < 0 or self.exponent < 0:
            raise ValueError("schedule base and exponent must be nonnegative")
        if self.kind == "constant" and self.exponent != 0:
            raise ValueError("constant schedule takes no exponent")

    @classmethod
    def constant(cls, base):
        return cls(base, 0.0, "constant")

    def __call__(self, k):
        if self.exponent == 0:
            return float(self.base)
        return self.base / (k + 1) ** self.exponent


@dataclass(frozen=True)
class OperatorMeta:
    """Constants of the descent inequality and movement bound.

    ``rho`` maps a stepsize to the error-term bound; ``None`` means the
    error term is identically zero.  ``gamma=None`` means no finite
    movement bound is claimed.
    """

    beta: float
    gamma: Optional[float] = None
    rho: Optional[Callable[[float], float]] = None
    note: str = ""

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    def rho_bound(self, step):
        return 0.0 if self.rho is None else float(self.rho(step))


def identity_projector(x):
    return x


@dataclass
class BilevelProblem:
    """Primary objective ``f0`` over ``X0`` with secondary ``f1`` selection.

    ``grad0`` is a (sub)gradient oracle for ``f0`` and ``components`` an
    optional :class:`~bilevel.operators.ComponentOracle` splitting it.
    ``project`` is the projector onto ``X0``.
    """

    f0: Callable[[np.ndarray], float]
    f1: Callable[[np.ndarray], float]
    project: Callable[[np.ndarray], np.ndarray] = identity_projector
    grad0: Optional[Callable[[np.ndarray], np.ndarray]] = None
    components: object = None


# --------------------------------------------------------------------------
# Trace
# --------------------------------------------------------------------------

CSV_HEADER = ("k", "f0", "f1", "step0_norm", "step1_norm", "lambda", "mu")


@dataclass
class SolverTrace:
    """Per-iteration record of a bilevel run.

    Row ``k`` describes the iteration leaving ``x_k``: objective values at
    ``x_k``, the movements ``||x_k - x_{k+1/3}||`` and ``||x_k - x_{k+2/3}||``
    and the stepsizes used.  ``f0_third`` holds ``f0(x_{k+1/3})`` when the
    solver tracks it; ``third_feasible`` marks solvers whose ``x_{k+1/3}``
    always lies in ``X0``.
    """

    k: list = field(default_factory=list)
    f0: list = field(default_factory=list)
    f1: list = field(default_factory=list)
    step0_norm: list = field(default_factory=list)
    step1_norm: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    f0_third: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    third_feasible: bool = False

    def append(self, k, f0, f1, step0, step1, lam, mu, f0_third=math.nan, **extra):
        self.k.append(k)
        self.f0.append(float(f0))
        self.f1.append(float(f1))
        self.step0_norm.append(float(step0))
        self.step1_norm.append(float(step1))
        self.lam.append(float(lam))
        self.mu.append(float(mu))
        self.f0_third.append(float(f0_third))
        for key, value in extra.items():
            self.extra.setdefault(key, []).append(value)

    def __len__(self):
        return len(self.k)

    def best_f0(self, k0=0):
        """Running best-so-far values ``phi_0^{k0, k}`` for ``k >= k0``."""
        return np.minimum.accumulate(np.asarray(self.f0[k0:]))

    def best_f1(self, k0=0):
        return np.minimum.accumulate(np.asarray(self.f1[k0:]))

    def rows(self):
        return zip(self.k, self.f0, self.f1, self.step0_norm, self.step1_norm, self.lam, self.mu)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for row in self.rows():
                w.writerow([row[0]] + [format(v, ".17g") for v in row[1:]])

    @classmethod
    def from_csv(cls, path):
        trace = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ValueError(f"unexpected trace header {header}")
            for row in reader:
                trace.append(int(row[0]), *map(float, row[1:]))
        return trace


# --------------------------------------------------------------------------
# Generic runner
# --------------------------------------------------------------------------

class BilevelRunner:
    """Resumable executor of the three-step iteration.

    ``step()`` performs one iteration and appends to ``trace``; ``x`` is the
    current iterate.  Solvers with extra state subclass this and override
    :meth:`_advance`.
    """

    def __init__(self, problem, x0, track_third=False, monitors=None):
        self.problem = problem
        self.monitors = dict(monitors or {})
        self.x = check_finite(np.array(x0, dtype=np.float64), "initial point", 0)
        self.k = 0
        self.trace = SolverTrace()
        self.track_third = track_third
        self.last_point = None

    def _advance(self, k, x):
        """Return ``(x_third, x_two_thirds, x_next, lam, mu, extra)``."""
        raise NotImplementedError

    def step(self):
        k, x = self.k, self.x
        p = self.problem
        f0x, f1x = p.f0(x), p.f1(x)
        x3, x23, x_next, lam, mu, extra = self._advance(k, x)
        f0_third = p.f0(x3) if self.track_third else math.nan
        for name, fn in self.monitors.items():
            extra[name] = fn(x)
        self.trace.append(
            k, f0x, f1x, np.linalg.norm(x - x3), np.linalg.norm(x - x23), lam, mu,
            f0_third, **extra)
        self.last_point = x
        self.x = x_next
        self.k = k + 1
        return self.x

    def run(self, n):
        for _ in range(n):
            self.step()
        return self.x


class _ThreeStepRunner(BilevelRunner):
    def __init__(self, problem, op0, op1, sched0, sched1, x0, track_third=False,
                 monitors=None):
        super().__init__(problem, x0, track_third, monitors)
        self.op0, self.op1 = op0, op1
        self.sched0, self.sched1 = sched0, sched1

    def _advance(self, k, x):
        lam, mu = self.sched0(k), self.sched1(k)
        x3 = check_finite(self.op0(lam, x), "primary operator", k)
        x23 = check_finite(self.op1(mu, x3), "secondary operator", k)
        x_next = check_finite(self.problem.project(x23), "projection", k)
        return x3, x23, x_next, lam, mu, {}


def bilevel_runner(problem, op0, op1, sched0, sched1, x0, track_third=True, monitors=None):
    """Resumable runner of the plain three-step iteration."""
    return _ThreeStepRunner(problem, op0, op1, sched0, sched1, x0, track_third, monitors)


def run_bilevel(problem, op0, op1, sched0, sched1, x0, max_iter, track_third=True):
    """Run ``max_iter`` three-step iterations; return ``(trace, x_final)``.

    ``op0`` and ``op1`` are callables ``(step, x) -> x'``.
    """
    if any(s < 0 for s in (sched0(0), sched1(0))):
        raise ValueError("stepsizes must be nonnegative")
    runner = bilevel_runner(problem, op0, op1, sched0, sched1, x0, track_third)
    runner.run(max_iter)
    return runner.trace, runner.x


# --------------------------------------------------------------------------
# Stopping criterion
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StoppingParams:
    """Bounds feeding the certificates.

    D bounds the distance from iterates to the chosen bilevel solution,
    M bounds (sub)gradients of both objectives along the iterates, and N
    bounds ``f1(x*)`` minus a lower bound of ``f1``.  ``f0_star`` is an
    optional known optimal primary value; without it the best primary
    value seen so far stands in as an upper bound.
    """

    D: float
    M: float
    N: float
    beta: float
    eps0: float
    eps1: float
    f0_star: Optional[float] = None

    def __post_init__(self):
        for name in ("D", "M", "N", "beta", "eps0", "eps1"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.beta == 0:
            raise ValueError("beta must be positive")


def common_beta(meta0, meta1):
    """The shared descent constant of two operators; mixed values are rejected."""
    if not math.isclose(meta0.beta, meta1.beta, rel_tol=1e-12):
        raise ValueError(
            f"operators declare different beta ({meta0.beta} vs {meta1.beta}); "
            "the certificates need a single constant")
    return meta0.beta


def _rho_pair(rho_bounds):
    if rho_bounds is None:
        return (lambda s, i: 0.0), (lambda s, i: 0.0)
    r0, r1 = rho_bounds

    def wrap(r):
        if r is None:
            return lambda s, i: 0.0
        if isinstance(r, OperatorMeta):
            return lambda s, i: r.rho_bound(s)
        try:
            r(0.0, 0)
            return r
        except TypeError:
            return lambda s, i: r(s)

    return wrap(r0), wrap(r1)


def _sigma0_term(trace, p, rho0, rho1, i):
    lam, mu = trace.lam[i], trace.mu[i]
    return (lam * (rho0(lam, i) + p.beta * p.M * trace.step0_norm[i])
            + mu * (p.beta * p.N + rho1(mu, i)))


def _third_gap(trace, p, i, ref):
    if trace.third_feasible:
        return 0.0
    f = trace.f0_third[i]
    if math.isnan(f):
        raise ValueError("trace lacks f0 at the intermediate points")
    return max(ref - f, 0.0)


def _sigma1_term(trace, p, rho0, rho1, i, ref):
    lam, mu = trace.lam[i], trace.mu[i]
    return (lam * (rho0(lam, i) + p.beta * _third_gap(trace, p, i, ref))
            + mu * (rho1(mu, i) + p.beta * p.M * trace.step1_norm[i]))


def _gap_reference(trace, p, k):
    # f0* itself when known; otherwise the best value seen, an upper bound on it
    return p.f0_star if p.f0_star is not None else float(np.min(trace.f0[: k + 1]))


def sigma0(trace, p, rho_bounds=None, k=None):
    """Certificate ``sigma_0^k >= phi_0^k - f0*`` over records ``0..k``.

    ``rho_bounds`` is a pair of error-term bounds for the primary and
    secondary operators, each an :class:`OperatorMeta`, a callable of
    ``(step, i)`` or of ``step`` alone, or ``None`` for zero.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    k = len(trace) - 1 if k is None else k
    rho0, rho1 = _rho_pair(rho_bounds)
    den = p.beta * math.fsum(trace.lam[: k + 1])
    if den <= 0:
        raise ValueError("primary stepsizes sum to zero over the window")
    num = p.D**2 + math.fsum(_sigma0_term(trace, p, rho0, rho1, i) for i in range(k + 1))
    return num / den


def sigma1(trace, k0, p, rho_bounds=None, k=None):
    """Certificate ``sigma_1^{k0,k} >= phi_1^{k0,k} - f1*`` over records ``k0..k``.

    The ``[f0* - f0(x_{i+1/3})]_+`` terms vanish for solvers whose
    intermediate points are feasible; otherwise they need ``f0_third`` in
    the trace and use ``p.f0_star`` or, failing that, the best primary
    value seen so far.
    """
    k = len(trace) - 1 if k is None else k
    if not 0 <= k0 <= k < len(trace):
        raise ValueError(f"invalid window [{k0}, {k}] for trace of length {len(trace)}")
    rho0, rho1 = _rho_pair(rho_bounds)
    den = p.beta * math.fsum(trace.mu[k0: k + 1])
    if den <= 0:
        raise ValueError("secondary stepsizes sum to zero over the window")
    ref = _gap_reference(trace, p, k)
    num = p.D**2 + math.fsum(_sigma1_term(trace, p, rho0, rho1, i, ref)
                             for i in range(k0, k + 1))
    return num / den


@dataclass
class StopResult:
    """Outcome of :func:`stopping_procedure`.

    Indices refer to trace records, so record ``k`` holds ``x_k``.  ``x`` is
    the selected iterate ``x_{k1}``; ``sigma0``/``sigma1`` are the certified
    gaps at the stop.  ``reason`` is ``"converged"`` or ``"budget"``; on
    budget exhaustion the certificate is partial and an unreached one is
    reported as ``inf`` when never evaluated.
    """

    x: np.ndarray
    k1: int
    kappa: int
    k0: int
    k: int
    iterations: int
    sigma0: float
    sigma1: float
    converged: bool
    reason: str


def stopping_procedure(runner, p, rho_bounds=None, max_iter=100_000):
    """Iterate ``runner`` until both certificates reach their targets.

    Phase A runs until ``sigma_0^k <= eps0`` and fixes ``k0 = kappa = k``.
    Phase B runs until ``sigma_1^{kappa,k} <= eps1``, takes the best
    secondary iterate ``x_{k1}`` of the window and stops if
    ``f0(x_{k1}) <= phi_0^{k0}``; otherwise ``kappa`` moves to ``k`` and
    phase B resumes after at least one more iteration.

    Certificates are kept as running sums.  Without ``p.f0_star`` and with
    infeasible intermediate points, each gap term uses the best primary
    value available when its record was added, which can only overstate
    the certificate.
    """
    tr = runner.trace
    if len(tr):
        raise ValueError("runner must start from a fresh trace")
    rho0, rho1 = _rho_pair(rho_bounds)
    state = {"best_f1": math.inf, "x": None, "k1": -1}

    def advance():
        x_k = runner.x.copy()
        runner.step()
        k = len(tr) - 1
        if tr.f1[k] < state["best_f1"]:
            state.update(best_f1=tr.f1[k], x=x_k, k1=k)
        return k

    # phase A
    num0 = p.D**2
    lam_sum = 0.0
    s0 = math.inf
    while len(tr) < max_iter:
        k = advance()
        num0 += _sigma0_term(tr, p, rho0, rho1, k)
        lam_sum += tr.lam[k]
        if lam_sum > 0:
            s0 = num0 / (p.beta * lam_sum)
            if s0 <= p.eps0:
                break
    else:
        k = len(tr) - 1
        x = runner.x.copy() if state["x"] is None else state["x"]
        return StopResult(x, state["k1"], -1, -1, k, len(tr), s0, math.inf, False, "budget")

    k0 = kappa = k
    phi0 = float(np.min(tr.f0[: k0 + 1]))
    ref = _gap_reference(tr, p, k)

    def open_window(k):
        state.update(best_f1=tr.f1[k], x=runner.last_point.copy(), k1=k)
        return p.D**2 + _sigma1_term(tr, p, rho0, rho1, k, ref), tr.mu[k]

    num1, mu_sum = open_window(k)
    while True:
        s1 = num1 / (p.beta * mu_sum) if mu_sum > 0 else math.inf
        if s1 <= p.eps1:
            if tr.f0[state["k1"]] <= phi0:
                return StopResult(state["x"], state["k1"], kappa, k0, k, len(tr), s0, s1, True,
                                  "converged")
            kappa = k
            num1, mu_sum = open_window(k)
        if len(tr) >= max_iter:
            break
        k = advance()
        ref = _gap_reference(tr, p, k)
        num1 += _sigma1_term(tr, p, rho0, rho1, k, ref)
        mu_sum += tr.mu[k]
    s1 = num1 / (p.beta * mu_sum) if mu_sum > 0 else math.inf
    return StopResult(state["x"], state["k1"], kappa, k0, k, len(tr), s0, s1, False, "budget")


def ratio_of_sums(a, b):
    """Partial-sum ratios ``sum_{0..n} a / sum_{0..n} b``; NaN while ``sum b == 0``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("sequences must have equal length")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("sequences must be nonnegative")
    sa, sb = np.cumsum(a), np.cumsum(b)
    out = np.full(sa.shape, np.nan)
    pos = sb > 0
    out[pos] = sa[pos] / sb[pos]
    return out


# --------------------------------------------------------------------------
# Phase-plane comparison
# --------------------------------------------------------------------------

def matched_levels(traces, n):
    """``n`` geometric primary levels reached by every trace.

    The levels lie strictly between the largest final best-so-far value
    and the smallest starting value.  Returns an empty array when that
    range is empty or not positive.
    """
    lo = max(float(np.min(t.f0)) for t in traces)
    hi = min(float(t.f0[0]) for t in traces)
    if not 0 < lo < hi:
        return np.empty(0)
    return np.geomspace(lo, hi, n + 2)[1:-1]


def f1_at_levels(trace, levels):
    """``f1`` at the first record whose ``f0`` is at or below each level (NaN if none)."""
    f0 = np.asarray(trace.f0)
    f1 = np.asarray(trace.f1)
    out = np.full(len(levels), np.nan)
    for j, level in enumerate(levels):
        hit = np.flatnonzero(f0 <= level)
        if hit.size:
            out[j] = f1[hit[0]]
    return out
