"""Concrete bilevel solvers, their one-level counterparts and parameter calibration."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import BilevelRunner, StepSchedule, check_finite
from .operators import (
    identity_operator,
    incremental_subgrad,
    soft_threshold,
    sufficient_decrease_holds,
)

__all__ = [
    "FibaRunner",
    "FistaRunner",
    "GridSearchParams",
    "IibaRunner",
    "calibrate_mu",
    "consistent_start",
    "fiba_defaults",
    "grid_search_lambda",
    "iiba_defaults",
    "momentum_next",
    "run_fiba",
    "run_fista",
    "run_iiba",
    "run_inc",
]


def momentum_next(t):
    return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))


# --------------------------------------------------------------------------
# FIBA
# --------------------------------------------------------------------------

class FibaRunner(BilevelRunner):
    """Momentum-perturbed projected gradient followed by a secondary operator.

    State: the freeze index ``i`` selecting ``lam_i``, the momentum scalar
    ``t`` and the previous post-gradient point.  ``problem.grad0`` must be
    the gradient of a smooth ``f0``.  ``L0``, when given, is a Lipschitz
    constant of that gradient used to judge steps that fail the
    sufficient-decrease test.
    """

    def __init__(self, problem, op1, sched_lam, sched_mu, sched_zeta, x0, L0=None,
                 monitors=None):
        super().__init__(problem, x0, monitors=monitors)
        if problem.grad0 is None:
            raise ValueError("FIBA needs a gradient oracle for f0")
        self.op1 = op1
        self.sched_lam, self.sched_mu, self.sched_zeta = sched_lam, sched_mu, sched_zeta
        self.L0 = L0
        self.i = 0
        self.t = 1.0
        self.prev_third = self.x.copy()
        self.trace.third_feasible = True
        self.violations = 0

    def _advance(self, k, x):
        p = self.problem
        lam = self.sched_lam(self.i)
        mu, zeta = self.sched_mu(k), self.sched_zeta(k)
        x3 = check_finite(p.project(x - lam * p.grad0(x)), "primary projected-gradient step", k)
        suff = lam > 0 and sufficient_decrease_holds(p.f0, p.grad0, x, x3, lam)
        if not suff and not (self.L0 is not None and lam <= 1.0 / self.L0):
            self.violations += 1
        i_k = self.i
        if np.linalg.norm(x - x3) >= zeta:
            self.i += 1
        t_next = momentum_next(self.t)
        d = x3 - self.prev_third
        nd = float(np.linalg.norm(d))
        xi = 1.0 if nd == 0 else min(1.0, mu * zeta / nd)
        y = x3 + (xi * (self.t - 1.0) / t_next) * d
        pert = float(np.linalg.norm(y - x3))
        if pert > mu * zeta * (1 + 1e-12) + 1e-300:
            raise AssertionError(f"momentum perturbation {pert} exceeds mu*zeta at iteration {k}")
        check_finite(y, "momentum extrapolation", k)
        x23 = check_finite(self.op1(mu, y), "secondary operator", k)
        x_next = check_finite(p.project(x23), "projection", k)
        self.t = t_next
        self.prev_third = x3
        extra = {"sufficient_decrease": bool(suff), "xi": xi, "i_k": i_k, "perturbation": pert}
        return x3, x23, x_next, lam, mu, extra


def fiba_defaults(lam, mu):
    """Schedules ``lam/(k+1)^0.1``, ``mu/(k+1)`` and ``1e6/(k+1)^0.1``."""
    return StepSchedule(lam, 0.1), StepSchedule(mu, 1.0), StepSchedule(1e6, 0.1)


def run_fiba(problem, op1, sched_lam, sched_mu, sched_zeta, x0, max_iter, L0=None,
             monitors=None):
    """Run FIBA for ``max_iter`` iterations; returns ``(trace, x, runner)``."""
    r = FibaRunner(problem, op1, sched_lam, sched_mu, sched_zeta, x0, L0, monitors)
    r.run(max_iter)
    return r.trace, r.x, r


# --------------------------------------------------------------------------
# IIBA and INC
# --------------------------------------------------------------------------

class IibaRunner(BilevelRunner):
    """Incremental subgradient sweep in a fresh seeded order, then ``op1``, then ``P``."""

    def __init__(self, problem, op1, sched_lam, sched_mu, x0, seed, track_third=False,
                 monitors=None):
        super().__init__(problem, x0, track_third, monitors)
        if problem.components is None:
            raise ValueError("IIBA needs a component split of f0")
        self.op1 = op1
        self.sched_lam, self.sched_mu = sched_lam, sched_mu
        self.rng = np.random.default_rng(seed)

    def _advance(self, k, x):
        p = self.problem
        lam, mu = self.sched_lam(k), self.sched_mu(k)
        order = self.rng.permutation(p.components.m)
        x3 = check_finite(incremental_subgrad(p.components, lam, x, order),
                          "incremental subgradient sweep", k)
        x23 = check_finite(self.op1(mu, x3), "secondary operator", k)
        x_next = check_finite(p.project(x23), "projection", k)
        return x3, x23, x_next, lam, mu, {}


def iiba_defaults(lam, eps, mu):
    """Schedules ``lam/(k+1)^eps`` and ``mu/(k+1)^(eps+0.1)``."""
    return StepSchedule(lam, eps), StepSchedule(mu, eps + 0.1)


def run_iiba(problem, op1, sched_lam, sched_mu, x0, max_iter, seed, track_third=False,
             monitors=None):
    """Run IIBA for ``max_iter`` iterations; returns ``(trace, x, runner)``."""
    r = IibaRunner(problem, op1, sched_lam, sched_mu, x0, seed, track_third, monitors)
    r.run(max_iter)
    return r.trace, r.x, r


def run_inc(problem, sched_lam, x0, max_iter, seed, track_third=False, monitors=None):
    """Projected incremental subgradient method: IIBA with ``mu = 0`` and no secondary step."""
    return run_iiba(problem, identity_operator(), sched_lam, StepSchedule.constant(0.0), x0,
                    max_iter, seed, track_third, monitors)


# --------------------------------------------------------------------------
# FISTA baseline
# --------------------------------------------------------------------------

class FistaRunner(BilevelRunner):
    """Accelerated proximal gradient on ``f0 + g`` with a constant step.

    ``prox(step, x)`` is the prox of ``step * g``.  Record ``k`` stores
    ``||x_k - (y_k - lam grad f0(y_k))||`` and ``||x_k - x_{k+1}||`` as the
    two movements, and the prox step in the ``mu`` column.
    """

    def __init__(self, problem, prox, lam, prox_step, x0, monitors=None):
        super().__init__(problem, x0, monitors=monitors)
        if not lam > 0:
            raise ValueError("FISTA needs a positive step")
        self.prox, self.lam, self.prox_step = prox, float(lam), float(prox_step)
        self.t = 1.0
        self.y = self.x.copy()

    def _advance(self, k, x):
        p = self.problem
        g = check_finite(self.y - self.lam * p.grad0(self.y), "gradient step", k)
        x_next = check_finite(self.prox(self.prox_step, g), "proximal step", k)
        t_next = momentum_next(self.t)
        self.y = x_next + ((self.t - 1.0) / t_next) * (x_next - x)
        self.t = t_next
        return g, x_next, x_next, self.lam, self.prox_step, {}


def run_fista(problem, lam, x0, max_iter, gamma=None, H=None, project=None, monitors=None):
    """FISTA on ``f0 + gamma ||H x||_1`` (unconstrained) or ``f0`` over ``X0``.

    Exactly one regime applies: ``gamma > 0`` with a transform ``H``,
    ``project`` alone, or neither (plain accelerated gradient).
    """
    if gamma is not None and gamma < 0:
        raise ValueError("gamma must be nonnegative")
    regularized = gamma is not None and gamma > 0
    if regularized and project is not None:
        raise ValueError("the regularized baseline is unconstrained; drop the projection")
    if regularized:
        if H is None:
            raise ValueError("gamma > 0 needs a transform")

        def prox(step, x):
            return H.inverse(soft_threshold(step, H.forward(x)))

        step = gamma * lam
    elif project is not None:
        def prox(step, x):
            return project(x)

        step = 0.0
    else:
        def prox(step, x):
            return x

        step = 0.0
    r = FistaRunner(problem, prox, lam, step, x0, monitors)
    r.run(max_iter)
    return r.trace, r.x, r


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------

def calibrate_mu(primary_step, op1, x0, target_ratio):
    """Secondary base step giving first-iteration movements in ratio ``target_ratio``.

    ``primary_step(x0)`` returns ``x_{1/3}``; the secondary operator is
    tried with unit step from there.
    """
    if not target_ratio > 0:
        raise ValueError("target ratio must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    x3 = primary_step(x0)
    x_try = op1(1.0, x3)
    den = float(np.linalg.norm(x3 - x_try))
    if den == 0:
        raise ValueError("secondary operator does not move at the tentative step")
    return target_ratio * float(np.linalg.norm(x0 - x3)) / den


@dataclass(frozen=True)
class GridSearchParams:
    alphas: tuple = tuple(round(0.1 * i, 1) for i in range(1, 11))
    epsilons: tuple = (0.5, 0.6, 0.7, 0.8, 0.9)
    budget: int = 20

    def __post_init__(self):
        if not self.alphas or not self.epsilons:
            raise ValueError("grids must be nonempty")
        if self.budget < 1:
            raise ValueError("budget must be at least one iteration")


def incremental_base_step(f0, subgrad0, x0, s):
    """``s f0(x0) / ||g(x0)||^2``, the scale multiplied by ``alpha``."""
    g = subgrad0(x0)
    gg = float(g @ g)
    if gg == 0:
        raise ValueError("zero subgradient at the starting point")
    return s * f0(x0) / gg


def grid_search_lambda(problem, subgrad0, x0, params, seed):
    """Select ``(alpha, eps)`` minimizing ``f0`` after ``params.budget`` INC iterations.

    Returns ``(alpha, eps, lam)`` with ``lam = alpha * s f0(x0)/||g(x0)||^2``.
    Ties go to the first pair in grid order.
    """
    s = problem.components.m
    base = incremental_base_step(problem.f0, subgrad0, x0, s)
    best = None
    for alpha, eps in itertools.product(params.alphas, params.epsilons):
        lam = alpha * base
        _, x, _ = run_inc(problem, StepSchedule(lam, eps), x0, params.budget, seed)
        val = problem.f0(x)
        if best is None or val < best[0]:
            best = (val, alpha, eps, lam)
    return best[1], best[2], best[3]


def consistent_start(model):
    """Constant image whose projections have the same total as the data."""
    mass = float(np.asarray(model.R.sum(axis=0)).sum())
    if mass <= 0:
        raise ValueError("projector has no mass")
    return np.full(model.n, float(model.b.sum()) / mass)
