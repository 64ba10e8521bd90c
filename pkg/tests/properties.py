"""Randomized checks of the descent inequality and movement bound of operators."""

import math

import numpy as np

from bilevel import objectives as ob
from bilevel import operators as op
from bilevel.feasibility import nonneg_projector


def descent_slack(O, f, x, y, lam, beta=None, rho=None):
    """Right side minus left side of the descent inequality (>= 0 when it holds)."""
    beta = O.meta.beta if beta is None else beta
    rho = O.meta.rho_bound(lam) if rho is None else rho
    z = O(lam, x)
    lhs = float(np.sum((z - y) ** 2))
    rhs = float(np.sum((x - y) ** 2)) - beta * lam * (f(z) - f(y)) + lam * rho
    return rhs - lhs


def movement_excess(O, x, lam):
    """``||x - O(lam, x)|| - lam * gamma`` (<= 0 when the bound holds)."""
    return float(np.linalg.norm(x - O(lam, x))) - lam * O.meta.gamma


def _loguniform(rng, lo, hi):
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def l1_setup(rng, m=12, n=6, s=3):
    R = rng.standard_normal((m, n))
    b = rng.standard_normal(m)
    model = ob.LinearResidualModel(R, b, s)
    return model, ob.l1_component_oracle(model)


class Case:
    """An operator, its objective and samplers for (x, y, lam)."""

    def __init__(self, name, O, f, sample, gate=None):
        self.name, self.O, self.f, self.sample, self.gate = name, O, f, sample, gate


def build_cases(rng):
    cases = []
    n = 6

    # subgradient step on ||x||_1 (G = sqrt(n))
    O = op.subgrad_operator(lambda x: float(np.abs(x).sum()), np.sign, math.sqrt(n))
    cases.append(Case("subgrad_step", O, O.value, lambda r: (
        r.standard_normal(n) * 3, r.standard_normal(n) * 3, _loguniform(r, 1e-3, 2.0))))

    # projected gradient on a least-squares objective over the orthant
    A = rng.standard_normal((8, n))
    bb = rng.standard_normal(8)
    f = lambda x: 0.5 * float(np.sum((A @ x - bb) ** 2))
    g = lambda x: A.T @ (A @ x - bb)
    L = np.linalg.norm(A, 2) ** 2
    O = op.proj_grad_operator(f, g, nonneg_projector())
    gate = lambda x, lam, O=O: op.sufficient_decrease_holds(f, g, x, O(lam, x), lam)
    cases.append(Case("proj_grad_step", O, f, lambda r: (
        r.standard_normal(n) * 2, np.abs(r.standard_normal(n)) * 2,
        _loguniform(r, 1e-3 / L, 3.0 / L)), gate))

    # incremental subgradient on an l1 residual split in 3 stripes
    model, oracle = l1_setup(rng)
    perm_rng = np.random.default_rng(rng.integers(2**32))
    O = op.incremental_operator(oracle, lambda: perm_rng.permutation(oracle.m))
    cases.append(Case("incremental_subgrad", O, oracle.total, lambda r: (
        r.standard_normal(6) * 3, r.standard_normal(6) * 3, _loguniform(r, 1e-4, 0.5))))

    # Haar soft-thresholding on 8 x 8 images
    H = op.HaarTransform(8)
    O = op.haar_prox_operator(H)
    cases.append(Case("haar_prox", O, O.value, lambda r: (
        r.standard_normal(64) * 2, r.standard_normal(64) * 2, _loguniform(r, 1e-3, 2.0))))

    # J-fold TV subgradient steps on 6 x 6 images
    for J in (5, 10):
        O = op.tv_iterated_operator(36, J)
        cases.append(Case(f"iterated_tv_J{J}", O, op.tv_value, lambda r: (
            r.standard_normal(36) * 2, r.standard_normal(36) * 2,
            _loguniform(r, 1e-3, 0.5))))
    return cases


def run_case(case, rng, trials):
    """Return ``(min descent slack, max movement excess, accepted trials)``."""
    worst_slack, worst_move, used = math.inf, -math.inf, 0
    for _ in range(trials):
        x, y, lam = case.sample(rng)
        if case.gate is not None and not case.gate(x, lam):
            continue
        used += 1
        worst_slack = min(worst_slack, descent_slack(case.O, case.f, x, y, lam))
        if case.O.meta.gamma is not None:
            worst_move = max(worst_move, movement_excess(case.O, x, lam))
    return worst_slack, worst_move, used
