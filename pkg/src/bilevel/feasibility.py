"""Projectors onto simple sets and Polyak-type feasibility operators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Constraint",
    "FeasibilityOperator",
    "Projector",
    "ball_projector",
    "box_projector",
    "cimmino_average",
    "free_projector",
    "nonneg_projector",
    "pocs_compose",
    "polyak_step",
    "repeat_until_feasible",
]


@dataclass(frozen=True)
class Projector:
    """Euclidean projector onto ``X0``; ``kind`` names the set."""

    apply: Callable[[np.ndarray], np.ndarray]
    kind: str

    def __call__(self, x):
        return self.apply(x)


def free_projector():
    return Projector(lambda x: np.array(x, dtype=np.float64, copy=True), "all-space")


def nonneg_projector():
    return Projector(lambda x: np.maximum(x, 0.0), "nonneg")


def box_projector(lower, upper):
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if np.any(lower > upper):
        raise ValueError("box needs lower <= upper")
    return Projector(lambda x: np.clip(x, lower, upper), "box")


def ball_projector(centre, radius):
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    centre = np.asarray(centre, dtype=np.float64)

    def apply(x):
        d = x - centre
        nd = np.linalg.norm(d)
        return x.astype(np.float64, copy=True) if nd <= radius else centre + d * (radius / nd)

    return Projector(apply, "ball")


@dataclass(frozen=True)
class Constraint:
    """The set ``{x : h(x) <= 0}`` with a subgradient oracle for ``h``."""

    h: Callable[[np.ndarray], float]
    subgrad: Callable[[np.ndarray], np.ndarray]


def polyak_step(c, nu, x):
    """Relaxed subgradient projection ``x - nu [h(x)]_+ / ||g||^2 g``."""
    if not 0 < nu <= 2:
        raise ValueError("relaxation must lie in (0, 2]")
    x = np.asarray(x, dtype=np.float64)
    hx = c.h(x)
    if hx <= 0:
        return x.copy()
    g = c.subgrad(x)
    gg = float(g @ g)
    if gg == 0:
        return x.copy()
    return x - (nu * hx / gg) * g


@dataclass
class FeasibilityOperator:
    """A Fejer-monotone map toward the intersection of its constraints."""

    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return self.apply(x)


def _as_steps(steps):
    steps = list(steps)
    if not steps:
        raise ValueError("need at least one step")
    return steps


def pocs_compose(steps: Sequence[Callable]):
    """Sequential composition, first step applied first."""
    steps = _as_steps(steps)

    def apply(x):
        for s in steps:
            x = s(x)
        return x

    return FeasibilityOperator(apply)


def cimmino_average(steps: Sequence[Callable]):
    """Uniform average of the steps applied to the same point."""
    steps = _as_steps(steps)

    def apply(x):
        acc = np.zeros_like(np.asarray(x, dtype=np.float64))
        for s in steps:
            acc += s(x)
        return acc / len(steps)

    return FeasibilityOperator(apply)


def repeat_until_feasible(E, phi, K, alpha=1.0, eps=1.0, mu=1.0, x=None, p_max=100):
    """Apply ``E`` until ``phi(E^p x) <= K mu^(alpha eps)``.

    Returns ``(y, p, exhausted)``; ``exhausted`` is true when the test still
    fails after ``p_max`` applications.
    """
    if not (K > 0 and alpha > 0 and eps > 0):
        raise ValueError("K, alpha and eps must be positive")
    if p_max < 1:
        raise ValueError("p_max must be at least 1")
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    tol = K * math.pow(mu, alpha * eps)
    y = np.asarray(x, dtype=np.float64)
    for p in range(p_max + 1):
        if phi(y) <= tol:
            return y, p, False
        if p == p_max:
            break
        y = E(y)
    return y, p_max, True
