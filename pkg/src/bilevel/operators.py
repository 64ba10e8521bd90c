"""Optimality operators ``(step, x) -> x'`` with their descent constants.

Every factory returns an :class:`OptimalityOperator` whose ``meta`` states
the constants of

    ||O(l, x) - y||^2 <= ||x - y||^2 - beta*l*(f(O(l, x)) - f(y)) + l*rho(l)
    ||x - O(l, x)||   <= l*gamma

Subgradient selections use ``sign(0) = 0`` at kinks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import OperatorMeta

__all__ = [
    "ComponentOracle",
    "HaarTransform",
    "IdentityTransform",
    "OptimalityOperator",
    "haar_prox",
    "haar_prox_operator",
    "harmonic",
    "identity_operator",
    "incremental_operator",
    "incremental_subgrad",
    "iterated_op",
    "iterated_operator",
    "proj_grad_operator",
    "proj_grad_step",
    "soft_threshold",
    "soft_threshold_operator",
    "subgrad_operator",
    "subgrad_step",
    "sufficient_decrease_holds",
    "tv_bound",
    "tv_subgrad",
    "tv_value",
]


@dataclass
class OptimalityOperator:
    """A stepsize-parametrized map with declared constants.

    ``value`` is the objective the operator optimizes, when known.
    """

    apply: Callable[[float, np.ndarray], np.ndarray]
    meta: OperatorMeta
    value: Optional[Callable[[np.ndarray], float]] = None
    name: str = ""

    def __call__(self, step, x):
        return self.apply(step, x)


@dataclass
class ComponentOracle:
    """``f = sum_i f_i`` with per-component values, subgradients and bounds ``C_i``."""

    m: int
    value: Callable[[int, np.ndarray], float]
    subgrad: Callable[[int, np.ndarray], np.ndarray]
    bounds: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("need at least one component")
        if self.bounds is not None:
            self.bounds = np.asarray(self.bounds, dtype=np.float64)
            if self.bounds.shape != (self.m,):
                raise ValueError("one bound per component is required")

    def total(self, x):
        return sum(self.value(i, x) for i in range(self.m))

    @property
    def bound_sum(self):
        if self.bounds is None:
            raise ValueError("component bounds were not supplied")
        return float(self.bounds.sum())


# --------------------------------------------------------------------------
# Gradient-type steps
# --------------------------------------------------------------------------

def subgrad_step(subgrad, lam, x):
    """``x - lam * g(x)`` for a deterministic subgradient selection ``g``."""
    if lam < 0:
        raise ValueError("stepsize must be nonnegative")
    if lam == 0:
        return np.array(x, dtype=np.float64, copy=True)
    return x - lam * subgrad(x)


def subgrad_operator(value, subgrad, G, name="subgradient step"):
    """Subgradient step for an objective with subgradient norms bounded by ``G``."""
    G = float(G)
    meta = OperatorMeta(beta=2.0, gamma=G, rho=lambda lam: 3.0 * lam * G * G,
                        note="rho relative to f at the output")
    return OptimalityOperator(lambda lam, x: subgrad_step(subgrad, lam, x), meta, value, name)


def proj_grad_step(grad, proj, lam, x):
    """``proj(x - lam * grad(x))``."""
    if lam < 0:
        raise ValueError("stepsize must be nonnegative")
    return proj(x - lam * grad(x))


def sufficient_decrease_holds(value, grad, x, y, lam, rtol=1e-12):
    """Quadratic upper-bound test ``f(y) <= f(x) + <grad f(x), y-x> + ||y-x||^2/(2 lam)``.

    A relative slack of ``rtol`` absorbs rounding.
    """
    if not lam > 0:
        raise ValueError("stepsize must be positive")
    d = y - x
    fx = value(x)
    rhs = fx + float(grad(x) @ d) + float(d @ d) / (2.0 * lam)
    return value(y) <= rhs + rtol * max(abs(fx), abs(rhs), 1.0)


def proj_grad_operator(value, grad, proj, name="projected gradient"):
    """Projected gradient step; descent holds with ``rho = 0`` for members of ``X0``
    whenever :func:`sufficient_decrease_holds` accepts the step."""
    meta = OperatorMeta(beta=2.0, gamma=None, rho=None,
                        note="valid for y in X0 when the sufficient-decrease test holds")
    return OptimalityOperator(lambda lam, x: proj_grad_step(grad, proj, lam, x), meta, value, name)


def incremental_subgrad(oracle, lam, x, order):
    """Sweep ``x <- x - lam * g_{order[i]}(x)`` over all components once."""
    order = np.asarray(order)
    if order.shape != (oracle.m,) or not np.array_equal(np.sort(order), np.arange(oracle.m)):
        raise ValueError(f"order must be a permutation of 0..{oracle.m - 1}")
    if lam < 0:
        raise ValueError("stepsize must be nonnegative")
    x = np.array(x, dtype=np.float64, copy=True)
    if lam == 0:
        return x
    for i in order:
        x -= lam * oracle.subgrad(int(i), x)
    return x


def incremental_operator(oracle, order_fn, name="incremental subgradient"):
    """Incremental operator; ``order_fn()`` supplies the permutation of each call."""
    C = oracle.bound_sum
    meta = OperatorMeta(beta=2.0, gamma=C, rho=lambda lam: 3.0 * lam * C * C,
                        note="rho relative to f at the output")
    return OptimalityOperator(lambda lam, x: incremental_subgrad(oracle, lam, x, order_fn()),
                              meta, oracle.total, name)


def identity_operator():
    meta = OperatorMeta(beta=2.0, gamma=0.0, rho=None, note="f = 0")
    return OptimalityOperator(lambda lam, x: np.array(x, dtype=np.float64, copy=True), meta,
                              lambda x: 0.0, "identity")


# --------------------------------------------------------------------------
# Soft-thresholding and the Haar transform
# --------------------------------------------------------------------------

def soft_threshold(mu, w):
    """Componentwise shrinkage ``sign(w) * max(|w| - mu, 0)``."""
    if mu < 0:
        raise ValueError("threshold must be nonnegative")
    w = np.asarray(w, dtype=np.float64)
    return np.sign(w) * np.maximum(np.abs(w) - mu, 0.0)


def soft_threshold_operator(n):
    """Prox of ``mu * ||x||_1``, i.e. the Haar operator with ``H = I``."""
    return haar_prox_operator(IdentityTransform(n))


class IdentityTransform:
    """``H = I`` on vectors of length ``n``."""

    def __init__(self, n):
        self.n = int(n)

    def forward(self, x):
        return np.asarray(x, dtype=np.float64)

    def inverse(self, w):
        return np.asarray(w, dtype=np.float64)


class HaarTransform:
    """Full multilevel orthonormal 2D Haar transform on ``side x side`` images.

    Each level maps the current low-pass block to averages and differences
    (scaled by ``1/sqrt(2)``) along rows, then along columns, and recurses on
    the low-low quadrant until it is a single pixel.
    """

    def __init__(self, side):
        side = int(side)
        if side < 1 or side & (side - 1):
            raise ValueError(f"Haar transform needs a power-of-two side, got {side}")
        self.side = side
        self.n = side * side

    @staticmethod
    def _split(a, axis):
        even = np.take(a, np.arange(0, a.shape[axis], 2), axis=axis)
        odd = np.take(a, np.arange(1, a.shape[axis], 2), axis=axis)
        return np.concatenate(((even + odd), (even - odd)), axis=axis) / math.sqrt(2.0)

    @staticmethod
    def _merge(a, axis):
        h = a.shape[axis] // 2
        lo = np.take(a, np.arange(h), axis=axis)
        hi = np.take(a, np.arange(h, 2 * h), axis=axis)
        out = np.empty_like(a)
        idx_e = [slice(None)] * a.ndim
        idx_o = [slice(None)] * a.ndim
        idx_e[axis] = slice(0, None, 2)
        idx_o[axis] = slice(1, None, 2)
        out[tuple(idx_e)] = (lo + hi) / math.sqrt(2.0)
        out[tuple(idx_o)] = (lo - hi) / math.sqrt(2.0)
        return out

    def forward(self, x):
        w = np.array(x, dtype=np.float64).reshape(self.side, self.side)
        s = self.side
        while s > 1:
            block = w[:s, :s]
            block = self._split(self._split(block, 1), 0)
            w[:s, :s] = block
            s //= 2
        return w.ravel()

    def inverse(self, c):
        w = np.array(c, dtype=np.float64).reshape(self.side, self.side)
        s = 2
        while s <= self.side:
            block = w[:s, :s]
            w[:s, :s] = self._merge(self._merge(block, 0), 1)
            s *= 2
        return w.ravel()


def haar_prox(mu, x, H):
    """``H^T soft_threshold(mu, H x)``, the prox of ``mu * ||H .||_1``."""
    return H.inverse(soft_threshold(mu, H.forward(x)))


def haar_prox_operator(H):
    n = H.n
    meta = OperatorMeta(beta=2.0, gamma=math.sqrt(n), rho=lambda mu: 3.0 * mu * n,
                        note="rho relative to f at the output")
    return OptimalityOperator(lambda mu, x: haar_prox(mu, x, H), meta,
                              lambda x: float(np.abs(H.forward(x)).sum()), "haar prox")


# --------------------------------------------------------------------------
# Total variation
# --------------------------------------------------------------------------

def _as_square(x):
    x = np.asarray(x, dtype=np.float64)
    side = math.isqrt(x.size)
    if side * side != x.size or side < 2:
        raise ValueError("TV needs a square image with side >= 2")
    return x.reshape(side, side)


def _tv_diffs(img):
    # pixel (r, c): horizontal partner (r, c-1), vertical partner (r-1, c), periodic
    a = img - np.roll(img, 1, axis=1)
    b = img - np.roll(img, 1, axis=0)
    return a, b


def tv_value(x):
    """Isotropic total variation with periodic backward differences."""
    a, b = _tv_diffs(_as_square(x))
    return float(np.sqrt(a * a + b * b).sum())


def tv_subgrad(x):
    """A subgradient of :func:`tv_value`; terms with both differences zero give 0."""
    img = _as_square(x)
    a, b = _tv_diffs(img)
    nrm = np.sqrt(a * a + b * b)
    safe = np.where(nrm > 0, nrm, 1.0)
    ua = np.where(nrm > 0, a / safe, 0.0)
    ub = np.where(nrm > 0, b / safe, 0.0)
    g = ua + ub - np.roll(ua, -1, axis=1) - np.roll(ub, -1, axis=0)
    return g.ravel()


def tv_bound(n):
    """Subgradient norm bound ``sqrt(8 n)``; the difference operator has norm at most ``sqrt(8)``."""
    return math.sqrt(8.0 * n)


def tv_operator(n):
    return subgrad_operator(tv_value, tv_subgrad, tv_bound(n), "TV subgradient step")


# --------------------------------------------------------------------------
# Iterated operator
# --------------------------------------------------------------------------

def harmonic(J):
    return math.fsum(1.0 / i for i in range(1, J + 1))


def iterated_op(base, J, lam, x):
    """``x^(i) = base(lam / i, x^(i-1))`` for ``i = 1..J``."""
    if J < 1:
        raise ValueError("J must be at least 1")
    for i in range(1, J + 1):
        x = base(lam / i, x)
    return x


def iterated_operator(base, J, M):
    """J-fold repetition of ``base`` with steps ``lam / i``.

    ``M`` bounds the subgradients of the objective.  The repeated descent
    inequality carries the weight ``beta * H_J`` with ``H_J = sum 1/i``,
    which becomes the declared ``beta``.
    """
    if J < 1:
        raise ValueError("J must be at least 1")
    bm = base.meta
    if bm.gamma is None:
        raise ValueError("base operator needs a finite movement bound")
    HJ = harmonic(J)
    cross = math.fsum((1.0 / i) * math.fsum(1.0 / j for j in range(i + 1, J + 1))
                      for i in range(1, J + 1))

    def rho(lam):
        return (math.fsum(bm.rho_bound(lam / i) / i for i in range(1, J + 1))
                + 2.0 * lam * bm.gamma * M * cross)

    meta = OperatorMeta(beta=bm.beta * HJ, gamma=bm.gamma * HJ, rho=rho,
                        note=f"{J}-fold repetition")
    return OptimalityOperator(lambda lam, x: iterated_op(base, J, lam, x), meta, base.value,
                              f"{J}x {base.name}")


def tv_iterated_operator(n, J):
    base = tv_operator(n)
    return iterated_operator(base, J, tv_bound(n))
