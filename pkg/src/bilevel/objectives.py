"""Data-fidelity and regularity objectives for a linear model ``R x ~ b``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .operators import ComponentOracle

__all__ = [
    "HuberParams",
    "LinearResidualModel",
    "haar_norm_subgrad",
    "haar_norm_value",
    "huber_grad",
    "huber_h",
    "huber_component_oracle",
    "huber_hprime",
    "huber_setup",
    "huber_value",
    "l1_component_oracle",
    "l1_component_subgrad",
    "l1_component_value",
    "l1_subgrad",
    "l1_value",
    "lsq_grad",
    "lsq_row_oracle",
    "lsq_value",
]


class LinearResidualModel:
    """A matrix ``R`` (dense or sparse), data ``b`` and a contiguous row partition.

    ``subsets`` is either a count ``s`` of equal contiguous blocks or an
    explicit list of ``(start, stop)`` row ranges covering all rows once.
    """

    def __init__(self, R, b, subsets=1):
        self.R = sp.csr_matrix(R) if not sp.issparse(R) else R.tocsr()
        self.Rt = self.R.T.tocsr()
        self.b = np.asarray(b, dtype=np.float64).ravel()
        m, n = self.R.shape
        if self.b.size != m:
            raise ValueError(f"data length {self.b.size} does not match {m} rows")
        self.m, self.n = m, n
        if isinstance(subsets, (int, np.integer)):
            if not 1 <= subsets <= m:
                raise ValueError(f"subset count {subsets} outside [1, {m}]")
            cuts = np.linspace(0, m, int(subsets) + 1).round().astype(int)
            subsets = list(zip(cuts[:-1].tolist(), cuts[1:].tolist()))
        subsets = [(int(a), int(b_)) for a, b_ in subsets]
        pos = 0
        for a, b_ in subsets:
            if a != pos or b_ <= a:
                raise ValueError("subsets must be contiguous, nonempty and in order")
            pos = b_
        if pos != m:
            raise ValueError("subsets must cover every row")
        self.subsets = subsets
        self._blocks = [self.R[a:b_] for a, b_ in subsets]
        self._blocks_t = [blk.T.tocsr() for blk in self._blocks]
        self.row_norms = np.sqrt(np.asarray(self.R.multiply(self.R).sum(axis=1)).ravel())

    @classmethod
    def from_projector(cls, proj, sino, s=1):
        """Model for a :class:`~bilevel.tomo.RadonProjector` with angle-stripe subsets."""
        data = sino.data if hasattr(sino, "data") else sino
        return cls(proj.matrix, data, proj.geometry.angle_stripes(s))

    @property
    def s(self):
        return len(self.subsets)

    def residual(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            raise ValueError(f"expected a vector of length {self.n}, got shape {x.shape}")
        return self.R @ x - self.b

    def block_residual(self, i, x):
        a, b_ = self.subsets[i]
        return self._blocks[i] @ x - self.b[a:b_]

    def block_adjoint(self, i, y):
        return self._blocks_t[i] @ y


# --------------------------------------------------------------------------
# Least squares and its Huber version
# --------------------------------------------------------------------------

def lsq_value(model, x):
    r = model.residual(x)
    return 0.5 * float(r @ r)


def lsq_grad(model, x):
    return model.Rt @ model.residual(x)


def lsq_row_oracle(model):
    """``1/2 ||R x - b||^2`` split by the model's row subsets (no bounds)."""
    def value(i, x):
        r = model.block_residual(i, x)
        return 0.5 * float(r @ r)

    def subgrad(i, x):
        return model.block_adjoint(i, model.block_residual(i, x))

    return ComponentOracle(model.s, value, subgrad)


@dataclass(frozen=True)
class HuberParams:
    delta: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Huber threshold must be positive")


def huber_setup(model, x_tilde=None):
    """``delta = ||R x~ - b||`` with ``x~ = 0`` by default."""
    if x_tilde is None:
        x_tilde = np.zeros(model.n)
    delta = float(np.linalg.norm(model.residual(x_tilde)))
    if delta == 0:
        raise ValueError("Huber threshold is zero: x~ fits the data exactly")
    return HuberParams(delta)


def huber_h(r, delta):
    """``r^2`` inside ``(-delta, delta)``, ``2 delta |r| - delta^2`` outside."""
    a = np.abs(r)
    return np.where(a < delta, r * r, 2.0 * delta * a - delta * delta)


def huber_hprime(r, delta):
    return np.clip(2.0 * r, -2.0 * delta, 2.0 * delta)


def huber_value(model, p, x):
    return 0.5 * float(huber_h(model.residual(x), p.delta).sum())


def huber_grad(model, p, x):
    return 0.5 * (model.Rt @ huber_hprime(model.residual(x), p.delta))


def huber_component_oracle(model, p):
    """Row-subset split of the Huber objective, ``C_i = delta * sum of row norms``."""
    def value(i, x):
        return 0.5 * float(huber_h(model.block_residual(i, x), p.delta).sum())

    def subgrad(i, x):
        return 0.5 * model.block_adjoint(i, huber_hprime(model.block_residual(i, x), p.delta))

    bounds = np.array([p.delta * model.row_norms[a:b_].sum() for a, b_ in model.subsets])
    return ComponentOracle(model.s, value, subgrad, bounds)


# --------------------------------------------------------------------------
# l1 residual
# --------------------------------------------------------------------------

def l1_value(model, x):
    return float(np.abs(model.residual(x)).sum())


def l1_subgrad(model, x):
    return model.Rt @ np.sign(model.residual(x))


def l1_component_value(model, i, x):
    return float(np.abs(model.block_residual(i, x)).sum())


def l1_component_subgrad(model, i, x):
    return model.block_adjoint(i, np.sign(model.block_residual(i, x)))


def l1_component_oracle(model):
    """Component split of ``||R x - b||_1`` with ``C_i = sum of row norms in subset i``."""
    bounds = np.array([model.row_norms[a:b_].sum() for a, b_ in model.subsets])
    return ComponentOracle(
        model.s,
        lambda i, x: l1_component_value(model, i, x),
        lambda i, x: l1_component_subgrad(model, i, x),
        bounds,
    )


# --------------------------------------------------------------------------
# Haar 1-norm
# --------------------------------------------------------------------------

def haar_norm_value(H, x):
    return float(np.abs(H.forward(x)).sum())


def haar_norm_subgrad(H, x):
    return H.inverse(np.sign(H.forward(x)))
