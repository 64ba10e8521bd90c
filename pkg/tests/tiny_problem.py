"""Four-variable bilevel test problem with an enumeration oracle.

min ||x||_1  over  argmin { 1/2 ||A x - b||^2 : x >= 0 },  A is 2 x 4 of rank 2.

The inner solution set is found by enumerating KKT active sets of the
nonnegative least-squares problem; the outer problem is a linear program
over that set, solved by enumerating basic feasible solutions.
"""

import itertools

import numpy as np

from bilevel.core import BilevelProblem
from bilevel.feasibility import nonneg_projector
from bilevel.objectives import LinearResidualModel, lsq_grad, lsq_row_oracle, lsq_value

SEED = 20240611


def make_data(seed=SEED):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.2, 1.0, size=(2, 4)) * rng.choice([1.0, -1.0], size=(2, 4), p=[0.75, 0.25])
    x_true = rng.uniform(0.5, 1.5, size=4)
    return A, A @ x_true


def nnls_kkt(A, b, tol=1e-12):
    """Minimum of 1/2||Ax-b||^2 over x >= 0 by trying every free set."""
    n = A.shape[1]
    best = None
    for r in range(n + 1):
        for free in itertools.combinations(range(n), r):
            x = np.zeros(n)
            if free:
                Af = A[:, free]
                x[list(free)] = np.linalg.lstsq(Af, b, rcond=None)[0]
            if np.any(x < -tol):
                continue
            g = A.T @ (A @ x - b)
            fixed = [j for j in range(n) if j not in free]
            if np.any(g[fixed] < -1e-10):
                continue
            val = 0.5 * float(np.sum((A @ x - b) ** 2))
            if best is None or val < best[0]:
                best = (val, np.maximum(x, 0.0))
    return best


def lp_vertices(A, c):
    """Minimize ||x||_1 over {x >= 0 : A x = c} by basic feasible solutions."""
    n = A.shape[1]
    best = None
    for basis in itertools.combinations(range(n), A.shape[0]):
        B = A[:, basis]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        xb = np.linalg.solve(B, c)
        if np.any(xb < -1e-12):
            continue
        x = np.zeros(n)
        x[list(basis)] = np.maximum(xb, 0.0)
        if best is None or x.sum() < best[0] - 1e-12:
            best = (float(x.sum()), x)
    return best


def oracle(A, b):
    """Return ``(f0*, f1*, x*)``."""
    f0s, xh = nnls_kkt(A, b)
    f1s, xs = lp_vertices(A, A @ xh)
    return f0s, f1s, xs


def problem(A, b, split_rows=False):
    model = LinearResidualModel(A, b, subsets=A.shape[0] if split_rows else 1)
    return BilevelProblem(
        f0=lambda x: lsq_value(model, x),
        f1=lambda x: float(np.abs(x).sum()),
        project=nonneg_projector(),
        grad0=lambda x: lsq_grad(model, x),
        components=lsq_row_oracle(model),
    ), model
