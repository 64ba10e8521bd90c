import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilevel import objectives as ob
from bilevel.operators import HaarTransform


@pytest.fixture
def model():
    rng = np.random.default_rng(3)
    R = rng.standard_normal((20, 8))
    R[rng.random(R.shape) < 0.4] = 0.0
    return ob.LinearResidualModel(R, rng.standard_normal(20), 4)


def central_diff(f, x, d, h=1e-6):
    return (f(x + h * d) - f(x - h * d)) / (2 * h)


def test_partition_and_errors():
    R = np.ones((10, 3))
    m = ob.LinearResidualModel(R, np.zeros(10), 3)
    assert m.subsets == [(0, 3), (3, 7), (7, 10)]
    m = ob.LinearResidualModel(R, np.zeros(10), [(0, 5), (5, 10)])
    assert m.s == 2
    for bad in (0, 11, [(0, 5)], [(0, 5), (6, 10)], [(0, 6), (5, 10)]):
        with pytest.raises(ValueError):
            ob.LinearResidualModel(R, np.zeros(10), bad)
    with pytest.raises(ValueError):
        ob.LinearResidualModel(R, np.zeros(9))
    with pytest.raises(ValueError):
        ob.lsq_value(m, np.zeros(4))


def test_adjoint_consistency(model):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.standard_normal(8), rng.standard_normal(20)
        Rx = model.R @ x
        assert abs(Rx @ y - x @ (model.Rt @ y)) <= 1e-6 * np.linalg.norm(Rx) * np.linalg.norm(y)


def test_lsq_examples(model):
    x = np.random.default_rng(1).standard_normal(8)
    exact = ob.LinearResidualModel(model.R, model.R @ x, 2)
    assert ob.lsq_value(exact, x) == 0.0
    np.testing.assert_array_equal(ob.lsq_grad(exact, x), 0.0)
    z = np.zeros(8)
    assert ob.lsq_value(model, z) == pytest.approx(0.5 * model.b @ model.b)
    np.testing.assert_allclose(ob.lsq_grad(model, z), -(model.Rt @ model.b))


def test_lsq_gradient_finite_difference(model):
    rng = np.random.default_rng(2)
    f = lambda x: ob.lsq_value(model, x)
    for _ in range(50):
        x, d = rng.standard_normal(8), rng.standard_normal(8)
        assert abs(central_diff(f, x, d) - ob.lsq_grad(model, x) @ d) <= 1e-5


def test_lsq_row_oracle_sums(model):
    oracle = ob.lsq_row_oracle(model)
    x = np.random.default_rng(3).standard_normal(8)
    assert oracle.total(x) == pytest.approx(ob.lsq_value(model, x))
    g = sum(oracle.subgrad(i, x) for i in range(oracle.m))
    np.testing.assert_allclose(g, ob.lsq_grad(model, x))


def test_huber_setup(model):
    p = ob.huber_setup(model)
    assert p.delta == pytest.approx(np.linalg.norm(model.b))
    x = np.ones(8)
    exact = ob.LinearResidualModel(model.R, model.R @ x)
    with pytest.raises(ValueError):
        ob.huber_setup(exact, x)
    with pytest.raises(ValueError):
        ob.HuberParams(0.0)


def test_huber_scalar_examples():
    d = 1.5
    assert ob.huber_hprime(d + 1, d) == 2 * d
    assert ob.huber_hprime(-(d + 1), d) == -2 * d
    assert ob.huber_h(0.5, d) == 0.25
    # continuous at the threshold
    assert ob.huber_h(d - 1e-12, d) == pytest.approx(ob.huber_h(d + 1e-12, d))


def test_huber_equals_lsq_when_inside(model):
    rng = np.random.default_rng(4)
    p = ob.huber_setup(model)
    seen = set()
    for _ in range(200):
        x = rng.standard_normal(8) * rng.uniform(0.01, 3)
        q = ob.lsq_value(model, x)
        f = ob.huber_value(model, p, x)
        inside = np.all(np.abs(model.residual(x)) < p.delta)
        if q <= 0.5 * p.delta**2:
            assert f == pytest.approx(q, rel=1e-14)
        assert (f == pytest.approx(q, rel=1e-14)) == inside
        assert f <= q + 1e-12
        seen.add((bool(inside), q <= 0.5 * p.delta**2))
    # inside-only residuals with q above the threshold show the converse fails
    assert seen == {(True, True), (True, False), (False, False)}


def test_huber_gradient(model):
    rng = np.random.default_rng(5)
    p = ob.HuberParams(0.8)  # small threshold, so both branches occur
    f = lambda x: ob.huber_value(model, p, x)
    bound = p.delta * model.row_norms.sum()
    n_outside = 0
    for _ in range(300):
        x, d = rng.standard_normal(8) * 2, rng.standard_normal(8)
        g = ob.huber_grad(model, p, x)
        n_outside += np.any(np.abs(model.residual(x)) > p.delta)
        fd = central_diff(f, x, d)
        assert abs(fd - g @ d) <= 1e-5 * max(1.0, abs(fd))
        assert np.linalg.norm(g) <= bound + 1e-12
    assert n_outside > 100


def test_huber_convex_midpoint(model):
    rng = np.random.default_rng(6)
    p = ob.HuberParams(0.8)
    f = lambda x: ob.huber_value(model, p, x)
    for _ in range(1000):
        x, y = rng.standard_normal(8) * 3, rng.standard_normal(8) * 3
        assert f(0.5 * (x + y)) <= 0.5 * (f(x) + f(y)) + 1e-10


def test_l1_examples(model):
    x = np.random.default_rng(7).standard_normal(8)
    exact = ob.LinearResidualModel(model.R, model.R @ x, 4)
    assert ob.l1_value(exact, x) == 0.0
    np.testing.assert_array_equal(ob.l1_subgrad(exact, x), 0.0)
    parts = sum(ob.l1_component_value(model, i, x) for i in range(model.s))
    assert parts == pytest.approx(ob.l1_value(model, x))
    g = sum(ob.l1_component_subgrad(model, i, x) for i in range(model.s))
    np.testing.assert_allclose(g, ob.l1_subgrad(model, x))


def test_l1_subgradient_inequality_and_bounds(model):
    rng = np.random.default_rng(8)
    oracle = ob.l1_component_oracle(model)
    for _ in range(1000):
        x, y = rng.standard_normal(8) * 2, rng.standard_normal(8) * 2
        g = ob.l1_subgrad(model, x)
        assert ob.l1_value(model, y) >= ob.l1_value(model, x) + g @ (y - x) - 1e-9
        for i in range(oracle.m):
            assert np.linalg.norm(oracle.subgrad(i, x)) <= oracle.bounds[i] + 1e-12


def test_haar_norm_examples():
    H = HaarTransform(8)
    assert ob.haar_norm_value(H, np.zeros(64)) == 0.0
    rng = np.random.default_rng(9)
    for _ in range(1000):
        x = rng.standard_normal(64) * rng.uniform(0.1, 10)
        assert np.linalg.norm(ob.haar_norm_subgrad(H, x)) <= 8.0 + 1e-12


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_haar_norm_sign_flip_invariance(seed):
    H = HaarTransform(4)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(16)
    flips = rng.choice([-1.0, 1.0], 16)
    a = ob.haar_norm_value(H, H.inverse(w))
    b = ob.haar_norm_value(H, H.inverse(w * flips))
    assert a == pytest.approx(b, rel=1e-12)


def test_haar_norm_subgradient_inequality():
    H = HaarTransform(4)
    rng = np.random.default_rng(10)
    for _ in range(500):
        x, y = rng.standard_normal(16), rng.standard_normal(16)
        g = ob.haar_norm_subgrad(H, x)
        assert ob.haar_norm_value(H, y) >= ob.haar_norm_value(H, x) + g @ (y - x) - 1e-9


def test_huber_components(model):
    p = ob.HuberParams(0.8)
    oracle = ob.huber_component_oracle(model, p)
    rng = np.random.default_rng(11)
    for _ in range(100):
        x = rng.standard_normal(8) * 2
        assert oracle.total(x) == pytest.approx(ob.huber_value(model, p, x))
        g = sum(oracle.subgrad(i, x) for i in range(oracle.m))
        np.testing.assert_allclose(g, ob.huber_grad(model, p, x), atol=1e-12)
        for i in range(oracle.m):
            assert np.linalg.norm(oracle.subgrad(i, x)) <= oracle.bounds[i] + 1e-12
