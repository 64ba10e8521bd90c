import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bilevel import feasibility as fe

vec3 = arrays(np.float64, 3, elements=st.floats(-50, 50, allow_nan=False))


def unit_ball():
    return fe.Constraint(lambda x: float(np.linalg.norm(x)) - 1.0,
                         lambda x: x / np.linalg.norm(x))


def halfspace(a, beta):
    a = np.asarray(a, dtype=float)
    na = np.linalg.norm(a)
    # scaled to the signed distance
    return fe.Constraint(lambda x: float(a @ x - beta) / na, lambda x: a / na)


def test_polyak_examples():
    np.testing.assert_allclose(fe.polyak_step(unit_ball(), 1.0, np.array([2.0, 0.0])), [1.0, 0.0])
    np.testing.assert_allclose(fe.polyak_step(unit_ball(), 2.0, np.array([2.0, 0.0])), [0.0, 0.0],
                               atol=1e-15)
    x = np.array([0.3, -0.4])
    np.testing.assert_array_equal(fe.polyak_step(unit_ball(), 1.5, x), x)


def test_polyak_zero_subgradient_and_bad_relaxation():
    c = fe.Constraint(lambda x: 1.0, lambda x: np.zeros_like(x))
    x = np.array([1.0, 2.0])
    np.testing.assert_array_equal(fe.polyak_step(c, 1.0, x), x)
    for nu in (0.0, -1.0, 2.5):
        with pytest.raises(ValueError):
            fe.polyak_step(unit_ball(), nu, x)


def test_compositions_examples():
    steps = [lambda x, c=c: fe.polyak_step(c, 1.0, x)
             for c in (halfspace([1, 0], 0.0), halfspace([0, 1], 0.0))]
    x = np.array([1.0, 1.0])
    np.testing.assert_allclose(fe.pocs_compose(steps)(x), [0.0, 0.0])
    np.testing.assert_allclose(fe.cimmino_average(steps)(x), [0.5, 0.5])
    np.testing.assert_array_equal(fe.pocs_compose(steps[:1])(x), steps[0](x))
    np.testing.assert_array_equal(fe.cimmino_average(steps[:1])(x), steps[0](x))
    with pytest.raises(ValueError):
        fe.pocs_compose([])
    with pytest.raises(ValueError):
        fe.cimmino_average([])


def random_constraints(rng, n=4, r=5):
    cons = [halfspace(rng.standard_normal(n), float(rng.uniform(0.1, 2.0))) for _ in range(r)]
    cons.append(fe.Constraint(lambda x: float(np.linalg.norm(x)) - 3.0,
                              lambda x: x / np.linalg.norm(x)))
    return cons


@pytest.mark.parametrize("compose", [fe.pocs_compose, fe.cimmino_average])
def test_fejer_monotone(compose):
    rng = np.random.default_rng(11)
    for _ in range(50):
        cons = random_constraints(rng)
        steps = [lambda x, c=c, nu=float(rng.uniform(0.2, 1.99)): fe.polyak_step(c, nu, x)
                 for c in cons]
        E = compose(steps)
        members = []
        while len(members) < 20:
            y = rng.uniform(-3, 3, 4)
            if all(c.h(y) <= 0 for c in cons):
                members.append(y)
        for y in members:
            x = rng.standard_normal(4) * 5
            assert np.linalg.norm(E(x) - y) <= np.linalg.norm(x - y) + 1e-12


@pytest.mark.parametrize("make", [
    fe.free_projector,
    fe.nonneg_projector,
    lambda: fe.box_projector([-1, 0, 2], [1, 0.5, 3]),
    lambda: fe.ball_projector([1, -1, 0.5], 2.0),
])
@settings(max_examples=60)
@given(x=vec3, z=vec3)
def test_projector_properties(make, x, z):
    P = make()
    px = P(x)
    np.testing.assert_allclose(P(px), px, atol=1e-12)
    y = P(z)
    assert float((x - px) @ (y - px)) <= 1e-9 * (1 + np.linalg.norm(x) * np.linalg.norm(z))
    assert np.linalg.norm(px - y) <= np.linalg.norm(x - y) + 1e-9


def test_projector_errors():
    with pytest.raises(ValueError):
        fe.box_projector([1.0], [0.0])
    with pytest.raises(ValueError):
        fe.ball_projector([0.0], -1.0)


def test_free_projector_copies():
    x = np.array([1.0, 2.0])
    y = fe.free_projector()(x)
    y[0] = 5.0
    assert x[0] == 1.0


def ball_phi(x):
    return max(float(np.linalg.norm(x)) - 1.0, 0.0)


def ball_E():
    return fe.pocs_compose([lambda x: fe.polyak_step(unit_ball(), 1.0, x)])


def test_repeat_until_feasible_examples():
    x = np.array([0.2, 0.1])
    y, p, ex = fe.repeat_until_feasible(ball_E(), ball_phi, 1.0, x=x, mu=0.5)
    assert p == 0 and not ex
    np.testing.assert_array_equal(y, x)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal(2)
        x *= rng.uniform(1.1, 10) / np.linalg.norm(x)
        y, p, ex = fe.repeat_until_feasible(ball_E(), ball_phi, 1.0, mu=1e-6, x=x)
        assert p == 1 and not ex
        assert np.linalg.norm(y) == pytest.approx(1.0)


def test_repeat_until_feasible_monotone_in_mu_and_budget():
    c = halfspace([1.0, 1.0], 0.0)
    E = fe.pocs_compose([lambda x: fe.polyak_step(c, 0.5, x)])
    phi = lambda x: max(c.h(x), 0.0)
    x = np.array([4.0, 4.0])
    ps = []
    for mu in (1.0, 0.1, 1e-2, 1e-4, 1e-8):
        y, p, ex = fe.repeat_until_feasible(E, phi, 1.0, alpha=1.0, eps=0.5, mu=mu, x=x)
        assert not ex
        assert phi(y) <= mu**0.5
        ps.append(p)
    assert ps == sorted(ps) and ps[-1] > ps[0]
    y, p, ex = fe.repeat_until_feasible(E, phi, 1.0, mu=0.0, x=x, p_max=5)
    assert ex and p == 5
    with pytest.raises(ValueError):
        fe.repeat_until_feasible(E, phi, 1.0, x=x, p_max=0)
    with pytest.raises(ValueError):
        fe.repeat_until_feasible(E, phi, 0.0, x=x)
