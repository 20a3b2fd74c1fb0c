import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cleannet import autograd as ag
from cleannet.autograd import Graph, Tensor
from cleannet.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NonFiniteError,
    TrainingDivergenceError,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def fd_error(f, params, step=1e-5):
    return ag.grad_check(f, params, step)


# ------------------------------------------------------------------ forward values


def test_affine_examples():
    assert np.array_equal(ag.affine([[1.0, 2.0]], np.eye(2), np.zeros(2)).data, [[1.0, 2.0]])
    assert np.array_equal(ag.affine([[1.0, 1.0]], [[2.0], [3.0]], [1.0]).data, [[6.0]])


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        ag.affine(np.ones((2, 3)), np.ones((2, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        ag.affine(np.ones((2, 2)), np.ones((2, 2)), np.zeros(3))


def test_tanh_values():
    assert ag.tanh_act([0.0]).data[0] == 0.0
    assert abs(ag.tanh_act([1e9]).data[0] - 1.0) <= 1e-12


def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ag.softmax([math.log(2), 0.0]).data, [2 / 3, 1 / 3], atol=1e-15)
    out = ag.softmax([1000.0, 0.0]).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-15)


def test_cosine_examples():
    assert ag.cosine([3.0, 4.0], [3.0, 4.0]).data == pytest.approx(1.0, abs=1e-15)
    assert ag.cosine([1.0, 0.0], [0.0, 1.0]).data == 0.0
    assert ag.cosine([1.0, 1.0], [-1.0, -1.0]).data == pytest.approx(-1.0, abs=1e-15)


def test_cosine_rejects_zero_vector():
    with pytest.raises(DegenerateInputError):
        ag.cosine([0.0, 0.0], [1.0, 2.0])


def test_mse_examples():
    assert ag.mse([1.0, 2.0], [1.0, 2.0]).data == 0.0
    assert ag.mse([1.0, 2.0], [0.0, 0.0]).data == 5.0
    with pytest.raises(DimensionError):
        ag.mse([1.0, 2.0], [1.0, 2.0, 3.0])


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ag.mul([1e200], [1e200])


# ---------------------------------------------------------------- properties


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)))
def test_softmax_is_a_simplex_point(x):
    p = ag.softmax(x).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


nonzero_vec = arrays(np.float64, 5, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=200, deadline=None)
@given(nonzero_vec, nonzero_vec)
def test_cosine_in_unit_interval(a, b):
    c = float(ag.cosine(a, b).data)
    assert -1.0 - 1e-12 <= c <= 1.0 + 1e-12


@settings(max_examples=50, deadline=None)
@given(nonzero_vec, st.floats(0.01, 100))
def test_cosine_scale_invariance(a, s):
    b = np.arange(1.0, 6.0)
    assert float(ag.cosine(a * s, b).data) == pytest.approx(float(ag.cosine(a, b).data), abs=1e-12)


# ------------------------------------------------------------ gradient oracles


def rng_params(seed, **shapes):
    rng = np.random.default_rng(seed)
    return {k: rng.standard_normal(s) for k, s in shapes.items()}


@pytest.mark.parametrize("seed", range(3))
def test_affine_gradient(seed):
    p = rng_params(seed, x=(3, 4), W=(4, 2), b=(2,))
    w = np.random.default_rng(99).standard_normal((3, 2))
    assert fd_error(lambda q: ag.sum_all(ag.mul(w, ag.affine(q["x"], q["W"], q["b"]))), p) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_tanh_gradient(seed):
    p = rng_params(seed, x=(7,))
    w = np.linspace(-1, 1, 7)
    assert fd_error(lambda q: ag.sum_all(ag.mul(w, ag.tanh_act(q["x"]))), p) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_softmax_and_log_softmax_gradient(seed):
    p = rng_params(seed, x=(3, 5))
    w = np.random.default_rng(5).standard_normal((3, 5))
    assert fd_error(lambda q: ag.sum_all(ag.mul(w, ag.softmax(q["x"]))), p) < 1e-6
    assert fd_error(lambda q: ag.sum_all(ag.mul(w, ag.log_softmax(q["x"]))), p) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_cosine_gradient(seed):
    p = rng_params(seed, a=(4, 6), b=(4, 6))
    w = np.random.default_rng(6).standard_normal(4)
    assert fd_error(lambda q: ag.sum_all(ag.mul(w, ag.cosine(q["a"], q["b"]))), p) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_mse_gradient(seed):
    p = rng_params(seed, a=(5,), b=(5,))
    assert fd_error(lambda q: ag.mse(q["a"], q["b"]), p) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_segment_ops_gradient(seed):
    p = rng_params(seed, x=(7,), h=(7, 3))
    seg = np.array([0, 0, 1, 1, 1, 2, 2])
    w = np.random.default_rng(7).standard_normal((3, 3))

    def f(q):
        a = ag.segment_softmax(q["x"], seg, 3)
        pooled = ag.segment_sum(ag.mul(q["h"], ag.reshape(a, (-1, 1))), seg, 3)
        return ag.sum_all(ag.mul(w, pooled))

    assert fd_error(f, p) < 1e-6


def test_matmul_take_pick_gradient():
    p = rng_params(1, A=(4, 3), B=(3, 2), v=(3,))

    def f(q):
        M = ag.matmul(q["A"], q["B"])
        rows = ag.take(M, np.array([3, 0, 0, 2]))
        return ag.add(ag.sum_all(ag.pick(rows, np.array([1, 0, 1, 1]))),
                      ag.sum_all(ag.tanh_act(ag.matmul(q["A"], q["v"]))))

    assert fd_error(f, p) < 1e-6


def test_relu_gradient_away_from_kink():
    x = np.array([-1.3, -0.2, 0.4, 2.0])
    assert fd_error(lambda q: ag.sum_all(ag.mul([1.0, 2.0, 3.0, 4.0], ag.relu(q["x"]))), {"x": x}) < 1e-8


# --------------------------------------------------------------- backward / tape


def test_grad_check_square():
    assert ag.grad_check(lambda q: ag.mul(q["t"], q["t"]), {"t": np.array(3.0)}, 1e-5) < 1e-9


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_grad_check_rejects_bad_step_and_nonfinite():
    with pytest.raises(ContractError):
        ag.grad_check(lambda q: ag.sum_all(q["t"]), {"t": np.ones(2)}, 0.0)
    with pytest.raises(DegenerateInputError):
        ag.grad_check(lambda q: ag.mul(ag.mul(q["t"], q["t"]), 1e308), {"t": np.array(3.0)})


def test_constant_loss_gives_zero_gradients():
    g = Graph()
    p = g.params_from({"W": np.ones((2, 2)), "b": np.ones(3)})
    grads = ag.backward(g, ag.sum_all(Tensor(np.ones(4))))
    assert all(np.array_equal(v, np.zeros_like(v)) for v in grads.values())
    assert set(grads) == {"W", "b"}


def test_half_squared_norm_gradient_is_identity():
    W = np.random.default_rng(0).standard_normal((3, 4))
    g = Graph()
    p = g.params_from({"W": W})
    grads = ag.backward(g, ag.mul(0.5, ag.sum_all(ag.mul(p["W"], p["W"]))))
    np.testing.assert_allclose(grads["W"], W, rtol=0, atol=1e-15)


def test_unreached_parameter_gets_zero_and_matching_shape():
    g = Graph()
    p = g.params_from({"a": np.arange(3.0), "b": np.ones((2, 5))})
    grads = ag.backward(g, ag.sum_all(p["a"]))
    assert grads["b"].shape == (2, 5) and not grads["b"].any()
    assert np.array_equal(grads["a"], np.ones(3))


def test_non_scalar_loss_is_contract_error():
    g = Graph()
    p = g.params_from({"a": np.arange(3.0)})
    with pytest.raises(ContractError):
        ag.backward(g, ag.tanh_act(p["a"]))


def test_tape_order_is_insertion_order():
    g = Graph()
    p = g.params_from({"a": np.arange(3.0)})
    x = ag.tanh_act(p["a"])
    y = ag.sum_all(ag.mul(x, x))
    ids = [n.node_id for n in g.nodes]
    assert ids == sorted(ids)
    assert g.nodes[-1] is y


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_backward_is_linear_in_the_loss(seed):
    p0 = rng_params(seed, a=(4,), W=(4, 3))

    def l1(q):
        return ag.sum_all(ag.tanh_act(ag.matmul(ag.reshape(q["a"], (1, 4)), q["W"])))

    def l2(q):
        return ag.mse(q["a"], np.ones(4))

    _, g1 = ag.value_and_grad(l1, p0)
    _, g2 = ag.value_and_grad(l2, p0)
    _, g12 = ag.value_and_grad(lambda q: ag.add(l1(q), l2(q)), p0)
    for k in p0:
        np.testing.assert_allclose(g12[k], g1[k] + g2[k], rtol=0, atol=1e-10)


# -------------------------------------------------------------------- optimizer


def test_sgd_zero_gradient_keeps_params():
    new, _ = ag.sgd_step({"t": np.array([1.0, 2.0])}, {"t": np.zeros(2)}, 0.1, 0.9)
    assert np.array_equal(new["t"], [1.0, 2.0])


def test_sgd_single_step():
    new, _ = ag.sgd_step({"t": np.array(1.0)}, {"t": np.array(1.0)}, 0.1, 0.0)
    assert float(new["t"]) == pytest.approx(0.9, abs=1e-15)


def test_sgd_momentum_accumulates():
    opt = ag.SGD(lr=0.1, momentum=0.5)
    p = {"t": np.array(0.0)}
    p = opt.step(p, {"t": np.array(1.0)})
    p = opt.step(p, {"t": np.array(1.0)})
    # v1 = 1, v2 = 0.5 + 1
    assert float(p["t"]) == pytest.approx(-0.1 - 0.15, abs=1e-15)


def test_sgd_rejects_bad_settings_and_nonfinite_gradient():
    with pytest.raises(ContractError):
        ag.sgd_step({"t": np.ones(1)}, {"t": np.ones(1)}, 0.0)
    with pytest.raises(ContractError):
        ag.sgd_step({"t": np.ones(1)}, {"t": np.ones(1)}, 0.1, 1.0)
    with pytest.raises(TrainingDivergenceError):
        ag.sgd_step({"t": np.ones(1)}, {"t": np.array([np.inf])}, 0.1)


def test_sgd_quadratic_bowl_decreases_monotonically():
    A = np.diag([1.0, 3.0, 0.5])
    p = {"x": np.array([2.0, -1.0, 4.0])}
    opt = ag.SGD(lr=0.05, momentum=0.5)
    losses = []
    for _ in range(100):
        value, grads = ag.value_and_grad(
            lambda q: ag.mul(0.5, ag.sum_all(ag.mul(q["x"], ag.matmul(A, q["x"])))), p)
        losses.append(value)
        p = opt.step(p, grads)
    assert all(b < a for a, b in zip(losses[1:], losses[2:]))


def test_glorot_bounds_and_determinism():
    a = ag.glorot_uniform(np.random.default_rng(3), 10, 6)
    b = ag.glorot_uniform(np.random.default_rng(3), 10, 6)
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= math.sqrt(6 / 16)
