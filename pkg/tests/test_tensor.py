import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aiectr.tensor import (AdamState, DimensionError, DivergenceError, ParameterStore, activation,
                           activation_grad, adam_step, affine_backward, affine_forward, seeded_init, sigmoid)

import oracles


# ----------------------------------------------------------- affine_forward
def test_affine_identity():
    assert affine_forward(np.eye(2), np.array([3.0, 4.0]), np.zeros(2)).tolist() == [3.0, 4.0]


def test_affine_scaled_plus_bias():
    W = np.array([[2.0, 0.0], [0.0, 2.0]])
    assert affine_forward(W, np.ones(2), np.ones(2)).tolist() == [3.0, 3.0]


def test_affine_matches_loop_oracle_5x3(rng):
    W, x, b = rng.normal(size=(5, 3)), rng.normal(size=3), rng.normal(size=5)
    np.testing.assert_allclose(affine_forward(W, x, b), oracles.affine_loop(W.tolist(), x.tolist(), b.tolist()),
                               rtol=0, atol=1e-12)


def test_affine_matches_oracle_1000_cases():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        o, i = rng.integers(1, 8, 2)
        W, x, b = rng.normal(size=(o, i)), rng.normal(size=i), rng.normal(size=o)
        got = affine_forward(W, x, b)
        want = oracles.affine_loop(W.tolist(), x.tolist(), b.tolist())
        assert np.max(np.abs(got - want)) <= 1e-12


def test_affine_batched_rows_match_single():
    rng = np.random.default_rng(1)
    W, X, b = rng.normal(size=(4, 3)), rng.normal(size=(6, 3)), rng.normal(size=4)
    batched = affine_forward(W, X, b)
    for r in range(6):
        np.testing.assert_allclose(batched[r], affine_forward(W, X[r], b), atol=1e-15)


def test_affine_shape_error_names_shapes():
    with pytest.raises(DimensionError) as info:
        affine_forward(np.zeros((2, 3)), np.zeros(4), np.zeros(2))
    assert "(2, 3)" in str(info.value) and "(4,)" in str(info.value)


def test_affine_backward_finite_differences(rng):
    W, X, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=3)
    R = rng.normal(size=(5, 3))

    def f():
        return float(np.sum(R * affine_forward(W, X, b)))

    dW, dX, db = affine_backward(W, X, R)
    for arr, g in ((W, dW), (X, dX), (b, db)):
        assert oracles.rel_error(oracles.central_diff(f, arr), g) < 1e-5


# --------------------------------------------------------------- activation
def test_relu_example():
    assert activation(np.array([-1.0, 0.0, 2.0]), "relu").tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_zero():
    assert activation(np.array([0.0]), "sigmoid").tolist() == [0.5]


def test_sigmoid_floor_keeps_log_loss_finite():
    p = activation(np.array([-800.0, 800.0]), "sigmoid")
    assert p[0] == pytest.approx(1e-15) and p[0] > 0
    assert p[1] < 1.0
    assert np.all(np.isfinite(np.log(p))) and np.all(np.isfinite(np.log1p(-p)))


def test_identity_copies():
    x = np.array([1.0, -2.0])
    out = activation(x, "identity")
    out[0] = 5.0
    assert x[0] == 1.0


def test_unknown_activation():
    with pytest.raises(ValueError):
        activation(np.zeros(1), "tanh")


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "identity"])
def test_activation_grad_finite_differences(kind, rng):
    x = rng.normal(size=20)
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the relu kink
    R = rng.normal(size=20)

    def f():
        return float(np.sum(R * activation(x, kind)))

    assert oracles.rel_error(oracles.central_diff(f, x), activation_grad(x, kind, R)) < 1e-5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=20))
def test_sigmoid_strictly_inside_unit_interval(xs):
    p = sigmoid(np.array(xs))
    assert np.all(p > 0) and np.all(p < 1)


# ---------------------------------------------------------------- adam_step
def test_adam_zero_grad_leaves_param():
    p = np.array([1.0, -2.0])
    st_ = AdamState.like(p, lr=0.1)
    adam_step(p, np.zeros(2), st_)
    assert p.tolist() == [1.0, -2.0] and st_.t == 1


def test_adam_first_step_moves_by_lr():
    p = np.array([0.0])
    adam_step(p, np.array([1.0]), AdamState.like(p, lr=0.1))
    assert p[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_quadratic_converges_and_matches_scalar_recursion():
    w = np.array([0.0])
    st_ = AdamState.like(w, lr=0.1)
    for _ in range(100):
        adam_step(w, 2 * (w - 3.0), st_)
    assert abs(w[0] - 3.0) < 0.05
    assert w[0] == pytest.approx(oracles.adam_scalar(0.0, lambda v: 2 * (v - 3.0), 100, 0.1), abs=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = np.array([1.0])
    st_ = AdamState.like(p)
    with pytest.raises(DivergenceError):
        adam_step(p, np.array([np.nan]), st_)
    assert p[0] == 1.0 and st_.t == 0


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.like(np.zeros(2)))


def test_adam_deterministic(rng):
    g = rng.normal(size=(5, 4))
    outs = []
    for _ in range(2):
        p = np.ones((5, 4))
        s = AdamState.like(p, lr=0.01)
        for _ in range(3):
            adam_step(p, g, s, l2=0.1)
        outs.append(p.copy())
    assert np.array_equal(outs[0], outs[1])


# -------------------------------------------------------------- seeded_init
def test_init_zeros():
    assert not np.any(seeded_init((3, 4), "zeros", seed=5))


def test_init_same_seed_identical():
    a = seeded_init((7, 3), seed=11, name="w")
    b = seeded_init((7, 3), seed=11, name="w")
    assert np.array_equal(a, b)
    assert not np.array_equal(a, seeded_init((7, 3), seed=12, name="w"))


def test_glorot_variance():
    w = seeded_init((100, 100), seed=3)
    target = 2.0 / 200
    assert abs(w.var() - target) / target < 0.2


def test_init_rejects_empty_shape():
    with pytest.raises(ValueError):
        seeded_init((), seed=0)


# ----------------------------------------------------------- ParameterStore
def test_store_step_bumps_version_and_copy_is_deep():
    s = ParameterStore()
    s.add("w", np.ones(3))
    c = s.copy()
    s.step({"w": np.ones(3)}, lr=0.1)
    assert s.version == 1 and c.version == 0
    assert np.all(c["w"] == 1.0) and np.all(s["w"] < 1.0)
    with pytest.raises(KeyError):
        s.add("w", np.ones(1))
