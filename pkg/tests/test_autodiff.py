import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from archreg import autodiff as ad

from conftest import central_diff


def _check_op(build, x0, w_seed=0, tol=1e-6):
    tape = ad.Tape()
    y = build(tape.leaf("x"))
    yv = tape.forward({"x": x0}, y)
    w = np.random.default_rng(w_seed).normal(size=np.shape(yv))
    tape.forward({"x": x0}, y)
    analytic = tape.backward(seed=w, wrt=["x"], output=y)["x"]

    def f(x):
        return float(np.sum(tape.forward({"x": x}, y) * w))

    numeric = central_diff(f, x0)
    np.testing.assert_allclose(analytic, numeric, rtol=tol, atol=tol)


X = np.random.default_rng(7).normal(size=(3, 4))
B = np.random.default_rng(8).normal(size=(4, 2))


@pytest.mark.parametrize("build", [
    lambda x: x + x,
    lambda x: x - 2.0 * x,
    lambda x: x * x,
    lambda x: x @ B,
    lambda x: ad.scale(x, -1.5),
    lambda x: ad.square(x),
    lambda x: ad.tanh(x),
    lambda x: ad.relu(x + 0.05),
    lambda x: ad.log(ad.square(x) + 1.0),
    lambda x: ad.softmax(x),
    lambda x: ad.sum(x),
    lambda x: ad.sum(x, axis=0),
    lambda x: ad.sum(x, axis=1, keepdims=True),
    lambda x: ad.clip(x, -0.5, 0.5),
    lambda x: x * np.arange(4.0),
    lambda x: -x,
], ids=["add", "sub", "mul", "matmul", "scale", "square", "tanh", "relu", "log", "softmax",
        "sum", "sum0", "sum1k", "clip", "broadcast-mul", "neg"])
def test_primitive_matches_central_differences(build):
    _check_op(build, X.copy())


def test_view_matches_central_differences():
    _check_op(lambda x: ad.view(x, 2, 8, (2, 3)) * 2.0, X.ravel().copy())


def test_embed_gathers_columns_and_accumulates_repeats():
    W0 = np.arange(12.0).reshape(3, 4)
    tokens = np.array([[1, 1, 3]])
    tape = ad.Tape()
    out = ad.embed(tape.leaf("W"), tokens)
    val = tape.forward({"W": W0}, out)
    np.testing.assert_array_equal(val[0], W0[:, [1, 1, 3]].T)
    g = tape.backward(wrt=["W"], output=out)["W"]
    expected = np.zeros_like(W0)
    expected[:, 1] = 2.0
    expected[:, 3] = 1.0
    np.testing.assert_array_equal(g, expected)


def test_softmax_gradient_matches_closed_form_jacobian():
    z = np.array([[0.3, -1.2, 2.0]])
    tape = ad.Tape()
    s = ad.softmax(tape.leaf("z"))
    p = tape.forward({"z": z}, s)[0]
    J = np.diag(p) - np.outer(p, p)
    for k in range(3):
        seed = np.zeros((1, 3))
        seed[0, k] = 1.0
        tape.forward({"z": z}, s)
        g = tape.backward(seed=seed, wrt=["z"], output=s)["z"][0]
        np.testing.assert_allclose(g, J[k], atol=1e-15)


def test_square_sum_gradient_example():
    tape = ad.Tape()
    x = tape.leaf("x")
    y = ad.sum(x * x)
    tape.forward({"x": np.array([1.0, -2.0, 3.0])})
    np.testing.assert_array_equal(tape.backward()["x"], [2.0, -4.0, 6.0])


def test_stop_gradient_blocks_flow():
    tape = ad.Tape()
    x = tape.leaf("x")
    y = ad.sum(ad.stop_gradient(x) * x)
    tape.forward({"x": np.array([2.0, 5.0])}, y)
    np.testing.assert_array_equal(tape.backward(wrt=["x"])["x"], [2.0, 5.0])


def test_unused_leaf_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf("x")
    tape.leaf("unused")
    y = ad.sum(x)
    tape.forward({"x": np.ones(2), "unused": np.ones(3)}, y)
    np.testing.assert_array_equal(tape.backward()["unused"], np.zeros(3))


def test_backward_before_forward_raises():
    tape = ad.Tape()
    ad.sum(tape.leaf("x"))
    with pytest.raises(ad.TapeStateError):
        tape.backward()


def test_shape_mismatch_raises_shape_error():
    tape = ad.Tape()
    y = tape.leaf("a") @ tape.leaf("b")
    with pytest.raises(ad.ShapeError):
        tape.forward({"a": np.ones((2, 3)), "b": np.ones((2, 3))}, y)


def test_unbound_leaf_raises():
    tape = ad.Tape()
    tape.leaf("a") + tape.leaf("b")
    with pytest.raises(KeyError):
        tape.forward({"a": np.ones(2)})


def test_duplicate_leaf_name_rejected():
    tape = ad.Tape()
    tape.leaf("a")
    with pytest.raises(ValueError):
        tape.leaf("a")


def test_forward_and_backward_are_deterministic():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(5, 4))
    tape = ad.Tape()
    y = ad.sum(ad.softmax(ad.tanh(tape.leaf("x") @ B)) * 3.0)
    runs = []
    for _ in range(2):
        v = tape.forward({"x": x0}, y)
        runs.append((v.tobytes(), tape.backward()["x"].tobytes()))
    assert runs[0] == runs[1]


def test_grad_check_reports_small_error_for_correct_gradient():
    tape = ad.Tape()
    y = ad.sum(ad.tanh(tape.leaf("x")) * 2.0)
    err = ad.grad_check(tape, "x", {"x": np.array([0.1, -0.4, 0.9])})
    assert err < 1e-7


def test_grad_check_rejects_nonpositive_step():
    tape = ad.Tape()
    ad.sum(tape.leaf("x"))
    with pytest.raises(ValueError):
        ad.grad_check(tape, "x", {"x": np.ones(2)}, h=0.0)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_backward_is_linear_in_the_seed(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 4))
    s1, s2 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    tape = ad.Tape()
    y = ad.tanh(tape.leaf("x") @ B)
    tape.forward({"x": x0}, y)
    g1 = tape.backward(seed=s1)["x"]
    g2 = tape.backward(seed=s2)["x"]
    g12 = tape.backward(seed=a * s1 + b * s2)["x"]
    np.testing.assert_allclose(g12, a * g1 + b * g2, atol=1e-12)
