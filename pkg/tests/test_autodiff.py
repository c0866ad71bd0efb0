import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eoflow import autodiff as ad
from eoflow.errors import NumericalError, ShapeError

from conftest import central_gradient


def test_evaluate_identity_and_matvec():
    assert np.array_equal(ad.evaluate(lambda x: x, [[1.0, 2.0, 3.0]])[0], [1, 2, 3])
    out = ad.evaluate(lambda a, x: ad.matmul(a, x), [[[2.0, 0.0], [0.0, 3.0]], [1.0, 1.0]])[0]
    assert np.array_equal(out, [2.0, 3.0])


def test_evaluate_tanh_affine_at_zero():
    rng = np.random.default_rng(0)
    w, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
    out = ad.evaluate(lambda w, x, b: ad.tanh(ad.matmul(w, x) + b), [w, np.zeros(4), b])[0]
    assert np.allclose(out, np.tanh(b), rtol=0, atol=1e-15)


def test_evaluate_is_bit_reproducible():
    rng = np.random.default_rng(1)
    a, x = rng.standard_normal((5, 5)), rng.standard_normal(5)

    def prog(a, x):
        return ad.sum(ad.softplus(ad.matmul(a, x)) * ad.exp(-x))

    assert ad.evaluate(prog, [a, x])[0].tobytes() == ad.evaluate(prog, [a, x])[0].tobytes()


def test_non_finite_input_rejected():
    with pytest.raises(NumericalError):
        ad.tensor([1.0, np.nan])
    with pytest.raises(NumericalError):
        ad.tensor([np.inf])


def test_shape_error_names_primitive():
    with pytest.raises(ShapeError, match="add"):
        ad.evaluate(lambda a, b: a + b, [np.zeros(2), np.zeros(3)])
    with pytest.raises(ShapeError, match="matmul"):
        ad.evaluate(lambda a, b: ad.matmul(a, b), [np.zeros((2, 3)), np.zeros((2, 3))])


def test_no_implicit_broadcast_except_scalars():
    out = ad.evaluate(lambda a: 2.0 * a + 1.0, [[1.0, 2.0]])[0]
    assert np.array_equal(out, [3.0, 5.0])
    with pytest.raises(ShapeError):
        ad.evaluate(lambda a, b: a * b, [np.zeros((2, 2)), np.zeros(2)])


def test_gradient_quadratic():
    g = ad.gradient(lambda x: 0.5 * ad.sqnorm(x), [[3.0, 4.0]])[0]
    assert np.allclose(g, [3.0, 4.0])


def test_gradient_logabsdet_diag():
    def prog(x):
        return ad.logabsdet(ad.expand(x, (2, 2)) * ad.constant(np.eye(2)))

    g = ad.gradient(prog, [[2.0, 4.0]])[0]
    assert np.allclose(g, [0.5, 0.25], atol=1e-14)


def test_gradient_requires_scalar_output():
    with pytest.raises(ShapeError):
        ad.gradient(lambda x: x * 2.0, [[1.0, 2.0]])


def test_gradient_respects_wrt_subset():
    grads = ad.gradient(lambda a, b: ad.sum(a * b), [[1.0, 2.0], [3.0, 4.0]], wrt=[1])
    assert len(grads) == 1 and np.array_equal(grads[0], [1.0, 2.0])


def test_jvp_scalar_chain_rule():
    value, dd = ad.jvp(lambda x: x * x, 3.0, 1.0)
    assert value == 9.0 and dd == 6.0


def test_jvp_linear_map_gives_column():
    a = np.arange(9.0).reshape(3, 3) + np.eye(3)
    _, col = ad.jvp(lambda x: ad.matmul(ad.constant(a), x), np.ones(3), [1.0, 0.0, 0.0])
    assert np.array_equal(col, a[:, 0])


def test_jvp_tangent_shape_checked():
    with pytest.raises(ShapeError):
        ad.jvp(lambda x: x, np.zeros(3), np.zeros(2))


# every primitive: gradient of w . out(x) against central differences
PRIMITIVES = {
    "exp": lambda x: ad.exp(x),
    "log": lambda x: ad.log(ad.exp(x) + 1.0),
    "tanh": lambda x: ad.tanh(x),
    "softplus": lambda x: ad.softplus(x),
    "sigmoid": lambda x: ad.sigmoid(x),
    "sqrt": lambda x: ad.sqrt(x * x + 1.0),
    "div": lambda x: x / (x * x + 2.0),
    "sum_axis": lambda x: ad.sum(ad.reshape(x, (2, 3)), 0),
    "mean": lambda x: ad.mean(ad.reshape(x, (2, 3)), 1),
    "transpose": lambda x: ad.reshape(ad.transpose(ad.reshape(x, (2, 3))), (6,)),
    "index": lambda x: x[np.array([0, 2, 2, 5])],
    "concat": lambda x: ad.concat([x, -x], axis=0),
    "sqnorm": lambda x: ad.sqnorm(ad.reshape(x, (3, 2)), -1),
    "expand": lambda x: ad.reshape(ad.expand(ad.sum(x), (2,)), (2,)),
    "matmul": lambda x: ad.reshape(ad.matmul(ad.reshape(x, (2, 3)),
                                             ad.transpose(ad.reshape(x, (2, 3)))), (4,)),
    "inv": lambda x: ad.reshape(ad.inv(ad.reshape(x[np.arange(4)], (2, 2))
                                       + ad.constant(3 * np.eye(2))), (4,)),
    "logabsdet": lambda x: ad.reshape(ad.logabsdet(ad.reshape(x[np.arange(4)], (2, 2))
                                                   + ad.constant(3 * np.eye(2))), (1,)),
    "logdet_spd": lambda x: ad.reshape(ad.logdet_spd(
        ad.matmul(ad.reshape(x, (2, 3)), ad.transpose(ad.reshape(x, (2, 3))))
        + ad.constant(np.eye(2))), (1,)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn = PRIMITIVES[name]
    rng = np.random.default_rng(7)
    x0 = 0.5 * rng.standard_normal(6)
    w = rng.standard_normal(ad.evaluate(fn, [x0])[0].shape)

    def scalar(x):
        return ad.sum(fn(x) * ad.constant(w))

    g = ad.gradient(scalar, [x0])[0]
    fd = central_gradient(lambda x: float(ad.evaluate(scalar, [x])[0]), x0)
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_jvp_agrees_with_gradient(name):
    fn = PRIMITIVES[name]
    rng = np.random.default_rng(8)
    x0, v = 0.5 * rng.standard_normal(6), rng.standard_normal(6)
    w = rng.standard_normal(ad.evaluate(fn, [x0])[0].shape)

    def scalar(x):
        return ad.sum(fn(x) * ad.constant(w))

    g = ad.gradient(scalar, [x0])[0]
    _, dd = ad.jvp(scalar, x0, v)
    assert abs(float(dd) - g @ v) <= 1e-10 * max(1.0, abs(g @ v))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-2, 2)), arrays(np.float64, 4, elements=st.floats(-2, 2)))
def test_reverse_over_forward_matches_finite_differences(x, v):
    # gradient of a directional derivative: the nesting used for Jacobian-norm losses
    a = np.array([[1.0, 0.5, 0.0, 0.2], [0.0, 1.0, 0.3, 0.0], [0.1, 0.0, 1.0, 0.4], [0.0, 0.2, 0.0, 1.0]])

    def inner(x):
        return ad.tanh(ad.matmul(ad.constant(a), x))

    def scalar(x):
        out = inner(ad.Dual(x, ad.constant(v)))
        return ad.sqnorm(out.tangent_or_zeros())

    g = ad.gradient(scalar, [x])[0]
    fd = central_gradient(lambda y: float(ad.evaluate(scalar, [y])[0]), x)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)
