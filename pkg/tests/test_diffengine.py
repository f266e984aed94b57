import numpy as np
import pytest
import torch

from jetlab import diffengine as de
from jetlab.diffengine import HvpOperator, Layout, NonFiniteError, ParamVector, dense_hessian, make_hvp, value_and_grad


def central_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def flat(shapes, seed=0, low=-1.0, high=1.0):
    lay = Layout.build(shapes)
    return ParamVector(np.random.default_rng(seed).uniform(low, high, lay.size), lay)


def check_primitive(build, params: ParamVector, tol=1e-6):
    def loss(theta):
        t = params.layout.split(theta)
        # a fixed random projection makes every output coordinate matter
        out = build(t)
        w = torch.as_tensor(np.random.default_rng(1).normal(size=tuple(out.shape)))
        return (out * w).sum()

    _, g = value_and_grad(loss, params)
    fd = central_grad(lambda x: float(loss(torch.as_tensor(x))), params.values)
    assert rel_err(g.values, fd) < tol


def test_layout_roundtrip():
    lay = Layout.build([("a", (2, 3)), ("b", (3,)), ("c", (1,))])
    assert lay.size == 10
    assert [e.offset for e in lay] == [0, 6, 9]
    assert Layout.from_json(lay.to_json()) == lay
    parts = lay.split(np.arange(10.0))
    np.testing.assert_array_equal(parts["a"], np.arange(6.0).reshape(2, 3))


def test_param_vector_is_immutable_copy():
    src = np.ones(3)
    p = ParamVector(src, Layout.build([("w", (3,))]))
    src[0] = 5.0
    assert p.values[0] == 1.0
    with pytest.raises(ValueError):
        p.values[0] = 2.0


def test_grad_linear():
    check_primitive(lambda t: de.linear(t["x"], t["w"], t["b"]), flat([("x", (4, 3)), ("w", (3, 2)), ("b", (2,))]))


def test_grad_add_square():
    check_primitive(lambda t: de.square(de.add(t["a"], t["b"])), flat([("a", (5,)), ("b", (5,))]))


def test_grad_relu_away_from_kink():
    p = flat([("x", (12,))])
    vals = p.values.copy()
    vals[np.abs(vals) < 0.1] = 0.5
    check_primitive(lambda t: de.relu(t["x"]), p.replace(vals))


def test_grad_sigmoid_log_softplus():
    check_primitive(lambda t: de.sigmoid(t["x"]), flat([("x", (6,))], low=-4, high=4))
    check_primitive(lambda t: de.log(t["x"]), flat([("x", (6,))], low=0.2, high=3))
    check_primitive(lambda t: de.softplus(t["x"]), flat([("x", (6,))], low=-4, high=4))


def test_grad_masked_softmax():
    mask = torch.tensor([[True, True, False, True]])
    check_primitive(lambda t: de.masked_softmax(t["s"].reshape(2, 4), mask), flat([("s", (8,))], low=-2, high=2))


def test_masked_softmax_ignores_masked_keys():
    mask = torch.tensor([True, False, True])
    a = de.masked_softmax(torch.tensor([0.3, 100.0, -0.2], dtype=torch.float64), mask)
    assert a[1] == 0.0
    assert float(a.sum()) == pytest.approx(1.0, abs=1e-15)


def test_grad_layer_norm():
    check_primitive(lambda t: de.layer_norm(t["x"].reshape(3, 4), t["g"], t["o"]), flat([("x", (12,)), ("g", (4,)), ("o", (4,))]))


def test_grad_masked_mean():
    mask = torch.tensor([[True, True, False], [True, False, False]])
    check_primitive(lambda t: de.masked_mean(t["x"].reshape(2, 3, 2), mask), flat([("x", (12,))]))


def test_constant_loss_has_zero_gradient():
    p = flat([("w", (3,))])
    value, g = value_and_grad(lambda theta: torch.tensor(2.0, dtype=torch.float64), p)
    assert value == 2.0
    assert np.all(g.values == 0)
    assert np.all(make_hvp(lambda theta: torch.tensor(2.0, dtype=torch.float64), p)(np.ones(3)) == 0)


def test_nonfinite_loss_names_the_node():
    p = flat([("w", (3,))], low=-2.0, high=-1.0)
    with pytest.raises(NonFiniteError) as info:
        value_and_grad(lambda theta: de.log(theta, name="my.log").sum(), p)
    assert info.value.node == "my.log"


def test_nonfinite_gradient_names_the_tensor():
    lay = Layout.build([("ok", (2,)), ("bad", (2,))])
    p = ParamVector(np.array([1.0, 1.0, 0.0, 1.0]), lay)
    with pytest.raises(NonFiniteError, match=r"grad\[bad\]"):
        value_and_grad(lambda t: t[:2].sum() + torch.sqrt(t[2:]).sum(), p)


def quartic(theta):
    return (theta**4).sum() / 4 + theta[0] * theta[1] ** 2 + torch.sin(theta).sum()


def test_hvp_matches_analytic_hessian():
    p = flat([("w", (6,))], seed=3)
    x = p.values
    H = np.diag(3 * x**2 - np.sin(x))
    H[0, 1] += 2 * x[1]
    H[1, 0] += 2 * x[1]
    H[1, 1] += 2 * x[0]
    np.testing.assert_allclose(dense_hessian(make_hvp(quartic, p)), H, atol=1e-12)


def test_hvp_symmetry():
    p = flat([("w", (10,))], seed=4)
    op = make_hvp(quartic, p)
    rng = np.random.default_rng(0)
    for _ in range(20):
        u, v = rng.normal(size=(2, 10))
        assert abs(u @ op(v) - v @ op(u)) < 1e-10


def test_hvp_with_batch_argument():
    p = flat([("w", (3,))])
    op = make_hvp(lambda theta, b: ((theta * b) ** 2).sum(), p, batch=torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    np.testing.assert_allclose(op(np.ones(3)), [2.0, 8.0, 18.0])


def test_from_matrix_operator():
    a = np.array([[2.0, 1.0], [1.0, 3.0]])
    op = HvpOperator.from_matrix(a)
    assert op.dim == 2
    np.testing.assert_array_equal(dense_hessian(op), a)
