import numpy as np
import pytest

from gazenet.layers import squash
from oracles import naive_conv
from gazenet.tensor import (
    DimensionError,
    Graph,
    Tensor,
    backward,
    capsule_predictions,
    clip,
    conv2d,
    dense,
    einsum,
    elementwise,
    gradcheck,
    matmul,
    no_grad,
    relu,
    sigmoid,
    softmax,
    sqrt,
    square,
    sum_,
    transpose,
)


# -- conv2d ------------------------------------------------------------------


@pytest.mark.parametrize("shape,k,cout,stride,expected", [
    ((36, 60, 1), 9, 256, 1, (28, 52, 256)),
    ((28, 52, 256), 9, 256, 2, (10, 22, 256)),
])
def test_conv2d_output_shapes(shape, k, cout, stride, expected):
    x = Tensor(np.zeros(shape))
    kern = Tensor(np.zeros((k, k, shape[2], cout)))
    with no_grad():
        assert conv2d(x, kern, stride).shape == expected


def test_conv2d_identity_1x1():
    x = Tensor([[[3.5]]])
    out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))), 1)
    assert out.data.tolist() == [[[3.5]]]


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv2d_matches_naive_loops(rng, stride):
    x = rng.normal(size=(8, 8, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k), stride).data, naive_conv(x, k, stride), atol=1e-10)


def test_conv2d_batched_equals_per_sample(rng):
    x = rng.normal(size=(3, 7, 9, 2))
    k = rng.normal(size=(3, 3, 2, 5))
    batched = conv2d(Tensor(x), Tensor(k), 2).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], naive_conv(x[b], k, 2), atol=1e-10)


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 1, 1))))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((2, 4, 1))), Tensor(np.zeros((3, 3, 1, 1))))


def test_conv2d_chunked_backward_matches_unchunked(rng, monkeypatch):
    import gazenet.tensor as tc

    x = rng.normal(size=(5, 9, 9, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    g = rng.normal(size=(5, 4, 4, 3))

    def grads():
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        backward(sum_(conv2d(xt, kt, 2) * g))
        return xt.grad, kt.grad

    gx, gk = grads()
    monkeypatch.setattr(tc, "_IM2COL_BUDGET", 1)  # one sample per chunk
    gx1, gk1 = grads()
    np.testing.assert_allclose(gx, gx1, atol=1e-12)
    np.testing.assert_allclose(gk, gk1, atol=1e-12)


# -- dense / elementwise -----------------------------------------------------


def test_dense_identity():
    x = np.array([0.3, -1.2, 4.0])
    out = dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_dense_hand_arithmetic():
    out = dense(Tensor([1.0, 2.0]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([1.0, 1.0]))
    assert out.data.tolist() == [2.0, 3.0]


def test_dense_dimension_mismatch():
    with pytest.raises(DimensionError):
        dense(Tensor(np.ones(3)), Tensor(np.ones((2, 4))), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        dense(Tensor(np.ones(2)), Tensor(np.ones((2, 4))), Tensor(np.ones(3)))


def test_dense_gradient_16_to_2(rng):
    w = rng.normal(size=(16, 2))
    b = rng.normal(size=2)
    x = rng.normal(size=16)
    assert gradcheck(lambda t: sum_(square(dense(Tensor(x), t, Tensor(b)))), w) < 1e-6
    assert gradcheck(lambda t: sum_(square(dense(t, Tensor(w), Tensor(b)))), x) < 1e-6


def test_elementwise_values():
    assert elementwise(Tensor([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]
    assert elementwise(Tensor(0.0), "sigmoid").item() == 0.5
    with pytest.raises(ValueError):
        elementwise(Tensor(0.0), "tanh")


def test_sigmoid_gradient_at_zero():
    x = Tensor(0.0, requires_grad=True)
    backward(sigmoid(x))
    assert x.grad == pytest.approx(0.25, abs=1e-15)
    h = 1e-5
    fd = (sigmoid(Tensor(h)).item() - sigmoid(Tensor(-h)).item()) / (2 * h)
    assert x.grad == pytest.approx(fd, abs=1e-10)


def test_sigmoid_is_stable_for_large_inputs():
    out = sigmoid(Tensor([-800.0, 800.0])).data
    assert out.tolist() == [0.0, 1.0]


# -- backward ----------------------------------------------------------------


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    backward(square(x))
    assert x.grad == 6.0


def test_backward_accumulates():
    x = Tensor(3.0, requires_grad=True)
    loss = square(x)
    backward(loss)
    backward(loss)
    assert x.grad == 12.0


def test_backward_non_scalar_is_usage_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_backward_squash_sum_matches_finite_differences(rng):
    s = rng.normal(size=8)
    assert gradcheck(lambda t: sum_(squash(t)), s) < 1e-5


def test_graph_is_topological_and_visits_once():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    z = y + y  # y reached twice
    g = Graph(z)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    assert len(pos) == len(g.nodes)
    for node in g.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]
    backward(z)
    assert x.grad == 8.0


def test_no_grad_records_nothing():
    x = Tensor(1.0, requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._backward is None


# -- gradcheck ---------------------------------------------------------------


def test_gradcheck_linear_function_is_exact(rng):
    a = rng.normal(size=5)
    assert gradcheck(lambda t: sum_(t * a), rng.normal(size=5)) < 1e-9


def test_gradcheck_detects_wrong_gradient(rng):
    from gazenet.tensor import _make

    def bad_square(t):
        return _make(t.data ** 2, (t,), lambda g: (3.0 * g * t.data,), "bad")

    assert gradcheck(lambda t: sum_(bad_square(t)), rng.normal(size=4)) > 0.1


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


OPS = {
    "add": lambda t, c: sum_(square(t + c)),
    "sub": lambda t, c: sum_(square(c - t)),
    "mul": lambda t, c: sum_(t * c * t),
    "div": lambda t, c: sum_(c / (square(t) + 1.0)),
    "sqrt": lambda t, c: sum_(sqrt(square(t) + 0.5)),
    "relu": lambda t, c: sum_(relu(t) * c),
    "sigmoid": lambda t, c: sum_(sigmoid(t) * c),
    "softmax": lambda t, c: sum_(softmax(t, axis=-1) * c),
    "clip": lambda t, c: sum_(clip(t, -3.0, 3.0) * c),
    "matmul": lambda t, c: sum_(square(matmul(t, Tensor(c.T)))),
    "sum_axis": lambda t, c: sum_(square(sum_(t * c, axis=0))),
    "transpose": lambda t, c: sum_(square(transpose(t, (1, 0)) * Tensor(c.T))),
    "getitem": lambda t, c: sum_(square(t[1:, ::2])),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_each_op_passes_gradcheck_at_10_points(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    fn = OPS[name]
    for _ in range(10):
        point = _away_from_zero(rng, (3, 4))
        c = rng.normal(size=(3, 4))
        assert gradcheck(lambda t: fn(t, c), point) < 1e-4


def test_einsum_and_capsule_predictions_gradcheck(rng):
    for _ in range(10):
        u = rng.normal(size=(2, 5, 3))
        w = rng.normal(size=(5, 4, 6, 3))
        c = rng.normal(size=(2, 5, 4, 6))
        assert gradcheck(lambda t: sum_(capsule_predictions(Tensor(u), t) * c), w) < 1e-4
        assert gradcheck(lambda t: sum_(square(capsule_predictions(t, Tensor(w)))), u) < 1e-4
        a = rng.normal(size=(2, 5, 4))
        assert gradcheck(lambda t: sum_(square(einsum("bij,bijd->bjd", t, Tensor(c)))), a) < 1e-4


def test_capsule_predictions_matches_einsum(rng):
    u = rng.normal(size=(3, 7, 4))
    w = rng.normal(size=(7, 2, 5, 4))
    np.testing.assert_allclose(capsule_predictions(Tensor(u), Tensor(w)).data,
                               np.einsum("ijdk,bik->bijd", w, u), atol=1e-12)


def test_einsum_rejects_single_operand_sums():
    with pytest.raises(ValueError):
        einsum("ij,jk->k", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))


def test_conv2d_gradcheck_at_10_points(rng):
    for _ in range(10):
        x = rng.normal(size=(2, 7, 8, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        c = rng.normal(size=(2, 3, 3, 3))
        assert gradcheck(lambda t: sum_(conv2d(t, Tensor(k), 2) * c), x) < 1e-4
        assert gradcheck(lambda t: sum_(square(conv2d(Tensor(x), t, 2))), k) < 1e-4


def test_composition_equals_end_to_end_finite_differences(rng):
    w = rng.normal(size=(6, 4))
    b = rng.normal(size=4)
    x = rng.normal(size=6)
    # chain rule by hand: d/dx sum(sigmoid(xW + b)) = W @ s(1-s)
    s = 1.0 / (1.0 + np.exp(-(x @ w + b)))
    manual = w @ (s * (1 - s))
    xt = Tensor(x, requires_grad=True)
    backward(sum_(sigmoid(dense(xt, Tensor(w), Tensor(b)))))
    np.testing.assert_allclose(xt.grad, manual, atol=1e-12)
    assert gradcheck(lambda t: sum_(sigmoid(dense(t, Tensor(w), Tensor(b)))), x) < 1e-6


def test_relu_kink_excluded_points_document_behavior():
    # exactly at 0 the subgradient is 0; gradcheck points must avoid the kink
    x = Tensor(np.array([0.0]), requires_grad=True)
    backward(sum_(relu(x)))
    assert x.grad.tolist() == [0.0]


def test_conv_precision_float32_close_and_restored(rng):
    from gazenet import tensor

    x = Tensor(rng.normal(size=(2, 11, 13, 4)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 3, 4, 5)), requires_grad=True)
    c = rng.normal(size=(2, 5, 6, 5))
    backward(sum_(conv2d(x, k, 2) * c))
    ref = conv2d(x, k, 2).data, x.grad.copy(), k.grad.copy()
    x.grad = k.grad = None
    with tensor.conv_precision(np.float32):
        out = conv2d(x, k, 2)
        backward(sum_(out * c))
    assert tensor._conv_dtype is np.float64
    assert out.data.dtype == np.float64
    for got, want in zip((out.data, x.grad, k.grad), ref):
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-4)
