import numpy as np
import pytest
from hypothesis import given, strategies as st

from memloc import tensor as T
from conftest import max_rel_err, project


def check_grads(fn, bindings, seed=0, tol=1e-6, coords=None):
    rng = np.random.default_rng(seed)
    wrapped = lambda **kw: project(fn(**kw), np.random.default_rng(seed + 100))
    g = T.Graph(wrapped)
    T.evaluate_graph(g, bindings)
    grads = T.backward(g)
    for name in bindings:
        idx = coords or rng.choice(bindings[name].size, size=min(20, bindings[name].size), replace=False)
        fd = T.finite_diff_gradient(g, bindings, name, coords=idx).reshape(-1)[idx]
        assert max_rel_err(grads[name].reshape(-1)[idx], fd) < tol, name


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_matmul_add_multiply_grads():
    check_grads(lambda a, b, c: T.multiply(T.add(T.matmul(a, b), c), c),
                {"a": rnd(4, 3), "b": rnd(3, 5, seed=1), "c": rnd(5, seed=2)})


def test_relu_grad_away_from_kink():
    x = rnd(6, 7)
    x[np.abs(x) < 0.1] = 0.5
    check_grads(lambda x: T.relu(x), {"x": x})


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_grads(stride, pad):
    check_grads(lambda x, w, b: T.conv2d(x, w, b, stride=stride, pad=pad),
                {"x": rnd(2, 3, 6, 6), "w": rnd(4, 3, 3, 3, seed=1), "b": rnd(4, seed=2)})


def test_pooling_grads():
    # distinct values keep the max unique
    x = np.random.default_rng(0).permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) / 10.0
    check_grads(lambda x: T.max_pool2d(x), {"x": x})
    check_grads(lambda x: T.global_avg_pool(x), {"x": rnd(2, 3, 4, 4)})


@pytest.mark.parametrize("shape", [(8, 5), (4, 3, 5, 5)])
def test_batch_norm_train_grads(shape):
    C = shape[1]
    check_grads(lambda x, g, b: T.batch_norm(x, g, b)[0],
                {"x": rnd(*shape), "g": rnd(C, seed=1) + 2, "b": rnd(C, seed=2)})


def test_batch_norm_eval_uses_given_stats():
    x = rnd(6, 3)
    out, mu, var = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)),
                                np.full(3, 1.0), np.full(3, 4.0), eps=0.0)
    np.testing.assert_allclose(out.data, (x - 1) / 2)
    check_grads(lambda x, g: T.batch_norm(x, g, np.zeros(3), np.ones(3), np.full(3, 2.0))[0],
                {"x": x, "g": rnd(3, seed=3)})


@pytest.mark.parametrize("reduction", ["mean", "sum", "none"])
def test_softmax_cross_entropy_grads(reduction):
    y = np.array([0, 2, 1, 2])
    w = np.array([1.0, -0.5, 2.0, 0.3])
    check_grads(lambda z: T.softmax_cross_entropy(z, y, weights=w, reduction=reduction), {"z": rnd(4, 3)})


@pytest.mark.parametrize("gshape", [(5,), (4, 5)])
def test_gate_grads(gshape):
    check_grads(lambda x, g: T.gate(x, g), {"x": rnd(4, 5, 3, 3), "g": rnd(*gshape, seed=1)})
    check_grads(lambda x, g: T.gate(x, g), {"x": rnd(4, 5), "g": rnd(*gshape, seed=1)})


def test_flatten_roundtrip_grad():
    check_grads(lambda x: T.flatten(x), {"x": rnd(2, 3, 2, 2)})


def test_broadcast_add_unbroadcasts():
    a = T.Tensor(rnd(4, 3), requires_grad=True)
    b = T.Tensor(rnd(3), requires_grad=True)
    project(T.add(a, b), np.random.default_rng(1)).backward()
    assert b.grad.shape == (3,)


def test_shape_errors_name_primitive():
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))
    with pytest.raises(T.ShapeError, match="conv2d"):
        T.conv2d(T.Tensor(np.ones((1, 2, 4, 4))), T.Tensor(np.ones((3, 5, 3, 3))))
    with pytest.raises(T.ShapeError, match="gate"):
        T.gate(T.Tensor(np.ones((2, 3))), np.ones(4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_fault_on_overflow():
    with pytest.raises(T.NumericFault):
        T.multiply(T.Tensor(np.array([[1e200]])), T.Tensor(np.array([[1e200]])))


def test_backward_requires_scalar_and_graph():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.relu(x).backward()
    with pytest.raises(T.GraphStateError):
        T.Tensor(np.ones(1)).backward()
    with pytest.raises(T.GraphStateError):
        T.backward(T.Graph(lambda x: x))


def test_finite_diff_rejects_f32():
    g = T.Graph(lambda x: T.relu(x))
    with pytest.raises(TypeError):
        T.finite_diff_gradient(g, {"x": np.ones((1, 1), dtype=np.float32)}, "x")


def test_shared_subexpression_visited_once():
    # d/dx of (x*x) summed via two paths: 2x each
    x = T.Tensor(np.array([[3.0]]), requires_grad=True)
    h = T.multiply(x, x)
    T.add(h, h).backward()
    assert x.grad[0, 0] == pytest.approx(12.0)


def test_leaf_grads_accumulate_across_backward_calls():
    x = T.Tensor(np.array([[2.0]]), requires_grad=True)
    T.multiply(x, 3.0).backward()
    T.multiply(x, 3.0).backward()
    assert x.grad[0, 0] == 6.0


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 1000))
def test_matmul_grad_matches_closed_form(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a = T.Tensor(rng.standard_normal((n, k)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((k, m)), requires_grad=True)
    G = rng.standard_normal((n, m))
    T.matmul(a, b).backward(G)
    np.testing.assert_allclose(a.grad, G @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ G, rtol=1e-12)


@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    z = np.random.default_rng(seed).standard_normal((3, 6)) * 50
    np.testing.assert_allclose(T.softmax(z).sum(axis=1), 1.0, atol=1e-12)


def test_dtype_preserved_f32():
    x = T.Tensor(np.ones((2, 3, 4, 4), dtype=np.float32))
    w = T.Tensor(np.ones((2, 3, 3, 3), dtype=np.float32))
    assert T.conv2d(x, w, pad=1).dtype == np.float32
    assert T.max_pool2d(x).dtype == np.float32
