import math

import numpy as np
import pytest

from adapterseg import tensor as T
from adapterseg.errors import ContractError, DimensionError


def test_matmul_identity():
    eye = T.Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = T.Tensor([[3.0, 4.0], [5.0, 6.0]])
    out = T.matmul(eye, b)
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_hand_case():
    out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    a = T.Tensor(np.zeros((2, 3)))
    b = T.Tensor(np.zeros((4, 5)))
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(a, b)


def test_matmul_grad_matches_finite_differences():
    # independent oracle: central differences on sum(A @ B)
    rng = np.random.default_rng(0)
    a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((4, 5)))
    T.sum_(T.matmul(a, b)).backward()
    eps = 1e-5
    fd = np.zeros_like(a.data)
    flat = a.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = np.matmul(a.data, b.data).sum()
        flat[i] = orig - eps
        down = np.matmul(a.data, b.data).sum()
        flat[i] = orig
        fd.reshape(-1)[i] = (up - down) / (2 * eps)
    rel = np.abs(a.grad - fd) / np.maximum(1.0, np.abs(fd))
    assert rel.max() < 1e-8


def test_gelu_zero_is_zero():
    out = T.gelu(T.Tensor([0.0]))
    assert out.data[0] == 0.0


def test_sigmoid_zero_is_half():
    assert T.sigmoid(T.Tensor([0.0])).data[0] == 0.5


def test_softmax_symmetry():
    out = T.softmax(T.Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_layer_norm_constant_vector_is_zeros():
    out = T.layer_norm(T.Tensor([3.0, 3.0, 3.0, 3.0]))
    assert np.allclose(out.data, 0.0)
    assert np.all(np.isfinite(out.data))


def test_relu_and_softplus_values():
    x = T.Tensor([-1.0, 0.0, 2.0])
    assert np.array_equal(T.relu(x).data, [0.0, 0.0, 2.0])
    assert np.allclose(T.softplus(x).data, np.log1p(np.exp([-1.0, 0.0, 2.0])))


def test_broadcast_add_backward():
    a = T.Tensor(np.ones((2, 3)), requires_grad=True)
    b = T.Tensor(np.ones((3,)), requires_grad=True)
    T.sum_(T.add(a, b)).backward()
    assert np.array_equal(a.grad, np.ones((2, 3)))
    assert np.array_equal(b.grad, np.full((3,), 2.0))


def test_grad_accumulates_across_uses():
    x = T.Tensor([2.0], requires_grad=True)
    y = T.add(T.mul(x, x), x)  # x^2 + x
    y.backward()
    assert np.allclose(x.grad, [5.0])
    # a second backward on a fresh graph keeps accumulating until cleared
    T.mul(x, x).backward()
    assert np.allclose(x.grad, [9.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_requires_scalar():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        T.mul(x, x).backward()


def test_frozen_graph_grads_only_on_marked_leaves():
    w = T.Tensor(np.ones((3, 3)))  # frozen: requires_grad False
    x = T.Tensor(np.ones((1, 3)), requires_grad=True)
    T.sum_(T.matmul(x, w)).backward()
    assert w.grad is None
    assert x.grad is not None


def test_forward_determinism():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 6))
    a = T.softmax(T.gelu(T.Tensor(x)), axis=-1).data
    b = T.softmax(T.gelu(T.Tensor(x)), axis=-1).data
    assert np.array_equal(a, b)


def test_reshape_transpose_concat_roundtrip():
    x = T.Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4), requires_grad=True)
    y = T.transpose(T.reshape(x, (6, 4)), (1, 0))
    assert y.shape == (4, 6)
    z = T.concat([y, y], axis=0)
    assert z.shape == (8, 6)
    T.sum_(z).backward()
    assert np.array_equal(x.grad, np.full((2, 3, 4), 2.0))


def test_embedding_lookup_scatter_grad():
    table = T.Tensor(np.zeros((5, 3)), requires_grad=True)
    out = T.embedding_lookup(table, [1, 1, 4])
    assert out.shape == (3, 3)
    T.sum_(out).backward()
    expected = np.zeros((5, 3))
    expected[1] = 2.0
    expected[4] = 1.0
    assert np.array_equal(table.grad, expected)


def test_embedding_lookup_bounds():
    table = T.Tensor(np.zeros((5, 3)))
    with pytest.raises(DimensionError):
        T.embedding_lookup(table, [0, 5])


def test_getitem_advanced_index_grad():
    x = T.Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True)
    rows = np.array([0, 2])
    cols = np.array([1, 3])
    T.sum_(x[(rows, cols)]).backward()
    expected = np.zeros((3, 4))
    expected[0, 1] = 1.0
    expected[2, 3] = 1.0
    assert np.array_equal(x.grad, expected)


def test_axis_out_of_range():
    x = T.Tensor(np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        T.softmax(x, axis=5)
    with pytest.raises(DimensionError):
        T.sum_(x, axis=3)


def test_no_grad_blocks_graph_recording():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert y._backward is None and not y.requires_grad


def test_dtype_preserved_and_scalars_match_operand():
    x = T.Tensor(np.ones((2, 2), dtype=np.float32))
    y = (x * 0.5 + 1.0) / 2.0
    assert y.dtype == np.float32


def test_dunder_arithmetic_matches_math():
    x = T.Tensor([3.0], requires_grad=True)
    y = (-x + 2.0) * 4.0 / 2.0 - 1.0  # ((-3+2)*4)/2 - 1 = -3
    assert math.isclose(y.item(), -3.0)
    y.backward()
    assert np.allclose(x.grad, [-2.0])
