import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from remote_fusion.tensor import (
    ContractError,
    ShapeError,
    Tensor,
    build_tape,
    concat,
    dropout,
    log_softmax,
    matmul,
    no_grad,
    sigmoid,
    softmax,
    stack,
)


def test_matmul_identity():
    out = matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_value():
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_grad_formula():
    a = Tensor([[1, 2]], requires_grad=True)
    b = Tensor([[3], [4]], requires_grad=True)
    matmul(a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [[3, 4]])
    np.testing.assert_array_equal(b.grad, [[1], [2]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 3, 5))
    out = matmul(Tensor(a), Tensor(b)).data
    for i in range(4):
        np.testing.assert_allclose(out[i], a[i] @ b[i], rtol=1e-5)


def test_softmax_symmetric():
    np.testing.assert_allclose(softmax(Tensor([0, 0, 0])).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_large_logits_do_not_overflow():
    out = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax(Tensor([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    out = softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_backward_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_needs_tracked_input():
    with pytest.raises(ContractError):
        Tensor([1.0]).sum().backward()


def test_tape_is_topological():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).exp()
    z = (y + x).sum()
    tape = build_tape(z)
    pos = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    (y * y + y).sum().backward()
    # d/dx (4x^2 + 2x) = 8x + 2
    np.testing.assert_allclose(x.grad, [26.0])


def test_broadcast_rules():
    m = Tensor(np.ones((2, 3)))
    assert (m + Tensor([1.0, 2.0, 3.0])).shape == (2, 3)
    assert (m * 2.0).shape == (2, 3)
    with pytest.raises(ShapeError):
        m + Tensor(np.ones((2, 1)))
    with pytest.raises(ShapeError):
        m + Tensor(np.ones(2))


def test_row_vector_grad_is_reduced():
    m = Tensor(np.ones((4, 3)))
    v = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (m * v).sum().backward()
    np.testing.assert_array_equal(v.grad, [4, 4, 4])


def test_dropout_eval_identity_and_train_mask():
    x = Tensor(np.ones((50, 40)), requires_grad=True)
    assert dropout(x, 0.5, None, training=False) is x
    y = dropout(x, 0.5, np.random.default_rng(0), training=True)
    kept = y.data != 0
    assert 0.4 < kept.mean() < 0.6
    np.testing.assert_allclose(y.data[kept], 2.0)
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, y.data)


def test_dropout_same_seed_same_mask():
    x = Tensor(np.ones((8, 8)))
    a = dropout(x, 0.5, np.random.default_rng(3), True).data
    b = dropout(x, 0.5, np.random.default_rng(3), True).data
    np.testing.assert_array_equal(a, b)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_default_dtype_is_f32():
    assert Tensor([1.0]).dtype == np.float32


def test_sigmoid_extremes_finite():
    out = sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    r1 = softmax(matmul(Tensor(a), Tensor(a.T))).data
    r2 = softmax(matmul(Tensor(a), Tensor(a.T))).data
    assert r1.tobytes() == r2.tobytes()


# -- finite-difference checks of every op at 10 random points -----------------

OPS = {
    "add": (lambda a, b: (a + b).tanh().sum(), [(3, 4), (3, 4)]),
    "sub_row": (lambda a, b: ((a - b) * (a - b)).sum(), [(3, 4), (4,)]),
    "mul": (lambda a, b: (a * b).sum(), [(3, 4), (3, 4)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: matmul(a, b).tanh().sum(), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: matmul(a, b).tanh().sum(), [(2, 3, 4), (2, 4, 2)]),
    "softmax": (lambda a, w: (softmax(a, axis=-1) * w).sum(), [(3, 5), (3, 5)]),
    "log_softmax": (lambda a, w: (log_softmax(a, axis=-1) * w).sum(), [(3, 5), (3, 5)]),
    "sigmoid": (lambda a, w: (sigmoid(a) * w).sum(), [(4,), (4,)]),
    "exp_log": (lambda a, w: ((a * a + 1.0).log() * w.exp()).sum(), [(3,), (3,)]),
    "relu": (lambda a, w: (a.relu() * w).sum(), [(6,), (6,)]),
    "concat_slice": (lambda a, b: (concat([a, b], axis=0)[1:4] * 2.0).tanh().sum(), [(2, 3), (3, 3)]),
    "stack_transpose": (lambda a, b: (stack([a, b], axis=0).transpose(0, 2, 1).reshape(-1, 2).tanh()).sum(), [(2, 3), (2, 3)]),
    "mean": (lambda a, w: (a.mean(axis=0) * w).sum(), [(4, 3), (3,)]),
    "getitem_fancy": (lambda a, w: (a[np.array([0, 2, 0])] * w).sum(), [(3, 2), (3, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name, gradcheck):
    build, shapes = OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(10):
        arrays_ = [rng.normal(size=s) for s in shapes]
        if name == "relu":  # keep away from the kink
            arrays_[0] = np.where(np.abs(arrays_[0]) < 0.05, 0.5, arrays_[0])
        assert gradcheck(build, *arrays_) < 1e-3, name


def test_composed_graph_gradient(gradcheck):
    rng = np.random.default_rng(5)

    def build(x, w1, w2):
        h = (matmul(x, w1) + 0.1).tanh()
        att = softmax(matmul(h, h.T), axis=-1)
        return log_softmax(matmul(matmul(att, h), w2), axis=-1)[:, 0].mean()

    assert gradcheck(build, rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=(5, 2))) < 1e-3
