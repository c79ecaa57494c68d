import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ktnet import tensor as T
from ktnet.tensor import Adam, ConfigError, ParamGroup, Tensor

from conftest import central_diff, rel_err


def leaf(a, name="x"):
    return T.parameter(np.array(a, dtype=float), name)


def test_fc_identity_weights():
    y = T.fc(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    assert y.data.tolist() == [[1.0, 2.0]]


def test_fc_zero_weights_pass_bias():
    y = T.fc(Tensor([[1.0, 2.0]]), Tensor(np.zeros((2, 2))), Tensor([3.0, 4.0]))
    assert y.data.tolist() == [[3.0, 4.0]]


def test_fc_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
        T.fc(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(5))
def test_fc_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x, W, b = leaf(rng.normal(size=(4, 3)), "x"), leaf(rng.normal(size=(3, 5)), "W"), leaf(rng.normal(size=5), "b")
    f = lambda: float(T.fc(x, W, b).data.sum())  # noqa: E731
    T.backward(T.sum_all(T.fc(x, W, b)))
    for p in (x, W, b):
        assert rel_err(p.grad, central_diff(f, p.data)) < 1e-4


def test_relu_values_and_zero_subgradient():
    x = leaf([-1.0, 0.0, 2.0])
    y = T.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    T.backward(T.sum_all(y))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_relu_all_negative_has_zero_gradient():
    x = leaf([-3.0, -1.0, -0.5])
    y = T.relu(x)
    T.backward(T.sum_all(y))
    assert not y.data.any()
    assert not x.grad.any()


def test_relu_gradient_finite_differences(rng):
    data = rng.normal(size=(6, 4))
    data[np.abs(data) < 1e-3] = 0.5
    x = leaf(data)
    w = rng.normal(size=data.shape)
    f = lambda: float((T.relu(x).data * w).sum())  # noqa: E731
    T.backward(T.sum_all(T.mul(T.relu(x), w)))
    assert rel_err(x.grad, central_diff(f, x.data)) < 1e-4


def test_maxpool_example():
    assert T.maxpool_points(Tensor([[1.0, 5.0], [3.0, 2.0]])).data.tolist() == [3.0, 5.0]


def test_maxpool_rejects_empty():
    with pytest.raises(T.ShapeError):
        T.maxpool_points(Tensor(np.zeros((0, 4))))


def test_maxpool_gradient_is_argmax_mask(rng):
    F = leaf(rng.normal(size=(10, 6)))
    T.backward(T.sum_all(T.maxpool_points(F)))
    assert set(np.unique(F.grad)) <= {0.0, 1.0}
    assert F.grad.sum() == 6
    assert np.array_equal(F.grad.sum(axis=0), np.ones(6))


def test_maxpool_ties_go_to_first_row():
    F = leaf([[2.0, 1.0], [2.0, 1.0]])
    T.backward(T.sum_all(T.maxpool_points(F)))
    assert F.grad.tolist() == [[1.0, 1.0], [0.0, 0.0]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_maxpool_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(rng.integers(1, 30), 5))
    perm = rng.permutation(len(F))
    assert np.array_equal(T.maxpool_points(Tensor(F)).data, T.maxpool_points(Tensor(F[perm])).data)


def test_segment_max_gradient_finite_differences(rng):
    F = leaf(rng.normal(size=(9, 4)))
    w = rng.normal(size=(3, 4))
    offsets = [0, 2, 7, 9]
    f = lambda: float((T.segment_max(F, offsets).data * w).sum())  # noqa: E731
    T.backward(T.sum_all(T.mul(T.segment_max(F, offsets), w)))
    assert rel_err(F.grad, central_diff(f, F.data)) < 1e-4


def test_detach_blocks_gradient():
    x = leaf([1.0, 2.0], "x")
    w = leaf([3.0, 4.0], "w")
    T.backward(T.sum_all(T.mul(T.detach(x), w)))
    assert x.grad is None
    assert w.grad.tolist() == [1.0, 2.0]


def test_detach_is_idempotent():
    x = leaf([1.0, -2.0])
    a, b = T.detach(x), T.detach(T.detach(x))
    assert np.array_equal(a.data, b.data)
    assert not a.requires_grad and not b.requires_grad
    assert a._backward is None and b._backward is None


def test_backward_square_sum():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum_all(T.square(x)))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_accumulates_across_calls():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum_all(T.square(x)))
    T.backward(T.sum_all(T.square(x)))
    assert x.grad.tolist() == [4.0, 8.0, 12.0]
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(T.ShapeError):
        T.backward(T.square(x))


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng.normal(size=(3, 2)))
    y = T.relu(x)
    loss = T.sum_all(T.mul(y, y)) + T.sum_all(y)
    f = lambda: float((np.maximum(x.data, 0) ** 2).sum() + np.maximum(x.data, 0).sum())  # noqa: E731
    T.backward(loss)
    assert rel_err(x.grad, central_diff(f, x.data)) < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_gather_and_row_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(6, 3)))
    idx = rng.integers(0, 6, size=10)
    target = rng.normal(size=(10, 3))
    f = lambda: float(np.linalg.norm(x.data[idx] - target, axis=1).sum())  # noqa: E731
    T.backward(T.sum_all(T.row_norm(T.gather_rows(x, idx) - target)))
    assert rel_err(x.grad, central_diff(f, x.data)) < 1e-4


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    # textbook recurrence on python floats
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return theta


def test_adam_single_step_matches_reference():
    p = T.parameter(np.array([0.5]), "p")
    p.grad = np.array([1.0])
    opt = Adam()
    opt.step([p], 1e-4)
    assert p.data[0] == pytest.approx(reference_adam(0.5, [1.0], 1e-4), abs=1e-15)
    assert p.data[0] == pytest.approx(0.5 - 1e-4, rel=1e-9)


def test_adam_many_steps_match_reference(rng):
    grads = rng.normal(size=30)
    p = T.parameter(np.array([1.0]), "p")
    opt = Adam()
    for g in grads:
        p.grad = np.array([g])
        opt.step([p], 1e-3)
    assert p.data[0] == pytest.approx(reference_adam(1.0, list(grads), 1e-3), abs=1e-13)


def test_adam_zero_gradient_leaves_params_and_advances_counter():
    p = T.parameter(np.array([1.0, 2.0]), "p")
    opt = Adam()
    p.grad = np.zeros(2)
    opt.step([p], 1e-3)
    assert p.data.tolist() == [1.0, 2.0]
    assert opt.t == 1


def test_adam_constant_gradient_descends():
    p = T.parameter(np.array([0.0, 0.0]), "p")
    opt = Adam()
    for _ in range(50):
        p.grad = np.array([2.0, -3.0])
        opt.step([p], 1e-2)
    assert p.data[0] < 0 < p.data[1]
    assert p.grad is None


def test_adam_rejects_non_positive_lr():
    p = T.parameter(np.zeros(1), "p")
    with pytest.raises(ConfigError):
        Adam().step([p], 0.0)


def test_param_group_validation():
    with pytest.raises(ValueError):
        ParamGroup("theta_X")
    g = ParamGroup("theta_FE")
    g.add(T.parameter(np.zeros(2), "a"))
    with pytest.raises(ValueError):
        g.add(T.parameter(np.zeros(2), "a"))


def test_optimizer_step_on_group():
    g = ParamGroup("theta_D")
    p = g.add(T.parameter(np.array([1.0]), "d"))
    p.grad = np.array([1.0])
    T.optimizer_step(Adam(), g, 0.1)
    assert p.data[0] < 1.0 and p.grad is None
