import numpy as np
import pytest

from trustcnn.nn import autodiff as ad
from trustcnn.nn.autodiff import AutodiffError, Tape, Tensor, backward
from trustcnn.nn.gradcheck import grad_check, relative_error


def grad_of(fn, x):
    t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = fn(t)
    (g,) = backward(tape, out, [t], accumulate=False)
    return g.data


def test_tensor_keeps_float_dtypes_and_casts_others():
    assert Tensor(np.zeros(2, np.float64)).data.dtype == np.float64
    assert Tensor(np.zeros(2, np.float32)).data.dtype == np.float32
    assert Tensor(np.zeros(2, np.int64)).data.dtype == np.float32


def test_sum_gradient_is_all_ones():
    g = grad_of(ad.tsum, [[1.0, -2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(g, np.ones((2, 2)))


def test_relu_gate_gradient():
    g = grad_of(lambda x: ad.tsum(ad.relu(x)), [[-1.0, 2.0]])
    np.testing.assert_array_equal(g, [[0.0, 1.0]])


def test_guided_rule_blocks_negative_upstream():
    x = Tensor(np.array([1.0, 2.0, -1.0]), requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
        out = ad.tsum(ad.mul(y, Tensor(np.array([1.0, -3.0, 5.0]))))
    (std,) = backward(tape, out, [x], accumulate=False)
    (gd,) = backward(tape, out, [x], relu_rule="guided", accumulate=False)
    np.testing.assert_array_equal(std.data, [1.0, -3.0, 0.0])
    np.testing.assert_array_equal(gd.data, [1.0, 0.0, 0.0])


def test_broadcast_add_unbroadcasts():
    a = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        out = ad.tsum(ad.add(a, b))
    ga, gb = backward(tape, out, [a, b])
    np.testing.assert_array_equal(gb.data, [3.0, 3.0])
    assert ga.shape == (3, 2)


def test_nonscalar_seed_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(AutodiffError):
        backward(tape, y, [x])


def test_wrt_absent_from_tape_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    stranger = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.tsum(x)
    with pytest.raises(AutodiffError):
        backward(tape, y, [stranger])


def test_create_graph_not_supported():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.tsum(x)
    with pytest.raises(NotImplementedError):
        backward(tape, y, [x], create_graph=True)


def test_grad_accumulates_on_leaves():
    x = Tensor(np.ones(2), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            y = ad.tsum(ad.scale(x, 3.0))
        backward(tape, y, [x])
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_no_recording_without_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.tsum(x)
    with Tape() as tape:
        pass
    assert y not in tape


def test_clamp_blocks_gradient_at_active_bound():
    g = grad_of(lambda x: ad.tsum(ad.clamp(x, lo=0.0, hi=1.0)), [-0.5, 0.5, 2.0])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_take_scatters_repeated_indices():
    g = grad_of(lambda x: ad.tsum(ad.take(x, np.array([0, 0, 2]))), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


def test_sum_of_squares_gradcheck():
    err = grad_check(lambda x: ad.tsum(ad.mul(x, x)), np.array([1.0, 2.0, 3.0]), eps=1e-3)
    assert err <= 1e-4


def test_constant_function_has_zero_error():
    err = grad_check(lambda x: Tensor(np.array(5.0)), np.array([1.0, 2.0]))
    assert err == 0.0


def test_gradcheck_rejects_nonscalar():
    with pytest.raises(AutodiffError):
        grad_check(lambda x: ad.scale(x, 2.0), np.ones(2))


def test_gradcheck_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(ad.tsum, np.ones(2), eps=0.0)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-10])) <= 0.02


@pytest.mark.parametrize("op", [ad.log, lambda t: ad.mean(t, axis=0), lambda t: ad.reshape(t, (-1,))])
def test_elementwise_ops_gradcheck(op, rng):
    x = rng.uniform(0.5, 2.0, (3, 2))
    assert grad_check(lambda t: ad.tsum(ad.mul(op(t), op(t))), x, eps=1e-6) <= 1e-6
