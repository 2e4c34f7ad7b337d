import threading

import numpy as np
import pytest

from srpn import tensor as T
from srpn.gradcheck import check, numeric_grad, op_cases, run_cases


def leaf(x):
    return T.Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_conv_identity_kernel(backend, rng):
    x = rng.normal(size=(1, 4, 5))
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor(np.zeros(1)), 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_kernel(backend):
    out = T.conv2d(T.Tensor(np.ones((1, 3, 3))), T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.zeros(1)), 1)
    assert out.shape == (1, 3, 3)
    assert out.data[0, 1, 1] == 9.0
    assert out.data[0, 0, 0] == 4.0
    assert out.data[0, 0, 1] == 6.0


def test_conv_output_size(backend, rng):
    x = T.Tensor(rng.normal(size=(2, 6, 7)))
    w = T.Tensor(rng.normal(size=(3, 2, 3, 3)))
    assert T.conv2d(x, w, T.Tensor(np.zeros(3)), 0).shape == (3, 4, 5)
    assert T.conv2d(x, w, T.Tensor(np.zeros(3)), 1).shape == (3, 6, 7)


def test_conv_matches_direct_loops(backend, rng):
    x = rng.normal(size=(2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref[o, i, j] = (xp[:, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ValueError, match="channels"):
        T.conv2d(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))), T.Tensor(np.zeros(1)), 1)


def test_conv_weight_grad_matches_fd(backend, rng):
    x = T.Tensor(rng.normal(size=(2, 5, 5)))
    w = T.Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = T.Tensor(rng.normal(size=3))
    fn = lambda x_, w_, b_: T.tsum(T.conv2d(x_, w_, b_, 1))
    w_leaf = leaf(w.data)
    T.backward(fn(x, w_leaf, b))
    num = numeric_grad(fn, [x, w, b], 1, eps=1e-5)
    rel = np.abs(w_leaf.grad - num).max() / np.abs(num).max()
    assert rel < 1e-6


def test_relu_values_and_boundary():
    x = leaf([-3.0, -1e-9, 0.0, 2.0])
    y = T.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 0, 2.0])
    T.backward(T.tsum(y))
    np.testing.assert_array_equal(x.grad, [0, 0, 0, 1.0])
    assert not np.any(T.relu(T.Tensor(-np.ones(5))).data)


def test_logistic_values():
    assert T.logistic(T.Tensor(0.0)).item() == 0.5
    hi = T.logistic(T.Tensor(40.0)).item()
    assert 1 - 1e-15 < hi < 1.0
    lo = T.logistic(T.Tensor(-40.0)).item()
    assert 0.0 < lo < 1e-15
    with np.errstate(over="raise"):
        ext = T.logistic(T.Tensor([-1000.0, 1000.0])).data
    assert np.all((ext > 0) & (ext < 1))


def test_squared_l2():
    assert T.squared_l2(T.Tensor([1.0, 2.0]), T.Tensor([1.0, 2.0])).item() == 0.0
    assert T.squared_l2(T.Tensor([1.0, 0.0]), T.Tensor([0.0, 1.0])).item() == 2.0
    with pytest.raises(ValueError):
        T.squared_l2(T.Tensor(np.zeros(2)), T.Tensor(np.zeros(3)))


def test_squared_l2_grad_is_analytic(rng):
    a, b = leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    T.backward(T.squared_l2(a, b))
    np.testing.assert_allclose(a.grad, 2 * (a.data - b.data), rtol=1e-15)
    np.testing.assert_allclose(b.grad, -2 * (a.data - b.data), rtol=1e-15)


def test_backward_sum_of_leaf_gives_ones():
    x = leaf(np.zeros((2, 3)))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        T.backward(T.relu(leaf(np.ones(3))))


def test_second_backward_rejected():
    x = leaf([1.0, 2.0])
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(RuntimeError, match="already"):
        T.backward(loss)
    # a fresh forward pass works again
    x.zero_grad()
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_reverse_replay_order():
    x = leaf(np.ones(3))
    y = T.relu(T.mul(T.add(x, 1.0), 2.0))
    loss = T.tsum(y)
    tape = loss._tape
    executed = [n.op for n in tape.nodes]
    T.backward(loss)
    assert tape.visited == executed[::-1]


def test_gradients_accumulate_over_reuse():
    x = leaf([3.0])
    T.backward(T.tsum(T.add(T.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, [7.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._node is None


def test_ops_do_not_mutate_inputs(backend, rng):
    arrays = [rng.normal(size=(2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
    copies = [a.copy() for a in arrays]
    x, w, b = (leaf(a) for a in arrays)
    y = T.maxpool2d(T.relu(T.conv2d(x, w, b, 1)), 2)
    z = T.smooth_l1(T.logistic(T.reshape(y, (12,))))
    T.backward(T.tsum(T.log(T.clamp(z, 1e-3, 10.0))))
    for t, c in zip((x, w, b), copies):
        np.testing.assert_array_equal(t.data, c)


def test_forward_is_deterministic(backend, rng):
    x, w, b = rng.normal(size=(3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    a = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1).data
    c = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1).data
    assert a.tobytes() == c.tobytes()


def test_chain_conv_relu_sum_gradients(backend, rng):
    fn = lambda x, w, b: T.tsum(T.relu(T.conv2d(x, w, b, 1)))
    for seed in range(5):
        r = np.random.default_rng(seed)
        x, w, b = r.normal(size=(2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)
        pre = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1).data
        if np.abs(pre).min() < 1e-3:
            continue
        assert check(fn, [x, w, b]) < 1e-5


@pytest.mark.parametrize("case", op_cases(), ids=lambda c: c[0])
def test_op_gradients_twenty_seeds(case, backend):
    (res,) = run_cases([case], seeds=20, tolerance=1e-4)
    assert res.passed, res


def test_leaf_grads_finite_after_backward(rng):
    x = leaf(rng.normal(size=6) * 50)
    T.backward(T.tsum(T.log(T.clamp(T.logistic(x), 1e-12, 1.0))))
    assert np.all(np.isfinite(x.grad))


def test_independent_tapes_on_threads(rng):
    results = {}

    def work(k):
        x = leaf(np.full(4, float(k)))
        T.backward(T.tsum(T.mul(x, x)))
        results[k] = x.grad

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        np.testing.assert_array_equal(results[k], np.full(4, 2.0 * k))


def test_broadcasting_rejected():
    with pytest.raises(ValueError, match="shape"):
        T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones((2, 3))))
