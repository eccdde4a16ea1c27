import threading

import numpy as np
import pytest

from tstdepth import tensor as T
from tstdepth.errors import ConfigError, NumericalError, UsageError
from tstdepth.tensor import Tensor, no_grad, precision

from oracles import naive_matmul


def test_default_dtype_is_float32_and_precision_switches():
    assert Tensor([1.0]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_precision_is_thread_local():
    seen = []

    def worker():
        seen.append(Tensor([0.0]).dtype)

    with precision(np.float64):
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen == [np.float32]


def test_unsupported_dtype():
    with pytest.raises(ConfigError):
        T.set_default_dtype(np.int32)


def test_relu6_examples():
    assert T.relu6(Tensor([-1.0, 3.0, 9.0])).data.tolist() == [0.0, 3.0, 6.0]
    assert not T.relu6(Tensor(np.zeros(5))).data.any()


def test_relu6_gradient_values():
    x = Tensor([3.0, -1.0, 9.0], requires_grad=True)
    T.relu6(x).sum().backward()
    assert x.grad.tolist() == [1.0, 0.0, 0.0]


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(Tensor([2.0, 2.0, 2.0])).data, [1 / 3] * 3, rtol=1e-6)
    with precision(np.float64):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_random_matches_oracle(rng):
    x = rng.standard_normal((2, 5, 7))
    with precision(np.float64):
        out = T.softmax(Tensor(x), axis=2).data
    e = np.exp(x)
    np.testing.assert_allclose(out, e / e.sum(axis=2, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(out.sum(axis=2), 1.0, atol=1e-6)
    assert (out > 0).all()


def test_softmax_large_logits_stable():
    out = T.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-6)


def test_softmax_bad_axis():
    with pytest.raises(ConfigError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


def test_matmul_identity_and_oracle(rng):
    a = rng.standard_normal((3, 3))
    with precision(np.float64):
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
        x, y = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))
        np.testing.assert_allclose(T.matmul(Tensor(x), Tensor(y)).data, naive_matmul(x, y), atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ConfigError, match="incompatible"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_sigmoid_zero_and_extremes():
    assert T.sigmoid(Tensor(0.0)).data == 0.5
    out = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_broadcast_error_is_config_error():
    with pytest.raises(ConfigError, match="broadcast"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


def test_reshape_permute_concat_semantics(rng):
    x = rng.standard_normal((2, 3, 4))
    t = Tensor(x)
    np.testing.assert_array_equal(t.reshape(6, 4).data, x.reshape(6, 4).astype(np.float32))
    np.testing.assert_array_equal(t.permute(2, 0, 1).data, x.transpose(2, 0, 1).astype(np.float32))
    c = T.concat([t, t], axis=1)
    assert c.shape == (2, 6, 4)
    with pytest.raises(ConfigError):
        T.concat([t, Tensor(np.zeros((2, 3, 5)))], axis=1)
    with pytest.raises(ConfigError):
        t.reshape(5, 5)


def test_backward_sum_and_square(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    y = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    (y * y).sum().backward()
    np.testing.assert_allclose(y.grad, 2 * y.data, rtol=1e-6)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError, match="scalar"):
        (x * 2).backward()


def test_backward_consumes_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (x * 3).sum()
    loss.backward()
    assert loss._backward is None and loss._parents == ()


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    assert x.grad.tolist() == [8.0]


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2).sum()
    assert not y.requires_grad and y._parents == ()


def test_non_finite_forward_raises():
    with pytest.raises(NumericalError, match="log"):
        T.log(Tensor([0.0, 1.0]))
    with T.finite_checks(False):
        assert np.isinf(T.log(Tensor([0.0])).data[0])


def test_mac_counter_matmul(rng):
    with T.count_executed_macs() as c:
        T.matmul(Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal((6, 3))))
    assert c.total == 4 * 3 * 6


def test_determinism(rng):
    x = rng.standard_normal((5, 5))
    a = T.softmax(Tensor(x) @ Tensor(x)).data
    b = T.softmax(Tensor(x) @ Tensor(x)).data
    assert a.tobytes() == b.tobytes()
