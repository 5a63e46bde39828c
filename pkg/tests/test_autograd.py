from __future__ import annotations

import numpy as np
import pytest

from sp4d.fusion import autograd as ag


def gradcheck(fn, arrays, seed=0, h=1e-6):
    """Relative error between the analytic gradient of sum(R * fn(...)) and
    central differences, over every entry of every input."""
    rng = np.random.default_rng(seed)
    probe = fn(*[ag.Tensor(a) for a in arrays])
    R = rng.normal(0, 1, probe.shape)

    def scalar(arrs):
        return float(np.sum(R * fn(*[ag.Tensor(a) for a in arrs]).data))

    ts = [ag.Tensor(a.copy()) for a in arrays]
    out = fn(*ts)
    ag.backward(ag.total(ag.mul(out, R)))
    worst = 0.0
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            num[idx] = (scalar(plus) - scalar(minus)) / (2 * h)
        ana = ts[k].grad if ts[k].grad is not None else np.zeros_like(a)
        worst = max(worst, np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12))
    return worst


R = np.random.default_rng(42)


def r(*shape):
    return R.normal(0, 1, shape)


CASES = {
    "add_broadcast": (lambda a, b: ag.add(a, b), [r(2, 3, 4), r(4)]),
    "sub": (lambda a, b: ag.sub(a, b), [r(3, 4), r(1, 4)]),
    "mul_broadcast": (lambda a, b: ag.mul(a, b), [r(2, 3, 4), r(3, 1)]),
    "square": (lambda a: ag.square(a), [r(5)]),
    "silu": (lambda a: ag.silu(a), [r(3, 4)]),
    "relu": (lambda a: ag.relu(a), [r(3, 4) + 0.05 * np.sign(r(3, 4))]),
    "sum_axes": (lambda a: ag.sum_axes(a, (0, 2)), [r(2, 3, 4)]),
    "reshape": (lambda a: ag.reshape(a, (6, 2)), [r(3, 4)]),
    "concat": (lambda a, b: ag.concat([a, b], axis=-1), [r(2, 3), r(2, 2)]),
    "take_rows": (lambda a: ag.take_rows(a, np.array([2, 0, 2])), [r(3, 2)]),
    "linear": (lambda a, w, b: ag.linear(a, w, b), [r(2, 3, 4), r(4, 5), r(5)]),
    "const_matmul": (lambda a: ag.const_matmul(np.arange(6.0).reshape(2, 3), a), [r(3, 4)]),
    "conv3x3": (lambda x, w, b: ag.conv2d(x, w, b), [r(2, 5, 4, 3), r(3, 3, 3, 2), r(2)]),
    "conv1x1": (lambda x, w, b: ag.conv2d(x, w, b), [r(2, 3, 3, 4), r(1, 1, 4, 3), r(3)]),
    "group_norm": (lambda x, g, b: ag.group_norm(x, g, b, 2), [r(2, 3, 3, 4), r(4), r(4)]),
    "avgpool2": (lambda x: ag.avgpool2(x), [r(1, 4, 4, 2)]),
    "upsample2": (lambda x: ag.upsample2(x), [r(1, 2, 3, 2)]),
    "total": (lambda x: ag.total(x), [r(3, 2)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients(name):
    fn, arrays = CASES[name]
    assert gradcheck(fn, arrays) < 1e-4


def test_custom_scalar():
    x = ag.Tensor(r(3))
    y = ag.mul(x, 2.0)
    c = ag.custom_scalar([y], 1.5, [np.array([1.0, 2.0, 3.0])])
    ag.backward(c)
    np.testing.assert_allclose(x.grad, [2, 4, 6])


def test_shared_node_accumulates():
    x = ag.Tensor(np.array([1.0, 2.0]))
    y = ag.add(ag.mul(x, x), x)
    ag.backward(ag.total(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_dtype_preserved():
    x = ag.Tensor(r(1, 4, 4, 4).astype(np.float32))
    w = ag.Tensor(r(3, 3, 4, 4).astype(np.float32))
    g = ag.Tensor(np.ones(4, np.float32))
    b = ag.Tensor(np.zeros(4, np.float32))
    y = ag.avgpool2(ag.silu(ag.group_norm(ag.conv2d(x, w), g, b, 2)))
    loss = ag.total(ag.square(y))
    ag.backward(loss)
    assert loss.data.dtype == np.float32 and x.grad.dtype == np.float32 and w.grad.dtype == np.float32
