import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepcast.autodiff import (
    Tensor,
    concat,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mean_squared_error,
    softmax,
)


def fd_grad(fn, arrays, which, eps=1e-6):
    """Central finite differences of scalar fn wrt arrays[which]."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[which])
    flat = g.reshape(-1)
    src = base[which].reshape(-1)
    for i in range(flat.size):
        orig = src[i]
        src[i] = orig + eps
        up = fn(*base)
        src[i] = orig - eps
        dn = fn(*base)
        src[i] = orig
        flat[i] = (up - dn) / (2 * eps)
    return g


def check_grads(fn, arrays, rtol=1e-6):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()
    scalar = lambda *arrs: float(np.asarray(fn(*[Tensor(a) for a in arrs]).data))
    for i, t in enumerate(tensors):
        num = fd_grad(scalar, [a.copy() for a in arrays], i)
        got = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        denom = np.maximum(np.abs(num), 1.0)
        assert np.max(np.abs(got - num) / denom) < rtol, f"arg {i}"


rng = np.random.default_rng(0)


def test_add_mul_broadcast_grads():
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    check_grads(lambda x, y: ((x + y) * (x * 2.0 - 1.0)).mean(), [a, b])


def test_matmul_grads():
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    check_grads(lambda x, y: matmul(x, y).sum(), [a, b])


def test_matmul_stacked_broadcast_grads():
    a = rng.normal(size=(5, 3, 4))
    b = rng.normal(size=(5, 4, 2))
    check_grads(lambda x, y: (matmul(x, y) * 0.3).sum(), [a, b])


def test_matmul_broadcast_weight_grads():
    # shared weight across a stacked batch
    a = rng.normal(size=(5, 3, 4))
    w = rng.normal(size=(4, 2))
    check_grads(lambda x, y: matmul(x, y).sum(), [a, w])


def test_reshape_transpose_grads():
    a = rng.normal(size=(2, 3, 4))
    check_grads(
        lambda x: (x.reshape(2, 12) * 0.5).sum() + x.transpose((1, 0, 2)).mean(),
        [a],
    )


def test_power_div_grads():
    a = rng.normal(size=(4,)) + 3.0
    check_grads(lambda x: (x**-0.5).sum() + (1.0 / x).sum() + (x / 2.0).sum(), [a])


def test_sum_axis_keepdims_grads():
    a = rng.normal(size=(3, 5))
    check_grads(lambda x: (x.sum(axis=1, keepdims=True) * x).sum(), [a])


def test_gelu_grads_and_values():
    a = np.linspace(-3, 3, 13)
    assert gelu(np.array([0.0]))[0] == 0.0
    assert gelu(np.array([10.0]))[0] == pytest.approx(10.0, rel=1e-8)
    check_grads(lambda x: gelu(x).sum(), [a])


def test_softmax_grads_and_normalization():
    a = rng.normal(size=(3, 6))
    y = softmax(a)
    assert y.sum(axis=-1) == pytest.approx(np.ones(3))
    check_grads(lambda x: (softmax(x) * np.arange(6.0)).sum(), [a])


def test_layer_norm_grads_and_moments():
    x = rng.normal(size=(4, 8)) * 3 + 1
    g = rng.normal(size=(8,)) + 1.0
    b = rng.normal(size=(8,))
    y = layer_norm(x, np.ones(8), np.zeros(8))
    assert np.mean(y, axis=-1) == pytest.approx(np.zeros(4), abs=1e-12)
    assert np.std(y, axis=-1) == pytest.approx(np.ones(4), rel=1e-4)
    check_grads(lambda xx, gg, bb: (layer_norm(xx, gg, bb) * rng_weights).sum(), [x, g, b])


rng_weights = np.random.default_rng(1).normal(size=(4, 8))


def test_embedding_grads():
    table = rng.normal(size=(7, 5))
    idx = np.array([1, 3, 3, 0])
    t = Tensor(table, requires_grad=True)
    out = (embedding(t, idx) * 2.0).sum()
    out.backward()
    expect = np.zeros_like(table)
    np.add.at(expect, idx, 2.0)
    assert t.grad == pytest.approx(expect)


def test_concat_grads():
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 5))
    check_grads(lambda x, y: (concat([x, y], axis=1) ** 2.0).sum(), [a, b])


def test_mse_value_and_grad():
    pred = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    target = np.array([1.0, 1.0, 1.0])
    loss = mean_squared_error(pred, target)
    assert float(loss.data) == pytest.approx(5.0 / 3.0)
    loss.backward()
    assert pred.grad == pytest.approx(2.0 / 3.0 * np.array([0.0, 1.0, 2.0]))


def test_ndarray_fast_path_matches_tensor_path():
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 4))
    g = np.ones(4)
    b = np.zeros(4)

    def net(xx, ww):
        h = gelu(matmul(xx, ww))
        return layer_norm(h, g, b)

    out_np = net(x, w)
    out_t = net(Tensor(x), Tensor(w, requires_grad=True))
    assert out_np == pytest.approx(out_t.data, abs=1e-15)


def test_backward_requires_scalar():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_grad_accumulates_over_reuse():
    t = Tensor(np.array([2.0]), requires_grad=True)
    out = (t * 3.0 + t * 4.0).sum()
    out.backward()
    assert t.grad == pytest.approx([7.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_grad_property(m, k, seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(m, k))
    b = r.normal(size=(k, 2))
    check_grads(lambda x, y: (matmul(x, y) ** 2.0).mean(), [a, b], rtol=1e-5)
