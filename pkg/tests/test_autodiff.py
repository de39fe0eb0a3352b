import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from skelforecast import autodiff as ad
from skelforecast.autodiff import DimensionError, NumericalError, TapeUsageError, Tensor

from conftest import grad_check

SEEDS = range(100)


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _conv_reference(x, w, d):
    """Direct loop: out[b, o, s, t] = sum x[b, c, s+i, t - (kt-1-k) d] w[o, c, i, k]."""
    B, C, S, T = x.shape
    O, _, ks, kt = w.shape
    out = np.zeros((B, O, S - ks + 1, T))
    for b in range(B):
        for o in range(O):
            for s in range(S - ks + 1):
                for t in range(T):
                    acc = 0.0
                    for c in range(C):
                        for i in range(ks):
                            for k in range(kt):
                                tt = t - (kt - 1 - k) * d
                                if tt >= 0:
                                    acc += x[b, c, s + i, tt] * w[o, c, i, k]
                    out[b, o, s, t] = acc
    return out


# ----------------------------------------------------------------- examples


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).numpy(), m)


def test_matmul_sum_gradient_is_ones():
    b = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]), requires_grad=True)
    with ad.new_tape():
        ad.sum_(ad.matmul(Tensor(np.eye(2)), b)).backward()
    assert np.array_equal(b.grad, np.ones((2, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2))))


def test_conv_impulse_response():
    x = np.zeros((1, 1, 1, 12))
    x[0, 0, 0, 5] = 1.0
    out = ad.conv2d_causal_dilated(Tensor(x), Tensor(np.ones((1, 1, 1, 2))), dilation_t=4).numpy()
    assert set(np.flatnonzero(out[0, 0, 0])) == {5, 9}


def test_conv_zero_input():
    rng = np.random.default_rng(0)
    out = ad.conv2d_causal_dilated(Tensor(np.zeros((2, 3, 4, 7))), Tensor(rng.normal(size=(5, 3, 2, 2))), 2)
    assert out.shape == (2, 5, 3, 7)
    assert not out.numpy().any()


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        ad.conv2d_causal_dilated(Tensor(np.ones((1, 1, 2, 4))), Tensor(np.ones((1, 1, 3, 2))))


@pytest.mark.parametrize("seed", range(10))
def test_conv_matches_direct_loop(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    kt = int(rng.integers(1, 4))
    x = rng.normal(size=(2, 2, 4, 9))
    w = rng.normal(size=(3, 2, int(rng.integers(1, 4)), kt))
    got = ad.conv2d_causal_dilated(Tensor(x), Tensor(w), d).numpy()
    np.testing.assert_allclose(got, _conv_reference(x, w, d), rtol=0, atol=1e-12)


def test_conv_channels_last_matches():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 5, 8))
    w = rng.normal(size=(4, 3, 2, 2))
    a = ad.conv2d_causal_dilated(Tensor(x), Tensor(w), 2).numpy()
    b = ad.conv2d_causal_dilated(Tensor(x.transpose(0, 2, 3, 1)), Tensor(w), 2, channels_last=True).numpy()
    np.testing.assert_allclose(a, b.transpose(0, 3, 1, 2), atol=1e-13)


@pytest.mark.parametrize("trial", range(50))
def test_conv_causality(trial):
    rng = np.random.default_rng(1000 + trial)
    T = int(rng.integers(4, 20))
    d = int(rng.integers(1, 6))
    kt = int(rng.integers(1, 4))
    x = rng.normal(size=(2, 2, 3, T))
    w = Tensor(rng.normal(size=(2, 2, 2, kt)))
    t = int(rng.integers(0, T))
    y = x.copy()
    y[..., t] += rng.normal(size=y[..., t].shape)
    before = ad.conv2d_causal_dilated(Tensor(x), w, d).numpy()
    after = ad.conv2d_causal_dilated(Tensor(y), w, d).numpy()
    assert np.array_equal(before[..., :t], after[..., :t])


def test_pointwise_linear_identity_and_constant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4))
    assert np.array_equal(ad.pointwise_linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).numpy(), x)
    c = rng.normal(size=5)
    out = ad.pointwise_linear(Tensor(np.zeros((2, 3, 4))), Tensor(rng.normal(size=(4, 5))), Tensor(c)).numpy()
    assert np.array_equal(out, np.broadcast_to(c, (2, 3, 5)))


def test_pointwise_linear_naive_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    expected = np.zeros((3, 2, 3))
    for i in range(3):
        for j in range(2):
            for o in range(3):
                acc = b[o]
                for k in range(4):
                    acc += x[i, j, k] * w[k, o]
                expected[i, j, o] = acc
    got = ad.pointwise_linear(Tensor(x), Tensor(w), Tensor(b)).numpy()
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-13)


def test_pointwise_linear_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.pointwise_linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))


@pytest.mark.parametrize("seed", range(5))
def test_linearity(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    alpha, beta = rng.normal(size=2)
    w = Tensor(rng.normal(size=(4, 5)))
    zero = Tensor(np.zeros(5))
    for f in (lambda v: ad.matmul(Tensor(v), w).numpy(), lambda v: ad.pointwise_linear(Tensor(v), w, zero).numpy()):
        np.testing.assert_allclose(f(alpha * x + beta * y), alpha * f(x) + beta * f(y), atol=1e-12)


def test_elementwise_values():
    assert ad.relu(Tensor(np.array([-1.0, 2.0]))).numpy().tolist() == [0.0, 2.0]
    assert ad.sigmoid(Tensor(np.array(0.0))).item() == 0.5
    assert ad.tanh(Tensor(np.array(0.0))).item() == 0.0
    assert ad.neg(Tensor(np.array([1.5]))).numpy().tolist() == [-1.5]


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_sigmoid_extreme_inputs_finite():
    out = ad.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).numpy()
    assert out.tolist() == [0.0, 1.0]


def test_reductions():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert ad.mean_abs_error(x, x).item() == 0.0
    assert ad.mean_abs_error(Tensor(np.ones(2)), Tensor(np.zeros(2))).item() == 1.0
    assert ad.sum_(x).item() == 15.0
    assert ad.mean(x).item() == 2.5
    with pytest.raises(DimensionError):
        ad.mean_abs_error(Tensor(np.ones(2)), Tensor(np.ones(3)))


# -------------------------------------------------------- gradient oracles

GRAD_CASES = {
    # name: (op, input builder, tolerance)
    "add": (ad.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], 1e-7),
    "sub": (ad.sub, lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))], 1e-7),
    "mul": (ad.mul, lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))], 1e-7),
    "div": (ad.div, lambda r: [r.normal(size=(2, 3)), r.uniform(0.5, 2.0, size=(2, 3))], 1e-6),
    "neg": (ad.neg, lambda r: [r.normal(size=(5,))], 1e-7),
    "relu": (ad.relu, lambda r: [_away_from_zero(r, (3, 4))], 1e-7),
    "tanh": (ad.tanh, lambda r: [r.normal(size=(3, 4))], 1e-7),
    "sigmoid": (ad.sigmoid, lambda r: [r.normal(scale=2, size=(3, 4))], 1e-7),
    "abs": (ad.abs_, lambda r: [_away_from_zero(r, (3, 4))], 1e-7),
    "sqrt": (ad.sqrt, lambda r: [r.uniform(0.5, 3.0, size=(3, 4))], 1e-7),
    "sum": (lambda a: ad.sum_(a, axis=1), lambda r: [r.normal(size=(2, 3, 4))], 1e-7),
    "sum_keepdims": (lambda a: ad.sum_(a, axis=-1, keepdims=True), lambda r: [r.normal(size=(2, 3))], 1e-7),
    "mean": (ad.mean, lambda r: [r.normal(size=(2, 3, 4))], 1e-6),
    "mean_abs_error": (ad.mean_abs_error, lambda r: [_away_from_zero(r, (2, 3, 4)), np.zeros((2, 3, 4))], 1e-6),
    "matmul": (ad.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], 1e-6),
    "matmul_batched": (ad.matmul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))], 1e-6),
    "pointwise_linear": (ad.pointwise_linear, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 3)), r.normal(size=3)], 1e-6),
    "graph_propagate": (lambda x: ad.graph_propagate(np.array([[0, 1, 0], [0.5, 0, 0.5], [0, 0, 1.0]]), x), lambda r: [r.normal(size=(2, 3, 4))], 1e-7),
    "conv2d": (lambda x, w: ad.conv2d_causal_dilated(x, w, 2), lambda r: [r.normal(size=(2, 2, 3, 6)), r.normal(size=(3, 2, 2, 2))], 1e-5),
    "conv2d_channels_last": (lambda x, w: ad.conv2d_causal_dilated(x, w, 3, channels_last=True), lambda r: [r.normal(size=(2, 3, 7, 2)), r.normal(size=(2, 2, 3, 2))], 1e-5),
    "hamilton_product": (ad.hamilton_product, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 3, 4))], 1e-7),
    "normalize_last": (ad.normalize_last, lambda r: [r.normal(size=(3, 4)) + 0.5], 1e-6),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), lambda r: [r.normal(size=(2, 6))], 1e-7),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))], 1e-7),
    "take": (lambda a: ad.take(a, [2, 0, 2, 1], axis=1), lambda r: [r.normal(size=(2, 3, 2))], 1e-7),
    "getitem": (lambda a: a[:, 1:3], lambda r: [r.normal(size=(2, 4))], 1e-7),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))], 1e-7),
    "split_half": (lambda a: ad.mul(*ad.split_half(a)), lambda r: [r.normal(size=(3, 4))], 1e-7),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_matches_finite_differences(name):
    op, build, tol = GRAD_CASES[name]
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        worst = max(worst, grad_check(op, build(rng), rng=rng))
    assert worst < tol, f"{name}: worst relative error {worst:.3e}"


def test_tape_walks_each_op_once():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with ad.new_tape() as tape:
        y = x * x
        z = ad.sum_(y + y)
        assert len(tape) == 3
        z.backward()
        assert len(tape) == 0
    np.testing.assert_array_equal(x.grad, 4 * x.data)


def test_linear_loss_gradient():
    x = np.array([1.0, -2.0, 3.0])
    w = Tensor(np.array([0.5, 0.1, 0.2]), requires_grad=True)
    with ad.new_tape():
        ad.sum_(w * Tensor(x)).backward()
    np.testing.assert_array_equal(w.grad, x)


def test_independent_leaves():
    a = Tensor(np.array(2.0), requires_grad=True)
    b = Tensor(np.array(3.0), requires_grad=True)
    with ad.new_tape():
        (a * 5.0 + b * 7.0).backward()
    assert a.grad == 5.0 and b.grad == 7.0


def test_gradients_accumulate_across_backward_calls():
    a = Tensor(np.array(2.0), requires_grad=True)
    for _ in range(2):
        with ad.new_tape():
            (a * 3.0).backward()
    assert a.grad == 6.0


def test_backward_requires_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.new_tape(), pytest.raises(TapeUsageError):
        (a * 2.0).backward()


def test_retain_tape_allows_second_pass():
    a = Tensor(np.array(1.5), requires_grad=True)
    with ad.new_tape() as tape:
        loss = a * a
        loss.backward(retain_tape=True)
        assert len(tape) == 1
        loss.backward()
    assert a.grad == pytest.approx(6.0)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with ad.new_tape() as tape, ad.no_grad():
        out = a * 2.0
        assert len(tape) == 0
    assert not out.requires_grad


def test_nan_detection():
    with pytest.raises(NumericalError):
        ad.div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    with pytest.raises(NumericalError):
        ad.sqrt(Tensor(np.array([-1.0])))


def test_tapes_are_thread_local():
    results = {}

    def work(k):
        a = Tensor(np.array(float(k)), requires_grad=True)
        with ad.new_tape():
            for _ in range(200):
                loss = a * a
            loss.backward()
        results[k] = float(a.grad)

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: 2.0 * k for k in range(1, 5)}


def test_forward_is_deterministic():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(2, 3, 4, 9)), rng.normal(size=(5, 3, 2, 2))
    a = ad.conv2d_causal_dilated(Tensor(x), Tensor(w), 2).numpy()
    b = ad.conv2d_causal_dilated(Tensor(x), Tensor(w), 2).numpy()
    assert a.tobytes() == b.tobytes()


# ------------------------------------------------------------ serialization


def test_serialization_header_layout():
    buf = ad.tensor_to_bytes(np.arange(6.0).reshape(2, 3))
    assert buf[:4] == b"SFTN"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:12], "little") == 2
    assert int.from_bytes(buf[12:20], "little") == 2
    assert int.from_bytes(buf[20:28], "little") == 3
    assert len(buf) == 28 + 6 * 8


def test_serialization_rejects_corruption():
    buf = ad.tensor_to_bytes(np.ones(3))
    with pytest.raises(ValueError):
        ad.tensor_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        ad.tensor_from_bytes(buf[:-8])


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_serialization_round_trip(arr):
    back = ad.tensor_from_bytes(ad.tensor_to_bytes(arr)).data
    assert back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_save_and_load(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 2))
    ad.save_tensor(tmp_path / "t.sftn", arr)
    assert np.array_equal(ad.load_tensor(tmp_path / "t.sftn").data, arr)
