import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sgfuse import autodiff as ad
from sgfuse.autodiff import DomainError, ShapeError, Tensor, UsageError
from sgfuse.oracle import naive_matmul

from .gradutil import check_grads

seeds = st.integers(0, 2**32 - 1)
small = st.integers(1, 5)


# ---------------------------------------------------------------- elementwise


def test_sigmoid_and_tanh_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.tanh(Tensor(0.0)).item() == 0.0


def test_log_shifted_value():
    expected = float(mpmath.log(mpmath.mpf("1.1")))
    assert ad.log_shifted(Tensor(1.0), 0.1).item() == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.0953102, abs=1e-7)


def test_log_shifted_domain_error():
    with pytest.raises(DomainError):
        ad.log_shifted(Tensor([0.5, -0.1]), 0.1)
    with pytest.raises(DomainError):
        ad.log_shifted(Tensor([-2.0]), 0.1)


def test_sigmoid_extreme_inputs_stay_finite():
    out = ad.sigmoid(Tensor([-800.0, 800.0]))
    assert out.is_valid()
    assert out.data[0] == 0.0 and out.data[1] == 1.0


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_validity_flags_non_finite():
    assert Tensor([1.0, 2.0]).is_valid()
    assert not Tensor([1.0, np.nan]).is_valid()
    assert not Tensor([np.inf]).is_valid()


def test_tensor_copies_its_input():
    src = np.zeros(3)
    t = Tensor(src)
    src[0] = 5.0
    assert t.data[0] == 0.0
    assert t.size == 3 and t.shape == (3,)


# ---------------------------------------------------------------- matmul / linear


def test_matmul_fixtures():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal((eye @ b).data, b.data)
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


@given(seeds, st.integers(1, 8), st.integers(1, 8), st.integers(1, 8))
def test_matmul_matches_triple_loop(seed, m, k, p):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, p))
    got = ad.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, np.array(naive_matmul(a.tolist(), b.tolist())), rtol=0, atol=1e-12)


def test_batched_matmul_matches_per_slice(rng):
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    got = ad.matmul(Tensor(a), Tensor(b)).data
    for i in range(3):
        np.testing.assert_allclose(got[i], np.array(naive_matmul(a[i].tolist(), b.tolist())), atol=1e-12)


def test_linear_fixtures():
    out = ad.linear(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    assert out.data.tolist() == [1.0, 2.0]
    out = ad.linear(Tensor([1.0, 1.0]), Tensor([[1.0], [1.0]]), Tensor([-2.0]))
    assert out.data.tolist() == [0.0]


def test_linear_equals_matmul_plus_bias(rng):
    x, w, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=5))
    np.testing.assert_array_equal(ad.linear(x, w, b).data, ad.add(ad.matmul(x, w), b).data)


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))), Tensor(np.ones(5)))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_fixture_against_high_precision():
    mpmath.mp.dps = 40
    ex = [mpmath.exp(v) for v in (1, 2, 3)]
    expected = [float(e / sum(ex)) for e in ex]
    got = ad.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(got, expected, atol=1e-15)
    np.testing.assert_allclose(got, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)


@given(seeds, st.integers(1, 6), st.integers(1, 10))
def test_softmax_rows_sum_to_one(seed, rows, cols):
    x = np.random.default_rng(seed).uniform(-50, 50, (rows, cols))
    out = ad.softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@given(seeds, st.floats(-100, 100))
def test_softmax_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-5, 5, (3, 6))
    per_row = shift * rng.uniform(-1, 1, (3, 1))
    a = ad.softmax_lastdim(Tensor(x)).data
    b = ad.softmax_lastdim(Tensor(x + per_row)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- layout


def test_reshape_round_trip(rng):
    x = rng.normal(size=(2, 6))
    y = ad.reshape(ad.reshape(Tensor(x), (2, 2, 3)), (2, 6))
    np.testing.assert_array_equal(y.data, x)


def test_reshape_count_mismatch():
    with pytest.raises(ShapeError):
        ad.reshape(Tensor(np.ones(6)), (4, 2))


def test_transpose_involution(rng):
    x = rng.normal(size=(3, 4, 5))
    np.testing.assert_array_equal(ad.transpose_last2(ad.transpose_last2(Tensor(x))).data, x)


@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4))
def test_reshape_frames_slices_rows(n, length, c):
    flat = np.arange(n * length * c, dtype=float).reshape(n * length, c)
    frames = ad.reshape(Tensor(flat), (n, length, c)).data
    for i in range(n):
        np.testing.assert_array_equal(frames[i], flat[i * length:(i + 1) * length])


# ---------------------------------------------------------------- backward


def test_backward_sum():
    x = ad.parameter([1.0, 2.0, 3.0])
    ad.backward(ad.sum_all(x), [x])
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_sum_of_squares():
    x = ad.parameter([1.0, -2.0])
    ad.backward(ad.sum_all(ad.mul(x, x)), [x])
    assert x.grad.tolist() == [2.0, -4.0]


def test_backward_rejects_non_scalar():
    x = ad.parameter([1.0, 2.0])
    with pytest.raises(UsageError):
        ad.backward(ad.square(x), [x])


def test_backward_recomputes_not_accumulates():
    x = ad.parameter([1.0, -2.0])
    for _ in range(3):
        ad.backward(ad.sum_all(ad.square(x)), [x])
    assert x.grad.tolist() == [2.0, -4.0]


def test_unreached_parameter_gets_zero_grad():
    x, y = ad.parameter([1.0]), ad.parameter([[1.0, 2.0]])
    ad.backward(ad.sum_all(x), [x, y])
    assert y.grad.tolist() == [[0.0, 0.0]]


def test_diamond_graph_accumulates_both_paths():
    x = ad.parameter(3.0)
    y = ad.add(ad.mul(x, x), ad.scale(x, 4.0))
    ad.backward(y, [x])
    assert x.grad == pytest.approx(2 * 3.0 + 4.0)


def test_tape_is_topological_and_unique(rng):
    x = ad.parameter(rng.normal(size=(3, 4)))
    w = ad.parameter(rng.normal(size=(4, 2)))
    h = ad.tanh(x @ w)
    loss = ad.sum_all(ad.mul(h, h))
    tape = ad.backward(loss, [x, w])
    ids = [t.node_id for t in tape]
    assert len(ids) == len(set(ids))
    assert tape.is_topological()
    assert tape.nodes[-1] is loss
    assert x.grad.shape == x.shape and w.grad.shape == w.shape


def _unary_cases():
    return {
        "sigmoid": ad.sigmoid,
        "tanh": ad.tanh,
        "gelu": ad.gelu,
        "square": ad.square,
        "scale": lambda a: ad.scale(a, -1.7),
        "log_shifted": lambda a: ad.log_shifted(ad.sigmoid(a), 0.1),
        "softmax": ad.softmax_lastdim,
        "transpose": ad.transpose_last2,
        "reshape": lambda a: ad.reshape(a, (-1,)),
        "mean": ad.mean_all,
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@given(seed=seeds, rows=small, cols=small)
def test_unary_gradients_match_finite_differences(name, seed, rows, cols):
    rng = np.random.default_rng(seed)
    x = ad.parameter(rng.uniform(-1, 1, (rows, cols)))
    weights = Tensor(rng.uniform(-1, 1, ad.transpose_last2(x).shape if name == "transpose" else (rows, cols)))
    op = _unary_cases()[name]

    def loss():
        out = op(x)
        if out.size == 1:
            return ad.sum_all(out)
        return ad.sum_all(ad.mul(ad.reshape(out, weights.shape), weights))

    assert max(check_grads(loss, [x])) < 1e-4


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "linear", "broadcast_add", "broadcast_mul"])
@given(seed=seeds, m=small, k=small, p=small)
def test_binary_gradients_match_finite_differences(name, seed, m, k, p):
    rng = np.random.default_rng(seed)
    a = ad.parameter(rng.uniform(-1, 1, (m, k)))
    shapes = {"matmul": (k, p), "linear": (k, p), "broadcast_add": (k,), "broadcast_mul": (1, k)}
    b = ad.parameter(rng.uniform(-1, 1, shapes.get(name, (m, k))))
    bias = ad.parameter(rng.uniform(-1, 1, p))
    ops = {
        "add": lambda: ad.add(a, b), "sub": lambda: ad.sub(a, b), "mul": lambda: ad.mul(a, b),
        "matmul": lambda: ad.matmul(a, b), "linear": lambda: ad.linear(a, b, bias),
        "broadcast_add": lambda: ad.add(a, b), "broadcast_mul": lambda: ad.mul(a, b),
    }
    params = [a, b, bias] if name == "linear" else [a, b]

    def loss():
        out = ops[name]()
        return ad.sum_all(ad.square(ad.tanh(out)))

    assert max(check_grads(loss, params)) < 1e-4


def test_batched_matmul_gradient(rng):
    a = ad.parameter(rng.uniform(-1, 1, (2, 3, 4)))
    b = ad.parameter(rng.uniform(-1, 1, (2, 4, 3)))
    assert max(check_grads(lambda: ad.sum_all(ad.square(a @ b)), [a, b])) < 1e-4


def test_corrupted_backward_is_detected(rng):
    x = ad.parameter(rng.uniform(-1, 1, (3, 3)))
    with ad.corrupted_backward("tanh"):
        assert max(check_grads(lambda: ad.sum_all(ad.tanh(x)), [x])) > 1e-2
    assert max(check_grads(lambda: ad.sum_all(ad.tanh(x)), [x])) < 1e-4


def test_mac_counter(rng):
    with ad.count_macs() as box:
        Tensor(rng.normal(size=(2, 3, 4))) @ Tensor(rng.normal(size=(4, 5)))
    assert box[0] == 2 * 3 * 4 * 5


# ---------------------------------------------------------------- sgd


def test_sgd_single_step():
    p = ad.parameter(1.0)
    p.grad = np.array(2.0)
    ad.sgd_step([p], 0.1)
    assert p.data == pytest.approx(0.8)


def test_sgd_zero_lr_keeps_params(rng):
    p = ad.parameter(rng.normal(size=4))
    before = p.data.copy()
    p.grad = rng.normal(size=4)
    ad.sgd_step([p], 0.0)
    np.testing.assert_array_equal(p.data, before)


def test_sgd_requires_grads():
    with pytest.raises(UsageError):
        ad.sgd_step([ad.parameter(1.0)], 0.1)


def test_sgd_converges_on_quadratic():
    p = ad.parameter(0.0)
    for _ in range(100):
        ad.backward(ad.square(ad.sub(p, Tensor(3.0))), [p])
        ad.sgd_step([p], 0.1)
    # error contracts by 0.8 per step: 3 * 0.8**100
    assert abs(p.item() - 3.0) < 1e-6
    assert abs(p.item() - 3.0) == pytest.approx(3.0 * 0.8**100, rel=1e-6)
