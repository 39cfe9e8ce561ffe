import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smdim import tensor as tn
from smdim.tensor import Tape, Tensor, backward, grad_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                c[i, j] += a[i, p] * b[p, j]
    return c


# matmul -----------------------------------------------------------------

def test_matmul_identity():
    b = np.array([[7.0, 8.0], [9.0, 10.0]])
    np.testing.assert_array_equal(tn.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_small():
    out = tn.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_triple_loop_oracle(rng):
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    out = tn.matmul(Tensor(a), Tensor(b)).data
    assert np.abs(out - naive_matmul(a, b)).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError) as exc:
        tn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    msg = str(exc.value)
    assert "(2, 3)" in msg and "(4, 5)" in msg


def test_matmul_associative(rng):
    a, b, c = (Tensor(rng.standard_normal((4, 4))) for _ in range(3))
    left = tn.matmul(tn.matmul(a, b), c).data
    right = tn.matmul(a, tn.matmul(b, c)).data
    assert np.abs(left - right).max() < 1e-9


def test_matmul_gradient_matches_finite_differences(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    err = grad_check(lambda a, b: (tn.matmul(a, b) * tn.matmul(a, b)).sum(), [a, b])
    assert err < 1e-6


# conv1d -----------------------------------------------------------------

def test_conv1d_identity_kernel(rng):
    x = rng.standard_normal((6, 1))
    out = tn.conv1d(Tensor(x), Tensor(np.ones((1, 1, 1))), stride=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv1d_sum_kernel():
    out = tn.conv1d(Tensor([[1.0], [2.0], [3.0]]), Tensor(np.ones((2, 1, 1))), stride=1)
    np.testing.assert_array_equal(out.data.ravel(), [3.0, 5.0])


def test_conv1d_length_formula():
    x = Tensor(np.zeros((2048, 2)))
    w = Tensor(np.zeros((4, 2, 3)))
    down = tn.conv1d(x, w, stride=4)
    assert down.shape == (512, 3)
    up = tn.conv1d(down, Tensor(np.zeros((4, 3, 2))), stride=4, mode="transposed")
    assert up.shape == (2048, 2)


def test_conv1d_errors():
    with pytest.raises(ValueError):
        tn.conv1d(Tensor(np.zeros((4, 1))), Tensor(np.zeros((2, 1, 1))), stride=0)
    with pytest.raises(ValueError):
        tn.conv1d(Tensor(np.zeros((3, 1))), Tensor(np.zeros((4, 1, 1))), stride=1)


def test_conv1d_matches_loop_oracle(rng):
    x, w = rng.standard_normal((2, 10, 3)), rng.standard_normal((3, 3, 4))
    out = tn.conv1d(Tensor(x), Tensor(w), stride=2).data
    L_out = (10 - 3) // 2 + 1
    ref = np.zeros((2, L_out, 4))
    for b in range(2):
        for i in range(L_out):
            for j in range(3):
                ref[b, i] += x[b, 2 * i + j] @ w[j]
    assert np.abs(out - ref).max() < 1e-12


def test_transposed_conv_is_adjoint_of_forward(rng):
    # <conv(x), y> == <x, conv^T(y)> for the same kernel
    x, w = rng.standard_normal((12, 3)), rng.standard_normal((4, 3, 2))
    y = rng.standard_normal((3, 2))
    fwd = tn.conv1d(Tensor(x), Tensor(w), stride=4).data
    wt = np.swapaxes(w, 1, 2)
    back = tn.conv1d(Tensor(y), Tensor(wt), stride=4, mode="transposed").data
    assert abs((fwd * y).sum() - (x * back).sum()) < 1e-10


# nonlinearities ---------------------------------------------------------

def test_nonlinearity_values():
    assert tn.nonlinearity("silu", Tensor([0.0])).data[0] == 0.0
    assert abs(tn.nonlinearity("softplus", Tensor([0.0])).data[0] - math.log(2)) < 1e-12
    assert abs(tn.nonlinearity("silu", Tensor([20.0])).data[0] - 20.0) < 1e-7
    with pytest.raises(ValueError):
        tn.nonlinearity("relu", Tensor([0.0]))


def test_softplus_overflow_safe():
    out = tn.softplus(Tensor([-800.0, 40.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] >= 0 and abs(out[1] - (40 + math.log1p(math.exp(-40)))) < 1e-12
    assert out[2] == 800.0


# softmax / layer norm ---------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(tn.softmax_last_axis(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = tn.softmax_last_axis(Tensor(np.log([1.0, 2.0, 3.0]))).data
    assert np.abs(out - np.array([1, 2, 3]) / 6).max() < 1e-15


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(xs, c):
    x = np.array(xs)
    p = tn.softmax_last_axis(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-12 and np.all(p >= 0)
    q = tn.softmax_last_axis(Tensor(x + c)).data
    assert np.abs(p - q).max() < 1e-12


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(tn.layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero).data, 0.0)
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = tn.layer_norm(Tensor([1.0, -1.0]), g, b, eps=0.0).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-15)
    out = tn.layer_norm(Tensor([1.0, -1.0]), Tensor([2.0, 2.0]), Tensor([1.0, 1.0]), eps=0.0).data
    np.testing.assert_allclose(out, [3.0, -1.0], atol=1e-15)


def test_layer_norm_pre_affine_mean_zero(rng):
    x = rng.standard_normal((6, 9)) * 5 + 3
    out = tn.layer_norm(Tensor(x), Tensor(np.ones(9)), Tensor(np.zeros(9))).data
    assert np.abs(out.mean(-1)).max() < 1e-10
    assert np.abs(out.var(-1) - 1).max() < 1e-4


# backward ---------------------------------------------------------------

def test_backward_sum_of_squares(rng):
    x = leaf(rng.standard_normal(5))
    with Tape() as tape:
        loss = (x * x).sum()
    np.testing.assert_allclose(backward(tape, loss)[x], 2 * x.data)


def test_backward_silu_at_zero():
    x = leaf([0.0])
    with Tape() as tape:
        loss = tn.silu(x).sum()
    assert backward(tape, loss)[x][0] == 0.5


def test_backward_fan_out_accumulates():
    x = leaf([3.0])
    with Tape() as tape:
        loss = (x * 2.0 + x * x).sum()
    assert backward(tape, loss)[x][0] == pytest.approx(2.0 + 6.0)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        backward(tape, y)


def test_backward_disconnected_input_gets_zero():
    x, y = leaf([1.0, 2.0]), leaf([5.0])
    with Tape() as tape:
        loss = (x * 2.0).sum()
        _ = y * 3.0
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[y], [0.0])


def test_tape_nodes_are_topological(rng):
    x = leaf(rng.standard_normal((2, 3)))
    with Tape() as tape:
        tn.softmax_last_axis(tn.matmul(x, Tensor(rng.standard_normal((3, 3))))).sum()
    produced = {id(o) for o, _, _ in tape.nodes}
    seen = set()
    for out, inputs, _ in tape.nodes:
        # an input produced on the tape must have been recorded earlier
        assert all(id(t) in seen for t in inputs if id(t) in produced)
        seen.add(id(out))


# grad_check -------------------------------------------------------------

def test_grad_check_linear_function(rng):
    x = leaf(rng.standard_normal(6))
    c = rng.standard_normal(6)
    assert grad_check(lambda x: (x * c).sum(), [x]) < 1e-8


def test_grad_check_flags_corrupted_gradient(rng):
    # an op whose backward is deliberately scaled by 1.01
    def bad_square(a):
        return tn._record(a.data ** 2, [a], lambda g: (g * 2 * a.data * 1.01,))

    x = leaf(rng.uniform(0.5, 2.0, 5))
    assert grad_check(lambda x: bad_square(x).sum(), [x]) > 1e-2 * 0.99
    assert grad_check(lambda x: (x * x).sum(), [x]) < 1e-8


def _unary_cases(rng):
    return {
        "exp": lambda x: tn.exp(x).sum(),
        "log": lambda x: tn.log(x * x + 1.0).sum(),
        "sigmoid": lambda x: tn.sigmoid(x).sum(),
        "silu": lambda x: (tn.silu(x) * tn.silu(x)).sum(),
        "softplus": lambda x: (tn.softplus(x) * x).sum(),
        "reciprocal": lambda x: tn.reciprocal(x * x + 1.0).sum(),
        "softmax": lambda x: (tn.softmax_last_axis(x) * Tensor(np.arange(x.shape[-1]) + 1.0)).sum(),
        "log_softmax": lambda x: (tn.log_softmax_last_axis(x) * Tensor(np.arange(x.shape[-1]) + 1.0)).sum(),
        "mean": lambda x: (x.mean(axis=-1) * x.mean(axis=-1)).sum(),
        "swapaxes": lambda x: (x.swapaxes(0, 1) * Tensor(np.arange(x.size).reshape(x.shape[::-1]))).sum(),
    }


@pytest.mark.parametrize("name", list(_unary_cases(np.random.default_rng(0))))
def test_elementwise_gradients_on_random_shapes(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    f = _unary_cases(rng)[name]
    for _ in range(10):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=2))
        x = leaf(rng.standard_normal(shape))
        assert grad_check(f, [x], floor=1e-6) < 1e-5, shape


def test_structural_op_gradients(rng):
    for _ in range(10):
        # at least 3 channels: layer norm over 1-2 channels is (nearly) constant
        B, L, C = int(rng.integers(1, 4)), int(rng.integers(5, 8)), int(rng.integers(3, 6))
        x = leaf(rng.standard_normal((B, L, C)))
        w = leaf(rng.standard_normal((2, C, 3)))
        wt = leaf(rng.standard_normal((2, 3, C)))
        dw = leaf(rng.standard_normal((3, C)))
        g, b = leaf(rng.standard_normal(C)), leaf(rng.standard_normal(C))
        table = leaf(rng.standard_normal((7, C)))
        ids = rng.integers(0, 7, size=(B, L))
        wts = Tensor(rng.standard_normal((B, L, C)))
        L_round = 2 * ((L - 2) // 2 + 1)
        wts_round = Tensor(rng.standard_normal((B, L_round, C)))

        cases = [
            (lambda x, w: (tn.conv1d(x, w, stride=2) * tn.conv1d(x, w, stride=2)).sum(), [x, w]),
            (lambda x, w, wt: (tn.conv1d(tn.conv1d(x, w, 2), wt, 2, "transposed")
                               * wts_round).sum(), [x, w, wt]),
            (lambda x, dw: (tn.depthwise_causal_conv1d(x, dw) * wts).sum(), [x, dw]),
            (lambda x, g, b: (tn.layer_norm(x, g, b) * wts).sum(), [x, g, b]),
            (lambda t: (tn.embedding(t, ids) * wts).sum(), [table]),
            (lambda x: tn.take_last(tn.log_softmax_last_axis(x), ids % C).sum(), [x]),
            (lambda x: (tn.stack([tn.select(x, 0, axis=-2), tn.select(x, -1, axis=-2)], axis=0) * 3.0
                        ).sum() + (tn.concat_last([x, x * x]) * 0.5).sum(), [x]),
        ]
        for f, inputs in cases:
            assert grad_check(f, inputs, floor=1e-6) < 1e-5


def test_transposed_conv_gradient(rng):
    y = leaf(rng.standard_normal((2, 3, 3)))
    w = leaf(rng.standard_normal((4, 3, 2)))
    target = Tensor(rng.standard_normal((2, 12, 2)))
    err = grad_check(lambda y, w: (tn.conv1d(y, w, 4, "transposed") * target).sum(), [y, w])
    assert err < 1e-6


def test_selective_scan_gradient(rng):
    L, D, N = 5, 3, 2
    x = leaf(rng.standard_normal((L, D)))
    delta = leaf(rng.uniform(0.1, 1.0, (L, D)))
    A = leaf(-rng.uniform(0.5, 2.0, (D, N)))
    B = leaf(rng.standard_normal((L, N)))
    C = leaf(rng.standard_normal((L, N)))
    w = Tensor(rng.standard_normal((L, D)))
    err = grad_check(lambda *a: (tn.selective_scan(*a) * w).sum(), [x, delta, A, B, C],
                     floor=1e-6)
    assert err < 1e-6


def test_selective_scan_rejects_non_finite(rng):
    x = Tensor(np.ones((2, 1)))
    with pytest.raises(FloatingPointError):
        tn.selective_scan(x, Tensor(np.full((2, 1), 1e3)), Tensor(np.full((1, 1), 1e3)),
                          Tensor(np.ones((2, 1))), Tensor(np.ones((2, 1))))


# instrumentation --------------------------------------------------------

def test_mac_counter_stages(rng):
    a, b = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 5)))
    with tn.mac_counter() as c:
        with tn.mac_stage("x"):
            tn.matmul(a, b, label="ab")
        tn.matmul(a, b)
    assert c.by_stage == {"x": 60, "other": 60}
    assert c.by_op[("x", "ab")] == 60 and c.total == 120


def test_sinusoidal_shape_and_values():
    emb = tn.sinusoidal(np.array([0, 1, 2]), 8)
    assert emb.shape == (3, 8)
    np.testing.assert_array_equal(emb[0], [0, 0, 0, 0, 1, 1, 1, 1])
