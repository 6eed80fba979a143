import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textmatch import tensor as tn
from textmatch.tensor import ConfigurationError, ContractError, ShapeError, Tape, Tensor


def grad_error(build, *shapes, seed=0):
    """Max relative error between tape and central-difference gradients of ``build``."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    weights = None

    def value():
        out = build(*leaves)
        return float(np.sum(out.data * weights))

    with Tape() as tape:
        out = build(*leaves)
        weights = np.random.default_rng(seed + 1).normal(size=out.shape)
        loss = tn.sum(tn.mul(out, Tensor(weights)))
    tn.backward(loss, tape)
    worst = 0.0
    for leaf in leaves:
        fd = tn.finite_difference_gradient(lambda _: value(), leaf).data
        scale = max(np.abs(fd).max(), 1e-8)
        worst = max(worst, float(np.abs(fd - leaf.grad).max() / scale))
    return worst


@pytest.mark.parametrize(
    "name,build,shapes",
    [
        ("add_broadcast", lambda a, b: tn.add(a, b), [(3, 4), (4,)]),
        ("sub", lambda a, b: tn.sub(a, b), [(2, 3), (2, 3)]),
        ("mul_broadcast", lambda a, b: tn.mul(a, b), [(2, 3, 4), (3, 1)]),
        ("square", lambda a: tn.square(a), [(5,)]),
        ("scale", lambda a: tn.scale(a, -2.5), [(3, 2)]),
        ("sum_axis", lambda a: tn.sum(a, axis=1), [(3, 4, 2)]),
        ("mean_keepdims", lambda a: tn.mean(a, axis=-1, keepdims=True), [(3, 4)]),
        ("reshape", lambda a: tn.reshape(a, (6, 2)), [(3, 4)]),
        ("transpose", lambda a: tn.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
        ("concat", lambda a, b: tn.concat([a, b], axis=-1), [(2, 3), (2, 5)]),
        ("matmul_batched", lambda a, b: tn.matmul(a, b), [(2, 3, 4), (4, 5)]),
        ("matmul_both_batched", lambda a, b: tn.matmul(a, b), [(2, 3, 4), (2, 4, 2)]),
        ("softmax_rows", lambda a: tn.softmax_rows(a), [(2, 3, 5)]),
        ("l2_normalize_rows", lambda a: tn.l2_normalize_rows(a), [(4, 3)]),
        ("swap_last", lambda a: tn.swap_last(a), [(2, 3, 4)]),
        ("conv2d_single", lambda x, k: tn.conv2d(x, k, stride=2, padding=1), [(2, 6, 6), (3, 2, 4, 4)]),
        ("conv2d_batch", lambda x, k: tn.conv2d(x, k, stride=(1, 2), padding=(0, 1)), [(2, 1, 4, 8), (2, 1, 4, 4)]),
        ("lstm", lambda x, wi, wr, b: tn.lstm(x, wi, wr, b), [(2, 5, 3), (3, 8), (2, 8), (8,)]),
        ("lstm_reverse", lambda x, wi, wr, b: tn.lstm(x, wi, wr, b, reverse=True), [(1, 4, 3), (3, 8), (2, 8), (8,)]),
    ],
)
def test_gradients_match_finite_differences(name, build, shapes):
    assert grad_error(build, *shapes) < 1e-6, name


def test_relu_gradient_away_from_kink():
    x = Tensor(np.array([-2.0, -0.5, 0.5, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = tn.sum(tn.relu(x))
    tn.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [0, 0, 1, 1])


def test_take_rows_accumulates_repeated_indices():
    table = Tensor(np.zeros((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = tn.sum(tn.take_rows(table, np.array([[0, 2, 0]])))
    tn.backward(loss, tape)
    np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])


def test_no_tape_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    out = tn.mul(a, a)
    assert out._node is None
    with Tape() as tape:
        tn.mul(a, a)
    assert len(tape) == 1


def test_backward_needs_scalar_on_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = tn.mul(a, a)
    with pytest.raises(ContractError):
        tn.backward(out, tape)
    with pytest.raises(ContractError):
        tn.backward(tn.sum(a), Tape())


def test_gradients_accumulate_over_calls():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = tn.sum(tn.square(a))
        tn.backward(loss, tape)
    np.testing.assert_allclose(a.grad, 2 * 2 * a.data)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@given(st.integers(1, 5), st.integers(1, 6), st.floats(-50, 50))
def test_softmax_rows_sum_to_one(rows, cols, shift):
    m = np.random.default_rng(rows * 7 + cols).normal(scale=10, size=(rows, cols)) + shift
    out = tn.softmax_rows(Tensor(m)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


def test_l2_normalize_zero_row_stays_zero():
    m = np.array([[0.0, 0.0], [3.0, 4.0]])
    x = Tensor(m, requires_grad=True)
    with Tape() as tape:
        out = tn.l2_normalize_rows(x)
        loss = tn.sum(out)
    np.testing.assert_allclose(out.data, [[0, 0], [0.6, 0.8]])
    tn.backward(loss, tape)
    assert np.all(np.isfinite(x.grad))


def _conv_loops(x, k, stride, pad):
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    oh = (h + 2 * pad[0] - kh) // stride[0] + 1
    ow = (w + 2 * pad[1] - kw) // stride[1] + 1
    out = np.zeros((o, oh, ow))
    for f in range(o):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride[0] : i * stride[0] + kh, j * stride[1] : j * stride[1] + kw]
                out[f, i, j] = np.sum(patch * k[f])
    return out


@settings(max_examples=25)
@given(
    st.integers(1, 3), st.integers(1, 3), st.sampled_from([(1, 1), (2, 2), (1, 2)]), st.sampled_from([(0, 0), (1, 1), (0, 1)])
)
def test_conv2d_matches_loop_oracle(c_in, c_out, stride, pad):
    rng = np.random.default_rng(c_in * 10 + c_out)
    x = rng.normal(size=(c_in, 8, 8))
    k = rng.normal(size=(c_out, c_in, 2, 2))
    got = tn.conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, _conv_loops(x, k, stride, pad), atol=1e-12)


def test_conv_non_integral_extent_is_configuration_error():
    with pytest.raises(ConfigurationError):
        tn.conv_output_extent(32, 3, 2, 1)
    assert tn.conv_output_extent(32, 4, 2, 1) == 16


def _lstm_oracle(x, w_in, w_rec, b):
    d = w_rec.shape[0]
    h = np.zeros(d)
    c = np.zeros(d)
    out = []
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    for t in range(x.shape[0]):
        z = x[t] @ w_in + h @ w_rec + b
        i, f, g, o = sig(z[:d]), sig(z[d : 2 * d]), np.tanh(z[2 * d : 3 * d]), sig(z[3 * d :])
        c = f * c + i * g
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def test_lstm_forward_matches_step_oracle():
    rng = np.random.default_rng(9)
    x, wi, wr, b = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 8)), rng.normal(size=(2, 8)), rng.normal(size=8)
    got = tn.lstm(Tensor(x), Tensor(wi), Tensor(wr), Tensor(b)).data
    rev = tn.lstm(Tensor(x), Tensor(wi), Tensor(wr), Tensor(b), reverse=True).data
    for n in range(2):
        np.testing.assert_allclose(got[n], _lstm_oracle(x[n], wi, wr, b), atol=1e-12)
        np.testing.assert_allclose(rev[n], _lstm_oracle(x[n, ::-1], wi, wr, b)[::-1], atol=1e-12)


def test_sgd_momentum_matches_hand_computation():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    state = tn.SgdState(learning_rate=0.1, momentum=0.9)
    g = np.array([0.5, 1.0])
    tn.sgd_step([p], [g], state)
    tn.sgd_step([p], [g], state)
    # v1 = g, v2 = 0.9 g + g
    np.testing.assert_allclose(p.data, np.array([1.0, -1.0]) - 0.1 * g - 0.1 * 1.9 * g)


def test_sgd_zero_learning_rate_is_identity():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tn.sgd_step([p], [np.array([3.0, 4.0])], tn.SgdState(0.0, 0.9))
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
