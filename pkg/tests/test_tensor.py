import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lhcnet import tensor as T
from lhcnet.gradcheck import check_gradients, primitive_suite
from lhcnet.tensor import ConfigError, GradTape, ShapeError, Tensor, backward


def window_oracle(x, p, reduce):
    """Direct enumeration of the valid cells of each p x p window."""
    h, w, c = x.shape
    r = (p - 1) // 2
    out = np.empty_like(x, dtype=float)
    for i in range(h):
        for j in range(w):
            win = x[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1, :]
            out[i, j] = reduce(win.reshape(-1, c), axis=0)
    return out


def conv_oracle(x, k, b):
    h, w, _ = x.shape
    s = k.shape[0]
    r = s // 2
    out = np.zeros((h, w, k.shape[3]))
    for i in range(h):
        for j in range(w):
            for a in range(s):
                for bb in range(s):
                    ii, jj = i + a - r, j + bb - r
                    if 0 <= ii < h and 0 <= jj < w:
                        out[i, j] += x[ii, jj] @ k[a, bb]
    return out + b


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# --- Tensor type ---


def test_tensor_is_immutable_value():
    src = np.arange(6.0)
    t = Tensor(src)
    src[0] = 99.0
    assert t.data[0] == 0.0
    with pytest.raises(ValueError):
        t.data[0] = 1.0
    assert t.size == 6 and t.shape == (6,)


def test_precision_is_a_construction_property():
    assert Tensor([1.0, 2.0]).precision == "float64"
    assert Tensor([1.0, 2.0], dtype="float32").precision == "float32"


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=4, max_side=5), elements=finite))
def test_reshape_and_transpose_round_trip(a):
    t = Tensor(a)
    assert np.array_equal(t.reshape(-1).reshape(*a.shape).data, a)
    axes = tuple(reversed(range(a.ndim)))
    assert np.array_equal(T.transpose(T.transpose(t, axes), axes).data, a)
    assert np.array_equal(T.swap_last(T.swap_last(t)).data, a)


def test_reshape_keeps_length():
    with pytest.raises(ShapeError):
        Tensor(np.zeros(6)).reshape(4)


# --- matmul ---


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)


def test_matmul_hand_arithmetic():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert out.data.tolist() == [[19.0, 22.0], [43.0, 50.0]]


def test_matmul_score_shape():
    out = T.matmul(Tensor(np.ones((64, 196))), Tensor(np.ones((196, 64))))
    assert out.shape == (64, 64)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


# --- pooling ---


def test_avg_pool_small_map():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
    assert np.allclose(T.avg_pool2d_same(x, 3).data, 2.5)


def test_max_pool_small_map():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
    assert np.array_equal(T.max_pool2d_same(x, 3).data, np.full((2, 2, 1), 4.0))


@pytest.mark.parametrize("p", [1, 3, 5, 7])
def test_avg_pool_keeps_constants(p):
    x = Tensor(np.full((6, 5, 2), 3.25))
    assert np.allclose(T.avg_pool2d_same(x, p).data, 3.25, atol=1e-14)


@pytest.mark.parametrize("pool", [T.avg_pool2d_same, T.max_pool2d_same])
def test_pool_size_one_is_identity(pool):
    x = np.random.default_rng(0).normal(size=(4, 5, 3))
    assert np.array_equal(pool(Tensor(x), 1).data, x)


@pytest.mark.parametrize("pool", [T.avg_pool2d_same, T.max_pool2d_same])
def test_even_pool_rejected(pool):
    with pytest.raises(ConfigError):
        pool(Tensor(np.zeros((4, 4, 1))), 2)


@pytest.mark.parametrize("p", [3, 5])
def test_max_pool_peak_spreads_to_chebyshev_radius(p):
    x = np.zeros((9, 9, 1))
    x[4, 3, 0] = 5.0
    out = T.max_pool2d_same(Tensor(x), p).data[:, :, 0]
    r = (p - 1) // 2
    ii, jj = np.mgrid[0:9, 0:9]
    inside = np.maximum(abs(ii - 4), abs(jj - 3)) <= r
    assert np.array_equal(out == 5.0, inside)
    assert np.array_equal(out, window_oracle(x, p, np.max)[:, :, 0])


@pytest.mark.parametrize("shape", [(5, 5, 2), (3, 7, 1), (2, 6, 4, 3)])
@pytest.mark.parametrize("p", [3, 5])
def test_pools_match_window_enumeration(shape, p):
    x = np.random.default_rng(1).normal(size=shape)
    got_avg = T.avg_pool2d_same(Tensor(x), p).data
    got_max = T.max_pool2d_same(Tensor(x), p).data
    assert got_avg.shape == got_max.shape == x.shape
    frames = x if x.ndim == 4 else x[None]
    want_avg = np.stack([window_oracle(f, p, np.mean) for f in frames]).reshape(shape)
    want_max = np.stack([window_oracle(f, p, np.max) for f in frames]).reshape(shape)
    assert np.allclose(got_avg, want_avg, atol=1e-12)
    assert np.array_equal(got_max, want_max)


# --- convolution ---


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(2).normal(size=(4, 5, 3))
    k = np.zeros((3, 3, 3, 3))
    k[1, 1] = np.eye(3)
    out = T.conv2d_same(Tensor(x), Tensor(k), Tensor(np.zeros(3))).data
    assert np.allclose(out, x, atol=1e-15)


def test_conv_zero_kernel_gives_bias():
    b = np.array([1.5, -2.0])
    out = T.conv2d_same(Tensor(np.ones((3, 3, 4))), Tensor(np.zeros((3, 3, 4, 2))), Tensor(b)).data
    assert np.array_equal(out, np.broadcast_to(b, (3, 3, 2)))


def test_conv_ones_kernel_on_ones():
    out = T.conv2d_same(Tensor(np.ones((2, 2, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)))
    assert out.data[:, :, 0].tolist() == [[4.0, 4.0], [4.0, 4.0]]


@pytest.mark.parametrize("s", [1, 3, 5])
def test_conv_matches_loop_reference(s):
    rng = np.random.default_rng(s)
    x = rng.normal(size=(5, 4, 3))
    k = rng.normal(size=(s, s, 3, 2))
    b = rng.normal(size=2)
    out = T.conv2d_same(Tensor(x), Tensor(k), Tensor(b)).data
    assert np.allclose(out, conv_oracle(x, k, b), atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d_same(Tensor(np.ones((3, 3, 2))), Tensor(np.ones((3, 3, 4, 1))), Tensor(np.zeros(1)))


# --- softmax and elementwise ---


def test_softmax_symmetric_pair():
    assert np.allclose(T.softmax_rows(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_shift_invariance():
    x = np.array([[0.3, -1.2, 2.0], [5.0, 5.0, 4.0]])
    a = T.softmax_rows(Tensor(x)).data
    b = T.softmax_rows(Tensor(x + 17.0)).data
    assert np.allclose(a, b, atol=1e-15)


def test_softmax_sharp_limit():
    out = T.softmax_rows(Tensor(1000.0 * np.array([1.0, 2.0, 3.0]))).data
    assert out.max() > 1 - 1e-6


@settings(max_examples=200)
@given(
    hnp.arrays(
        np.float64,
        hnp.array_shapes(min_dims=1, max_dims=3, min_side=2, max_side=6),
        elements=st.floats(-15, 15, allow_nan=False),
    )
)
def test_softmax_rows_are_distributions(x):
    # spreads up to 30 keep every entry representable strictly inside (0, 1)
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all(out > 0) and np.all(out < 1)


def test_sigmoid_tanh_mean_rows():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.tanh(Tensor(0.0)).item() == 0.0
    assert T.tanh(Tensor(-1.0)).item() == pytest.approx(math.tanh(-1.0), abs=1e-15)
    assert T.tanh(Tensor(-1.0)).item() == pytest.approx(-0.7616, abs=1e-4)
    assert T.mean_rows(Tensor([[1.0, 3.0], [5.0, 7.0]])).data.tolist() == [2.0, 6.0]


def test_sigmoid_stays_inside_open_interval():
    x = np.linspace(-30, 30, 61)
    out = T.sigmoid(Tensor(x)).data
    assert np.all((out > 0) & (out < 1))
    assert np.allclose(out, 1 / (1 + np.exp(-x)), atol=1e-15)


# --- tape and backward ---


def test_backward_linear_map():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    w = Tensor(np.ones((2, 2)))
    with GradTape() as tape:
        loss = T.sum(w * Tensor(x))
    (g,) = backward(tape, loss, [w])
    assert np.array_equal(g, x)


def test_backward_tanh_at_zero():
    w = Tensor(np.zeros((3, 2)))
    with GradTape() as tape:
        loss = T.sum(T.tanh(w))
    (g,) = backward(tape, loss, [w])
    assert np.array_equal(g, np.ones((3, 2)))


def test_unused_leaf_gets_zero_gradient():
    a, b = Tensor(np.ones(3)), Tensor(np.ones(4))
    with GradTape() as tape:
        loss = T.sum(a * 2.0)
    ga, gb = backward(tape, loss, [a, b])
    assert np.array_equal(ga, np.full(3, 2.0))
    assert np.array_equal(gb, np.zeros(4))


def test_backward_needs_scalar_loss():
    a = Tensor(np.ones(3))
    with GradTape() as tape:
        out = a * 2.0
    with pytest.raises(ShapeError):
        backward(tape, out, [a])


def test_reused_input_accumulates():
    w = Tensor(np.array([1.5, -0.5]))
    with GradTape() as tape:
        loss = T.sum(w * w + w)
    (g,) = backward(tape, loss, [w])
    assert np.allclose(g, 2 * w.data + 1)


def test_tape_records_each_output_once_in_order():
    a = Tensor(np.ones((2, 2)))
    with GradTape() as tape:
        loss = T.sum(T.tanh(T.matmul(a, a)))
    outs = [id(node.output) for node in tape.nodes]
    assert len(outs) == len(set(outs))
    assert tape.ops() == ["matmul", "tanh", "sum"]
    assert tape.nodes[-1].output is loss
    # every input is a leaf or was produced earlier on the tape
    seen = {id(a)}
    for node in tape.nodes:
        assert all(id(t) in seen for t in node.inputs)
        seen.add(id(node.output))


def test_tapes_are_thread_local():
    results = {}

    def worker(k):
        w = Tensor(np.full(2, float(k)))
        with GradTape() as tape:
            loss = T.sum(w * w)
        results[k] = (len(tape), backward(tape, loss, [w])[0])

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, (n, g) in results.items():
        assert n == 2
        assert np.array_equal(g, np.full(2, 2.0 * k))


def test_composite_matches_finite_differences():
    rng = np.random.default_rng(3)

    def fn(x, w, b):
        h = T.relu(T.conv2d_same(x, w, b))
        s = T.softmax_rows(T.reshape(T.avg_pool2d_same(h, 3), (4, -1)))
        return T.sum(T.log(s + 1.0)) + T.sum(T.sigmoid(T.mean_rows(T.reshape(h, (8, 8)))))

    res = check_gradients(fn, [rng.normal(size=(4, 4, 2)), rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)])
    assert res.passed, res


def test_primitive_gradient_suite():
    results = primitive_suite(seed=11)
    names = {r.name.split("(")[0] for r in results}
    assert {"matmul", "avg_pool2d_same", "max_pool2d_same", "conv2d_same", "softmax_rows", "sigmoid",
            "tanh", "mean_rows"} <= names
    counts = {n: sum(r.name.startswith(n + "(") for r in results) for n in names}
    assert min(counts.values()) >= 3
    failed = [(r.name, r.max_error) for r in results if not r.passed]
    assert not failed
