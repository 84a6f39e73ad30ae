import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from landmark_da import autodiff as ad
from landmark_da.autodiff import GraphError, NonFiniteError, ShapeError, Tensor


def reference_conv(x, k, b):
    """Direct six-nested-loop 3x3 convolution with zero padding 1."""
    n, c, h, w = x.shape
    f = k.shape[0]
    out = np.zeros((n, f, h, w))
    for i in range(n):
        for o in range(f):
            for y in range(h):
                for xx in range(w):
                    acc = b[o]
                    for ch in range(c):
                        for dy in range(3):
                            for dx in range(3):
                                yy, xc = y + dy - 1, xx + dx - 1
                                if 0 <= yy < h and 0 <= xc < w:
                                    acc += x[i, ch, yy, xc] * k[o, ch, dy, dx]
                    out[i, o, y, xx] = acc
    return out


def reference_maxpool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for i in range(n):
        for ch in range(c):
            for y in range(h // 2):
                for xx in range(w // 2):
                    out[i, ch, y, xx] = max(
                        x[i, ch, 2 * y + dy, 2 * xx + dx] for dy in range(2) for dx in range(2)
                    )
    return out


def conv(x, k, b):
    return ad.conv2d(Tensor(x), Tensor(k), Tensor(b)).data


# --- conv2d -----------------------------------------------------------------


def test_conv_zero_input_gives_zero():
    out = conv(np.zeros((1, 1, 3, 3)), np.random.default_rng(0).normal(size=(2, 1, 3, 3)), np.zeros(2))
    assert np.all(out == 0)


def test_conv_delta_kernel_is_identity():
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    x = np.ones((1, 1, 3, 3))
    np.testing.assert_array_equal(conv(x, k, np.zeros(1)), x)


def test_conv_ones_kernel_on_2x2():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    k = np.ones((1, 1, 3, 3))
    oracle = reference_conv(x, k, np.zeros(1))
    np.testing.assert_array_equal(oracle, [[[[10, 10], [10, 10]]]])
    np.testing.assert_array_equal(conv(x, k, np.zeros(1)), oracle)


@pytest.mark.parametrize("f", [1, 3, 5])
def test_conv_matches_direct_loops(rng, f):
    # f < 3 exercises the narrow path, f >= 3 the im2col path
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(f, 3, 3, 3))
    b = rng.normal(size=f)
    np.testing.assert_allclose(conv(x, k, b), reference_conv(x, k, b), rtol=0, atol=1e-12)


def test_conv_paths_agree_on_gradients(rng):
    x = rng.normal(size=(3, 6, 7, 5))
    k = rng.normal(size=(2, 6, 3, 3))
    b = rng.normal(size=2)
    xp = np.zeros((3, 9, 7, 6))
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    tx, tk, tb = (Tensor(a, requires_grad=True) for a in (x, k, b))
    out_n, vjp_n = ad._conv_narrow(tx, tk, tb, xp)
    out_w, vjp_w = ad._conv_im2col(tx, tk, tb, xp)
    np.testing.assert_allclose(out_n, out_w, atol=1e-12)
    g = rng.normal(size=out_n.shape)
    for a, b_ in zip(vjp_n(g), vjp_w(g)):
        np.testing.assert_allclose(a, b_, atol=1e-12)


def test_conv_chunking_does_not_change_result(rng, monkeypatch):
    x = rng.normal(size=(5, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    full = conv(x, k, b)
    monkeypatch.setattr(ad, "_IM2COL_BUDGET", 1)
    np.testing.assert_array_equal(conv(x, k, b), full)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_rejects_non_3x3():
    with pytest.raises(ShapeError):
        conv(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 5, 5)), np.zeros(1))


# --- maxpool / upsample -----------------------------------------------------


def test_maxpool_single_window():
    out = ad.maxpool2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data
    np.testing.assert_array_equal(out, [[[[4.0]]]])


def test_maxpool_ramp():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    oracle = reference_maxpool(x)
    np.testing.assert_array_equal(oracle[0, 0], [[5, 7], [13, 15]])
    np.testing.assert_array_equal(ad.maxpool2(Tensor(x)).data, oracle)


def test_maxpool_tie_routes_to_first_element():
    x = Tensor(np.full((1, 1, 2, 2), 0.7), requires_grad=True)
    out = ad.maxpool2(x)
    assert out.data[0, 0, 0, 0] == 0.7
    ad.backward(ad.tensor_sum(out))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_odd_dims():
    with pytest.raises(ShapeError):
        ad.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_maxpool_matches_bruteforce(rng):
    x = rng.normal(size=(2, 3, 6, 4))
    np.testing.assert_array_equal(ad.maxpool2(Tensor(x)).data, reference_maxpool(x))


def test_upsample_repeats_pixels():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = ad.upsample2(Tensor(x)).data
    np.testing.assert_array_equal(out[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


# --- dense / activations ----------------------------------------------------


def test_dense_identity():
    x = np.array([[1.0, -2.0, 3.0]])
    out = ad.dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(out, x)


def test_dense_zero_weights_gives_bias():
    out = ad.dense(Tensor(np.ones((4, 3))), Tensor(np.zeros((3, 2))), Tensor([5.0, -1.0])).data
    np.testing.assert_array_equal(out, np.tile([5.0, -1.0], (4, 1)))


def test_dense_affine_by_hand():
    out = ad.dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([3.0, 4.0])).data
    np.testing.assert_array_equal(out, [[4.0, 6.0]])


def test_dense_mismatch():
    with pytest.raises(ShapeError):
        ad.dense(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


def test_relu_values_and_zero_subgradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = ad.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    ad.backward(ad.tensor_sum(y))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_tanh_values():
    assert ad.tanh(Tensor([0.0])).data[0] == 0.0
    big = ad.tanh(Tensor([20.0])).data[0]
    assert 1 - 1e-9 <= big <= 1.0


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
def test_tanh_range(values):
    y = ad.tanh(Tensor(values)).data
    assert np.all(np.abs(y) <= 1.0)
    moderate = np.abs(values) < 18
    assert np.all(np.abs(y[moderate]) < 1.0)


# --- losses -----------------------------------------------------------------


def test_mse_identical_is_zero():
    p = np.arange(6.0).reshape(2, 3)
    assert ad.mse_loss(Tensor(p), p).item() == 0.0


def test_mse_single_term():
    pred = np.zeros((1, 4))
    pred[0, 2] = 2.0
    assert ad.mse_loss(Tensor(pred), np.zeros((1, 4))).item() == 4.0


def test_mse_matches_scalar_loop(rng):
    p, t = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    total = 0.0
    for i in range(2):
        per_image = 0.0
        for j in range(8):
            per_image += (p[i, j] - t[i, j]) ** 2
        total += per_image
    assert abs(ad.mse_loss(Tensor(p), t).item() - total / 2) <= 1e-12


def test_mse_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.mse_loss(Tensor(np.zeros((1, 3))), np.zeros((1, 4)))


quarters = st.integers(-400, 400).map(lambda v: v / 4)


@given(arrays(np.float64, (3, 4), elements=quarters), arrays(np.float64, (3, 4), elements=quarters))
def test_mse_nonnegative_and_zero_iff_equal(a, b):
    value = ad.mse_loss(Tensor(a), b).item()
    assert value >= 0
    assert (value == 0) == bool(np.all(a == b))


def test_mae_examples():
    assert ad.mae(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert ad.mae(Tensor([3.0]), [1.0]).item() == 2.0
    assert ad.mae(Tensor([1.0, -1.0, 0.0]), [0.0, 0.0, 0.0]).item() == pytest.approx(2 / 3, abs=1e-15)


def test_mae_errors():
    with pytest.raises(ShapeError):
        ad.mae(Tensor([1.0, 2.0]), [1.0])
    with pytest.raises(ShapeError):
        ad.mae(Tensor(np.zeros(0)), np.zeros(0))


def test_mae_gradient_sign_and_zero():
    a = Tensor([2.0, 0.0, -1.0], requires_grad=True)
    ad.backward(ad.mae(a, [1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(a.grad, np.array([1.0, 0.0, -1.0]) / 3)


@given(
    arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)),
)
def test_mae_nonnegative_and_symmetric(a, b):
    ab = ad.mae(Tensor(a), b).item()
    ba = ad.mae(Tensor(b), a).item()
    assert ab >= 0
    assert ab == ba


def test_mae_loss_is_batch_mean_of_row_mae(rng):
    p, t = rng.uniform(-1, 1, (4, 6)), rng.uniform(-1, 1, (4, 6))
    rows = [ad.mae(Tensor(p[i]), t[i]).item() for i in range(4)]
    assert ad.mae_loss(Tensor(p), t).item() == pytest.approx(np.mean(rows), abs=1e-15)


# --- backward mechanics -----------------------------------------------------


def test_backward_sum_gives_ones():
    p = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    ad.backward(ad.tensor_sum(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3, 4)))


def test_backward_mse_square():
    p = Tensor([3.0], requires_grad=True)
    ad.backward(ad.mse_loss(p, np.zeros(1)))
    np.testing.assert_array_equal(p.grad, [6.0])


def test_backward_rejects_non_scalar():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.relu(p))


def test_second_backward_fails():
    p = Tensor(np.ones(3), requires_grad=True)
    loss = ad.tensor_sum(ad.relu(p))
    ad.backward(loss)
    with pytest.raises(GraphError):
        ad.backward(loss)


def test_backward_untracked_loss_fails():
    with pytest.raises(GraphError):
        ad.backward(ad.tensor_sum(Tensor(np.ones(3))))


def test_multiple_consumers_accumulate():
    p = Tensor([2.0, -1.0], requires_grad=True)
    loss = ad.tensor_sum(ad.add(ad.mul(p, p), p))
    ad.backward(loss)
    np.testing.assert_array_equal(p.grad, 2 * p.data + 1)


def test_linearity_of_backward(rng):
    x = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    target = rng.normal(size=(3, 2))

    def loss_a():
        return ad.mse_loss(ad.dense(Tensor(x), w, b), target)

    def loss_b():
        return ad.mae_loss(ad.tanh(ad.dense(Tensor(x), w, b)), target * 0.1)

    ad.backward(loss_a())
    ga = w.grad.copy()
    w.grad = None
    ad.backward(loss_b())
    gb = w.grad.copy()
    w.grad = None
    ad.backward(ad.add(loss_a(), loss_b()))
    np.testing.assert_allclose(w.grad, ga + gb, rtol=0, atol=1e-13)


def test_graph_visits_nodes_in_reverse_order(monkeypatch):
    visited = []
    original = ad._Node.__init__

    def spy(self, op, parents, vjp):
        original(self, op, parents, lambda g, _f=vjp, _op=op: (visited.append(_op), _f(g))[1])

    monkeypatch.setattr(ad._Node, "__init__", spy)
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    h = ad.maxpool2(ad.relu(x))
    loss = ad.mse_loss(ad.upsample2(h), np.zeros((1, 1, 4, 4)))
    ad.backward(loss)
    assert visited == ["mse_loss", "upsample2", "maxpool2", "relu"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    big = Tensor([1e200])
    with pytest.raises(NonFiniteError):
        ad.mul(big, big)


def test_determinism(rng):
    x = rng.normal(size=(4, 2, 8, 8))
    k = rng.normal(size=(3, 2, 3, 3))

    def run():
        kt = Tensor(k, requires_grad=True)
        out = ad.relu(ad.conv2d(Tensor(x), kt, Tensor(np.zeros(3))))
        loss = ad.mse_loss(ad.maxpool2(out), np.zeros((4, 3, 4, 4)))
        ad.backward(loss)
        return loss.item(), kt.grad

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert g1.tobytes() == g2.tobytes()


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.prod(t.shape) == t.values.size
    assert t.data.dtype == np.float64
