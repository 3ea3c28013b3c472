import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alcr import autodiff as ad
from alcr.autodiff import Tensor
from oracles import numeric_grad

RNG = np.random.default_rng(7)


def leaf(shape, name="x", scale=1.0):
    return Tensor(RNG.normal(0, scale, size=shape), requires_grad=True, name=name)


def check_grad(build, *leaves, tol=1e-6):
    """Compare ``backward`` against central differences for every leaf."""
    loss = build()
    grads = ad.backward(loss)
    for t in leaves:
        num = numeric_grad(lambda: build().item(), t.data)
        np.testing.assert_allclose(grads[t.name], num, rtol=tol, atol=tol)


def test_add_broadcast_grad():
    a, b = leaf((3, 4), "a"), leaf((4,), "b")
    check_grad(lambda: ad.sum(ad.mul(a + b, a + b)), a, b)


def test_sub_mul_grad():
    a, b = leaf((2, 3), "a"), leaf((2, 1), "b")
    check_grad(lambda: ad.sum(ad.mul(a - b, a)), a, b)


@pytest.mark.parametrize("op", [ad.tanh, ad.sigmoid, ad.exp])
def test_unary_grad(op):
    a = leaf((5,), "a")
    check_grad(lambda: ad.sum(op(a)), a)


def test_log_grad():
    a = Tensor(RNG.uniform(0.5, 2.0, size=(4,)), requires_grad=True, name="a")
    check_grad(lambda: ad.sum(ad.log(a)), a)


def test_sum_axis_and_mean():
    a = leaf((3, 4), "a")
    w = RNG.normal(size=(4,))
    check_grad(lambda: ad.sum(ad.mul(ad.sum(a, axis=0), w)), a)
    check_grad(lambda: ad.mean(ad.mul(a, a)), a)


def test_reshape_take_concat_stack():
    a, b = leaf((2, 6), "a"), leaf((2, 6), "b")
    w = RNG.normal(size=(2, 3, 4))

    def build():
        c = ad.concat([a, b], axis=-1)[:, 2:8]
        s = ad.stack([c, c * c], axis=1)
        return ad.sum(ad.mul(ad.reshape(s, (2, 3, 4)), w))

    check_grad(build, a, b)


def test_take_advanced_index_accumulates():
    a = leaf((3, 4), "a")
    rows = np.array([[0], [2]])
    cols = np.array([[1, 1, 3], [0, 2, 2]])
    check_grad(lambda: ad.sum(ad.mul(a[rows, cols], a[rows, cols])), a)


def test_matmul_batched_grad():
    a, b = leaf((2, 3, 4), "a"), leaf((4, 5), "b")
    check_grad(lambda: ad.sum(ad.tanh(ad.matmul(a, b))), a, b)


def test_weighted_sum_and_softmax_grad():
    e, v = leaf((2, 5), "e"), leaf((2, 5, 3), "v")
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    w = RNG.normal(size=(2, 3))
    check_grad(lambda: ad.sum(ad.mul(ad.weighted_sum(ad.softmax(e, mask), v), w)), e, v)


def test_softmax_mask_zeroes_excluded():
    e = leaf((1, 4), "e")
    y = ad.softmax(e, np.array([[1, 0, 1, 0]], dtype=bool)).data
    assert y[0, 1] == 0 and y[0, 3] == 0
    assert y.sum() == pytest.approx(1.0)


def test_log_softmax_nll_grad():
    a = leaf((2, 3, 5), "a")
    targets = np.array([[0, 4, 2], [1, 1, 3]])
    mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=float)
    check_grad(lambda: ad.nll_sum(ad.log_softmax(a), targets, mask), a)


def test_embedding_grad_and_range():
    table = leaf((6, 3), "table")
    ids = np.array([[0, 5, 5], [2, 0, 1]])
    check_grad(lambda: ad.sum(ad.mul(ad.embedding(table, ids), ad.embedding(table, ids))), table)
    with pytest.raises(IndexError):
        ad.embedding(table, np.array([6]))


def test_unfold1d_grad():
    a = leaf((2, 6), "a")
    w = RNG.normal(size=(2, 6, 5))
    out = ad.unfold1d(a, 5).data
    assert out.shape == (2, 6, 5)
    # centre column is the signal itself; edges are zero padded
    np.testing.assert_array_equal(out[:, :, 2], a.data)
    assert out[0, 0, 0] == 0.0
    check_grad(lambda: ad.sum(ad.mul(ad.unfold1d(a, 5), w)), a)


def test_gru_cell_grad():
    h_size = 3
    xg, h = leaf((2, 3 * h_size), "xg"), leaf((2, h_size), "h")
    w, b = leaf((h_size, 3 * h_size), "w", 0.5), leaf((3 * h_size,), "b")
    check_grad(lambda: ad.sum(ad.tanh(ad.gru_cell(xg, h, w, b))), xg, h, w, b)


def test_gru_scan_grad_and_mask_freezes_state():
    h_size = 3
    xg, h0 = leaf((2, 4, 3 * h_size), "xg"), leaf((2, h_size), "h0")
    w, b = leaf((h_size, 3 * h_size), "w", 0.5), leaf((3 * h_size,), "b")
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=float)
    c = RNG.normal(size=(2, 4, h_size))
    check_grad(lambda: ad.sum(ad.mul(ad.gru_scan(xg, h0, w, b, mask), c)), xg, h0, w, b)
    hs = ad.gru_scan(xg, h0, w, b, mask).data
    np.testing.assert_array_equal(hs[1, 2], hs[1, 1])
    np.testing.assert_array_equal(hs[1, 3], hs[1, 1])


def test_gru_scan_matches_cell_loop():
    h_size = 4
    xg, h0 = leaf((3, 5, 3 * h_size), "xg"), leaf((3, h_size), "h0")
    w, b = leaf((h_size, 3 * h_size), "w", 0.5), leaf((3 * h_size,), "b")
    hs = ad.gru_scan(xg, h0, w, b, np.ones((3, 5))).data
    h = h0
    for t in range(5):
        h = ad.gru_cell(Tensor(xg.data[:, t]), h, w, b)
        np.testing.assert_allclose(hs[:, t], h.data, atol=1e-12)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.backward(leaf((2,), "a") * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_backward_rejects_non_finite_gradient():
    a = Tensor(np.array([0.0, 1.0]), requires_grad=True, name="a")
    with pytest.raises(FloatingPointError):
        ad.backward(ad.sum(ad.log(a)))


def test_repeated_backward_does_not_accumulate():
    a = leaf((3,), "a")
    first = ad.backward(ad.sum(ad.mul(a, a)))["a"].copy()
    second = ad.backward(ad.sum(ad.mul(a, a)))["a"]
    np.testing.assert_array_equal(first, second)


def test_no_grad_records_nothing():
    a = leaf((3,), "a")
    with ad.no_grad():
        y = ad.tanh(a)
    assert not y.requires_grad and y._backward is None


def test_shared_subexpression_gradients_sum():
    a = leaf((3,), "a")
    y = ad.tanh(a)
    loss = ad.sum(y + y)
    grads = ad.backward(loss)
    np.testing.assert_allclose(grads["a"], 2 * (1 - np.tanh(a.data) ** 2))


# -- optimisation -----------------------------------------------------------

grad_dicts = st.dictionaries(
    st.sampled_from(["w", "b", "v"]),
    arrays(np.float64, st.integers(1, 5), elements=st.floats(-1e3, 1e3)),
    min_size=1,
)


@settings(max_examples=60, deadline=None)
@given(grad_dicts, st.floats(1e-3, 1e3))
def test_clip_is_idempotent_and_bounded(grads, max_norm):
    once = ad.clip_global_norm(grads, max_norm)
    twice = ad.clip_global_norm(once, max_norm)
    assert ad.global_norm(once) <= max_norm * (1 + 1e-9)
    for k in grads:
        np.testing.assert_allclose(once[k], twice[k], rtol=1e-9, atol=1e-12)


def test_clip_leaves_small_gradients_untouched():
    g = {"w": np.array([3.0, 4.0])}
    assert ad.clip_global_norm(g, 400.0)["w"] is not None
    np.testing.assert_array_equal(ad.clip_global_norm(g, 400.0)["w"], g["w"])
    np.testing.assert_allclose(ad.clip_global_norm(g, 1.0)["w"], [0.6, 0.8])
    with pytest.raises(ValueError):
        ad.clip_global_norm(g, 0.0)


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True, name="w")}
    ad.adam_step(p, {"w": np.array([0.5, -3.0])}, ad.AdamState(), lr=0.1)
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9], atol=1e-7)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(3)
    w0 = rng.normal(size=4)
    p = {"w": Tensor(w0.copy(), requires_grad=True, name="w")}
    state = ad.AdamState()
    m = v = np.zeros(4)
    w = w0.copy()
    for t in range(1, 6):
        g = rng.normal(size=4)
        ad.adam_step(p, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-12)


def test_adam_missing_grad_and_shape_mismatch():
    p = {"w": Tensor(np.ones(2), requires_grad=True, name="w")}
    ad.adam_step(p, {}, ad.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, np.ones(2))
    with pytest.raises(ValueError):
        ad.adam_step(p, {"w": np.ones(3)}, ad.AdamState(), lr=0.1)


def test_lr_schedule():
    assert ad.lr_at_epoch(0.003, 0) == 0.003
    assert ad.lr_at_epoch(0.003, 2) == pytest.approx(0.003 / 1.21, rel=1e-12)
    with pytest.raises(ValueError):
        ad.lr_at_epoch(0.003, 1, divisor=1.0)
