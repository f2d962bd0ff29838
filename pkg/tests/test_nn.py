import numpy as np
import pytest

from fedpath import nn
from fedpath.nn import AdamState, NonFiniteError, ParamVector, ShapeError
from oracles import central_difference, naive_conv_nhwc, naive_matmul, random_indices, rel_err

F32 = np.float32


def _check_grad(loss_fn, arr, analytic, rng, n=20, tol=1e-3, h=1e-3):
    worst = 0.0
    for idx in random_indices(arr.shape, n, rng):
        num = central_difference(loss_fn, arr, idx, h)
        worst = max(worst, rel_err(analytic[idx], num, floor=1e-4))
    assert worst < tol, worst


# -- dense ---------------------------------------------------------------------

def test_dense_identity_and_bias():
    out = nn.dense_forward(np.array([[1, 2]], F32), np.eye(2, dtype=F32), np.zeros(2, F32))
    np.testing.assert_array_equal(out, [[1, 2]])
    out = nn.dense_forward(np.zeros((1, 2), F32), np.ones((2, 2), F32), np.array([3, 4], F32))
    np.testing.assert_array_equal(out, [[3, 4]])


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x, W, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    out = nn.dense_forward(x.astype(F32), W.astype(F32), b.astype(F32))
    np.testing.assert_allclose(out, naive_matmul(x, W, b), rtol=1e-5, atol=1e-6)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.dense_forward(np.zeros((2, 3), F32), np.zeros((4, 2), F32), np.zeros(2, F32))


def test_dense_backward_scalar_chain_rule():
    gx, gW, gb = nn.dense_backward(np.array([[2.0]], F32), np.array([[3.0]], F32), np.array([[1.0]], F32))
    assert gW[0, 0] == 2 and gx[0, 0] == 3 and gb[0] == 1


def test_dense_backward_zero_grad():
    rng = np.random.default_rng(0)
    gx, gW, gb = nn.dense_backward(rng.normal(size=(3, 4)).astype(F32), rng.normal(size=(4, 2)).astype(F32),
                                   np.zeros((3, 2), F32))
    assert not gx.any() and not gW.any() and not gb.any()


def test_dense_backward_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 5)).astype(F32)
    W = rng.normal(size=(5, 3)).astype(F32)
    b = rng.normal(size=3).astype(F32)
    R = rng.normal(size=(4, 3))
    gx, gW, gb = nn.dense_backward(x, W, R.astype(F32))
    _check_grad(lambda a: float((nn.dense_forward(a, W.astype(float), b.astype(float)) * R).sum()), x, gx, rng)
    _check_grad(lambda a: float((nn.dense_forward(x.astype(float), a, b.astype(float)) * R).sum()), W, gW, rng)
    _check_grad(lambda a: float((nn.dense_forward(x.astype(float), W.astype(float), a) * R).sum()), b, gb, rng,
                n=3)


# -- conv ----------------------------------------------------------------------

def test_conv_identity_kernel_takes_stride_grid():
    x = np.arange(25, dtype=F32).reshape(1, 5, 5, 1)
    out = nn.conv2d_forward(x, np.ones((1, 1, 1, 1), F32), np.zeros(1, F32), stride=2)
    np.testing.assert_array_equal(out[0, :, :, 0], x[0, ::2, ::2, 0])


def test_conv_constant_input():
    x = np.full((2, 6, 7, 3), 1.5, F32)
    out = nn.conv2d_forward(x, np.ones((3, 2, 3, 4), F32), np.full(4, 0.5, F32))
    assert out.shape == (2, 4, 6, 4)
    np.testing.assert_allclose(out, 1.5 * 3 * 2 * 3 + 0.5)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x, k, b = rng.normal(size=(1, 4, 4, 1)), rng.normal(size=(2, 2, 1, 1)), rng.normal(size=1)
    out = nn.conv2d_forward(x.astype(F32), k.astype(F32), b.astype(F32))
    np.testing.assert_allclose(out, naive_conv_nhwc(x, k, b, 1), rtol=1e-5, atol=1e-6)
    # multi-channel strided case as well
    x, k, b = rng.normal(size=(2, 7, 6, 3)), rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    out = nn.conv2d_forward(x.astype(F32), k.astype(F32), b.astype(F32), stride=2)
    np.testing.assert_allclose(out, naive_conv_nhwc(x, k, b, 2), rtol=1e-4, atol=1e-5)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.zeros((1, 2, 2, 1), F32), np.zeros((3, 3, 1, 1), F32), np.zeros(1, F32))


def test_conv_backward_zero_grad_and_identity_scatter():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 5, 5, 1)).astype(F32)
    k = np.ones((1, 1, 1, 1), F32)
    g = np.zeros((1, 3, 3, 1), F32)
    gx, gk, gb = nn.conv2d_backward(x, k, g, stride=2)
    assert not gx.any() and not gk.any() and not gb.any()
    g = rng.normal(size=(1, 3, 3, 1)).astype(F32)
    gx, _, _ = nn.conv2d_backward(x, k, g, stride=2)
    expect = np.zeros_like(x)
    expect[0, ::2, ::2, 0] = g[0, :, :, 0]
    np.testing.assert_array_equal(gx, expect)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_finite_differences(stride):
    rng = np.random.default_rng(5 + stride)
    x = rng.normal(size=(2, 7, 8, 3)).astype(F32)
    k = rng.normal(size=(3, 3, 3, 4)).astype(F32)
    b = rng.normal(size=4).astype(F32)
    out = nn.conv2d_forward(x, k, b, stride)
    R = rng.normal(size=out.shape)
    gx, gk, gb = nn.conv2d_backward(x, k, R.astype(F32), stride)
    X, K, Bv = x.astype(float), k.astype(float), b.astype(float)
    _check_grad(lambda a: float((nn.conv2d_forward(a, K, Bv, stride) * R).sum()), x, gx, rng)
    _check_grad(lambda a: float((nn.conv2d_forward(X, a, Bv, stride) * R).sum()), k, gk, rng)
    _check_grad(lambda a: float((nn.conv2d_forward(X, K, a, stride) * R).sum()), b, gb, rng, n=4)


# -- pointwise / pooling ---------------------------------------------------------

def test_relu_values_and_tie():
    x = np.array([-1.0, 0.0, 2.0], F32)
    np.testing.assert_array_equal(nn.relu(x), [0, 0, 2])
    np.testing.assert_array_equal(nn.relu_backward(x, np.ones(3, F32)), [0, 0, 1])
    pos = np.array([0.5, 3.0], F32)
    np.testing.assert_array_equal(nn.relu(pos), pos)


def test_relu_backward_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 6)).astype(F32)
    x[np.abs(x) < 0.05] = 0.3  # stay away from the kink
    R = rng.normal(size=x.shape)
    g = nn.relu_backward(x, R.astype(F32))
    _check_grad(lambda a: float((np.maximum(a, 0) * R).sum()), x, g, rng)


def test_dropout_contracts():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 8)).astype(F32)
    y, mask = nn.dropout(x, 0.0, rng, train=True)
    np.testing.assert_array_equal(y, x)
    assert mask.all()
    y, _ = nn.dropout(x, 0.7, rng, train=False)
    np.testing.assert_array_equal(y, x)
    with pytest.raises(ValueError):
        nn.dropout(x, 1.0, rng)


def test_dropout_mask_rate():
    rng = np.random.default_rng(9)
    y, mask = nn.dropout(np.ones(100_000, F32), 0.5, rng, train=True)
    assert abs(mask.mean() - 0.5) < 0.01
    np.testing.assert_allclose(y[mask == 1], 2.0)


def test_global_avg_pool():
    np.testing.assert_allclose(nn.global_avg_pool(np.full((1, 3, 4, 2), 1.25, F32)), 1.25)
    x = np.array([1, 2, 3, 4], F32).reshape(1, 2, 2, 1)
    assert nn.global_avg_pool(x)[0, 0] == 2.5
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 5, 4))
    loop = np.array([[sum(x[b, i, j, c] for i in range(3) for j in range(5)) / 15 for c in range(4)]
                     for b in range(2)])
    np.testing.assert_allclose(nn.global_avg_pool(x.astype(F32)), loop, rtol=1e-6)


def test_global_avg_pool_backward_finite_differences():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 4, 5)).astype(F32)
    R = rng.normal(size=(2, 5))
    g = nn.global_avg_pool_backward(x.shape, R.astype(F32))
    _check_grad(lambda a: float((a.mean(axis=(1, 2)) * R).sum()), x, g, rng)


# -- softmax cross-entropy ----------------------------------------------------------

def test_softmax_xent_uniform_logits():
    loss, _ = nn.softmax_xent(np.zeros((1, 3), F32), np.array([[1, 0, 0]], F32))
    assert abs(loss - np.log(3)) < 1e-9


def test_softmax_xent_grad_zero_at_own_softmax():
    logits = np.array([[0.3, -1.2, 2.0]], np.float64)
    t = nn.softmax(logits)
    _, g = nn.softmax_xent(logits, t)
    np.testing.assert_allclose(g, 0, atol=1e-12)


def test_softmax_stable_for_large_logits():
    logits = np.array([[1e4, -1e4, 0.0], [5e3, 5e3, 5e3]], F32)
    p = nn.softmax(logits)
    assert np.all(np.isfinite(p))
    loss, g = nn.softmax_xent(logits, np.array([[1, 0, 0], [0, 1, 0]], F32))
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(12)
    p = nn.softmax(rng.normal(scale=5, size=(50, 3)))
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    assert np.all(p > 0)


def test_softmax_xent_rejects_bad_targets():
    with pytest.raises(ValueError):
        nn.softmax_xent(np.zeros((1, 3), F32), np.array([[0.5, 0.2, 0.2]], F32))
    with pytest.raises(ValueError):
        nn.softmax_xent(np.zeros((1, 3), F32), np.array([[1.5, -0.5, 0.0]], F32))


def test_softmax_xent_finite_differences():
    rng = np.random.default_rng(13)
    logits = rng.normal(size=(5, 3)).astype(F32)
    t = rng.dirichlet(np.ones(3), size=5)
    _, g = nn.softmax_xent(logits, t.astype(F32))
    _check_grad(lambda a: nn.softmax_xent(a, t)[0], logits, g, rng, n=15)


# -- parameter vectors -------------------------------------------------------------

def _pv(values):
    return ParamVector([("w", (len(values),))], np.asarray(values, F32))


def test_param_axpy_and_distance():
    x, y = _pv([1, 2, 3]), _pv([4, 6, 3])
    assert nn.param_l2_dist(x, y) == 5.0
    assert nn.param_l2_dist(x, x) == 0.0
    assert nn.param_axpy(0.0, x, y).bitwise_equal(y)
    with pytest.raises(ValueError):
        nn.param_axpy(1.0, x, _pv([1, 2]))


def test_param_vector_space_axioms():
    rng = np.random.default_rng(21)
    layout = [("a", (3, 4)), ("b", (5,))]
    x, y, z = (ParamVector(layout, rng.normal(size=17).astype(F32)) for _ in range(3))
    lhs = nn.param_axpy(1.0, nn.param_axpy(1.0, x, y), z).data
    rhs = nn.param_axpy(1.0, x, nn.param_axpy(1.0, y, z)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)
    assert nn.param_l2_dist(x, y) == nn.param_l2_dist(y, x)


def test_param_vector_layout_and_roundtrip():
    rng = np.random.default_rng(22)
    pv = ParamVector([("conv.w", (3, 3, 2, 4)), ("conv.b", (4,)), ("fc.w", (4, 3))])
    pv.data[:] = rng.normal(size=pv.total_len)
    assert pv.total_len == 72 + 4 + 12
    assert pv["conv.b"].shape == (4,)
    pv["conv.b"][0] = 7.0
    assert pv.data[72] == 7.0
    back = ParamVector.from_bytes(pv.to_bytes())
    assert back.bitwise_equal(pv) and back.layout == pv.layout
    assert pv.to_bytes().startswith(b"FPSW1")
    with pytest.raises(ValueError):
        ParamVector([("a", (1,)), ("a", (2,))])


def test_param_vector_detects_corruption():
    blob = bytearray(_pv([1, 2, 3]).to_bytes())
    blob[-6] ^= 0xFF
    with pytest.raises(ValueError, match="CRC"):
        ParamVector.from_bytes(bytes(blob))


# -- Adam --------------------------------------------------------------------------

def test_adam_zero_grad_no_decay_is_noop():
    p = _pv([1.0, -2.0])
    st = AdamState.for_params(p, weight_decay=0.0)
    nn.adam_step(p, _pv([0.0, 0.0]), st)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.step == 1


def test_adam_first_step_is_sign_step():
    p = _pv([0.5])
    st = AdamState.for_params(p, lr=0.01, weight_decay=0.0)
    nn.adam_step(p, _pv([-4.0]), st)
    assert abs(p.data[0] - (0.5 + 0.01 * 4.0 / (4.0 + 1e-8))) < 1e-7


def test_adam_converges_on_convex_scalar():
    p = _pv([0.0])
    st = AdamState.for_params(p, lr=0.1, weight_decay=0.0)
    for _ in range(100):
        nn.adam_step(p, _pv([2.0 * (p.data[0] - 3.0)]), st)
    assert abs(p.data[0] - 3.0) < 0.1


def test_adam_decoupled_weight_decay():
    p = _pv([2.0])
    st = AdamState.for_params(p, lr=0.1, weight_decay=0.5)
    nn.adam_step(p, _pv([0.0]), st)
    assert abs(p.data[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-7


def test_adam_deterministic_and_rejects_nonfinite():
    rng = np.random.default_rng(30)
    w, g = rng.normal(size=10).astype(F32), rng.normal(size=10).astype(F32)
    results = []
    for _ in range(2):
        p = _pv(w.copy())
        st = AdamState.for_params(p)
        for _ in range(3):
            nn.adam_step(p, _pv(g), st)
        results.append(p.data.copy())
    assert results[0].tobytes() == results[1].tobytes()
    with pytest.raises(NonFiniteError):
        nn.adam_step(_pv([1.0]), _pv([np.nan]), AdamState.for_params(_pv([1.0])))
