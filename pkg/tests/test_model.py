import numpy as np
import pytest

from fedpath import nn
from fedpath.model import COARSE_SIZE, FINE_SIZE, DualStreamModel, ModelConfig, analytic_param_count, build_model
from fedpath.nn import AdamState, ParamVector
from oracles import rel_err

F32 = np.float32


def _inputs(rng, B=2, dtype=F32):
    return (rng.normal(size=(B, FINE_SIZE, FINE_SIZE, 3)).astype(dtype),
            rng.normal(size=(B, COARSE_SIZE, COARSE_SIZE, 3)).astype(dtype))


def test_build_is_deterministic_per_seed():
    a, b, c = build_model(seed=5), build_model(seed=5), build_model(seed=6)
    assert a.params.bitwise_equal(b.params)
    assert not a.params.bitwise_equal(c.params)


def test_param_count_matches_hand_count():
    # per stream: 3x3 convs 3->8, 8->16, 16->32 with biases; head 64->32->3
    stream = (27 * 8 + 8) + (72 * 16 + 16) + (144 * 32 + 32)
    head = (64 * 32 + 32) + (32 * 3 + 3)
    assert 2 * stream + head == 14243
    model = build_model()
    assert model.params.total_len == 14243 == analytic_param_count(ModelConfig())
    assert model.head_input_dim == 64


def test_canonical_segment_order():
    names = build_model().params.names()
    assert names[0].startswith("coarse.") and names[-1].startswith("head.")
    first_fine = next(i for i, n in enumerate(names) if n.startswith("fine."))
    first_head = next(i for i, n in enumerate(names) if n.startswith("head."))
    assert all(n.startswith("coarse.") for n in names[:first_fine])
    assert all(n.startswith("fine.") for n in names[first_fine:first_head])


def test_init_biases_zero_weights_bounded():
    model = build_model(seed=1)
    for name, arr in model.params.items():
        if name.endswith(".b"):
            assert not arr.any()
        else:
            bound = np.sqrt(6.0 / np.prod(arr.shape[:-1]))
            assert np.abs(arr).max() <= bound


def test_unknown_backbone():
    with pytest.raises(ValueError, match="backbone"):
        build_model(ModelConfig(backbone="resnet-huge"))


def test_zero_inputs_zero_weights_give_zero_logits():
    model = DualStreamModel(ModelConfig())
    x224, x320 = np.zeros((2, FINE_SIZE, FINE_SIZE, 3), F32), np.zeros((2, COARSE_SIZE, COARSE_SIZE, 3), F32)
    logits, _ = model.forward(x224, x320)
    assert logits.shape == (2, 3) and not logits.any()


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(0)
    model = build_model(seed=0)
    x224, x320 = _inputs(rng, B=3)
    perm = np.array([2, 0, 1])
    a, _ = model.forward(x224, x320)
    b, _ = model.forward(x224[perm], x320[perm])
    np.testing.assert_allclose(b, a[perm], rtol=1e-5, atol=1e-6)


def _head_logits(model, f):
    p = model.params
    h = np.maximum(f @ p["head.fc0.w"] + p["head.fc0.b"], 0)
    return h @ p["head.fc1.w"] + p["head.fc1.b"]


def test_fine_stream_ablation():
    rng = np.random.default_rng(1)
    model = build_model(seed=2)
    x224, x320 = _inputs(rng, B=2)
    zero224 = np.zeros_like(x224)
    # zero biases: a zero fine input yields f_f == 0, same as forcing f_f to 0 in the head
    f_c, _, _ = model._encode("coarse", x320)
    forced = _head_logits(model, np.concatenate([f_c, np.zeros_like(f_c)], axis=1))
    logits, _ = model.forward(zero224, x320)
    np.testing.assert_allclose(logits, forced, rtol=1e-5, atol=1e-6)
    # with a positive last-layer bias the fine encoder emits a nonzero vector and logits move
    model.params["fine.conv2.b"][...] = 0.5
    moved, _ = model.forward(zero224, x320)
    assert np.abs(moved - forced).max() > 1e-4


def test_eval_forward_ignores_rng_and_train_dropout_uses_it():
    rng = np.random.default_rng(3)
    model = build_model(seed=3)
    x224, x320 = _inputs(rng)
    a, _ = model.forward(x224, x320, train=False, rng=np.random.default_rng(1))
    b, _ = model.forward(x224, x320, train=False, rng=np.random.default_rng(2))
    assert a.tobytes() == b.tobytes()
    c, _ = model.forward(x224, x320, train=True, rng=np.random.default_rng(1))
    d, _ = model.forward(x224, x320, train=True, rng=np.random.default_rng(2))
    assert c.tobytes() != d.tobytes()


def test_shape_errors_and_stale_cache():
    rng = np.random.default_rng(4)
    model = build_model(seed=0)
    x224, x320 = _inputs(rng, B=1)
    with pytest.raises(nn.ShapeError):
        model.forward(x320, x224)
    _, cache = model.forward(x224, x320)
    model.params.data[0] += 1.0
    with pytest.raises(RuntimeError, match="stale"):
        model.backward(cache, np.ones((1, 3), F32))


def test_backward_zero_grad_logits():
    rng = np.random.default_rng(5)
    model = build_model(seed=0)
    x224, x320 = _inputs(rng, B=1)
    _, cache = model.forward(x224, x320)
    assert not model.backward(cache, np.zeros((1, 3), F32)).data.any()


def test_concat_adjoint_split():
    """Gradients reach a stream only through its own half of the fused vector."""
    rng = np.random.default_rng(6)
    model = build_model(seed=1)
    x224, x320 = _inputs(rng, B=2)
    model.params["head.fc0.w"][32:, :] = 0.0  # fine half of f disconnected
    _, cache = model.forward(x224, x320)
    g = model.backward(cache, rng.normal(size=(2, 3)).astype(F32))
    assert not any(g[n].any() for n in g.names() if n.startswith("fine."))
    assert any(g[n].any() for n in g.names() if n.startswith("coarse."))


def full_model_fd_check(seed=7, n_params=10, h=1e-3):
    """Worst relative error of analytic vs central-difference gradients on random parameters."""
    rng = np.random.default_rng(seed)
    model = build_model(seed=seed)
    x224, x320 = _inputs(rng, B=2, dtype=np.float64)
    targets = rng.dirichlet(np.ones(3), size=2)

    def loss():
        logits, _ = model.forward(x224, x320, train=False)
        return nn.softmax_xent(logits.astype(np.float64), targets)[0]

    logits, cache = model.forward(x224.astype(F32), x320.astype(F32), train=False)
    _, g_logits = nn.softmax_xent(logits, targets.astype(F32))
    grads = model.backward(cache, g_logits)
    # sample coordinates whose gradient is not vanishingly small, so the relative test is meaningful
    candidates = np.flatnonzero(np.abs(grads.data) > 1e-4)
    picks = rng.choice(candidates, size=n_params, replace=False)
    worst = 0.0
    for i in picks:
        orig = model.params.data[i]
        model.params.data[i] = orig + F32(h)
        up, step_up = loss(), model.params.data[i]
        model.params.data[i] = orig - F32(h)
        down, step_down = loss(), model.params.data[i]
        model.params.data[i] = orig
        num = (up - down) / (float(step_up) - float(step_down))
        worst = max(worst, rel_err(grads.data[i], num))
    return worst


def test_full_model_finite_differences():
    assert full_model_fd_check() < 1e-2


def test_serialization_roundtrip_gives_identical_logits():
    rng = np.random.default_rng(8)
    model = build_model(seed=4)
    x224, x320 = _inputs(rng)
    a, _ = model.forward(x224, x320)
    clone = DualStreamModel(ModelConfig(), ParamVector.from_bytes(model.params.to_bytes()))
    b, _ = clone.forward(x224, x320)
    assert a.tobytes() == b.tobytes()


def test_loss_decreases_under_adam():
    rng = np.random.default_rng(9)
    model = build_model(seed=9)
    x224, x320 = _inputs(rng, B=16)
    # labels are visible in the input as a per-class colour offset, so there is something to learn
    cls = np.arange(16) % 3
    shift = np.eye(3, dtype=F32)[cls][:, None, None, :]
    x224 += shift
    x320 += shift
    y = np.eye(3, dtype=F32)[cls]
    state = AdamState.for_params(model.params)
    losses = []
    for _ in range(50):
        logits, cache = model.forward(x224, x320, train=False)
        loss, g = nn.softmax_xent(logits, y)
        losses.append(loss)
        nn.adam_step(model.params, model.backward(cache, g), state)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert min(losses[40:]) < 0.8 * losses[0]
