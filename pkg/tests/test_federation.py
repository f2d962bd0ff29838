import json
from dataclasses import replace

import numpy as np
import pytest

from fedpath import nn
from fedpath.augment import class_balanced_indices, mixup
from fedpath.federation import (AggregationError, CheckpointMismatch, ClientFailure, DataError, RoundCheckpoint,
                                client_seed, fedavg_aggregate, latest_checkpoint, load_checkpoint, local_train,
                                partition_dirichlet, proximal_grad, proximal_penalty, read_history,
                                run_centralized, run_federation, save_checkpoint, splitmix64, _shard)
from fedpath.imaging import JitterRanges
from fedpath.model import DualStreamModel, ModelConfig, build_model
from fedpath.nn import AdamState, ParamVector, adam_step
from fixtures import tiny_cfg, tiny_data, tiny_run, tiny_splits
from oracles import central_difference, f32_ulp, fedavg_reference, rel_err

LAYOUT = [("a", (3, 2)), ("b", (4,))]


def _pv(values):
    return ParamVector(LAYOUT, np.asarray(values, dtype=np.float32))


# -- seeding and partitioning -------------------------------------------------------------

def test_splitmix64_reference_values():
    # first outputs of the reference generator seeded with 0 (state advanced by the golden gamma)
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert client_seed(5, 0, 0) == 5 ^ splitmix64(0)
    assert len({client_seed(0, k, r) for k in range(8) for r in range(20)}) == 160


def _labels(n0, n1, n2):
    return np.array([0] * n0 + [1] * n1 + [2] * n2)


def test_partition_properties():
    labels = _labels(120, 60, 30)
    samples = np.arange(labels.size) * 2 + 5  # non-contiguous dataset indices
    shards = partition_dirichlet(samples, labels, 4, 0.5, seed=1)
    all_idx = np.concatenate([s.indices for s in shards])
    assert sorted(all_idx.tolist()) == sorted(samples.tolist())
    assert len(set(all_idx.tolist())) == all_idx.size
    assert all(s.n > 0 for s in shards)
    lab = dict(zip(samples.tolist(), labels.tolist()))
    for s in shards:
        assert s.class_counts == np.bincount([lab[i] for i in s.indices], minlength=3).tolist()
    again = partition_dirichlet(samples, labels, 4, 0.5, seed=1)
    assert all(np.array_equal(a.indices, b.indices) for a, b in zip(shards, again))
    other = partition_dirichlet(samples, labels, 4, 0.5, seed=2)
    assert any(not np.array_equal(a.indices, b.indices) for a, b in zip(shards, other))


def test_partition_large_alpha_is_nearly_even():
    labels = _labels(400, 400, 400)
    shards = partition_dirichlet(np.arange(1200), labels, 4, 1e6, seed=0)
    for s in shards:
        assert all(abs(c - 100) <= 3 for c in s.class_counts)


def test_partition_small_alpha_is_skewed():
    labels = _labels(300, 300, 300)
    dominant = []
    for seed in range(10):
        for s in partition_dirichlet(np.arange(900), labels, 4, 0.1, seed=seed):
            dominant.append(max(s.class_counts) / s.n)
    assert np.mean(dominant) > 0.7


def test_partition_single_client_and_impossible():
    labels = _labels(3, 3, 3)
    (only,) = partition_dirichlet(np.arange(9), labels, 1, 0.5, seed=0)
    assert only.indices.tolist() == list(range(9))
    with pytest.raises(DataError):
        partition_dirichlet(np.arange(2), np.array([0, 1]), 5, 0.5, seed=0)


# -- proximal term ---------------------------------------------------------------------------

def test_proximal_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    w, anchor = _pv(rng.normal(size=10)), _pv(rng.normal(size=10))
    mu = 0.37
    g = proximal_grad(w, anchor, mu)

    def penalty(vec):
        return 0.5 * mu * float(np.sum((vec - anchor.data.astype(np.float64)) ** 2))

    for i in range(10):
        num = central_difference(penalty, w.data, i)
        assert rel_err(g[i], num) < 1e-4
    assert proximal_penalty(w, anchor, mu) == pytest.approx(penalty(w.data.astype(np.float64)), rel=1e-12)
    assert not proximal_grad(w, w.copy(), mu).any()


def _plain_adam_training(shard, data, global_params, cfg, model_cfg, rng, jitter):
    """Client loop with no proximal machinery at all."""
    model = DualStreamModel(model_cfg, global_params.copy())
    state = AdamState.for_params(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    labels = data.labels[shard.indices]
    classes = sorted(set(labels.tolist()))
    for _ in range(cfg.local_epochs):
        order = class_balanced_indices(labels, shard.n, rng, classes=classes)
        for start in range(0, shard.n, cfg.batch_size):
            batch = data.batch(shard.indices[order[start:start + cfg.batch_size]], rng=rng, jitter=jitter)
            batch = mixup(batch, cfg.mixup_alpha, rng)
            logits, cache = model.forward(batch.x224, batch.x320, train=True, rng=rng)
            _, g = nn.softmax_xent(logits, batch.y)
            adam_step(model.params, model.backward(cache, g), state)
    return model.params


@pytest.fixture(scope="module")
def data():
    return tiny_data()


def test_mu_zero_is_bitwise_plain_adam(data):
    shard = _shard(0, np.arange(0, 24, 2), data.labels)
    cfg = tiny_cfg(mu=0.0)
    start = build_model(seed=1).params
    res = local_train(shard, data, start, cfg, ModelConfig(), np.random.default_rng(11), jitter=JitterRanges())
    ref = _plain_adam_training(shard, data, start, cfg, ModelConfig(), np.random.default_rng(11), JitterRanges())
    assert res.params.bitwise_equal(ref)
    assert not res.params.bitwise_equal(start)


def test_huge_mu_pins_weights_to_anchor(data):
    shard = _shard(0, np.arange(12), data.labels)
    start = build_model(seed=1).params
    free = local_train(shard, data, start, tiny_cfg(mu=0.0), ModelConfig(), np.random.default_rng(1))
    pinned = local_train(shard, data, start, tiny_cfg(mu=1e4), ModelConfig(), np.random.default_rng(1))
    assert nn.param_l2_dist(pinned.params, start) < 0.5 * nn.param_l2_dist(free.params, start)


def test_local_training_is_deterministic(data):
    shard = _shard(0, np.arange(12), data.labels)
    start = build_model(seed=2).params
    a = local_train(shard, data, start, tiny_cfg(), ModelConfig(), np.random.default_rng(5))
    b = local_train(shard, data, start, tiny_cfg(), ModelConfig(), np.random.default_rng(5))
    assert a.params.bitwise_equal(b.params) and a.step_losses == b.step_losses
    assert len(a.step_losses) == 3 and a.n_k == 12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_update_becomes_client_failure(data):
    shard = _shard(0, np.arange(12), data.labels)
    bad = build_model(seed=0).params
    bad.data[:] = np.inf
    with pytest.raises(ClientFailure) as info:
        local_train(shard, data, bad, tiny_cfg(), ModelConfig(), np.random.default_rng(0), round_idx=4)
    assert info.value.client_id == 0 and info.value.round_idx == 4


# -- aggregation ------------------------------------------------------------------------------

def test_fedavg_hand_case():
    out = fedavg_aggregate([(_pv(np.full(10, 1.0)), 1), (_pv(np.full(10, 3.0)), 3)])
    assert np.all(out.data == np.float32(2.5))


def test_fedavg_matches_exact_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K = int(rng.integers(1, 6))
        vecs = [rng.normal(scale=10 ** rng.uniform(-3, 3), size=10).astype(np.float32) for _ in range(K)]
        counts = rng.integers(1, 500, size=K).tolist()
        out = fedavg_aggregate([(_pv(v), n) for v, n in zip(vecs, counts)]).data.astype(np.float64)
        ref = fedavg_reference(vecs, counts)
        assert np.all(np.abs(out - ref) <= f32_ulp(ref))


def test_fedavg_permutation_invariant_and_bounded():
    rng = np.random.default_rng(1)
    for _ in range(50):
        vecs = [rng.normal(size=10).astype(np.float32) for _ in range(5)]
        counts = rng.integers(1, 100, size=5).tolist()
        pairs = [(_pv(v), n) for v, n in zip(vecs, counts)]
        a = fedavg_aggregate(pairs)
        b = fedavg_aggregate([pairs[i] for i in rng.permutation(5)])
        assert a.bitwise_equal(b)
        stack = np.stack(vecs)
        assert np.all(a.data >= stack.min(axis=0)) and np.all(a.data <= stack.max(axis=0))


def test_fedavg_identical_inputs_and_errors():
    v = _pv(np.random.default_rng(2).normal(size=10))
    assert fedavg_aggregate([(v, 3), (v.copy(), 9), (v.copy(), 1)]).bitwise_equal(v)
    with pytest.raises(AggregationError):
        fedavg_aggregate([])
    with pytest.raises(ValueError):
        fedavg_aggregate([(v, 0)])
    with pytest.raises(nn.ShapeError):
        fedavg_aggregate([(v, 1), (ParamVector([("a", (10,))]), 1)])


# -- checkpoints --------------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    params = build_model(seed=4).params
    ck = RoundCheckpoint(3, params, [5, 7], {"accuracy": 0.5}, "abc", [2 ** 63 + 5, 1], 1.25, 0.7, [1])
    path = save_checkpoint(tmp_path, ck)
    back = load_checkpoint(path)
    assert back.global_params.bitwise_equal(params)
    assert (back.round, back.per_client_n, back.val_metrics, back.config_hash) == (3, [5, 7], {"accuracy": 0.5}, "abc")
    assert back.rng_states == [2 ** 63 + 5, 1] and back.failed_clients == [1]
    assert latest_checkpoint(tmp_path) == path
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_corruption_detected(tmp_path):
    path = save_checkpoint(tmp_path, RoundCheckpoint(1, build_model().params, [1], None, "h", [0], 0.0))
    blob = bytearray(path.read_bytes())
    blob[-5] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_checkpoint(path)


# -- full runs ----------------------------------------------------------------------------------

def test_rounds_zero_evaluates_initial_weights(tmp_path, data):
    res = run_federation(tiny_run(tmp_path / "r0", data, rounds=0))
    assert res.report["rounds_completed"] == 0 and res.report["best_round"] == 0
    assert res.final_params.bitwise_equal(build_model(seed=3).params)
    assert [r["round"] for r in read_history(tmp_path / "r0")] == [0]


def test_resume_is_bitwise_identical(tmp_path, data):
    full = run_federation(tiny_run(tmp_path / "full", data, rounds=4))
    part = run_federation(tiny_run(tmp_path / "part", data, rounds=4), stop_after=2)
    assert part.interrupted and not (tmp_path / "part" / "report.json").exists()
    resumed = run_federation(tiny_run(tmp_path / "part", data, rounds=4))
    assert resumed.final_params.bitwise_equal(full.final_params)
    strip = lambda r: {k: v for k, v in r.items() if k not in ("history", "run_id")}
    assert strip(resumed.report) == strip(full.report)
    again = run_federation(tiny_run(tmp_path / "part", data, rounds=4))
    assert again.already_complete


def test_resume_refuses_other_config(tmp_path, data):
    run_federation(tiny_run(tmp_path / "x", data, rounds=1))
    with pytest.raises(CheckpointMismatch):
        run_federation(tiny_run(tmp_path / "x", data, rounds=1, config_hash="different"))


def test_history_tracks_best_round(tmp_path, data):
    run_federation(tiny_run(tmp_path / "h", data, rounds=3))
    rows = read_history(tmp_path / "h")
    assert [r["round"] for r in rows] == [0, 1, 2, 3]
    best_acc = -1
    best = None
    for r in rows:
        if r["val_accuracy"] > best_acc:
            best_acc, best = r["val_accuracy"], r["round"]
        assert r["best_round"] == best


def test_single_client_matches_centralized(tmp_path, data):
    losses = {}

    def recorder(tag):
        def fn(*args, **kw):
            res = local_train(*args, **kw)
            losses.setdefault(tag, []).extend(res.step_losses)
            return res
        return fn

    fed = tiny_run(tmp_path / "fed", data, n_clients=1, mu=0.0, rounds=2)
    fed.train_fn = recorder("fed")
    cen = tiny_run(tmp_path / "cen", data, mode="centralized", n_clients=4, mu=0.01, rounds=2)
    cen.train_fn = recorder("cen")
    a, b = run_federation(fed), run_centralized(cen)
    assert losses["fed"] == losses["cen"] and len(losses["fed"]) > 0
    assert a.final_params.bitwise_equal(b.final_params)
    assert set(a.report) == set(b.report)


def test_client_order_does_not_matter(tmp_path, data):
    base = tiny_run(tmp_path / "a", data, n_clients=3, rounds=1)
    ref = run_federation(base)
    flipped = tiny_run(tmp_path / "b", data, n_clients=3, rounds=1)
    orig_shards = flipped.shards
    flipped.shards = lambda: list(reversed(orig_shards()))
    assert run_federation(flipped).final_params.bitwise_equal(ref.final_params)


def test_failed_client_is_dropped_and_weights_renormalized(tmp_path, data):
    seen = {}

    def flaky(shard, data_, params, cfg, model_cfg, rng, round_idx, jitter):
        if shard.client_id == 1:
            raise ClientFailure(1, round_idx, "simulated crash")
        res = local_train(shard, data_, params, cfg, model_cfg, rng, round_idx, jitter)
        seen[shard.client_id] = res
        return res

    run = tiny_run(tmp_path / "f", data, n_clients=3, rounds=1)
    run.train_fn = flaky
    out = run_federation(run)
    expected = fedavg_aggregate([(seen[0].params, seen[0].n_k), (seen[2].params, seen[2].n_k)])
    assert out.final_params.bitwise_equal(expected)
    ck = load_checkpoint(latest_checkpoint(tmp_path / "f"))
    assert ck.failed_clients == [1] and ck.per_client_n[1] == 0


def test_all_clients_failing_aborts(tmp_path, data):
    run = tiny_run(tmp_path / "dead", data, n_clients=2, rounds=1)

    def crash(shard, *a):
        raise RuntimeError("boom")

    run.train_fn = crash
    with pytest.raises(AggregationError):
        run_federation(run)


def test_missing_grade_in_training_split(tmp_path, data):
    splits = tiny_splits(data)
    splits = replace(splits, train=splits.train[data.labels[splits.train] != 2])
    with pytest.raises(DataError, match="missing grade"):
        run_federation(tiny_run(tmp_path / "m", data, splits))


def test_report_schema(tmp_path, data):
    run_federation(tiny_run(tmp_path / "s", data, rounds=1))
    rep = json.loads((tmp_path / "s" / "report.json").read_text())
    for key in ("mode", "config_hash", "best_round", "best_val_accuracy", "eval_round", "clients", "history", "test"):
        assert key in rep
    assert set(rep["test"]) == {"accuracy", "per_grade", "macro_f1", "weighted_f1", "per_magnification_accuracy",
                                "confusion", "n_samples"}
