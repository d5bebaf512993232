import math

import numpy as np
import pytest

from fedfair.data import ClientDataset, FederatedDataset
from fedfair.losses import PaflSchedule
from fedfair.model import Batch, ModelSpec, SgdConfig, cross_entropy, forward, grad, init_params
from fedfair.objectives import ObjectiveSpec
from fedfair.runtime import (
    CHECKPOINT_MAGIC,
    FedConfig,
    load_checkpoint,
    local_train,
    majority_baseline_pct,
    run_training,
    sample_clients,
    save_checkpoint,
)


def test_sampling_is_uniform_within_three_sigma():
    m, k, rounds = 20, 5, 10_000
    counts = np.zeros(m)
    for r in range(rounds):
        ids = sample_clients(m, k, seed=1, round=r)
        assert ids == sorted(set(ids)) and len(ids) == k
        counts[ids] += 1
    p = k / m
    sigma = math.sqrt(rounds * p * (1 - p))
    assert np.all(np.abs(counts - rounds * p) < 3 * sigma)


def test_sampling_deterministic_and_validated():
    assert sample_clients(50, 10, 3, 7) == sample_clients(50, 10, 3, 7)
    assert sample_clients(50, 10, 3, 7) != sample_clients(50, 10, 3, 8)
    assert sample_clients(4, 4, 0, 0) == [0, 1, 2, 3]
    for k in (0, 5):
        with pytest.raises(ValueError):
            sample_clients(4, k, 0, 0)


def test_one_round_full_batch_matches_hand_aggregation(small_dataset, small_spec):
    # one full-batch step per client makes the update g-only, so the oracle needs no RNG
    m = small_dataset.m
    lr = 0.3
    cfg = FedConfig(rounds=1, clients_per_round=m, local=SgdConfig(lr=lr, batch_size=10_000, epochs=1), seed=2)
    theta0 = init_params(small_spec, 2)
    params, history = run_training(small_dataset, small_spec, cfg)
    n = np.array([c.n_k for c in small_dataset.clients], dtype=float)
    expected = theta0 - lr * sum(w * grad(theta0, small_spec, c.train)
                                 for w, c in zip(n / n.sum(), small_dataset.clients))
    np.testing.assert_allclose(params, expected, rtol=1e-12, atol=1e-14)
    rec = history[0]
    assert rec.sampled_ids == list(range(m))
    np.testing.assert_allclose(rec.weights, n / n.sum(), rtol=1e-15)
    pre = [cross_entropy(forward(theta0, small_spec, c.train.features), c.train.labels) for c in small_dataset.clients]
    np.testing.assert_allclose(rec.pre_losses, pre, rtol=1e-15)
    assert rec.objective_value == pytest.approx(float(np.dot(n / n.sum(), pre)), rel=1e-12)


def test_qffl_round_weights_use_pre_training_losses(small_dataset, small_spec):
    cfg = FedConfig(rounds=1, clients_per_round=4, objective=ObjectiveSpec("qffl", q=1.0), seed=5)
    rec = run_training(small_dataset, small_spec, cfg)[1][0]
    n = np.array([small_dataset.clients[i].n_k for i in rec.sampled_ids], dtype=float)
    raw = n * np.array(rec.pre_losses)
    np.testing.assert_allclose(rec.weights, raw / raw.sum(), rtol=1e-12)


def test_post_probe_reports_post_training_loss(small_dataset, small_spec):
    params = init_params(small_spec, 0)
    client = small_dataset.clients[0]
    pre = local_train(client, params, small_spec, FedConfig(local=SgdConfig(lr=0.5, epochs=5)), 0)
    post = local_train(client, params, small_spec, FedConfig(local=SgdConfig(lr=0.5, epochs=5), loss_probe="post"), 0)
    assert post.delta.tobytes() == pre.delta.tobytes()
    assert post.pre_loss < pre.pre_loss


def test_zero_rounds_returns_initial_model(tmp_path, small_dataset, small_spec):
    cfg = FedConfig(rounds=0, clients_per_round=2, seed=4)
    ckpt = tmp_path / "c.bin"
    params, history = run_training(small_dataset, small_spec, cfg, checkpoint_path=ckpt)
    assert history == []
    assert params.tobytes() == init_params(small_spec, 4).tobytes()
    loaded, header = load_checkpoint(ckpt)
    assert loaded.tobytes() == params.tobytes() and header["round"] == 0


def test_eval_cadence(small_dataset, small_spec):
    cfg = FedConfig(rounds=7, clients_per_round=2, eval_every=3)
    history = run_training(small_dataset, small_spec, cfg)[1]
    evaluated = [r.round for r in history if r.centralised_acc is not None]
    assert evaluated == [2, 5, 6]
    assert all(0.0 <= r.centralised_acc <= 100.0 for r in history if r.centralised_acc is not None)


def test_workers_do_not_change_results(small_dataset, small_spec):
    cfg = FedConfig(rounds=4, clients_per_round=4, schedule=PaflSchedule.halfway(4, "ewc"), seed=8,
                    objective=ObjectiveSpec("term", t_tilt=2.0))
    a, ha = run_training(small_dataset, small_spec, cfg, workers=1)
    b, hb = run_training(small_dataset, small_spec, cfg, workers=3)
    assert a.tobytes() == b.tobytes()
    assert [r.weights for r in ha] == [r.weights for r in hb]


def test_pafl_schedule_only_changes_rounds_after_switch(small_dataset, small_spec):
    sched = PaflSchedule.halfway(8, "kd")
    plain = FedConfig(rounds=4, clients_per_round=3, seed=1)
    pafl4 = FedConfig(rounds=4, clients_per_round=3, seed=1, schedule=sched)
    assert run_training(small_dataset, small_spec, plain)[0].tobytes() == \
        run_training(small_dataset, small_spec, pafl4)[0].tobytes()
    plain8 = FedConfig(rounds=8, clients_per_round=3, seed=1)
    pafl8 = FedConfig(rounds=8, clients_per_round=3, seed=1, schedule=sched)
    assert run_training(small_dataset, small_spec, plain8)[0].tobytes() != \
        run_training(small_dataset, small_spec, pafl8)[0].tobytes()


def test_resume_from_checkpoint_is_bit_identical(tmp_path, small_dataset, small_spec):
    full_cfg = FedConfig(rounds=6, clients_per_round=3, seed=6, schedule=PaflSchedule.halfway(6, "ewc"))
    full = run_training(small_dataset, small_spec, full_cfg)[0]
    ckpt = tmp_path / "half.bin"
    half_cfg = FedConfig(rounds=3, clients_per_round=3, seed=6, schedule=PaflSchedule.halfway(6, "ewc"))
    run_training(small_dataset, small_spec, half_cfg, checkpoint_path=ckpt)
    params, header = load_checkpoint(ckpt)
    assert header["round"] == 3 and header["seed"] == 6
    resumed = run_training(small_dataset, small_spec, full_cfg, init=params, start_round=header["round"])[0]
    assert resumed.tobytes() == full.tobytes()


def test_checkpoint_round_trip_and_format(tmp_path):
    spec = ModelSpec((3, 4, 2))
    params = np.random.default_rng(0).normal(size=spec.num_params)
    path = tmp_path / "sub" / "ck.bin"
    save_checkpoint(path, params, 12, 3, spec)
    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)
    assert raw.endswith(params.astype("<f8").tobytes())
    loaded, header = load_checkpoint(path)
    assert loaded.tobytes() == params.tobytes()
    assert header["layer_sizes"] == [3, 4, 2] and header["round"] == 12 and header["n_params"] == spec.num_params
    assert [p.name for p in path.parent.iterdir()] == ["ck.bin"]


def test_checkpoint_rejects_corruption(tmp_path):
    spec = ModelSpec((2, 2))
    path = tmp_path / "ck.bin"
    save_checkpoint(path, np.zeros(spec.num_params), 1, 0, spec)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        load_checkpoint(path)
    path.write_bytes(b"NOTSIM\n{}\n")
    with pytest.raises(ValueError, match="not a FEDSIM1"):
        load_checkpoint(path)


def test_diverging_clients_are_dropped(small_dataset, small_spec, caplog):
    clients = list(small_dataset.clients)
    bad = clients[1]
    features = bad.train.features.copy()
    features[0, 0] = np.nan
    clients[1] = ClientDataset(bad.client_id, Batch(features, bad.train.labels), bad.local_test)
    ds = FederatedDataset(tuple(clients), small_dataset.fed_test, small_dataset.class_count)
    cfg = FedConfig(rounds=3, clients_per_round=ds.m)
    params, history = run_training(ds, small_spec, cfg)
    assert np.all(np.isfinite(params))
    for rec in history:
        assert list(rec.errors) == [1]
        assert 1 not in rec.sampled_ids and len(rec.sampled_ids) == ds.m - 1
        assert sum(rec.weights) == pytest.approx(1.0)
    assert "client 1 dropped" in caplog.text


def test_config_validation(small_dataset, small_spec):
    with pytest.raises(ValueError):
        run_training(small_dataset, small_spec, FedConfig(clients_per_round=small_dataset.m + 1))
    for kwargs in ({"rounds": -1}, {"clients_per_round": 0}, {"eval_every": 0}, {"loss_probe": "mid"},
                   {"fed_test_fraction": 0.0}):
        with pytest.raises(ValueError):
            FedConfig(**kwargs)


def test_fed_test_fraction_subsamples_deterministically(small_dataset, small_spec):
    cfg = FedConfig(rounds=1, clients_per_round=2, fed_test_fraction=0.5)
    a = run_training(small_dataset, small_spec, cfg)[1][0].centralised_acc
    b = run_training(small_dataset, small_spec, cfg)[1][0].centralised_acc
    assert a == b


def test_majority_baseline():
    assert majority_baseline_pct([0, 1, 1, 2]) == 50.0
