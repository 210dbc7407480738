"""Curriculum schedule, Adam, epoch mechanics and fit reproducibility."""

import numpy as np
import pytest

from disenpoi.errors import DataError
from disenpoi.graphs import build_geo_graph
from disenpoi.ingest import Sample
from disenpoi.model import ModelDims, ModelParams
from disenpoi.trainer import (AdamState, FitResult, TrainConfig, adam_step,
                              beta_for_epoch, curriculum_beta, fit,
                              train_epoch)

from conftest import make_toy_dataset


def tiny_config(**overrides):
    base = dict(epochs=2, lr=0.01, batch_size=16, alpha=0.2, gamma=0.004,
                D=6, L=1, T=1, delta_d=1.0, max_seq_len=20, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# curriculum schedule
# ---------------------------------------------------------------------------

def test_curriculum_beta_values():
    assert curriculum_beta(0.2, 0.004, 0) == 0.2
    assert curriculum_beta(0.2, 0.004, 50) == 0.2   # crossover epoch
    assert curriculum_beta(0.2, 0.004, 200) == pytest.approx(0.8)


def test_curriculum_beta_exact_and_nondecreasing_over_range():
    prev = -1.0
    for k in range(0, 501):
        b = curriculum_beta(0.2, 0.004, k)
        assert b == max(0.2, 0.004 * k)
        assert b >= prev
        prev = b


def test_curriculum_beta_rejects_negative_epoch():
    with pytest.raises(DataError):
        curriculum_beta(0.2, 0.004, -1)


def test_beta_modes():
    cfg_fixed = tiny_config(curriculum_mode="fixed", alpha=0.3)
    assert all(beta_for_epoch(cfg_fixed, k) == 0.3 for k in range(10))

    cfg_rand = tiny_config(curriculum_mode="random", alpha=0.3, seed=5)
    draws = [beta_for_epoch(cfg_rand, k) for k in range(50)]
    assert all(0.0 <= b < 0.6 for b in draws)
    assert len(set(draws)) > 10
    again = [beta_for_epoch(cfg_rand, k) for k in range(50)]
    assert draws == again  # seeded

    with pytest.raises(DataError):
        tiny_config(curriculum_mode="sometimes")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def build_params(num_pois=5, D=4):
    return ModelParams.build(ModelDims(num_pois=num_pois, D=D, L=1, T=1),
                             seed=0)


def test_adam_first_step_is_sign_scaled():
    params = build_params()
    state = AdamState()
    lr, eps = 0.01, 1e-8
    g = np.full_like(params["mlp.b2"].data, 0.37)
    before = params["mlp.b2"].data.copy()
    params["mlp.b2"].grad = g.copy()
    adam_step(params, state, lr, eps=eps)
    expected = before - lr * g / (np.abs(g) + eps)
    np.testing.assert_allclose(params["mlp.b2"].data, expected, atol=1e-12)


def test_adam_zero_gradient_is_fixed_point():
    params = build_params()
    state = AdamState()
    snapshot = {name: t.data.copy() for name, t in params.items()}
    adam_step(params, state, lr=0.01)  # all grads None -> zeros
    for name, t in params.items():
        assert t.data.tobytes() == snapshot[name].tobytes()


def test_adam_zero_lr_leaves_parameters_bit_identical():
    params = build_params()
    state = AdamState()
    snapshot = {name: t.data.copy() for name, t in params.items()}
    for t in params.tensors():
        t.grad = np.ones_like(t.data)
    adam_step(params, state, lr=0.0)
    for name, t in params.items():
        assert t.data.tobytes() == snapshot[name].tobytes()


def test_adam_identical_state_gives_identical_updates():
    params = build_params()
    state = AdamState()
    g = np.full_like(params["proj_geo.W"].data, -0.2)
    before_geo = params["proj_geo.W"].data.copy()
    before_seq = params["proj_seq.W"].data.copy()
    params["proj_geo.W"].grad = g.copy()
    params["proj_seq.W"].grad = g.copy()
    adam_step(params, state, lr=0.05)
    delta_geo = params["proj_geo.W"].data - before_geo
    delta_seq = params["proj_seq.W"].data - before_seq
    # the computed update is identical; reconstructing it by subtraction
    # against different base values only reintroduces rounding at 1 ulp
    np.testing.assert_allclose(delta_geo, delta_seq, rtol=0, atol=1e-15)
    expected = -0.05 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(delta_geo, expected, atol=1e-12)


def test_adam_zeroes_gradients_after_step():
    params = build_params()
    for t in params.tensors():
        t.grad = np.ones_like(t.data)
    adam_step(params, AdamState(), lr=0.01)
    assert all(t.grad is None for t in params.tensors())


# ---------------------------------------------------------------------------
# epoch mechanics
# ---------------------------------------------------------------------------

def test_train_epoch_deterministic():
    split, geo = make_toy_dataset(seed=11, num_users=10)
    cfg = tiny_config()

    def run():
        dims = cfg.dims(split.num_pois)
        params = ModelParams.build(dims, cfg.seed)
        state = AdamState()
        stats = [train_epoch(params, split.train, geo, cfg, k, state)
                 for k in range(2)]
        return stats, params.copy_values()

    stats_a, values_a = run()
    stats_b, values_b = run()
    assert stats_a == stats_b
    for name in values_a:
        assert values_a[name].tobytes() == values_b[name].tobytes()


def test_single_sample_memorization():
    split, geo = make_toy_dataset(seed=12, num_users=6)
    sample = split.train[0]
    cfg = tiny_config(epochs=0, batch_size=1, lr=0.01, D=8, L=1, T=1)
    params = ModelParams.build(cfg.dims(split.num_pois), cfg.seed)
    state = AdamState()
    stats = None
    for k in range(200):
        stats = train_epoch(params, [sample], geo, cfg, k, state)
    assert stats["mean_lrec"] < 0.05


def test_beta_zero_loss_ignores_projection_heads():
    split, geo = make_toy_dataset(seed=13, num_users=8)
    cfg = tiny_config(alpha=0.0, gamma=0.0, epochs=1)

    def lrec_with_proj_seed(seed):
        params = ModelParams.build(cfg.dims(split.num_pois), cfg.seed)
        rng = np.random.default_rng(seed)
        params["proj_geo.W"].data = rng.uniform(-1, 1,
                                                params["proj_geo.W"].shape)
        params["proj_seq.W"].data = rng.uniform(-1, 1,
                                                params["proj_seq.W"].shape)
        state = AdamState()
        return [train_epoch(params, split.train, geo, cfg, k, state)["mean_lrec"]
                for k in range(2)]

    # with beta = 0 the projection heads cannot influence the CTR trajectory
    assert lrec_with_proj_seed(1) == lrec_with_proj_seed(2)


def test_epoch_losses_finite_and_beta_matches_schedule():
    split, geo = make_toy_dataset(seed=14, num_users=8)
    cfg = tiny_config(alpha=0.1, gamma=0.05)
    params = ModelParams.build(cfg.dims(split.num_pois), cfg.seed)
    state = AdamState()
    for k in range(3):
        stats = train_epoch(params, split.train, geo, cfg, k, state)
        assert np.isfinite(stats["mean_lrec"])
        assert np.isfinite(stats["mean_lcon"])
        assert stats["beta"] == max(0.1, 0.05 * k)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_zero_epochs_returns_initial_weights(tmp_path):
    split, geo = make_toy_dataset(seed=15, num_users=8)
    cfg = tiny_config(epochs=0)
    log_path = tmp_path / "train.log.jsonl"
    result = fit(cfg, split, geo, log_path=log_path)
    assert result.log == []
    assert log_path.read_text() == ""
    fresh = ModelParams.build(cfg.dims(split.num_pois), cfg.seed)
    for name, t in fresh.items():
        assert result.params_best[name].data.tobytes() == t.data.tobytes()


def test_fit_reproducible_and_best_tracking(tmp_path):
    split, geo = make_toy_dataset(seed=16, num_users=10)
    cfg = tiny_config(epochs=3, lr=0.02)
    r1 = fit(cfg, split, geo)
    r2 = fit(cfg, split, geo)
    for name, t in r1.params_best.items():
        assert t.data.tobytes() == r2.params_best[name].data.tobytes()
    assert [e["val_auc"] for e in r1.log] == [e["val_auc"] for e in r2.log]

    aucs = [e["val_auc"] for e in r1.log]
    assert r1.best_val_auc == max(aucs)
    assert aucs[r1.best_epoch] == r1.best_val_auc
    # best checkpoint selection keeps the first maximum
    assert r1.best_epoch == aucs.index(max(aucs))

    running_best = np.maximum.accumulate(aucs)
    assert (np.diff(running_best) >= 0).all()


def test_fit_log_schema(tmp_path):
    split, geo = make_toy_dataset(seed=17, num_users=8)
    cfg = tiny_config(epochs=2)
    log_path = tmp_path / "log.jsonl"
    result = fit(cfg, split, geo, log_path=log_path)
    import json
    lines = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert lines == result.log
    for k, entry in enumerate(lines):
        assert entry["epoch"] == k
        assert set(entry) == {"epoch", "beta", "train_lrec", "train_lcon",
                              "val_auc", "val_logloss"}


def test_config_round_trip_and_validation(tmp_path):
    cfg = tiny_config(curriculum_mode="random", disable_geo_graph=True)
    path = tmp_path / "config.json"
    import json
    path.write_text(json.dumps(cfg.to_dict()))
    again = TrainConfig.from_file(path)
    assert again == cfg

    with pytest.raises(DataError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(DataError):
        TrainConfig.from_dict({"lr": -0.5})
