from __future__ import annotations

import numpy as np
import pytest

from mp_insertion.bandit import HybridBandit
from mp_insertion.policy import Adam, Policy
from mp_insertion.ppo import (
    CurvePoint,
    PpoConfig,
    RolloutBatch,
    Trainer,
    TrainingAborted,
    advantages,
    collect,
    normalize_advantages,
    read_curve,
    segment_rng,
    update,
    write_curve,
)


@pytest.fixture
def bandit():
    return HybridBandit()


def _bandit_policy(bandit, seed=0):
    return Policy(bandit.layout, discrete_hidden=16, head_hidden=8, seed=seed)


def _batch(rewards, values, boundaries, next_values):
    n = len(rewards)
    return RolloutBatch(
        obs=np.zeros((n, 12)),
        groups=np.zeros(n, dtype=int),
        actions=np.zeros(n, dtype=int),
        params=np.zeros((n, 1)),
        log_probs=np.zeros(n),
        rewards=np.asarray(rewards, dtype=float),
        values=np.asarray(values, dtype=float),
        boundaries=np.asarray(boundaries, dtype=bool),
        next_values=np.asarray(next_values, dtype=float),
        sim_steps=np.ones(n, dtype=int),
    )


def test_gae_by_hand():
    gamma, lam = 0.9, 0.5
    # episode 1 terminates after two decisions, episode 2 is cut by truncation and bootstraps from 2.0
    batch = _batch(
        rewards=[1.0, 0.0, -1.0, 0.5],
        values=[0.5, 0.2, 0.1, 0.3],
        boundaries=[False, True, False, True],
        next_values=[0.0, 0.0, 0.0, 2.0],
    )
    adv, ret = advantages(batch, gamma, lam)
    d1 = 0.0 + 0.0 - 0.2
    d0 = 1.0 + gamma * 0.2 - 0.5
    d3 = 0.5 + gamma * 2.0 - 0.3
    d2 = -1.0 + gamma * 0.3 - 0.1
    expected = [d0 + gamma * lam * d1, d1, d2 + gamma * lam * d3, d3]
    assert adv == pytest.approx(expected, abs=1e-12)
    assert ret == pytest.approx(np.array(expected) + batch.values, abs=1e-12)


def test_normalize_advantages():
    out = normalize_advantages(np.array([1.0, 2.0, 3.0, 4.0]))
    assert out.mean() == pytest.approx(0.0, abs=1e-12)
    assert out.std() == pytest.approx(1.0)
    assert np.array_equal(normalize_advantages(np.full(3, 2.0)), np.zeros(3))


def test_collect_on_bandit(bandit):
    policy = _bandit_policy(bandit)
    batch = collect(policy, bandit, 32, np.random.default_rng(0))
    assert len(batch) == 32
    assert batch.boundaries.all()
    assert np.array_equal(batch.next_values, np.zeros(32))
    assert batch.total_sim_steps == 32
    assert len(batch.episode_returns) == 32
    assert set(batch.actions) <= {0, 1}
    with pytest.raises(ValueError):
        collect(policy, bandit, 0, np.random.default_rng(0))


def test_collect_is_reproducible(bandit):
    a = collect(_bandit_policy(bandit), bandit, 16, segment_rng(3, 2))
    b = collect(_bandit_policy(bandit), bandit, 16, segment_rng(3, 2))
    for name, value in a.arrays().items():
        assert np.array_equal(value, getattr(b, name)), name
    c = collect(_bandit_policy(bandit), bandit, 16, segment_rng(3, 3))
    assert not np.array_equal(a.params, c.params)


def test_update_starts_from_the_collecting_policy(bandit):
    policy = _bandit_policy(bandit)
    cfg = PpoConfig(samples_per_update=64, minibatch_size=16, epochs=2)
    batch = collect(policy, bandit, 64, np.random.default_rng(1))
    count = policy.norm_count
    stats = update(policy, batch, cfg, Adam(policy.params, lr=cfg.learning_rate), np.random.default_rng(2))
    assert stats.first_ratio_deviation < 1e-9
    assert np.isfinite(stats.policy_loss)
    assert policy.norm_count == count + 64


def test_bandit_is_learned(bandit):
    policy = _bandit_policy(bandit, seed=1)
    cfg = PpoConfig(samples_per_update=256, minibatch_size=64, epochs=10, learning_rate=3e-3)
    optimizer = Adam(policy.params, lr=cfg.learning_rate)
    rng = np.random.default_rng(5)
    for k in range(200):
        batch = collect(policy, bandit, cfg.samples_per_update, segment_rng(0, k))
        update(policy, batch, cfg, optimizer, rng)
    dist = policy.forward(np.zeros(12), 0)
    assert dist.probs[dist.actions.index(1)] >= 0.95
    assert abs(dist.means[1][0] - 0.5) < 0.05


def test_trainer_writes_curve_and_checkpoints(bandit, tmp_path):
    cfg = PpoConfig(samples_per_update=32, minibatch_size=16, epochs=2, checkpoint_every=2)
    trainer = Trainer(_bandit_policy(bandit), cfg, env=bandit, out_dir=tmp_path, budget=96, config_hash="abc123")
    curve = trainer.train()
    assert [p.cum_sim_steps for p in curve] == [32, 64, 96]
    assert [p.updates for p in curve] == [1, 2, 3]
    assert all(0.0 <= p.success_rate <= 1.0 for p in curve)
    config_hash, points = read_curve(tmp_path / "curve.csv")
    assert config_hash == "abc123"
    assert len(points) == 3
    for name in ("update_00000.npz", "update_00002.npz", "update_00003.npz"):
        assert (tmp_path / "checkpoints" / name).exists()
    assert Policy.load(tmp_path / "policy.npz").meta["updates"] == 3


def test_trainer_is_deterministic(bandit, tmp_path):
    cfg = PpoConfig(samples_per_update=32, minibatch_size=16, epochs=2, seed=4)
    for name in ("a", "b"):
        Trainer(_bandit_policy(bandit), cfg, env=HybridBandit(), out_dir=tmp_path / name, budget=64).train()
    assert (tmp_path / "a" / "curve.csv").read_bytes() == (tmp_path / "b" / "curve.csv").read_bytes()
    a, b = Policy.load(tmp_path / "a" / "policy.npz"), Policy.load(tmp_path / "b" / "policy.npz")
    for key, value in a.params.items():
        assert np.array_equal(value, b.params[key]), key


def test_zero_budget_writes_empty_curve(bandit, tmp_path):
    curve = Trainer(_bandit_policy(bandit), PpoConfig(), env=bandit, out_dir=tmp_path, budget=0).train()
    assert curve == []
    assert read_curve(tmp_path / "curve.csv")[1] == []


def test_non_finite_weights_abort_training(bandit, tmp_path):
    policy = _bandit_policy(bandit)

    def poisoned(p, n, update_index):
        batch = collect(p, bandit, n, segment_rng(0, update_index))
        p.params["value.w2"][:] = np.nan
        return batch

    cfg = PpoConfig(samples_per_update=16, minibatch_size=16, epochs=1)
    trainer = Trainer(policy, cfg, collector=poisoned, out_dir=tmp_path, budget=100)
    with pytest.raises(TrainingAborted) as excinfo:
        trainer.train()
    assert excinfo.value.checkpoint == tmp_path / "checkpoints" / "update_00000.npz"
    assert "loss" in excinfo.value.diagnostics


def test_trainer_needs_a_source(bandit, tmp_path):
    with pytest.raises(ValueError):
        Trainer(_bandit_policy(bandit), PpoConfig(), out_dir=tmp_path, budget=10)
    with pytest.raises(ValueError):
        Trainer(_bandit_policy(bandit), PpoConfig(), env=bandit, out_dir=tmp_path, budget=-1)


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip_ratio=1.5)
    with pytest.raises(ValueError):
        PpoConfig(minibatch_size=0)
    with pytest.raises(ValueError):
        PpoConfig(entropy_coef=-0.1)
    assert PpoConfig(entropy_coef=0.0).entropy_coef == 0.0


def test_segment_rng_streams_differ():
    a = segment_rng(0, 1, 0).integers(1 << 30, size=4)
    assert np.array_equal(a, segment_rng(0, 1, 0).integers(1 << 30, size=4))
    assert not np.array_equal(a, segment_rng(0, 1, 1).integers(1 << 30, size=4))


def test_read_curve_rejects_bad_files(tmp_path):
    bare = tmp_path / "bare.csv"
    bare.write_text("cum_sim_steps,updates,success_rate,mean_return,mean_ep_len\n")
    with pytest.raises(ValueError):
        read_curve(bare)
    write_curve(tmp_path / "ok.csv", [CurvePoint(10, 1, 0.5, -1.25, 3.0)], "h")
    assert read_curve(tmp_path / "ok.csv") == ("h", [CurvePoint(10, 1, 0.5, -1.25, 3.0)])


def test_concatenate_pads_params():
    a = _batch([1.0], [0.0], [True], [0.0])
    b = _batch([2.0, 3.0], [0.0, 0.0], [False, True], [0.0, 0.0])
    b.params = np.ones((2, 3))
    merged = RolloutBatch.concatenate([a, b])
    assert merged.params.shape == (3, 3)
    assert np.array_equal(merged.params[0], [0.0, 0.0, 0.0])
    assert merged.rewards.tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(ValueError):
        RolloutBatch.concatenate([])
