import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from magnneto import gnn
from magnneto.env import EpisodeConfig, sequence_log_prob
from magnneto.nn import ShapeError, load_checkpoint, save_checkpoint
from magnneto.topology import load_fixture
from magnneto.trainer import (
    LOG_HEADER,
    Minibatch,
    PpoConfig,
    RunConfig,
    TrainingDiverged,
    checkpoint_tensors,
    collect_episode,
    gae,
    init_models,
    load_models,
    normalize,
    ppo_loss,
    ppo_update,
    save_models,
    train,
)
from magnneto.traffic import gen_gravity_tm
from harness import randomized_params
from oracles import finite_difference_check


def setup(name="diamond", seed=0, horizon=8, n=1):
    topo = load_fixture(name)
    rng = np.random.default_rng(seed)
    policy = randomized_params(gnn.PolicyParams, rng)
    critic = randomized_params(gnn.CriticParams, rng)
    tm = gen_gravity_tm(topo, seed, 0.9)
    cfg = EpisodeConfig(n_actions=n, episode_length=horizon, seed=seed)
    return topo, tm, policy, critic, cfg


# -- episodes -------------------------------------------------------------------


def test_length_one_trajectory():
    topo, tm, policy, critic, _ = setup()
    traj = collect_episode(topo, tm, policy, critic, EpisodeConfig(episode_length=1))
    assert len(traj) == 1 and traj.max_utilizations.shape == (2,)


@pytest.mark.parametrize("n", [1, 3])
def test_replay_and_telescoping(n):
    topo, tm, policy, critic, cfg = setup("train8", 1, 20, n)
    traj = collect_episode(topo, tm, policy, critic, cfg)
    assert math.fsum(traj.rewards) == traj.max_utilizations[0] - traj.max_utilizations[-1]
    for t in range(len(traj)):
        logits = gnn.actor_logits(policy, topo, traj.weights[t], traj.utilizations[t])
        assert traj.log_probs[t] == sequence_log_prob(logits, traj.actions[t])
        assert abs(traj.values[t] - gnn.critic_value(critic, topo, traj.weights[t], traj.utilizations[t])) <= 1e-12
    assert traj.best.max_utilization == traj.max_utilizations.min()


def test_episode_deterministic_and_seed_sensitive():
    topo, tm, policy, critic, cfg = setup("mesh6")
    a = collect_episode(topo, tm, policy, critic, cfg)
    b = collect_episode(topo, tm, policy, critic, cfg)
    assert np.array_equal(a.actions, b.actions) and a.rewards.tobytes() == b.rewards.tobytes()
    c = collect_episode(topo, tm, policy, critic, EpisodeConfig(episode_length=8, seed=99))
    assert not np.array_equal(a.actions, c.actions) or not np.array_equal(a.weights, c.weights)


def test_nan_parameters_abort():
    topo, tm, policy, critic, cfg = setup()
    policy.readout.layers[-1].bias[0] = np.nan
    with pytest.raises(TrainingDiverged, match="non-finite"):
        collect_episode(topo, tm, policy, critic, cfg)


# -- advantages -----------------------------------------------------------------


def test_gae_hand_example():
    adv, ret = gae([1.0, 0.0], [0.5, 0.2], 0.97, 0.9)
    assert adv.tolist() == pytest.approx([0.5194, -0.2], abs=1e-12)
    assert ret.tolist() == pytest.approx([1.0194, 0.0], abs=1e-12)


def test_gae_one_step_td_when_lambda_zero():
    r, v = np.array([0.3, -0.1, 0.5]), np.array([0.2, 0.4, -0.3])
    adv, _ = gae(r, v, 0.97, 0.0)
    assert adv.tolist() == [r[0] + 0.97 * v[1] - v[0], r[1] + 0.97 * v[2] - v[1], r[2] - v[2]]


def test_gae_monte_carlo_limit():
    r = np.array([1.0, 2.0, -0.5, 0.25])
    adv, _ = gae(r, np.zeros(4), 1.0, 1.0)
    assert adv.tolist() == [2.75, 1.75, -0.25, 0.25]


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2)), min_size=1, max_size=30),
    st.floats(0.01, 1.0),
    st.floats(0.0, 1.0),
)
def test_gae_matches_discounted_td_sum(pairs, gamma, lam):
    r = np.array([p[0] for p in pairs])
    v = np.array([p[1] for p in pairs])
    adv, ret = gae(r, v, gamma, lam)
    nxt = np.append(v[1:], 0.0)
    delta = r + gamma * nxt - v
    for t in range(len(r)):
        ref = sum((gamma * lam) ** l * delta[t + l] for l in range(len(r) - t))
        assert adv[t] == pytest.approx(ref, abs=1e-9)
    np.testing.assert_array_equal(ret, adv + v)


def test_gae_shape_check():
    with pytest.raises(ValueError):
        gae([1.0, 2.0], [0.0], 0.9, 0.9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=40))
def test_normalization(values):
    a = np.array(values)
    out = normalize(a)
    assert np.all(np.isfinite(out))
    if a.std() > 1e-6:
        assert abs(out.mean()) < 1e-9 and abs(out.std() - 1) < 1e-9
        assert out[np.argmax(a)] == out.max()


def test_normalization_guard_on_constant_input():
    assert normalize(np.full(5, 3.0)).tolist() == [0.0] * 5


# -- losses ---------------------------------------------------------------------


def batch_for(traj, cfg, shift=None):
    adv, ret = gae(traj.rewards, traj.values, cfg.gamma, cfg.lam)
    adv = normalize(adv)
    batch = Minibatch.select(traj, adv, ret, np.arange(len(traj)))
    if shift is not None:
        batch = Minibatch(batch.weights, batch.utilizations, batch.actions, batch.old_log_probs + shift, batch.advantages, batch.returns)
    return batch


def test_ratio_is_one_under_behavior_policy():
    topo, tm, policy, critic, ecfg = setup()
    cfg = PpoConfig()
    traj = collect_episode(topo, tm, policy, critic, ecfg)
    loss, _ = ppo_loss(policy, critic, gnn.LinkGraph.from_topology(topo), batch_for(traj, cfg), cfg)
    assert loss.unclipped_objective == pytest.approx(loss.clipped_objective, abs=1e-15)
    assert loss.actor_loss == pytest.approx(-float(batch_for(traj, cfg).advantages.mean()), abs=1e-12)


def test_zero_advantages_zero_actor_gradient():
    topo, tm, policy, critic, ecfg = setup()
    cfg = PpoConfig(entropy_coef=0.0)
    traj = collect_episode(topo, tm, policy, critic, ecfg)
    b = batch_for(traj, cfg)
    b = Minibatch(b.weights, b.utilizations, b.actions, b.old_log_probs, np.zeros(len(traj)), b.returns)
    _, (g_actor, g_critic) = ppo_loss(policy, critic, gnn.LinkGraph.from_topology(topo), b, cfg)
    assert all(not g.any() for g in g_actor.values())
    assert any(g.any() for g in g_critic.values())


@pytest.mark.parametrize("shift", [None, "mixed"])
@pytest.mark.parametrize("seed", range(3))
def test_total_loss_gradient_matches_finite_differences(seed, shift):
    topo, tm, policy, critic, ecfg = setup("ring4", seed, 10, 2)
    cfg = PpoConfig()
    traj = collect_episode(topo, tm, policy, critic, ecfg)
    if shift == "mixed":
        # push some ratios outside the clip range on both sides
        shift = np.random.default_rng(seed).choice([-0.6, 0.0, 0.6], size=len(traj))
    batch = batch_for(traj, cfg, shift)
    graph = gnn.LinkGraph.from_topology(topo)
    _, (g_actor, g_critic) = ppo_loss(policy, critic, graph, batch, cfg)
    params = {**{"a." + k: v for k, v in policy.named_params().items()}, **{"c." + k: v for k, v in critic.named_params().items()}}
    grads = {**{"a." + k: v for k, v in g_actor.items()}, **{"c." + k: v for k, v in g_critic.items()}}

    def f():
        return ppo_loss(policy, critic, graph, batch, cfg, with_grads=False)[0].total

    assert finite_difference_check(f, params, grads, np.random.default_rng(seed), coords=60, directions=5) < 1e-4


def test_nan_loss_aborts():
    topo, tm, policy, critic, ecfg = setup()
    cfg = PpoConfig()
    traj = collect_episode(topo, tm, policy, critic, ecfg)
    b = batch_for(traj, cfg)
    b = Minibatch(b.weights, b.utilizations, b.actions, b.old_log_probs, b.advantages, np.full(len(traj), np.nan))
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        ppo_loss(policy, critic, gnn.LinkGraph.from_topology(topo), b, cfg)


def test_update_changes_params_and_clip_property():
    topo, tm, policy, critic, ecfg = setup("mesh6", 2, 60)
    cfg = PpoConfig()
    traj = collect_episode(topo, tm, policy, critic, ecfg)
    before = {k: v.copy() for k, v in policy.named_params().items()}
    diag = ppo_update(traj, policy, critic, cfg, cfg.adam(), cfg.adam(), np.random.default_rng(0), gnn.LinkGraph.from_topology(topo))
    assert len(diag["losses"]) == 3 * math.ceil(60 / 25)
    for loss in diag["losses"]:
        assert loss.clipped_objective <= loss.unclipped_objective + 1e-15
    assert any(not np.array_equal(before[k], v) for k, v in policy.named_params().items())
    # first minibatch is evaluated before any step: its ratios are all one
    assert diag["losses"][0].clipped_objective == pytest.approx(diag["losses"][0].unclipped_objective, abs=1e-15)


def test_ppo_config_defaults_and_validation():
    c = PpoConfig()
    assert (c.gamma, c.lam, c.clip, c.epochs, c.minibatch, c.value_coef, c.entropy_coef, c.lr) == (
        0.97, 0.9, 0.2, 3, 25, 0.5, 0.001, 3e-4
    )
    adam = c.adam()
    assert (adam.beta1, adam.beta2, adam.eps) == (0.9, 0.999, 0.01)
    for bad in [dict(gamma=0.0), dict(gamma=1.5), dict(lam=-0.1), dict(clip=0.0), dict(epochs=0)]:
        with pytest.raises(ValueError):
            PpoConfig(**bad)


# -- checkpoints and the training loop -----------------------------------------


def test_model_checkpoint_round_trip(tmp_path):
    policy, critic = init_models(3)
    save_models(tmp_path / "m.ckpt", policy, critic, {"iteration": 4})
    p2, c2, meta = load_models(tmp_path / "m.ckpt")
    assert meta["iteration"] == 4 and meta["hidden_dim"] == 16
    a, b = checkpoint_tensors(policy, critic), checkpoint_tensors(p2, c2)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_model_checkpoint_mismatches(tmp_path):
    policy, critic = init_models(3)
    tensors = checkpoint_tensors(policy, critic)
    broken = dict(tensors)
    broken["actor.message.0.weight"] = np.zeros((5, 5))
    save_checkpoint(tmp_path / "shape.ckpt", broken)
    with pytest.raises(ShapeError):
        load_models(tmp_path / "shape.ckpt")
    missing = {k: v for k, v in tensors.items() if k != "critic.readout.1.bias"}
    save_checkpoint(tmp_path / "missing.ckpt", missing)
    with pytest.raises(ShapeError):
        load_models(tmp_path / "missing.ckpt")
    save_checkpoint(tmp_path / "extra.ckpt", {**tensors, "junk": np.ones(1)})
    with pytest.raises(ShapeError):
        load_models(tmp_path / "extra.ckpt")
    save_checkpoint(tmp_path / "dim.ckpt", tensors, {"hidden_dim": 8})
    with pytest.raises(ShapeError):
        load_models(tmp_path / "dim.ckpt")


def small_run(tmp_path, iterations, seed=7, **kw):
    topo = load_fixture("ring4")
    pool = [gen_gravity_tm(topo, s, 0.9) for s in range(2)]
    return train(
        RunConfig([topo], [pool], seed=seed, iterations=iterations, out_dir=tmp_path, episode=EpisodeConfig(episode_length=6), **kw)
    )


def test_zero_iterations_writes_initial_models(tmp_path):
    result = small_run(tmp_path, 0)
    policy, critic = init_models(np.random.SeedSequence(7).spawn(2)[0])
    saved = load_checkpoint(tmp_path / "final.ckpt")[0]
    expected = checkpoint_tensors(policy, critic)
    assert all(saved[k].tobytes() == expected[k].tobytes() for k in expected)
    assert result.log == []
    assert (tmp_path / "train_log.csv").read_text() == ",".join(LOG_HEADER) + "\n"


def test_training_is_bit_reproducible(tmp_path):
    small_run(tmp_path / "a", 6, checkpoint_every=2)
    small_run(tmp_path / "b", 6, checkpoint_every=2)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["checkpoint_000002.ckpt", "checkpoint_000004.ckpt", "final.ckpt", "train_log.csv"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    log = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert len(log) == 7
    c = small_run(tmp_path / "c", 6, seed=8)
    assert c.log != small_run(tmp_path / "d", 6).log


def test_run_config_validation_and_schedule():
    a, b = load_fixture("ring4"), load_fixture("diamond")
    pools = [[gen_gravity_tm(a, s) for s in range(3)], [gen_gravity_tm(b, 0)]]
    run = RunConfig([a, b], pools, seed=0)
    assert run.schedule() == [(0, 0), (1, 0), (0, 1), (1, 0), (0, 2), (1, 0)]
    with pytest.raises(ValueError):
        RunConfig([a], [], seed=0)
    with pytest.raises(ValueError):
        RunConfig([a], [[]], seed=0)
