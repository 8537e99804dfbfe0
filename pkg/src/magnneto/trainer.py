"""PPO with GAE for the link-agent policy.

Training is centralized (one actor, one critic, full state visible) and
single-threaded; every random draw comes from a stream spawned off the run
seed, so a run is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gnn
from .env import (
    EnvState,
    EpisodeConfig,
    best_configuration,
    evaluate,
    greedy_actions,
    reset,
    select_actions,
    sequence_terms,
    step,
)
from .nn import AdamState, ShapeError, adam_step, load_checkpoint, save_checkpoint
from .topology import Topology, TrafficMatrix

LOG_HEADER = ("iteration", "mean_reward", "best_maxutil", "actor_loss", "critic_loss", "entropy")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.97
    lam: float = 0.9
    clip: float = 0.2
    epochs: int = 3
    minibatch: int = 25
    value_coef: float = 0.5
    entropy_coef: float = 0.001
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 0.01
    normalize_advantages: bool = True
    iterations: int = 0

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must be in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)


@dataclass(frozen=True, eq=False)
class Trajectory:
    weights: np.ndarray  # (T, E) state s_t
    utilizations: np.ndarray  # (T, E)
    actions: np.ndarray  # (T, n)
    rewards: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,) behavior joint log-prob
    values: np.ndarray  # (T,)
    max_utilizations: np.ndarray  # (T + 1,) including the final state
    best: EnvState

    def __len__(self) -> int:
        return len(self.rewards)


def episode_rngs(seed) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for initial weights and for action sampling.

    Every agent replica in a distributed run rebuilds the sampling stream from
    the same seed, which is what keeps their draws identical.
    """
    init_ss, sample_ss = _seed_sequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(sample_ss)


def collect_episode(
    topology: Topology,
    tm: TrafficMatrix,
    policy: gnn.MpnnParams,
    critic: gnn.MpnnParams | None,
    config: EpisodeConfig,
    greedy: bool = False,
    initial_weights=None,
    graph: gnn.LinkGraph | None = None,
) -> Trajectory:
    """Run one episode under the policy. Critic values are computed in one
    batch afterwards (they do not influence the rollout); ``critic=None``
    records zeros. ``initial_weights`` overrides the seeded random start."""
    graph = graph or gnn.LinkGraph.from_topology(topology)
    n_links = topology.n_links
    if config.n_actions > n_links:
        raise ValueError(f"n_actions={config.n_actions} exceeds link count {n_links}")
    horizon = config.length_for(n_links)
    init_rng, sample_rng = episode_rngs(config.seed)
    if initial_weights is None:
        state = reset(topology, tm, config, init_rng)
    else:
        state = evaluate(topology, tm, initial_weights)

    weights = np.empty((horizon, n_links), dtype=np.int64)
    utils = np.empty((horizon, n_links))
    actions = np.empty((horizon, config.n_actions), dtype=np.int64)
    rewards = np.empty(horizon)
    log_probs = np.empty(horizon)
    max_utils = np.empty(horizon + 1)
    visited = [state]
    max_utils[0] = state.max_utilization
    for t in range(horizon):
        weights[t] = state.weights
        utils[t] = state.utilizations
        logits = gnn.actor_logits(policy, graph, state.weights, state.utilizations)
        if not np.all(np.isfinite(logits)):
            raise TrainingDiverged(f"non-finite logits at step {t}: {logits.tolist()}")
        if greedy:
            chosen, logp = greedy_actions(logits, config.n_actions)
        else:
            chosen, logp = select_actions(logits, config.n_actions, sample_rng)
        if not math.isfinite(logp):
            raise TrainingDiverged(f"non-finite log-prob {logp} at step {t}; logits={logits.tolist()}")
        actions[t] = chosen
        log_probs[t] = logp
        state, rewards[t] = step(topology, tm, state, chosen, config.weight_cap)
        max_utils[t + 1] = state.max_utilization
        visited.append(state)

    if critic is None:
        values = np.zeros(horizon)
    else:
        values = gnn.critic_value(critic, graph, weights, utils)
    return Trajectory(weights, utils, actions, rewards, log_probs, values, max_utils, best_configuration(visited))


def gae(rewards, values, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and return targets with a zero terminal bootstrap."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError(f"rewards {rewards.shape} and values {values.shape} differ in shape")
    adv = np.zeros_like(rewards)
    running = 0.0
    next_value = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize(adv: np.ndarray, min_std: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), min_std)


@dataclass(frozen=True)
class Minibatch:
    weights: np.ndarray
    utilizations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    @classmethod
    def select(cls, traj: Trajectory, adv, returns, idx) -> "Minibatch":
        return cls(traj.weights[idx], traj.utilizations[idx], traj.actions[idx], traj.log_probs[idx], adv[idx], returns[idx])


@dataclass(frozen=True)
class LossTerms:
    actor_loss: float  # clipped surrogate, negated
    critic_loss: float
    entropy: float
    total: float
    unclipped_objective: float
    clipped_objective: float


def ppo_loss(
    policy: gnn.MpnnParams,
    critic: gnn.MpnnParams,
    graph: gnn.LinkGraph,
    batch: Minibatch,
    config: PpoConfig,
    with_grads: bool = True,
):
    """Total loss ``actor + value_coef * mse - entropy_coef * entropy`` on one
    minibatch, and its gradients as ``(actor_grads, critic_grads)``."""
    m = len(batch.advantages)
    logits, a_cache = gnn.actor_forward(policy, graph, batch.weights, batch.utilizations)
    terms = sequence_terms(logits, batch.actions)
    ratio = np.exp(terms.log_prob - batch.old_log_probs)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv
    surrogate = np.minimum(unclipped, clipped)
    actor_loss = -float(surrogate.mean())
    entropy = float(terms.entropy.mean())

    values, c_cache = gnn.critic_forward(critic, graph, batch.weights, batch.utilizations)
    err = values - batch.returns
    critic_loss = config.value_coef * float(np.mean(err**2))
    total = actor_loss + critic_loss - config.entropy_coef * entropy
    loss = LossTerms(actor_loss, critic_loss, entropy, total, float(unclipped.mean()), float(surrogate.mean()))
    if not with_grads:
        return loss, None
    if not math.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss (actor={actor_loss}, critic={critic_loss}, entropy={entropy}); "
            f"ratio range [{ratio.min()}, {ratio.max()}], value range [{values.min()}, {values.max()}]"
        )

    # d surrogate / d logp is ratio * A where the unclipped branch is active.
    active = unclipped <= clipped
    g_logp = -np.where(active, ratio * adv, 0.0) / m
    g_logits = g_logp[:, None] * terms.grad_log_prob - (config.entropy_coef / m) * terms.grad_entropy
    actor_grads = gnn.actor_backward(policy, a_cache, g_logits)
    critic_grads = gnn.critic_backward(critic, c_cache, config.value_coef * 2.0 * err / m)
    return loss, (actor_grads, critic_grads)


def ppo_update(
    traj: Trajectory,
    policy: gnn.MpnnParams,
    critic: gnn.MpnnParams,
    config: PpoConfig,
    actor_opt: AdamState,
    critic_opt: AdamState,
    rng: np.random.Generator,
    graph: gnn.LinkGraph,
) -> dict:
    """Epochs of shuffled minibatch Adam steps; returns mean loss diagnostics."""
    adv, returns = gae(traj.rewards, traj.values, config.gamma, config.lam)
    if config.normalize_advantages:
        adv = normalize(adv)
    actor_params = policy.named_params()
    critic_params = critic.named_params()
    rows = []
    for _ in range(config.epochs):
        order = rng.permutation(len(traj))
        for start in range(0, len(order), config.minibatch):
            idx = order[start : start + config.minibatch]
            loss, (g_actor, g_critic) = ppo_loss(policy, critic, graph, Minibatch.select(traj, adv, returns, idx), config)
            adam_step(actor_params, g_actor, actor_opt)
            adam_step(critic_params, g_critic, critic_opt)
            rows.append(loss)
    for name, p in {**actor_params, **critic_params}.items():
        if not np.all(np.isfinite(p)):
            raise TrainingDiverged(f"parameter {name} became non-finite")
    return {
        "actor_loss": float(np.mean([r.actor_loss for r in rows])),
        "critic_loss": float(np.mean([r.critic_loss for r in rows])),
        "entropy": float(np.mean([r.entropy for r in rows])),
        "losses": rows,
    }


# -- checkpoints ---------------------------------------------------------------


def checkpoint_tensors(policy: gnn.MpnnParams, critic: gnn.MpnnParams) -> dict[str, np.ndarray]:
    out = {f"actor.{k}": v for k, v in policy.named_params().items()}
    out.update({f"critic.{k}": v for k, v in critic.named_params().items()})
    return out


def save_models(path, policy, critic, meta: dict | None = None) -> None:
    header = {"hidden_dim": gnn.HIDDEN_DIM, "mlp_hidden": gnn.MLP_HIDDEN, "mp_steps": gnn.MP_STEPS}
    header.update(meta or {})
    save_checkpoint(path, checkpoint_tensors(policy, critic), header)


def load_models(path) -> tuple[gnn.PolicyParams, gnn.CriticParams, dict]:
    """Load actor and critic; raises :class:`ShapeError` on any layout mismatch."""
    tensors, meta = load_checkpoint(path)
    if meta.get("hidden_dim", gnn.HIDDEN_DIM) != gnn.HIDDEN_DIM:
        raise ShapeError(f"{path}: checkpoint hidden_dim {meta['hidden_dim']} != {gnn.HIDDEN_DIM}")
    rng = np.random.default_rng(0)
    policy, critic = gnn.PolicyParams.create(rng), gnn.CriticParams.create(rng)
    try:
        policy.load_tensors(tensors, "actor.")
        critic.load_tensors(tensors, "critic.")
    except (KeyError, ValueError) as exc:
        raise ShapeError(f"{path}: {exc}") from exc
    expected = set(checkpoint_tensors(policy, critic))
    if set(tensors) != expected:
        raise ShapeError(f"{path}: unexpected tensors {sorted(set(tensors) - expected)}")
    return policy, critic, meta


# -- training loop -------------------------------------------------------------


@dataclass
class RunConfig:
    topologies: list[Topology]
    traffic: list[list[TrafficMatrix]]  # one pool per topology
    seed: int
    iterations: int = 0
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    out_dir: Path | None = None
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint

    def __post_init__(self):
        if not self.topologies or len(self.traffic) != len(self.topologies):
            raise ValueError("need one traffic pool per topology")
        if any(not pool for pool in self.traffic):
            raise ValueError("every topology needs at least one traffic matrix")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def schedule(self) -> list[tuple[int, int]]:
        """Round-robin over topologies, advancing through each pool in turn."""
        longest = max(len(pool) for pool in self.traffic)
        return [(t, j % len(self.traffic[t])) for j in range(longest) for t in range(len(self.topologies))]


@dataclass
class TrainResult:
    policy: gnn.PolicyParams
    critic: gnn.CriticParams
    log: list[dict]
    checkpoints: list[Path]


def _seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def init_models(seed) -> tuple[gnn.PolicyParams, gnn.CriticParams]:
    actor_ss, critic_ss = _seed_sequence(seed).spawn(2)
    return (
        gnn.PolicyParams.create(np.random.default_rng(actor_ss)),
        gnn.CriticParams.create(np.random.default_rng(critic_ss)),
    )


def format_log_row(row: dict) -> list[str]:
    return [str(row["iteration"])] + [repr(float(row[k])) for k in LOG_HEADER[1:]]


def train(run: RunConfig, progress=None) -> TrainResult:
    """``progress`` is an optional callable receiving each log row."""
    model_ss, stream_ss = np.random.SeedSequence(run.seed).spawn(2)
    policy, critic = init_models(model_ss)
    actor_opt, critic_opt = run.ppo.adam(), run.ppo.adam()
    shuffle_rng_ss, episode_ss = stream_ss.spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_rng_ss)
    episode_seeds = np.random.default_rng(episode_ss)
    graphs = [gnn.LinkGraph.from_topology(t) for t in run.topologies]
    schedule = run.schedule()

    checkpoints: list[Path] = []
    log_fh = writer = None
    if run.out_dir is not None:
        run.out_dir = Path(run.out_dir)
        run.out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run.out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)

    def checkpoint(name: str, iteration: int):
        if run.out_dir is None:
            return
        path = run.out_dir / name
        save_models(path, policy, critic, {"iteration": iteration, "seed": run.seed})
        checkpoints.append(path)

    log = []
    try:
        for it in range(run.iterations):
            t_idx, tm_idx = schedule[it % len(schedule)]
            topo = run.topologies[t_idx]
            seed = int(episode_seeds.integers(0, 2**63))
            ep_config = EpisodeConfig(
                n_actions=run.episode.n_actions,
                episode_length=run.episode.episode_length,
                length_factor=run.episode.length_factor,
                init_weight_range=run.episode.init_weight_range,
                weight_cap=run.episode.weight_cap,
                seed=seed,
            )
            traj = collect_episode(topo, run.traffic[t_idx][tm_idx], policy, critic, ep_config, graph=graphs[t_idx])
            diag = ppo_update(traj, policy, critic, run.ppo, actor_opt, critic_opt, shuffle_rng, graphs[t_idx])
            row = {
                "iteration": it,
                "mean_reward": float(traj.rewards.mean()),
                "best_maxutil": traj.best.max_utilization,
                "actor_loss": diag["actor_loss"],
                "critic_loss": diag["critic_loss"],
                "entropy": diag["entropy"],
            }
            log.append(row)
            if writer is not None:
                writer.writerow(format_log_row(row))
                log_fh.flush()
            if progress is not None:
                progress(row)
            if run.checkpoint_every and (it + 1) % run.checkpoint_every == 0 and it + 1 < run.iterations:
                checkpoint(f"checkpoint_{it + 1:06d}.ckpt", it + 1)
        checkpoint("final.ckpt", run.iterations)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(policy, critic, log, checkpoints)
