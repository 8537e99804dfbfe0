"""Episode mechanics: weight-increment actions over a routed network.

The action space is monotone (weights only go up), so an episode's useful
output is the best configuration it visited, not the last one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .routing import ecmp_loads
from .topology import Topology, TrafficMatrix


@dataclass(frozen=True)
class EpisodeConfig:
    """``episode_length=None`` derives ``T = ceil(length_factor * E / n_actions)``."""

    n_actions: int = 1
    episode_length: int | None = None
    length_factor: float = 3.0
    init_weight_range: tuple[int, int] = (1, 4)
    weight_cap: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_actions < 1:
            raise ValueError("n_actions must be >= 1")
        if self.episode_length is not None and self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        low, high = self.init_weight_range
        if low < 1 or high < low:
            raise ValueError(f"bad init_weight_range {self.init_weight_range}")
        if self.weight_cap is not None and self.weight_cap < high:
            raise ValueError("weight_cap must be >= the top of init_weight_range")

    def length_for(self, n_links: int) -> int:
        if self.episode_length is not None:
            return self.episode_length
        return default_episode_length(n_links, self.n_actions, self.length_factor)


@dataclass(frozen=True, eq=False)
class EnvState:
    weights: np.ndarray
    utilizations: np.ndarray
    max_utilization: float
    t: int = 0


def default_episode_length(n_links: int, n_actions: int, factor: float = 3.0) -> int:
    if n_actions < 1:
        raise ValueError("n_actions must be >= 1")
    return max(1, math.ceil(factor * n_links / n_actions))


def evaluate(topology: Topology, tm: TrafficMatrix, weights, t: int = 0) -> EnvState:
    w = np.array(weights, dtype=np.int64)
    w.setflags(write=False)
    routed = ecmp_loads(topology, tm, w)
    return EnvState(w, routed.utilization, routed.max_utilization, t)


def initial_weights(n_links: int, rng: np.random.Generator, weight_range=(1, 4)) -> np.ndarray:
    low, high = weight_range
    return rng.integers(low, high + 1, size=n_links)


def reset(
    topology: Topology, tm: TrafficMatrix, config: EpisodeConfig, rng: np.random.Generator | None = None
) -> EnvState:
    """Draw initial weights uniformly from ``config.init_weight_range``.

    ``rng`` defaults to a fresh generator seeded with ``config.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return evaluate(topology, tm, initial_weights(topology.n_links, rng, config.init_weight_range))


def step(
    topology: Topology,
    tm: TrafficMatrix,
    state: EnvState,
    actions,
    weight_cap: int | None = None,
) -> tuple[EnvState, float]:
    """Increment each selected link's weight by one and re-route.

    Reward is the drop in max utilization, ``u_t - u_{t+1}``.
    """
    actions = [int(a) for a in actions]
    if len(set(actions)) != len(actions):
        raise ValueError(f"duplicate link in action set {actions}")
    if any(not 0 <= a < topology.n_links for a in actions):
        raise ValueError(f"action set {actions} references unknown links")
    if not actions:
        return EnvState(state.weights, state.utilizations, state.max_utilization, state.t + 1), 0.0
    w = state.weights.copy()
    w[actions] += 1
    if weight_cap is not None:
        np.minimum(w, weight_cap, out=w)
    nxt = evaluate(topology, tm, w, state.t + 1)
    return nxt, state.max_utilization - nxt.max_utilization


def _log_softmax(z: np.ndarray) -> np.ndarray:
    finite = np.isfinite(z)
    m = z[finite].max()
    out = np.full_like(z, -np.inf)
    shifted = z[finite] - m
    out[finite] = shifted - math.log(np.exp(shifted).sum())
    return out


@dataclass(frozen=True, eq=False)
class SequenceTerms:
    """Batched log-probability and entropy of ordered action sets, with their
    gradients with respect to the logits."""

    log_prob: np.ndarray  # (B,)
    grad_log_prob: np.ndarray  # (B, E)
    entropy: np.ndarray  # (B,) mean entropy of the conditional draws
    grad_entropy: np.ndarray  # (B, E)


def sequence_terms(logits: np.ndarray, actions: np.ndarray) -> SequenceTerms:
    """``logits`` is ``(B, E)``, ``actions`` is ``(B, n)`` of distinct link ids."""
    z = np.asarray(logits, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    b, n = actions.shape
    rows = np.arange(b)
    avail = np.ones(z.shape, dtype=bool)
    logp = np.zeros(b)
    g_logp = np.zeros(z.shape)
    ent = np.zeros(b)
    g_ent = np.zeros(z.shape)
    for j in range(n):
        zm = np.where(avail, z, -np.inf)
        m = zm.max(axis=1, keepdims=True)
        ex = np.exp(zm - m)
        s = ex.sum(axis=1, keepdims=True)
        p = ex / s
        logq = np.where(avail, zm - m - np.log(s), 0.0)
        a = actions[:, j]
        logp += logq[rows, a]
        g_logp -= p
        g_logp[rows, a] += 1.0
        z0 = np.where(avail, z, 0.0)
        zbar = (p * z0).sum(axis=1, keepdims=True)
        ent -= (p * logq).sum(axis=1) / n
        g_ent -= p * (z0 - zbar) / n
        avail[rows, a] = False
    return SequenceTerms(logp, g_logp, ent, g_ent)


def sequence_log_prob(logits, actions) -> float:
    """Joint log-probability of drawing ``actions`` in order, without replacement."""
    z = np.asarray(logits, dtype=np.float64)[None]
    return float(sequence_terms(z, np.asarray(actions, dtype=np.int64).reshape(1, -1)).log_prob[0])


def select_actions(logits, n: int, rng: np.random.Generator) -> tuple[tuple[int, ...], float]:
    """Sample ``n`` distinct links sequentially from the softmax, renormalizing
    over the remaining links after each draw. Uses one ``rng.random()`` per draw.
    """
    z = np.array(logits, dtype=np.float64)
    if n > z.size:
        raise ValueError(f"cannot select {n} actions from {z.size} links")
    base = z.copy()
    chosen: list[int] = []
    for _ in range(n):
        p = np.exp(_log_softmax(z))
        cdf = np.cumsum(p)
        k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        if k >= z.size or p[k] == 0.0:
            k = int(np.flatnonzero(p > 0)[-1])
        chosen.append(k)
        z[k] = -np.inf
    return tuple(chosen), sequence_log_prob(base, chosen)


def greedy_actions(logits, n: int) -> tuple[tuple[int, ...], float]:
    """The ``n`` highest-logit links (ties to the lower id)."""
    z = np.asarray(logits, dtype=np.float64)
    if n > z.size:
        raise ValueError(f"cannot select {n} actions from {z.size} links")
    chosen = tuple(int(i) for i in np.argsort(-z, kind="stable")[:n])
    return chosen, sequence_log_prob(z, chosen)


def best_configuration(states) -> EnvState:
    """Visited state with the lowest max utilization; ties go to the earliest."""
    best = None
    for s in states:
        if best is None or s.max_utilization < best.max_utilization:
            best = s
    if best is None:
        raise ValueError("no states visited")
    return best
