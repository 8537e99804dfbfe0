"""Decentralized execution of a trained policy with one replica per link.

Replicas run under a round-based scheduler with two barriers per time step:
one after every message-passing round (hidden states go only to the links
that list the sender in their neighborhood) and one after the logit flood.
Every replica keeps its own copy of the weights, routes the traffic matrix
itself, rebuilds the global softmax from the flooded logits, and samples with
a generator rebuilt from the shared episode seed. Any disagreement between
replicas is a hard failure.

Byte accounting. The agent of link ``e`` is hosted at ``dst(e)``. Every
agent that needs ``h_i`` (those with ``i`` in their neighborhood) is hosted at
``src(i)``, so per message-passing round agent ``i`` sends its state once,
from ``dst(i)`` back across the reverse of ``i``. Each directed link thus
carries one hidden state per round, costing ``hidden_dim * float_bytes`` plus
20% headers. Each agent floods its logit from its host over a shortest-hop
tree, so one logit crosses ``N - 1`` links.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import gnn
from .env import EpisodeConfig, select_actions
from .routing import ecmp_loads
from .topology import Topology, TrafficMatrix
from .trainer import collect_episode, episode_rngs

HEADER_OVERHEAD = Fraction(1, 5)
DEFAULT_STEP_RATE = 1000.0  # time steps per second, an assumption


class ReplicaDivergence(RuntimeError):
    def __init__(self, t: int, choices: dict[int, tuple[int, ...]]):
        self.t = t
        self.choices = choices
        groups: dict[tuple[int, ...], list[int]] = {}
        for link, acts in choices.items():
            groups.setdefault(acts, []).append(link)
        lines = [f"replicas disagree at step {t}:"]
        for acts, links in sorted(groups.items(), key=lambda kv: -len(kv[1])):
            lines.append(f"  actions {list(acts)} chosen by replicas {links}")
        super().__init__("\n".join(lines))


def message_bytes(hidden_dim: int, float_bytes: int) -> Fraction:
    return hidden_dim * float_bytes * (1 + HEADER_OVERHEAD)


def logit_bytes(float_bytes: int) -> Fraction:
    return float_bytes * (1 + HEADER_OVERHEAD)


def _reverse_link(topology: Topology, e: int) -> int | None:
    link = topology.links[e]
    for j in topology.out_links[link.dst]:
        if topology.links[j].dst == link.src:
            return j
    return None


def _hop_path(topology: Topology, a: int, b: int) -> list[int]:
    """Fewest-hop link path from node ``a`` to node ``b`` (ties to lower link ids)."""
    parent = {a: None}
    queue = deque([a])
    while queue:
        v = queue.popleft()
        if v == b:
            break
        for j in topology.out_links[v]:
            u = topology.links[j].dst
            if u not in parent:
                parent[u] = j
                queue.append(u)
    path = []
    v = b
    while parent[v] is not None:
        j = parent[v]
        path.append(j)
        v = topology.links[j].src
    return path[::-1]


def host_node(topology: Topology, e: int) -> int:
    return topology.links[e].dst


def hidden_routes(topology: Topology) -> dict[int, list[int]]:
    """Physical links crossed by agent ``i``'s state on its way from its host
    ``dst(i)`` to ``src(i)``, where all its subscribers live.

    Normally the reverse of ``i``; falls back to a fewest-hop path if the
    reverse link is missing.
    """
    routes = {}
    for i in range(topology.n_links):
        rev = _reverse_link(topology, i)
        link = topology.links[i]
        routes[i] = [rev] if rev is not None else _hop_path(topology, link.dst, link.src)
    return routes


def flood_tree(topology: Topology, root: int) -> list[int]:
    """Links of the breadth-first shortest-hop tree rooted at node ``root``."""
    seen = {root}
    queue = deque([root])
    tree = []
    while queue:
        v = queue.popleft()
        for j in topology.out_links[v]:
            u = topology.links[j].dst
            if u not in seen:
                seen.add(u)
                tree.append(j)
                queue.append(u)
    return tree


@dataclass
class OverheadLedger:
    """Byte counters per directed link, kept as exact fractions."""

    n_links: int
    hidden: list[Fraction] = field(default_factory=list)
    logits: list[Fraction] = field(default_factory=list)
    hidden_messages: int = 0
    logit_messages: int = 0
    steps: int = 0

    def __post_init__(self):
        if not self.hidden:
            self.hidden = [Fraction(0)] * self.n_links
        if not self.logits:
            self.logits = [Fraction(0)] * self.n_links

    def add_hidden(self, links, size: Fraction) -> None:
        self.hidden_messages += 1
        for j in links:
            self.hidden[j] += size

    def add_logit(self, links, size: Fraction) -> None:
        self.logit_messages += 1
        for j in links:
            self.logits[j] += size

    def total_bytes(self) -> Fraction:
        return sum(self.hidden, Fraction(0)) + sum(self.logits, Fraction(0))

    def rows(self, step_rate: float = DEFAULT_STEP_RATE) -> list[dict]:
        """Per-link summary: episode bytes, megabytes, and MB/s at ``step_rate``."""
        out = []
        for j in range(self.n_links):
            total = self.hidden[j] + self.logits[j]
            per_step = total / self.steps if self.steps else Fraction(0)
            out.append(
                {
                    "link": j,
                    "bytes_hidden": float(self.hidden[j]),
                    "bytes_logits": float(self.logits[j]),
                    "total_MB": float(total / 10**6),
                    "MB_per_s": float(per_step * Fraction(step_rate) / 10**6),
                }
            )
        return out


def overhead_report(
    topology: Topology, T: int, K: int = gnn.MP_STEPS, hidden_dim: int = gnn.HIDDEN_DIM, float_bytes: int = 4
) -> OverheadLedger:
    """Closed-form ledger for an episode of ``T`` steps (no policy needed)."""
    if T < 0 or K < 1:
        raise ValueError("need T >= 0 and K >= 1")
    ledger = OverheadLedger(topology.n_links, steps=T)
    msg = message_bytes(hidden_dim, float_bytes)
    lb = logit_bytes(float_bytes)
    routes = hidden_routes(topology)
    for path in routes.values():
        for j in path:
            ledger.hidden[j] += T * K * msg
    ledger.hidden_messages = T * K * len(routes)
    for e in range(topology.n_links):
        for j in flood_tree(topology, host_node(topology, e)):
            ledger.logits[j] += T * lb
    ledger.logit_messages = T * topology.n_links
    return ledger


@dataclass
class AgentReplica:
    link: int
    params: gnn.MpnnParams
    topology: Topology
    tm: TrafficMatrix
    weights: np.ndarray
    rng: np.random.Generator
    neighbors: tuple[int, ...]
    hidden: np.ndarray | None = None
    max_utilization: float = math.inf
    best_weights: np.ndarray | None = None
    best_utilization: float = math.inf

    def observe(self) -> None:
        """Route the local traffic view under the local weight view."""
        routed = ecmp_loads(self.topology, self.tm, self.weights)
        self.max_utilization = routed.max_utilization
        if self.max_utilization < self.best_utilization:
            self.best_utilization = self.max_utilization
            self.best_weights = self.weights.copy()
        self.hidden = gnn.init_hidden(self.weights[self.link], routed.utilization[self.link])

    def message_round(self, inbox: dict[int, np.ndarray]) -> np.ndarray:
        h = self.hidden
        if self.neighbors:
            nbr = np.stack([inbox[i] for i in self.neighbors])
            x = np.concatenate([np.broadcast_to(h, nbr.shape), nbr], axis=1)
            msg = self.params.message(x)
            agg = np.concatenate([msg.min(axis=0), msg.max(axis=0)])
        else:
            agg = np.zeros(2 * gnn.HIDDEN_DIM)
        return self.params.update(np.concatenate([h, agg])[None])[0]

    def logit(self) -> float:
        return float(self.params.readout(self.hidden[None])[0, 0])

    def choose(self, logits: np.ndarray, n: int) -> tuple[int, ...]:
        return select_actions(logits, n, self.rng)[0]

    def apply(self, actions, weight_cap: int | None) -> None:
        self.weights = self.weights.copy()
        self.weights[list(actions)] += 1
        if weight_cap is not None:
            np.minimum(self.weights, weight_cap, out=self.weights)


@dataclass
class DistributedRun:
    best_weights: np.ndarray
    best_utilization: float
    actions: list[tuple[int, ...]]
    logits: list[np.ndarray]
    ledger: OverheadLedger


def run_distributed_episode(
    topology: Topology,
    tm: TrafficMatrix,
    params: gnn.MpnnParams,
    config: EpisodeConfig,
    K: int = gnn.MP_STEPS,
    float_bytes: int = 4,
    seed_overrides: dict[int, int] | None = None,
) -> DistributedRun:
    """Execute one sampled episode with a replica per link.

    ``seed_overrides`` maps link ids to a different sampling seed; it exists
    to inject faults and should make the run raise :class:`ReplicaDivergence`.
    """
    n_links = topology.n_links
    horizon = config.length_for(n_links)
    init_rng, _ = episode_rngs(config.seed)
    reset_weights = init_rng.integers(config.init_weight_range[0], config.init_weight_range[1] + 1, size=n_links)
    overrides = seed_overrides or {}
    replicas = []
    for e in range(n_links):
        _, rng = episode_rngs(overrides.get(e, config.seed))
        replicas.append(
            AgentReplica(
                link=e,
                params=params.copy(),
                topology=topology,
                tm=tm,
                weights=reset_weights.copy(),
                rng=rng,
                neighbors=tuple(sorted(gnn.neighborhood(topology, e))),
            )
        )

    # Who needs my state: links whose neighborhood contains me.
    subscribers: dict[int, list[int]] = {e: [] for e in range(n_links)}
    for r in replicas:
        for i in r.neighbors:
            subscribers[i].append(r.link)
    routes = hidden_routes(topology)
    trees = [flood_tree(topology, host_node(topology, e)) for e in range(n_links)]
    msg_size = message_bytes(gnn.HIDDEN_DIM, float_bytes)
    logit_size = logit_bytes(float_bytes)
    ledger = OverheadLedger(n_links)

    actions_log, logits_log = [], []
    for r in replicas:
        r.observe()
    for t in range(horizon):
        for _ in range(K):
            inboxes: list[dict[int, np.ndarray]] = [{} for _ in range(n_links)]
            for r in replicas:
                for e in subscribers[r.link]:
                    inboxes[e][r.link] = r.hidden
                ledger.add_hidden(routes[r.link], msg_size)
            new_states = [r.message_round(inboxes[r.link]) for r in replicas]  # barrier
            for r, h in zip(replicas, new_states):
                r.hidden = h

        flooded = np.empty(n_links)
        for r in replicas:
            flooded[r.link] = r.logit()
            ledger.add_logit(trees[r.link], logit_size)
        choices = {r.link: r.choose(flooded.copy(), config.n_actions) for r in replicas}  # barrier
        reference = choices[0]
        if any(c != reference for c in choices.values()):
            raise ReplicaDivergence(t, choices)
        actions_log.append(reference)
        logits_log.append(flooded)
        for r in replicas:
            r.apply(reference, config.weight_cap)
            r.observe()
        ledger.steps += 1

    best = replicas[0]
    for r in replicas[1:]:
        if not np.array_equal(r.best_weights, best.best_weights):
            raise ReplicaDivergence(horizon, {x.link: tuple(x.best_weights.tolist()) for x in replicas})
    return DistributedRun(best.best_weights, best.best_utilization, actions_log, logits_log, ledger)


@dataclass(frozen=True)
class CheckResult:
    seed: int
    diverged: bool
    max_logit_diff: float
    same_actions: bool
    same_best: bool
    detail: str = ""


def dist_check(
    topology: Topology,
    tm: TrafficMatrix,
    params: gnn.MpnnParams,
    config: EpisodeConfig,
    seeds,
) -> list[CheckResult]:
    """Compare replica-based and centralized execution for each seed."""
    graph = gnn.LinkGraph.from_topology(topology)
    results = []
    for seed in seeds:
        cfg = EpisodeConfig(
            n_actions=config.n_actions,
            episode_length=config.episode_length,
            length_factor=config.length_factor,
            init_weight_range=config.init_weight_range,
            weight_cap=config.weight_cap,
            seed=int(seed),
        )
        central = collect_episode(topology, tm, params, None, cfg, graph=graph)
        try:
            dist = run_distributed_episode(topology, tm, params, cfg)
        except ReplicaDivergence as exc:
            results.append(CheckResult(int(seed), True, math.nan, False, False, str(exc)))
            continue
        central_logits = gnn.actor_logits(params, graph, central.weights, central.utilizations)
        diff = float(np.abs(np.stack(dist.logits) - central_logits).max())
        same_actions = [tuple(a) for a in central.actions.tolist()] == dist.actions
        same_best = np.array_equal(central.best.weights, dist.best_weights)
        diverged = not (same_actions and same_best)
        detail = "" if not diverged else f"first differing step: {_first_diff(central.actions.tolist(), dist.actions)}"
        results.append(CheckResult(int(seed), diverged, diff, same_actions, same_best, detail))
    return results


def _first_diff(a, b) -> int:
    for t, (x, y) in enumerate(zip(a, b)):
        if tuple(x) != tuple(y):
            return t
    return min(len(a), len(b))
