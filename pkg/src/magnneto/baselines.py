"""Reference weight-setting optimizers for the MinMaxLoad objective."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .routing import ecmp_loads
from .topology import Topology, TrafficMatrix

BRUTE_FORCE_LIMIT = 10**7


class UndefinedImprovement(ValueError):
    """Default OSPF carries no load, so relative improvement is undefined."""


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    w_max: int = 20
    max_iterations: int = 100
    tabu_tenure: int = 7
    patience: int = 15
    restarts: int = 3
    seed: int = 0
    time_limit: float | None = None

    def __post_init__(self):
        if self.w_max < 1:
            raise ValueError("w_max must be >= 1")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.time_limit is not None and self.time_limit <= 0:
            raise ValueError("time_limit must be positive")


@dataclass(frozen=True)
class SearchResult:
    weights: np.ndarray
    max_utilization: float
    iterations: int
    evaluations: int
    restarts: int


def default_ospf_weights(topology: Topology) -> np.ndarray:
    """Weights inversely proportional to capacity: ``max(1, round(C_max / c_e))``.

    Rounding is half-up, so a ratio of exactly 2.5 gives 3.
    """
    cap = topology.capacity
    ratio = cap.max() / cap
    return np.maximum(1, np.floor(ratio + 0.5)).astype(np.int64)


def max_utilization_for(topology: Topology, tm: TrafficMatrix, weights) -> float:
    return ecmp_loads(topology, tm, weights).max_utilization


def improvement_vs_default(topology: Topology, tm: TrafficMatrix, weights) -> float:
    """Percent reduction of max utilization relative to Default OSPF."""
    u_default = max_utilization_for(topology, tm, default_ospf_weights(topology))
    if u_default == 0:
        raise UndefinedImprovement("Default OSPF max utilization is 0; improvement undefined")
    u = max_utilization_for(topology, tm, weights)
    return 100.0 * (u_default - u) / u_default


def _search_key(topology, tm, weights):
    # Lexicographic min-max: max utilization first, then the rest of the
    # descending utilization profile, which breaks MinMaxLoad plateaus.
    util = ecmp_loads(topology, tm, weights).utilization
    return tuple(np.sort(util)[::-1].tolist())


def local_search_weights(
    topology: Topology, tm: TrafficMatrix, config: SearchConfig = SearchConfig()
) -> SearchResult:
    """Tabu local search over single-link weight changes in ``[1, w_max]``.

    Starts from Default OSPF weights (clipped to the domain). Each iteration
    evaluates every single-link change and moves to the best non-tabu one,
    even if it worsens the objective; a move back to a link's previous weight
    stays tabu for ``tabu_tenure`` iterations unless it beats the best-ever
    configuration. After ``patience`` iterations without a new best, the
    search restarts from random weights (at most ``restarts`` times). Moves
    are ranked by (objective, link id, weight), so the run is deterministic.
    """
    rng = np.random.default_rng(config.seed)
    deadline = None if config.time_limit is None else time.monotonic() + config.time_limit
    n_links = topology.n_links

    current = np.clip(default_ospf_weights(topology), 1, config.w_max)
    current_key = _search_key(topology, tm, current)
    best, best_key = current.copy(), current_key
    evaluations = 1
    tabu: dict[tuple[int, int], int] = {}
    stagnation = 0
    restarts = 0

    iteration = 0
    while iteration < config.max_iterations:
        if deadline is not None and time.monotonic() > deadline:
            break
        move = None
        move_key = None
        for e in range(n_links):
            old = int(current[e])
            for value in range(1, config.w_max + 1):
                if value == old:
                    continue
                current[e] = value
                key = _search_key(topology, tm, current)
                evaluations += 1
                current[e] = old
                if tabu.get((e, value), -1) > iteration and not key < best_key:
                    continue
                if move_key is None or key < move_key:
                    move, move_key = (e, value), key
        iteration += 1
        if move is None:
            break

        e, value = move
        tabu[(e, int(current[e]))] = iteration + config.tabu_tenure
        current[e] = value
        current_key = move_key
        if current_key < best_key:
            best, best_key = current.copy(), current_key
            stagnation = 0
        else:
            stagnation += 1

        if stagnation >= config.patience:
            if restarts >= config.restarts:
                break
            restarts += 1
            stagnation = 0
            tabu.clear()
            current = rng.integers(1, config.w_max + 1, size=n_links)
            current_key = _search_key(topology, tm, current)
            evaluations += 1
            if current_key < best_key:
                best, best_key = current.copy(), current_key

    return SearchResult(best, best_key[0] if best_key else 0.0, iteration, evaluations, restarts)


def brute_force_optimum(
    topology: Topology, tm: TrafficMatrix, w_max: int, limit: int = BRUTE_FORCE_LIMIT
) -> tuple[np.ndarray, float]:
    """Exhaustive argmin of max utilization over all weight vectors in ``[1, w_max]^E``.

    Vectors are enumerated in lexicographic order (first link slowest) and
    ties keep the earliest. Shortest-path DAGs are computed in vectorized
    chunks; loads are evaluated once per distinct DAG, which is exact because
    ECMP loads are a function of the DAG alone.
    """
    n_links, n = topology.n_links, topology.n_nodes
    combos = w_max**n_links
    if combos > limit:
        raise InstanceTooLarge(f"{w_max}^{n_links} = {combos} weight vectors exceeds limit {limit}")

    src, dst = topology.src, topology.dst
    cache: dict[bytes, float] = {}
    best_w, best_u = None, math.inf
    chunk = 8192
    for start in range(0, combos, chunk):
        idx = np.arange(start, min(start + chunk, combos))
        digits = np.empty((idx.size, n_links), dtype=np.int64)
        rem = idx.copy()
        for e in range(n_links - 1, -1, -1):
            digits[:, e] = rem % w_max
            rem //= w_max
        w = (digits + 1).astype(np.float64)

        dist = np.full((idx.size, n, n), np.inf)
        dist[:, np.arange(n), np.arange(n)] = 0.0
        for e in range(n_links):
            dist[:, src[e], dst[e]] = np.minimum(dist[:, src[e], dst[e]], w[:, e])
        for k in range(n):
            np.minimum(dist, dist[:, :, k : k + 1] + dist[:, k : k + 1, :], out=dist)
        on_dag = (w[:, :, None] + dist[:, dst, :]) == dist[:, src, :]
        signatures = np.packbits(on_dag.reshape(idx.size, -1), axis=1)

        for row in range(idx.size):
            sig = signatures[row].tobytes()
            u = cache.get(sig)
            if u is None:
                u = max_utilization_for(topology, tm, w[row])
                cache[sig] = u
            if u < best_u:
                best_u, best_w = u, w[row].astype(np.int64)
    return best_w, best_u
