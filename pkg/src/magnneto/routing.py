"""OSPF shortest-path routing with fractional ECMP splitting.

Forwarding toward destination ``t`` follows the shortest-path DAG: a link
``e = (v, u)`` is a next hop of ``v`` iff ``w_e + d(u) == d(v)``. Each node
splits whatever it holds for ``t`` (local demand plus transit) equally over
its next hops. Next hops are sets, so Dijkstra tie-breaking never matters.
Weights are integers, so distance comparisons are exact in float64.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .topology import Topology, TrafficMatrix


class RoutingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShortestPathDag:
    dst: int
    dist: np.ndarray
    next_hops: tuple[tuple[int, ...], ...]


@dataclass(frozen=True, eq=False)
class RoutingState:
    load: np.ndarray
    utilization: np.ndarray
    max_utilization: float


def _weights(topology: Topology, weights) -> np.ndarray:
    if weights is None:
        return topology.weights.astype(np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (topology.n_links,):
        raise ValueError(f"expected {topology.n_links} weights, got shape {w.shape}")
    if np.any(w < 1):
        raise ValueError("link weights must be >= 1")
    return w


def shortest_path_dag(topology: Topology, dst: int, weights=None) -> ShortestPathDag:
    """Dijkstra from ``dst`` over reversed links, then the equal-cost next-hop sets."""
    w = _weights(topology, weights)
    dist = np.full(topology.n_nodes, np.inf)
    dist[dst] = 0.0
    heap = [(0.0, dst)]
    while heap:
        d, v = heapq.heappop(heap)
        if d > dist[v]:
            continue
        for e in topology.in_links[v]:
            u = topology.links[e].src
            nd = d + w[e]
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(heap, (nd, u))
    if not np.all(np.isfinite(dist)):
        missing = [int(v) for v in np.flatnonzero(~np.isfinite(dist))]
        raise RoutingError(f"nodes {missing} cannot reach destination {dst}")
    next_hops = tuple(
        tuple(e for e in topology.out_links[v] if w[e] + dist[topology.links[e].dst] == dist[v])
        for v in range(topology.n_nodes)
    )
    return ShortestPathDag(dst, dist, next_hops)


def all_pairs_distances(topology: Topology, weights=None) -> np.ndarray:
    """``D[v, t]`` = shortest weighted distance from ``v`` to ``t`` (Floyd-Warshall)."""
    w = _weights(topology, weights)
    n = topology.n_nodes
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    np.minimum.at(dist, (topology.src, topology.dst), w)
    for k in range(n):
        np.minimum(dist, dist[:, k : k + 1] + dist[k : k + 1, :], out=dist)
    if not np.all(np.isfinite(dist)):
        raise RoutingError("topology is not strongly connected")
    return dist


def ecmp_flows(topology: Topology, tm: TrafficMatrix, weights=None) -> np.ndarray:
    """Per-destination link flows, shape ``(E, N)``: ``flows[e, t]`` is the rate
    toward ``t`` carried by link ``e``."""
    if tm.n_nodes != topology.n_nodes:
        raise ValueError(f"traffic matrix has {tm.n_nodes} nodes, topology {topology.n_nodes}")
    w = _weights(topology, weights)
    n = topology.n_nodes
    src, dst = topology.src, topology.dst
    dist = all_pairs_distances(topology, w)
    out_inc, in_inc = topology.out_incidence, topology.in_incidence

    on_dag = (w[:, None] + dist[dst, :]) == dist[src, :]
    n_hops = out_inc @ on_dag
    share = np.where(on_dag, 1.0 / np.maximum(n_hops[src, :], 1.0), 0.0)

    # Sweep sources farthest-first: upstream nodes (strictly larger distance)
    # have smaller rank, so a node's inflow is final when its rank comes up.
    # Holdings are re-summed over all in-links in link-id order each round, so
    # the result depends only on the DAG, not on how distance ties are ranked.
    order = np.argsort(-dist, axis=0, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[:, None].repeat(n, axis=1), axis=0)
    src_rank = rank[src, :]

    demand = np.asarray(tm.demand, dtype=np.float64)
    flows = np.zeros((topology.n_links, n))
    for r in range(n - 1):
        held = demand + in_inc @ flows
        flows = np.where(src_rank == r, share * held[src, :], flows)
    return flows


def loads_from_flows(topology: Topology, flows: np.ndarray) -> RoutingState:
    load = flows.sum(axis=1)
    util = load / topology.capacity
    return RoutingState(load, util, float(util.max()) if util.size else 0.0)


def ecmp_loads(topology: Topology, tm: TrafficMatrix, weights=None) -> RoutingState:
    return loads_from_flows(topology, ecmp_flows(topology, tm, weights))


def max_utilization(state: RoutingState) -> float:
    return float(state.utilization.max()) if state.utilization.size else 0.0
