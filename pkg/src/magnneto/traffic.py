"""Synthetic traffic matrices normalized against Default OSPF.

Both generators draw a raw matrix from the seed and then rescale it by one
scalar so that routing it with Default OSPF weights yields a maximum link
utilization of exactly ``target_util`` (ECMP loads are linear in demand).
"""

from __future__ import annotations

import numpy as np

from .baselines import default_ospf_weights
from .routing import ecmp_loads
from .topology import Topology, TrafficMatrix

DEFAULT_TARGET_UTIL = 0.75


def normalize_to_default_ospf(topology: Topology, raw: np.ndarray, target_util: float) -> TrafficMatrix:
    if not target_util > 0:
        raise ValueError(f"target_util must be positive, got {target_util}")
    tm = TrafficMatrix(raw)
    u = ecmp_loads(topology, tm, default_ospf_weights(topology)).max_utilization
    if u == 0:
        raise ValueError("raw traffic matrix carries no load")
    return tm.scaled(target_util / u)


def gen_uniform_tm(topology: Topology, seed: int, target_util: float = DEFAULT_TARGET_UTIL) -> TrafficMatrix:
    """Off-diagonal demands i.i.d. uniform on (0, 1], then normalized."""
    n = topology.n_nodes
    rng = np.random.default_rng(seed)
    raw = 1.0 - rng.random((n, n))
    np.fill_diagonal(raw, 0.0)
    return normalize_to_default_ospf(topology, raw, target_util)


def gravity_masses(n_nodes: int, seed: int) -> np.ndarray:
    """Node masses of the gravity model: i.i.d. unit-rate exponential."""
    return np.random.default_rng(seed).exponential(1.0, size=n_nodes)


def gen_gravity_tm(
    topology: Topology,
    seed: int,
    target_util: float = DEFAULT_TARGET_UTIL,
    masses: np.ndarray | None = None,
) -> TrafficMatrix:
    """Gravity model: ``demand[i, j]`` proportional to ``m_i * m_j`` for ``i != j``.

    ``masses`` overrides the seeded draw (used to pin the model in tests).
    """
    if masses is None:
        masses = gravity_masses(topology.n_nodes, seed)
    masses = np.asarray(masses, dtype=np.float64)
    if masses.shape != (topology.n_nodes,) or np.any(masses < 0):
        raise ValueError("masses must be a nonnegative vector with one entry per node")
    raw = np.outer(masses, masses)
    np.fill_diagonal(raw, 0.0)
    return normalize_to_default_ospf(topology, raw, target_util)


GENERATORS = {"uniform": gen_uniform_tm, "gravity": gen_gravity_tm}
