"""Evaluation and comparison drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import gnn
from .baselines import (
    BRUTE_FORCE_LIMIT,
    InstanceTooLarge,
    SearchConfig,
    brute_force_optimum,
    default_ospf_weights,
    local_search_weights,
    max_utilization_for,
)
from .env import EpisodeConfig
from .topology import Topology, TrafficMatrix
from .trainer import collect_episode

MODES = ("greedy", "sampled")


def episode_seed(seed: int, index: int) -> int:
    """Per-TM episode seed; greedy and sampled runs of one TM share the start."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class EvalRow:
    tm: str
    mode: str
    best_maxutil: float
    default_maxutil: float
    improvement_pct: float | None  # None when Default OSPF carries no load
    wall_time_s: float

    @property
    def flagged(self) -> bool:
        return self.improvement_pct is None


def improvement(u_default: float, u: float) -> float | None:
    if u_default == 0:
        return None
    return 100.0 * (u_default - u) / u_default


def run_policy(
    topology: Topology,
    tm: TrafficMatrix,
    policy: gnn.MpnnParams,
    seed: int,
    n_actions: int = 1,
    mode: str = "greedy",
    length_factor: float = 3.0,
    episode_length: int | None = None,
    graph: gnn.LinkGraph | None = None,
) -> tuple[np.ndarray, float, float]:
    """One evaluation episode; returns ``(best weights, best max-util, seconds)``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    config = EpisodeConfig(n_actions=n_actions, episode_length=episode_length, length_factor=length_factor, seed=seed)
    start = time.perf_counter()
    traj = collect_episode(topology, tm, policy, None, config, greedy=mode == "greedy", graph=graph)
    elapsed = time.perf_counter() - start
    return np.array(traj.best.weights), traj.best.max_utilization, elapsed


def evaluate_tm(
    topology: Topology,
    name: str,
    tm: TrafficMatrix,
    policy: gnn.MpnnParams,
    seed: int,
    index: int,
    n_actions: int = 1,
    modes=MODES,
    length_factor: float = 3.0,
    episode_length: int | None = None,
    graph: gnn.LinkGraph | None = None,
) -> list[EvalRow]:
    """Rows for the ``index``-th TM of an evaluation set (the index fixes the
    episode seed, so TMs can be evaluated in any order or process)."""
    u_default = max_utilization_for(topology, tm, default_ospf_weights(topology))
    rows = []
    for mode in modes:
        _, u, secs = run_policy(
            topology, tm, policy, episode_seed(seed, index), n_actions, mode, length_factor, episode_length, graph
        )
        rows.append(EvalRow(name, mode, u, u_default, improvement(u_default, u), secs))
    return rows


def evaluate_policy(
    topology: Topology,
    tms: list[tuple[str, TrafficMatrix]],
    policy: gnn.MpnnParams,
    seed: int,
    n_actions: int = 1,
    modes=MODES,
    length_factor: float = 3.0,
    episode_length: int | None = None,
) -> list[EvalRow]:
    graph = gnn.LinkGraph.from_topology(topology)
    rows = []
    for k, (name, tm) in enumerate(tms):
        rows.extend(evaluate_tm(topology, name, tm, policy, seed, k, n_actions, modes, length_factor, episode_length, graph))
    return rows


def summarize(rows: list[EvalRow]) -> tuple[list[dict], list[dict]]:
    """Aggregates (mean/median per mode over unflagged rows) and CDF points."""
    summary, cdf = [], []
    for mode in sorted({r.mode for r in rows}):
        ok = [r for r in rows if r.mode == mode and not r.flagged]
        imp = np.array([r.improvement_pct for r in ok], dtype=np.float64)
        util = np.array([r.best_maxutil for r in ok], dtype=np.float64)
        stats = {
            "count": float(len(ok)),
            "flagged": float(sum(1 for r in rows if r.mode == mode and r.flagged)),
            "mean_improvement_pct": float(imp.mean()) if len(ok) else float("nan"),
            "median_improvement_pct": float(np.median(imp)) if len(ok) else float("nan"),
            "mean_best_maxutil": float(util.mean()) if len(ok) else float("nan"),
            "median_best_maxutil": float(np.median(util)) if len(ok) else float("nan"),
        }
        summary.extend({"mode": mode, "statistic": k, "value": v} for k, v in stats.items())
        order = np.argsort(imp, kind="stable")
        for rank, i in enumerate(order, start=1):
            cdf.append({"mode": mode, "tm": ok[i].tm, "improvement_pct": float(imp[i]), "cdf": rank / len(ok)})
    return summary, cdf


@dataclass(frozen=True)
class CompareRow:
    tm: str
    optimizer: str
    max_utilization: float
    improvement_pct: float | None
    wall_time_s: float


def compare(
    topology: Topology,
    tms: list[tuple[str, TrafficMatrix]],
    policy: gnn.MpnnParams | None,
    seed: int,
    search: SearchConfig = SearchConfig(),
    brute_force_w_max: int = 4,
    brute_force_limit: int = 10**5,
    n_actions: int = 1,
) -> list[CompareRow]:
    """Default OSPF, local search, the policy (greedy), and brute force when
    ``brute_force_w_max ** E`` is within ``brute_force_limit``."""
    if brute_force_limit > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute_force_limit may not exceed {BRUTE_FORCE_LIMIT}")
    graph = gnn.LinkGraph.from_topology(topology)
    rows = []
    for k, (name, tm) in enumerate(tms):
        start = time.perf_counter()
        u_default = max_utilization_for(topology, tm, default_ospf_weights(topology))
        rows.append(CompareRow(name, "default_ospf", u_default, improvement(u_default, u_default), time.perf_counter() - start))

        start = time.perf_counter()
        ls = local_search_weights(topology, tm, search)
        rows.append(CompareRow(name, "local_search", ls.max_utilization, improvement(u_default, ls.max_utilization), time.perf_counter() - start))

        if policy is not None:
            _, u, secs = run_policy(topology, tm, policy, episode_seed(seed, k), n_actions, "greedy", graph=graph)
            rows.append(CompareRow(name, "magnneto", u, improvement(u_default, u), secs))

        start = time.perf_counter()
        try:
            _, u_opt = brute_force_optimum(topology, tm, brute_force_w_max, brute_force_limit)
        except InstanceTooLarge:
            continue
        rows.append(CompareRow(name, "brute_force", u_opt, improvement(u_default, u_opt), time.perf_counter() - start))
    return rows
