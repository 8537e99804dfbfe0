"""Network data model: directed multigraph topologies and traffic matrices.

File formats (ASCII, whitespace separated, ``#`` starts a comment)::

    NODES <n>
    <id> <label>            # n lines, ids 0..n-1
    EDGES <m> <directed|undirected>
    <edge-id> <src> <dst> <capacity> <weight>   # m lines, edge ids 0..m-1

    DEMANDS <k>
    <src> <dst> <rate>      # k lines; duplicate pairs are summed

An undirected edge line with file id ``i`` expands into two directed links,
``2i`` (src->dst) and ``2i+1`` (dst->src), sharing capacity and weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Malformed or invalid topology / traffic-matrix input.

    ``line`` is the 1-based line number of the offending line, or ``None``
    for whole-file conditions such as a disconnected graph.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        self.reason = message
        super().__init__(message if line is None else f"{message} at line {line}")


@dataclass(frozen=True)
class DirectedLink:
    id: int
    src: int
    dst: int
    capacity: float
    weight: int

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError(f"link {self.id}: self-loop on node {self.src}")
        if not self.capacity > 0 or not math.isfinite(self.capacity):
            raise ValueError(f"link {self.id}: capacity must be positive, got {self.capacity}")
        if int(self.weight) != self.weight or self.weight < 1:
            raise ValueError(f"link {self.id}: weight must be an integer >= 1, got {self.weight}")


@dataclass(frozen=True, eq=False)
class Topology:
    """Immutable directed multigraph with per-link capacity and OSPF weight."""

    labels: tuple[str, ...]
    links: tuple[DirectedLink, ...]
    name: str = field(default="", compare=False)

    def __post_init__(self):
        n = len(self.labels)
        for i, link in enumerate(self.links):
            if link.id != i:
                raise ValueError(f"link ids must be dense 0..E-1; position {i} holds id {link.id}")
            if not (0 <= link.src < n and 0 <= link.dst < n):
                raise ValueError(f"link {i} references a node outside 0..{n - 1}")

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return self.labels == other.labels and self.links == other.links

    def __hash__(self):
        return hash((self.labels, self.links))

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @cached_property
    def src(self) -> np.ndarray:
        return _frozen(np.array([l.src for l in self.links], dtype=np.int64))

    @cached_property
    def dst(self) -> np.ndarray:
        return _frozen(np.array([l.dst for l in self.links], dtype=np.int64))

    @cached_property
    def capacity(self) -> np.ndarray:
        return _frozen(np.array([l.capacity for l in self.links], dtype=np.float64))

    @cached_property
    def weights(self) -> np.ndarray:
        return _frozen(np.array([l.weight for l in self.links], dtype=np.int64))

    @cached_property
    def out_links(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for link in self.links:
            out[link.src].append(link.id)
        return tuple(tuple(x) for x in out)

    @cached_property
    def in_links(self) -> tuple[tuple[int, ...], ...]:
        inc: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for link in self.links:
            inc[link.dst].append(link.id)
        return tuple(tuple(x) for x in inc)

    @cached_property
    def out_incidence(self) -> np.ndarray:
        """(N, E) one-hot matrix: ``[v, e] = 1`` iff link ``e`` leaves ``v``."""
        inc = np.zeros((self.n_nodes, self.n_links))
        inc[self.src, np.arange(self.n_links)] = 1.0
        return _frozen(inc)

    @cached_property
    def in_incidence(self) -> np.ndarray:
        inc = np.zeros((self.n_nodes, self.n_links))
        inc[self.dst, np.arange(self.n_links)] = 1.0
        return _frozen(inc)

    def is_strongly_connected(self) -> bool:
        if self.n_nodes == 0:
            return False
        return _reaches_all(0, self.out_links, self.dst) and _reaches_all(0, self.in_links, self.src)

    def with_weights(self, weights) -> "Topology":
        links = tuple(
            DirectedLink(l.id, l.src, l.dst, l.capacity, int(w)) for l, w in zip(self.links, weights)
        )
        return Topology(self.labels, links, self.name)

    def relabel(self, node_perm, link_perm) -> "Topology":
        """Return an isomorphic copy: old node ``v`` becomes ``node_perm[v]``,
        old link ``e`` becomes ``link_perm[e]``."""
        labels = [""] * self.n_nodes
        for v, label in enumerate(self.labels):
            labels[node_perm[v]] = label
        links: list[DirectedLink | None] = [None] * self.n_links
        for l in self.links:
            new_id = int(link_perm[l.id])
            links[new_id] = DirectedLink(
                new_id, int(node_perm[l.src]), int(node_perm[l.dst]), l.capacity, l.weight
            )
        return Topology(tuple(labels), tuple(links), self.name)


@dataclass(frozen=True, eq=False)
class TrafficMatrix:
    """N x N demand rates, same units as link capacity; zero diagonal."""

    demand: np.ndarray

    def __post_init__(self):
        d = np.array(self.demand, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError(f"demand must be square, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("demand entries must be finite and nonnegative")
        if np.any(np.diag(d) != 0):
            raise ValueError("demand diagonal must be zero")
        object.__setattr__(self, "demand", _frozen(d))

    @property
    def n_nodes(self) -> int:
        return self.demand.shape[0]

    def total(self) -> float:
        return float(self.demand.sum())

    def scaled(self, factor: float) -> "TrafficMatrix":
        return TrafficMatrix(self.demand * factor)

    def __eq__(self, other):
        if not isinstance(other, TrafficMatrix):
            return NotImplemented
        return np.array_equal(self.demand, other.demand)

    def __hash__(self):
        return hash(self.demand.tobytes())


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _reaches_all(start: int, adjacency, heads) -> bool:
    seen = {start}
    stack = [start]
    while stack:
        v = stack.pop()
        for e in adjacency[v]:
            u = int(heads[e])
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return len(seen) == len(adjacency)


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].split()
        if body:
            yield lineno, body


def _int(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"{what} must be an integer, got {tok!r}", lineno) from None


def _float(tok: str, lineno: int, what: str) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise ParseError(f"{what} must be a number, got {tok!r}", lineno) from None
    if not math.isfinite(val):
        raise ParseError(f"{what} must be finite, got {tok!r}", lineno)
    return val


def parse_topology(text: str, name: str = "") -> Topology:
    """Parse topology-file content into a validated, strongly connected Topology."""
    lines = list(_content_lines(text))
    pos = 0

    def take(expected_key: str):
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file, expected {expected_key} section")
        item = lines[pos]
        pos += 1
        return item

    lineno, toks = take("NODES")
    if toks[0] != "NODES" or len(toks) != 2:
        raise ParseError("expected 'NODES <n>'", lineno)
    n = _int(toks[1], lineno, "node count")
    if n < 1:
        raise ParseError("node count must be >= 1", lineno)

    labels: list[str | None] = [None] * n
    for _ in range(n):
        lineno, toks = take("node line")
        if len(toks) > 2:
            raise ParseError("node line must be '<id> [label]'", lineno)
        node = _int(toks[0], lineno, "node id")
        if not 0 <= node < n:
            raise ParseError(f"node id {node} outside 0..{n - 1}", lineno)
        if labels[node] is not None:
            raise ParseError(f"duplicate node id {node}", lineno)
        labels[node] = toks[1] if len(toks) == 2 else str(node)

    lineno, toks = take("EDGES")
    if toks[0] != "EDGES" or len(toks) != 3 or toks[2] not in ("directed", "undirected"):
        raise ParseError("expected 'EDGES <m> <directed|undirected>'", lineno)
    m = _int(toks[1], lineno, "edge count")
    if m < 0:
        raise ParseError("edge count must be >= 0", lineno)
    undirected = toks[2] == "undirected"

    rows: list[tuple[int, int, int, float, int] | None] = [None] * m
    for _ in range(m):
        lineno, toks = take("edge line")
        if len(toks) != 5:
            raise ParseError("edge line must be '<edge-id> <src> <dst> <capacity> <weight>'", lineno)
        eid = _int(toks[0], lineno, "edge id")
        src = _int(toks[1], lineno, "source node")
        dst = _int(toks[2], lineno, "destination node")
        cap = _float(toks[3], lineno, "capacity")
        weight = _int(toks[4], lineno, "weight")
        if not 0 <= eid < m:
            raise ParseError(f"edge id {eid} outside 0..{m - 1}", lineno)
        if rows[eid] is not None:
            raise ParseError(f"duplicate edge id {eid}", lineno)
        for node in (src, dst):
            if not 0 <= node < n:
                raise ParseError(f"unknown node {node}", lineno)
        if src == dst:
            raise ParseError("self-loop", lineno)
        if cap <= 0:
            raise ParseError(f"capacity must be positive, got {toks[3]}", lineno)
        if weight < 1:
            raise ParseError(f"weight must be >= 1, got {weight}", lineno)
        rows[eid] = (lineno, src, dst, cap, weight)

    if pos < len(lines):
        raise ParseError("unexpected trailing content", lines[pos][0])

    links: list[DirectedLink] = []
    for _, src, dst, cap, weight in rows:  # type: ignore[misc]
        links.append(DirectedLink(len(links), src, dst, cap, weight))
        if undirected:
            links.append(DirectedLink(len(links), dst, src, cap, weight))

    topo = Topology(tuple(labels), tuple(links), name)  # type: ignore[arg-type]
    if not topo.is_strongly_connected():
        raise ParseError("graph is not strongly connected")
    return topo


def serialize_topology(topo: Topology) -> str:
    out = [f"NODES {topo.n_nodes}"]
    for i, label in enumerate(topo.labels):
        if not label or any(c.isspace() for c in label) or "#" in label:
            raise ValueError(f"node label {label!r} cannot be serialized")
        out.append(f"{i} {label}")
    out.append(f"EDGES {topo.n_links} directed")
    for l in topo.links:
        out.append(f"{l.id} {l.src} {l.dst} {float(l.capacity)!r} {int(l.weight)}")
    return "\n".join(out) + "\n"


def parse_traffic(text: str, n_nodes: int) -> TrafficMatrix:
    """Parse a demand list; unlisted pairs are 0, duplicate pairs are summed."""
    demand = np.zeros((n_nodes, n_nodes))
    lines = list(_content_lines(text))
    if not lines:
        raise ParseError("expected 'DEMANDS <k>'")
    lineno, toks = lines[0]
    if toks[0] != "DEMANDS" or len(toks) != 2:
        raise ParseError("expected 'DEMANDS <k>'", lineno)
    k = _int(toks[1], lineno, "demand count")
    if k < 0 or len(lines) - 1 != k:
        raise ParseError(f"header announces {k} demands, file has {len(lines) - 1}", lineno)
    for lineno, toks in lines[1:]:
        if len(toks) != 3:
            raise ParseError("demand line must be '<src> <dst> <rate>'", lineno)
        src = _int(toks[0], lineno, "source node")
        dst = _int(toks[1], lineno, "destination node")
        rate = _float(toks[2], lineno, "rate")
        for node in (src, dst):
            if not 0 <= node < n_nodes:
                raise ParseError(f"node id {node} outside 0..{n_nodes - 1}", lineno)
        if rate < 0:
            raise ParseError(f"negative rate {toks[2]}", lineno)
        if src != dst:
            demand[src, dst] += rate
    return TrafficMatrix(demand)


def serialize_traffic(tm: TrafficMatrix) -> str:
    rows = [
        f"{i} {j} {float(tm.demand[i, j])!r}"
        for i in range(tm.n_nodes)
        for j in range(tm.n_nodes)
        if tm.demand[i, j] != 0
    ]
    return "\n".join([f"DEMANDS {len(rows)}", *rows]) + "\n"


def load_topology(path: str | Path) -> Topology:
    path = Path(path)
    return parse_topology(path.read_text(encoding="ascii"), name=path.stem)


def load_traffic(path: str | Path, n_nodes: int) -> TrafficMatrix:
    return parse_traffic(Path(path).read_text(encoding="ascii"), n_nodes)


def fixture_path(name: str) -> Path:
    """Path of a bundled topology fixture, e.g. ``fixture_path("nsfnet")``."""
    return Path(str(resources.files("magnneto") / "fixtures" / f"{name}.topo"))


def load_fixture(name: str) -> Topology:
    return load_topology(fixture_path(name))
