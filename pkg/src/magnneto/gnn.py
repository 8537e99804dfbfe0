"""Link-level message-passing network shared by the actor and the critic.

Every directed link is an agent with a 16-dim hidden state. Per message-passing
step, link ``e`` runs the message MLP on ``(h_e, h_i)`` for each ``i`` in its
neighborhood (links leaving ``e``'s head node), aggregates the messages with
element-wise min and max (concatenated, 32 dims), and feeds ``(h_e, M_e)`` to
the update MLP. The actor reads one logit per link from ``h_e^K``; the critic
reads one value from the mean of all final hidden states.

Arrays carry a leading batch axis ``B`` of states over the same topology, so a
PPO minibatch is one forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Mlp
from .topology import Topology

HIDDEN_DIM = 16
MLP_HIDDEN = 32
MP_STEPS = 4
WEIGHT_SCALE = 0.1


def neighborhood(topology: Topology, e: int) -> tuple[int, ...]:
    """Links whose source is the destination of ``e`` (includes ``e``'s reverse)."""
    return topology.out_links[topology.links[e].dst]


@dataclass(frozen=True)
class LinkGraph:
    """Index arrays for message passing over one topology.

    Message pairs ``(pair_self[p], pair_nbr[p])`` are sorted by receiving link
    then neighbor id; ``slot[p]`` is the pair's column in the padded
    ``(E, max_degree)`` aggregation layout.
    """

    n_links: int
    pair_self: np.ndarray
    pair_nbr: np.ndarray
    slot: np.ndarray
    max_degree: int
    has_neighbors: np.ndarray
    valid: np.ndarray  # (E, max_degree) occupied slots
    self_scatter: np.ndarray  # (E, P) one-hot
    nbr_scatter: np.ndarray  # (E, P) one-hot

    @classmethod
    def from_topology(cls, topology: Topology) -> "LinkGraph":
        pair_self, pair_nbr, slot = [], [], []
        for e in range(topology.n_links):
            for j, i in enumerate(sorted(neighborhood(topology, e))):
                pair_self.append(e)
                pair_nbr.append(i)
                slot.append(j)
        n, p = topology.n_links, len(pair_self)
        pair_self = np.array(pair_self, dtype=np.int64)
        pair_nbr = np.array(pair_nbr, dtype=np.int64)
        self_scatter = np.zeros((n, p))
        self_scatter[pair_self, np.arange(p)] = 1.0
        nbr_scatter = np.zeros((n, p))
        nbr_scatter[pair_nbr, np.arange(p)] = 1.0
        degree = np.bincount(pair_self, minlength=n)
        max_degree = max(int(degree.max()) if n else 0, 1)
        valid = np.arange(max_degree)[None, :] < degree[:, None]
        return cls(
            n_links=n,
            pair_self=pair_self,
            pair_nbr=pair_nbr,
            slot=np.array(slot, dtype=np.int64),
            max_degree=max_degree,
            has_neighbors=degree > 0,
            valid=valid,
            self_scatter=self_scatter,
            nbr_scatter=nbr_scatter,
        )


def as_graph(graph_or_topology) -> LinkGraph:
    if isinstance(graph_or_topology, LinkGraph):
        return graph_or_topology
    return LinkGraph.from_topology(graph_or_topology)


@dataclass
class MpnnParams:
    message: Mlp
    update: Mlp
    readout: Mlp

    @classmethod
    def create(cls, rng: np.random.Generator):
        return cls(
            message=Mlp.create([2 * HIDDEN_DIM, MLP_HIDDEN, HIDDEN_DIM], rng),
            update=Mlp.create([3 * HIDDEN_DIM, MLP_HIDDEN, HIDDEN_DIM], rng),
            readout=Mlp.create([HIDDEN_DIM, MLP_HIDDEN, 1], rng),
        )

    def modules(self) -> dict[str, Mlp]:
        return {"message": self.message, "update": self.update, "readout": self.readout}

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mlp in self.modules().items():
            out.update(mlp.named_params(name))
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_params().items():
            src = tensors.get(prefix + name)
            if src is None:
                raise KeyError(f"checkpoint is missing tensor {prefix + name!r}")
            if src.shape != p.shape:
                raise ValueError(f"tensor {prefix + name!r}: shape {src.shape}, expected {p.shape}")
            p[...] = src

    def copy(self):
        return type(self)(self.message.copy(), self.update.copy(), self.readout.copy())


class PolicyParams(MpnnParams):
    """Actor: per-link readout to a logit."""


class CriticParams(MpnnParams):
    """Critic: readout on the mean final hidden state to a scalar value."""


def init_hidden(weight, utilization) -> np.ndarray:
    """``[0.1 * weight, utilization, 0, ..., 0]``; broadcasts over link/batch axes."""
    weight = np.asarray(weight, dtype=np.float64)
    utilization = np.asarray(utilization, dtype=np.float64)
    shape = np.broadcast_shapes(weight.shape, utilization.shape)
    h = np.zeros((*shape, HIDDEN_DIM))
    h[..., 0] = WEIGHT_SCALE * weight
    h[..., 1] = utilization
    return h


def _as_batch(weights, utilizations):
    w = np.asarray(weights, dtype=np.float64)
    u = np.asarray(utilizations, dtype=np.float64)
    single = w.ndim == 1
    if single:
        w, u = w[None], u[None]
    return w, u, single


def message_passing(params: MpnnParams, graph, h0: np.ndarray, steps: int = MP_STEPS):
    """Run ``steps`` synchronous rounds from ``h0`` (shape ``(B, E, 16)``).

    Returns ``(h_K, caches)``.
    """
    if steps < 1:
        raise ValueError("need at least one message-passing step")
    g = as_graph(graph)
    b = h0.shape[0]
    has = g.has_neighbors[None, :, None]
    h = h0
    caches = []
    for _ in range(steps):
        x = np.concatenate([h[:, g.pair_self], h[:, g.pair_nbr]], axis=-1)
        msg, msg_cache = params.message.forward(x)

        # Ties resolve to the lowest neighbor id (argmin/argmax take the first).
        padded = np.full((b, g.n_links, g.max_degree, HIDDEN_DIM), np.inf)
        padded[:, g.pair_self, g.slot] = msg
        arg_min = padded.argmin(axis=2)
        agg_min = np.take_along_axis(padded, arg_min[:, :, None], axis=2)[:, :, 0]
        padded = np.where(g.valid[None, :, :, None], padded, -np.inf)
        arg_max = padded.argmax(axis=2)
        agg_max = np.take_along_axis(padded, arg_max[:, :, None], axis=2)[:, :, 0]
        agg_min = np.where(has, agg_min, 0.0)
        agg_max = np.where(has, agg_max, 0.0)

        h_next, upd_cache = params.update.forward(np.concatenate([h, agg_min, agg_max], axis=-1))
        caches.append((msg_cache, upd_cache, arg_min, arg_max))
        h = h_next
    return h, caches


def _message_passing_backward(params: MpnnParams, graph: LinkGraph, caches, g_h: np.ndarray):
    grads = {name: [np.zeros_like(p) for p in mlp.params()] for name, mlp in
             (("message", params.message), ("update", params.update))}
    b = g_h.shape[0]
    has = graph.has_neighbors[None, :, None]
    for msg_cache, upd_cache, arg_min, arg_max in reversed(caches):
        upd_grads, g_in = params.update.backward(upd_cache, g_h)
        for acc, gp in zip(grads["update"], upd_grads):
            acc += gp
        g_h = g_in[..., :HIDDEN_DIM].copy()
        g_min = np.where(has, g_in[..., HIDDEN_DIM : 2 * HIDDEN_DIM], 0.0)
        g_max = np.where(has, g_in[..., 2 * HIDDEN_DIM :], 0.0)

        g_pad = np.zeros((b, graph.n_links, graph.max_degree, HIDDEN_DIM))
        np.put_along_axis(g_pad, arg_min[:, :, None], g_min[:, :, None], axis=2)
        g_pad_max = np.zeros_like(g_pad)
        np.put_along_axis(g_pad_max, arg_max[:, :, None], g_max[:, :, None], axis=2)
        g_pad += g_pad_max
        g_msg = g_pad[:, graph.pair_self, graph.slot]

        msg_grads, g_x = params.message.backward(msg_cache, g_msg)
        for acc, gp in zip(grads["message"], msg_grads):
            acc += gp
        g_h += np.matmul(graph.self_scatter, g_x[..., :HIDDEN_DIM])
        g_h += np.matmul(graph.nbr_scatter, g_x[..., HIDDEN_DIM:])
    return grads, g_h


def _named(params: MpnnParams, grads_by_module: dict[str, list[np.ndarray]]) -> dict[str, np.ndarray]:
    out = {}
    for name, mlp in params.modules().items():
        for (pname, _), g in zip(mlp.named_params(name).items(), grads_by_module[name]):
            out[pname] = g
    return out


def actor_forward(params: MpnnParams, graph, weights, utilizations, steps: int = MP_STEPS):
    """Batched logits ``(B, E)`` plus a cache for :func:`actor_backward`."""
    g = as_graph(graph)
    w, u, _ = _as_batch(weights, utilizations)
    h, caches = message_passing(params, g, init_hidden(w, u), steps)
    out, ro_cache = params.readout.forward(h)
    return out[..., 0], (g, caches, ro_cache)


def actor_backward(params: MpnnParams, cache, g_logits: np.ndarray) -> dict[str, np.ndarray]:
    g, caches, ro_cache = cache
    ro_grads, g_h = params.readout.backward(ro_cache, np.asarray(g_logits)[..., None])
    grads, _ = _message_passing_backward(params, g, caches, g_h)
    grads["readout"] = ro_grads
    return _named(params, grads)


def critic_forward(params: MpnnParams, graph, weights, utilizations, steps: int = MP_STEPS):
    """Batched values ``(B,)`` plus a cache for :func:`critic_backward`."""
    g = as_graph(graph)
    w, u, _ = _as_batch(weights, utilizations)
    h, caches = message_passing(params, g, init_hidden(w, u), steps)
    pooled = h.mean(axis=1)
    out, ro_cache = params.readout.forward(pooled)
    return out[:, 0], (g, caches, ro_cache, h.shape)


def critic_backward(params: MpnnParams, cache, g_values: np.ndarray) -> dict[str, np.ndarray]:
    g, caches, ro_cache, h_shape = cache
    ro_grads, g_pooled = params.readout.backward(ro_cache, np.asarray(g_values)[:, None])
    g_h = np.broadcast_to(g_pooled[:, None, :] / h_shape[1], h_shape).copy()
    grads, _ = _message_passing_backward(params, g, caches, g_h)
    grads["readout"] = ro_grads
    return _named(params, grads)


def actor_logits(params: MpnnParams, graph, weights, utilizations, steps: int = MP_STEPS) -> np.ndarray:
    """Per-link logits for one state (1-D inputs) or a batch (2-D inputs)."""
    logits, _ = actor_forward(params, graph, weights, utilizations, steps)
    return logits[0] if np.ndim(weights) == 1 else logits


def critic_value(params: MpnnParams, graph, weights, utilizations, steps: int = MP_STEPS):
    values, _ = critic_forward(params, graph, weights, utilizations, steps)
    return float(values[0]) if np.ndim(weights) == 1 else values
