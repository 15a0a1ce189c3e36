"""Message-passing scorer over small feature graphs, with exact gradients.

Each candidate feature association becomes a graph whose nodes carry an
appearance descriptor plus normalized pixel coordinates. Nodes exchange
messages for a fixed number of synchronous rounds, update through a GRU
cell, and a readout MLP maps the summed final node states to one scalar
relevance score. Forward and reverse passes are written out by hand in
numpy; the reverse pass is checked against finite differences in the test
suite rather than relying on an autodiff framework.

All functions are pure and single-threaded, so results do not depend on
worker count or call order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .geometry import KernelKind

DEFAULT_HIDDEN = 32
DEFAULT_ROUNDS = 3

# Node counts for graphs built from production candidates. Entities are
# a point (1 node), a segment (2 endpoint nodes) or a conic (5 sample
# nodes); p2c therefore always has 6 nodes but anything >= 5 is legal.
_EXACT_NODE_COUNT = {KernelKind.P2P: 2, KernelKind.P2L: 3, KernelKind.L2L: 4}
_MIN_NODE_COUNT = {KernelKind.P2C: 5}


class GraphStructureError(ValueError):
    """Graph does not satisfy the structural rules of its kernel kind."""


@dataclass(frozen=True)
class KernelGraph:
    """One candidate association instance.

    nodes:    (n, F) float array, row i encodes feature i.
    edges:    (E, 2) int array of directed (src, dst) pairs.
    grouping: node indices partitioned by geometric entity.
    """

    kernel_kind: KernelKind
    nodes: np.ndarray
    edges: np.ndarray
    grouping: tuple[tuple[int, ...], ...]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]


def graph_from_entities(
    kind: KernelKind, entities: Sequence[np.ndarray], strict: bool = True
) -> KernelGraph:
    """Assemble a kernel graph from per-entity node encodings.

    Edges run in both directions between every pair of nodes that belong
    to different entities; nodes inside one entity share no edge, so the
    wiring itself encodes how features are grouped into primitives.

    With ``strict`` the node count must match the kernel kind (2 for p2p,
    3 for p2l, 4 for l2l, >= 5 for p2c). Non-strict graphs support
    structure experiments such as regrouping the same features.
    """
    if not entities or any(e.ndim != 2 or e.shape[0] == 0 for e in entities):
        raise GraphStructureError("each entity needs at least one encoded node")
    widths = {e.shape[1] for e in entities}
    if len(widths) != 1:
        raise GraphStructureError(f"inconsistent node encoding widths: {sorted(widths)}")
    nodes = np.vstack([np.asarray(e, dtype=float) for e in entities])
    grouping: list[tuple[int, ...]] = []
    start = 0
    for ent in entities:
        grouping.append(tuple(range(start, start + ent.shape[0])))
        start += ent.shape[0]
    edges = []
    for gi in range(len(grouping)):
        for gj in range(len(grouping)):
            if gi == gj:
                continue
            for i in grouping[gi]:
                for j in grouping[gj]:
                    edges.append((i, j))
    edges_arr = np.array(sorted(edges), dtype=int).reshape(-1, 2)
    if strict:
        n = nodes.shape[0]
        if kind in _EXACT_NODE_COUNT and n != _EXACT_NODE_COUNT[kind]:
            raise GraphStructureError(
                f"{kind.value} graph needs {_EXACT_NODE_COUNT[kind]} nodes, got {n}"
            )
        if kind in _MIN_NODE_COUNT and n < _MIN_NODE_COUNT[kind]:
            raise GraphStructureError(
                f"{kind.value} graph needs at least {_MIN_NODE_COUNT[kind]} nodes, got {n}"
            )
    return KernelGraph(kind, nodes, edges_arr, tuple(grouping))


@dataclass
class NetParams:
    """All trainable arrays, grouped by role.

    w_in/b_in:      input embedding, tanh(W x + b).
    w_msg*/b_msg*:  two-layer message MLP on concat(h_src, h_dst).
    w_z, w_r, w_h:  GRU update/reset/candidate gates on concat(h, m).
    w_read*/b_read*: readout MLP on the summed final node states.
    """

    w_in: np.ndarray
    b_in: np.ndarray
    w_msg1: np.ndarray
    b_msg1: np.ndarray
    w_msg2: np.ndarray
    b_msg2: np.ndarray
    w_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    b_h: np.ndarray
    w_read1: np.ndarray
    b_read1: np.ndarray
    w_read2: np.ndarray
    b_read2: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w_in.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_in.shape[1]

    @classmethod
    def zeros(cls, hidden: int, input_dim: int) -> "NetParams":
        h, f = hidden, input_dim
        return cls(
            w_in=np.zeros((h, f)),
            b_in=np.zeros(h),
            w_msg1=np.zeros((h, 2 * h)),
            b_msg1=np.zeros(h),
            w_msg2=np.zeros((h, h)),
            b_msg2=np.zeros(h),
            w_z=np.zeros((h, 2 * h)),
            b_z=np.zeros(h),
            w_r=np.zeros((h, 2 * h)),
            b_r=np.zeros(h),
            w_h=np.zeros((h, 2 * h)),
            b_h=np.zeros(h),
            w_read1=np.zeros((h, h)),
            b_read1=np.zeros(h),
            w_read2=np.zeros((1, h)),
            b_read2=np.zeros(1),
        )

    @classmethod
    def init_random(
        cls, hidden: int, input_dim: int, rng: np.random.Generator
    ) -> "NetParams":
        """Fan-in scaled normal weights, zero biases."""
        params = cls.zeros(hidden, input_dim)
        for name, arr in params.blocks().items():
            if arr.ndim == 2:
                arr[...] = rng.normal(0.0, 1.0, arr.shape) / np.sqrt(arr.shape[1])
        return params

    def blocks(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "NetParams":
        return NetParams(**{k: v.copy() for k, v in self.blocks().items()})

    def add_scaled(self, other: "NetParams", scale: float) -> None:
        """In-place self += scale * other, used for gradient steps."""
        for name, arr in self.blocks().items():
            arr += scale * getattr(other, name)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.blocks().values()])

    def to_json_dict(self) -> dict:
        return {
            name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
            for name, arr in self.blocks().items()
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "NetParams":
        kwargs = {}
        for f in fields(cls):
            entry = payload[f.name]
            kwargs[f.name] = np.array(entry["data"], dtype=float).reshape(entry["shape"])
        return cls(**kwargs)


def save_params(params: NetParams, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_json_dict(), fh)


def load_params(path: str) -> NetParams:
    with open(path) as fh:
        return NetParams.from_json_dict(json.load(fh))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# Single-sample building blocks. The batched engine below repeats the
# same formulas; tests assert that composing these by hand reproduces
# forward() exactly.


def embed(encoding: np.ndarray, params: NetParams) -> np.ndarray:
    """Initial node state h0 = tanh(W_in x + b_in)."""
    return np.tanh(params.w_in @ np.asarray(encoding, dtype=float) + params.b_in)


def message(h_src: np.ndarray, h_dst: np.ndarray, params: NetParams) -> np.ndarray:
    """Directed message from src to dst: MLP on the concatenated states."""
    cat = np.concatenate([h_src, h_dst])
    a1 = np.maximum(params.w_msg1 @ cat + params.b_msg1, 0.0)
    return params.w_msg2 @ a1 + params.b_msg2


def aggregate(messages: np.ndarray) -> np.ndarray:
    """Elementwise sum of incoming messages, (k, H) -> (H,); empty sums to 0."""
    msgs = np.asarray(messages, dtype=float)
    if msgs.ndim != 2:
        raise ValueError(f"expected a (k, H) message stack, got shape {msgs.shape}")
    return msgs.sum(axis=0)


def gru_update(h: np.ndarray, m: np.ndarray, params: NetParams) -> np.ndarray:
    """Gated state update; with zero aggregate and zero-ish gates h carries over."""
    cat = np.concatenate([h, m])
    z = _sigmoid(params.w_z @ cat + params.b_z)
    r = _sigmoid(params.w_r @ cat + params.b_r)
    h_cand = np.tanh(params.w_h @ np.concatenate([r * h, m]) + params.b_h)
    return (1.0 - z) * h + z * h_cand


@dataclass
class _StepCache:
    h_prev: np.ndarray
    cat: np.ndarray
    z1_mask: np.ndarray
    a1: np.ndarray
    agg: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_cand: np.ndarray


@dataclass
class _ForwardCache:
    nodes: np.ndarray
    edges: np.ndarray
    h0: np.ndarray
    steps: list[_StepCache]
    pooled: np.ndarray
    read_act: np.ndarray


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x @ w.T + b with the batch dims flattened into one GEMM."""
    lead = x.shape[:-1]
    out = x.reshape(-1, x.shape[-1]) @ w.T
    out += b
    return out.reshape(*lead, w.shape[0])


def _weight_grad(d_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient for w in _affine, summed over all batch dims."""
    return d_out.reshape(-1, d_out.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def _apply_linear(d_out: np.ndarray, w: np.ndarray) -> np.ndarray:
    lead = d_out.shape[:-1]
    return (d_out.reshape(-1, d_out.shape[-1]) @ w).reshape(*lead, w.shape[1])


def forward_batch(
    nodes: np.ndarray, edges: np.ndarray, params: NetParams, rounds: int = DEFAULT_ROUNDS
) -> tuple[np.ndarray, _ForwardCache]:
    """Score a batch of graphs sharing one edge topology.

    Args:
        nodes: (B, n, F) node encodings for B graphs over the same wiring.
        edges: (E, 2) directed edge list shared by the whole batch.
        params: network weights.
        rounds: number of synchronous message-passing rounds.

    Returns:
        (B,) scores and the cache needed by backward_batch.
    """
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 3:
        raise ValueError(f"expected (B, n, F) nodes, got shape {nodes.shape}")
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    edges = np.asarray(edges, dtype=int).reshape(-1, 2)
    b_sz, n, _ = nodes.shape
    p = params
    hdim = p.hidden

    h = np.tanh(_affine(nodes, p.w_in, p.b_in))
    h0 = h
    steps: list[_StepCache] = []
    for _ in range(rounds):
        cat = np.concatenate([h[:, edges[:, 0], :], h[:, edges[:, 1], :]], axis=-1)
        z1 = _affine(cat, p.w_msg1, p.b_msg1)
        z1_mask = z1 > 0.0
        a1 = np.where(z1_mask, z1, 0.0)
        msg = _affine(a1, p.w_msg2, p.b_msg2)
        agg = np.zeros((b_sz, n, hdim))
        for e, (_, dst) in enumerate(edges):
            agg[:, dst, :] += msg[:, e, :]
        cat_g = np.concatenate([h, agg], axis=-1)
        z = _sigmoid(_affine(cat_g, p.w_z, p.b_z))
        r = _sigmoid(_affine(cat_g, p.w_r, p.b_r))
        cat_c = np.concatenate([r * h, agg], axis=-1)
        h_cand = np.tanh(_affine(cat_c, p.w_h, p.b_h))
        steps.append(_StepCache(h, cat, z1_mask, a1, agg, z, r, h_cand))
        h = (1.0 - z) * h + z * h_cand

    pooled = h.sum(axis=1)
    read_act = np.tanh(_affine(pooled, p.w_read1, p.b_read1))
    scores = _affine(read_act, p.w_read2, p.b_read2)[:, 0]
    cache = _ForwardCache(nodes, edges, h0, steps, pooled, read_act)
    return scores, cache


def backward_batch(
    cache: _ForwardCache, params: NetParams, upstream: np.ndarray
) -> NetParams:
    """Exact reverse pass of forward_batch.

    Args:
        cache: the forward cache for the same params.
        upstream: (B,) gradient of the objective w.r.t. each score.

    Returns:
        Parameter gradients, summed over the batch.
    """
    p = params
    g = NetParams.zeros(p.hidden, p.input_dim)
    hdim = p.hidden
    edges = cache.edges
    n = cache.nodes.shape[1]

    d_score = np.asarray(upstream, dtype=float)[:, None]
    g.w_read2 += _weight_grad(d_score, cache.read_act)
    g.b_read2 += d_score.sum(axis=0)
    d_act = d_score @ p.w_read2
    d_pre = d_act * (1.0 - cache.read_act**2)
    g.w_read1 += _weight_grad(d_pre, cache.pooled)
    g.b_read1 += d_pre.sum(axis=0)
    d_pool = d_pre @ p.w_read1
    dh = np.broadcast_to(d_pool[:, None, :], (d_pool.shape[0], n, hdim)).copy()

    for step in reversed(cache.steps):
        h_prev = step.h_prev
        dz = dh * (step.h_cand - h_prev)
        dh_cand = dh * step.z
        dh_prev = dh * (1.0 - step.z)

        du_c = dh_cand * (1.0 - step.h_cand**2)
        cat_c = np.concatenate([step.r * h_prev, step.agg], axis=-1)
        g.w_h += _weight_grad(du_c, cat_c)
        g.b_h += du_c.sum(axis=(0, 1))
        d_cat_c = _apply_linear(du_c, p.w_h)
        d_rh = d_cat_c[..., :hdim]
        d_agg = d_cat_c[..., hdim:]
        dr = d_rh * h_prev
        dh_prev += d_rh * step.r

        cat_g = np.concatenate([h_prev, step.agg], axis=-1)
        du_r = dr * step.r * (1.0 - step.r)
        g.w_r += _weight_grad(du_r, cat_g)
        g.b_r += du_r.sum(axis=(0, 1))
        du_z = dz * step.z * (1.0 - step.z)
        g.w_z += _weight_grad(du_z, cat_g)
        g.b_z += du_z.sum(axis=(0, 1))
        d_cat_g = _apply_linear(du_r, p.w_r) + _apply_linear(du_z, p.w_z)
        dh_prev += d_cat_g[..., :hdim]
        d_agg = d_agg + d_cat_g[..., hdim:]

        if len(edges):
            d_msg = np.stack([d_agg[:, dst, :] for _, dst in edges], axis=1)
        else:
            d_msg = np.zeros_like(step.a1)
        g.w_msg2 += _weight_grad(d_msg, step.a1)
        g.b_msg2 += d_msg.sum(axis=(0, 1))
        d_a1 = _apply_linear(d_msg, p.w_msg2)
        d_z1 = np.where(step.z1_mask, d_a1, 0.0)
        g.w_msg1 += _weight_grad(d_z1, step.cat)
        g.b_msg1 += d_z1.sum(axis=(0, 1))
        d_cat = _apply_linear(d_z1, p.w_msg1)
        for e, (src, dst) in enumerate(edges):
            dh_prev[:, src, :] += d_cat[:, e, :hdim]
            dh_prev[:, dst, :] += d_cat[:, e, hdim:]
        dh = dh_prev

    du0 = dh * (1.0 - cache.h0**2)
    g.w_in += _weight_grad(du0, cache.nodes)
    g.b_in += du0.sum(axis=(0, 1))
    return g


def forward(graph: KernelGraph, params: NetParams, rounds: int = DEFAULT_ROUNDS) -> float:
    """Relevance score of one candidate graph."""
    scores, _ = forward_batch(graph.nodes[None, :, :], graph.edges, params, rounds)
    return float(scores[0])


def backward(
    graph: KernelGraph,
    params: NetParams,
    upstream: float,
    rounds: int = DEFAULT_ROUNDS,
) -> NetParams:
    """Parameter gradients of upstream * forward(graph)."""
    _, cache = forward_batch(graph.nodes[None, :, :], graph.edges, params, rounds)
    return backward_batch(cache, params, np.array([float(upstream)]))
