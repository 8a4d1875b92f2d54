"""Per-user temporal graph over context and prototype nodes, with stochastic
edge gating and attention-based aggregation.

Node layout is prototypes first, then contexts. Temporal edges run
earlier->later between contexts adjacent somewhere in the user's sequence;
prototype-context edges are bidirectional and carry a sampled binary gate.
Aggregation attends over each node's predecessors (incoming edges), so a
context node sees its past plus its gated prototypes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder
from .autodiff import Tensor
from .model import ContextMatchModel


@dataclass
class TemporalGraph:
    n_prototypes: int
    ctx_ids: np.ndarray                    # global context ids, local node order
    temporal_edges: tuple                  # (src_local, dst_local) over contexts
    h0: Tensor                             # (O + C, d) personalized rows
    gate: Tensor                           # (O, C) sampled gate values
    beta: np.ndarray                       # (O, C) gate probabilities
    fixed_adj: np.ndarray                  # (N, N) self-loops + temporal edges

    @property
    def n_contexts(self) -> int:
        return len(self.ctx_ids)

    @property
    def n_nodes(self) -> int:
        return self.n_prototypes + self.n_contexts

    def gated_pairs(self):
        """(prototype, local context) pairs whose sampled gate is 1."""
        hard = self.gate.data >= 0.5
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(hard))]

    def edge_rows(self):
        """Edge list for inspection dumps: (src, dst, kind, gate_value)."""
        o = self.n_prototypes
        out = [(n, n, "self", 1.0) for n in range(self.n_nodes)]
        out += [(o + s, o + d, "temporal", 1.0) for s, d in self.temporal_edges]
        for i, j in self.gated_pairs():
            out.append((i, o + j, "prototype", float(self.gate.data[i, j])))
            out.append((o + j, i, "prototype", float(self.gate.data[i, j])))
        return out

    def adjacency(self) -> Tensor:
        """Incoming-edge weight matrix A with A[i, j] = weight of edge j -> i."""
        n, o, c = self.n_nodes, self.n_prototypes, self.n_contexts
        fixed = ad.constant(self.fixed_adj)
        proto_in = ad.pad_block(self.gate, n, n, 0, o)              # ctx -> proto
        ctx_in = ad.pad_block(ad.transpose(self.gate), n, n, o, 0)  # proto -> ctx
        return ad.add(ad.add(fixed, proto_in), ctx_in)


def build(model: ContextMatchModel, user_id: int, ctx_ids, adjacent_pairs,
          tau: float, rng: np.random.Generator | None = None,
          gate_mode: str = "hard", extra_ctx_rep: Tensor | None = None,
          frozen_decoder: bool = False) -> TemporalGraph:
    """Assemble the graph for one user under the current parameters.

    With an RNG, gates are Gumbel samples (straight-through when gate_mode is
    "hard", relaxed when "soft"); without one, gates are the deterministic
    threshold [beta > 0.5] used at inference. `extra_ctx_rep` appends one
    context node with no temporal edges (cold-start serving).
    """
    ctx_ids = np.asarray(ctx_ids, dtype=np.int64).reshape(-1)
    if ctx_ids.size == 0 and extra_ctx_rep is None:
        raise ValueError("graph needs at least one context")
    local = {int(g): i for i, g in enumerate(ctx_ids)}
    o = model.cfg.n_prototypes
    node_ctx_ids = ctx_ids
    if extra_ctx_rep is not None:
        node_ctx_ids = np.append(ctx_ids, -1)  # cold-start node, no global id

    protos = encoder.all_prototypes(model, user_id)
    ctx_parts = []
    if ctx_ids.size:
        ctx_parts.append(encoder.personalized(model, user_id, "context", ctx_ids))
    if extra_ctx_rep is not None:
        ctx_parts.append(extra_ctx_rep)
    ctxs = ctx_parts[0] if len(ctx_parts) == 1 else ad.concat_rows(ctx_parts)
    c = ctxs.data.shape[0]
    n = o + c

    sim = encoder.cross_similarity(model, protos, ctxs,
                                   frozen_decoder=frozen_decoder)
    beta = ad.smooth_clamp(sim)
    gate = ad.gumbel_binary_gate(beta, tau, hard=(gate_mode == "hard"), rng=rng)

    fixed = np.eye(n)
    edges = []
    for src, dst in adjacent_pairs:
        if src in local and dst in local:
            edges.append((local[src], local[dst]))
            fixed[o + local[dst], o + local[src]] = 1.0

    return TemporalGraph(
        n_prototypes=o, ctx_ids=node_ctx_ids,
        temporal_edges=tuple(sorted(set(edges))),
        h0=ad.concat_rows([protos, ctxs]), gate=gate, beta=beta.data.copy(),
        fixed_adj=fixed)


def aggregate(model: ContextMatchModel, graph: TemporalGraph,
              frozen_decoder: bool = False):
    """Run the attention layers; returns (prototype rows, context rows).

    Each layer: transform H W, score predecessor pairs with the configured
    similarity, softmax over incoming edges (gate-weighted), then a relu of
    the attention-weighted sum. With use_gta off, returns the input rows
    untouched.
    """
    o = graph.n_prototypes
    if not model.cfg.use_gta:
        return (ad.slice_rows(graph.h0, 0, o),
                ad.slice_rows(graph.h0, o, graph.n_nodes))
    adj = graph.adjacency()
    h = graph.h0
    for w in model.gat_w:
        m = ad.matmul(h, w)
        if model.cfg.gat_attention == "dot":
            scores = ad.matmul(m, ad.transpose(m))
        else:
            scores = encoder.similarity_matrix(model, m,
                                               frozen_decoder=frozen_decoder)
        scored = ad.leaky_relu(scores, model.cfg.leaky_slope)
        # per-row shift is a constant under the softmax ratio; it must come
        # from entries that participate, or the whole row can underflow
        masked = np.where(adj.data > 1e-6, scored.data, -np.inf)
        shift = ad.constant(masked.max(axis=1, keepdims=True))
        # entries above the shift carry adjacency <= 1e-6; capping their
        # exponent trades an invisible weight distortion for no overflow
        weights = ad.mul(ad.exp(ad.clip_upper(ad.sub(scored, shift), 0.0)), adj)
        h = ad.relu(ad.matmul(ad.div(weights, ad.row_sum(weights)), m))
    return ad.slice_rows(h, 0, o), ad.slice_rows(h, o, graph.n_nodes)
