"""Message passing over in-neighbourhoods with multi-head attention.

A block updates per-vertex states H from three ingredients: a graph-level
context vector, embedded static vertex attributes, and attention-weighted
messages from direct predecessors. Per-head attention scores are a scaled
query-key product plus an optional scalar bias computed from edge
attributes; weights are normalized over each vertex's in-neighbourhood.
Vertices without predecessors receive a zero aggregate.

The merge of the aggregate into the state is either a gated recurrent cell
(when the states being updated are RNN states) or a two-layer residual
block (elsewhere, e.g. inside flow conditioners).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .graph import BatchedGraph, as_batched
from .nn import GRUCell, Linear, MLP, Module
from .tensor import Tensor

__all__ = ["AttentionHead", "MhaBlock", "Readout", "gnn_stack", "mha_forward", "readout",
           "per_vertex"]


def per_vertex(bg: BatchedGraph, per_graph: Tensor) -> Tensor:
    """Expand a per-graph matrix to one row per vertex."""
    n = bg.uniform_size
    if n:
        return T.repeat_rows(per_graph, n)
    return T.gather_rows(per_graph, bg.vertex_graph)


class AttentionHead(Module):
    def __init__(self, d_tilde: int, d_qk: int, d_msg: int, d_edge: int, rng, d_mlp: int = 32):
        from .nn import fan_in_uniform

        self.Wq = Tensor(fan_in_uniform(rng, (d_tilde, d_qk)))
        self.Wa = Tensor(fan_in_uniform(rng, (d_tilde, d_qk)))
        self.Wc = Tensor(fan_in_uniform(rng, (d_tilde, d_msg)))
        self.edge_mlp = MLP([d_edge, d_mlp, 1], rng) if d_edge > 0 else None
        self._scale = 1.0 / math.sqrt(d_qk)

    def __call__(self, bg: BatchedGraph, h_tilde: Tensor) -> Tensor:
        src_plan = bg.gather_plan("src", bg.edge_src)
        dst_plan = bg.gather_plan("dst", bg.edge_dst)
        q = h_tilde @ self.Wq
        a = h_tilde @ self.Wa
        c = h_tilde @ self.Wc
        scores = T.sum_(
            T.gather_rows(q, bg.edge_dst, dst_plan) * T.gather_rows(a, bg.edge_src, src_plan),
            axis=1,
        ) * self._scale
        if self.edge_mlp is not None:
            if bg.edge_attrs is None:
                raise ValueError("attention head expects edge attributes, graph has none")
            scores = scores + T.reshape(self.edge_mlp(Tensor(bg.edge_attrs)), (len(bg.edge_src),))
        alpha = T.segment_softmax(scores, bg.edge_dst, bg.n_vertices, dst_plan)
        msgs = T.scale_rows(T.gather_rows(c, bg.edge_src, src_plan), alpha)
        return T.segment_sum(msgs, bg.edge_dst, bg.n_vertices), alpha


class MhaBlock(Module):
    """One round of attention message passing plus a state merge."""

    def __init__(
        self,
        d_state: int,
        d_ctx: int,
        d_vertex_attr: int,
        rng,
        n_heads: int = 4,
        d_qk: int = 16,
        d_msg: int = 16,
        d_vert_emb: int = 8,
        combine: str = "gru",
        d_hidden: int = 64,
    ):
        if n_heads < 1:
            raise ValueError("need at least one attention head")
        self.d_state = d_state
        self.d_vert_emb = d_vert_emb if d_vertex_attr > 0 else 0
        self.vertex_mlp = (
            MLP([d_vertex_attr, d_hidden, d_vert_emb], rng) if d_vertex_attr > 0 else None
        )
        d_tilde = d_state + self.d_vert_emb + d_ctx
        d_edge = 0  # set by caller through edge-aware constructor below
        self.heads = [
            AttentionHead(d_tilde, d_qk, d_msg, d_edge, rng, d_mlp=d_hidden)
            for _ in range(n_heads)
        ]
        self.out_proj = Linear(n_heads * d_msg, d_state, rng)
        self.combine_kind = combine
        if combine == "gru":
            self.combine = GRUCell(d_ctx + self.d_vert_emb + d_state, d_state, rng)
        elif combine == "residual":
            self.combine = MLP(
                [d_ctx + self.d_vert_emb + 2 * d_state, d_hidden, d_state], rng
            )
        else:
            raise ValueError(f"unknown combine {combine!r} (use 'gru' or 'residual')")

    def __call__(self, g, context: Tensor, H: Tensor) -> Tensor:
        bg = as_batched(g)
        if H.shape[0] != bg.n_vertices:
            raise T.ShapeError(f"H has {H.shape[0]} rows for {bg.n_vertices} vertices")
        parts = [H]
        if self.vertex_mlp is not None:
            parts.append(self.vertex_mlp(Tensor(bg.vertex_attrs)))
        parts.append(per_vertex(bg, context))
        h_tilde = T.concat(parts, axis=1) if len(parts) > 1 else H
        aggs = [head(bg, h_tilde)[0] for head in self.heads]
        m = self.out_proj(T.concat(aggs, axis=1))
        side = parts[1:]  # vertex embedding (maybe) and per-vertex context
        if self.combine_kind == "gru":
            return self.combine(T.concat(side + [m], axis=1), H)
        return H + self.combine(T.concat(side + [H, m], axis=1))


def with_edge_attrs(block: MhaBlock, d_edge: int, rng, d_mlp: int = 32) -> MhaBlock:
    """Attach edge-attribute score MLPs to every head of an existing block."""
    if d_edge > 0:
        for head in block.heads:
            head.edge_mlp = MLP([d_edge, d_mlp, 1], rng)
    return block


def mha_forward(g, context: Tensor, H: Tensor, block: MhaBlock) -> Tensor:
    return block(g, context, H)


def gnn_stack(g, context: Tensor, H: Tensor, blocks: list[MhaBlock]) -> Tensor:
    for i, block in enumerate(blocks):
        if H.shape[1] != block.d_state:
            raise T.ShapeError(
                f"stack block {i} expects width {block.d_state}, got {H.shape[1]}"
            )
        H = block(g, context, H)
    return H


class Readout(Module):
    """Permutation-invariant pooling: gated unit over [mean, max] aggregates."""

    def __init__(self, d_in: int, d_out: int, rng):
        self.gate_a = Linear(2 * d_in, d_out, rng)
        self.gate_b = Linear(2 * d_in, d_out, rng)
        self.d_out = d_out

    def __call__(self, g, H: Tensor) -> Tensor:
        bg = as_batched(g)
        if bg.n_vertices == 0 or np.any(bg.sizes == 0):
            raise ValueError("readout of an empty graph")
        u = T.concat(
            [
                T.segment_mean(H, bg.vertex_graph, bg.n_graphs),
                T.segment_max(H, bg.vertex_graph, bg.n_graphs),
            ],
            axis=1,
        )
        return T.tanh(self.gate_a(u)) * T.sigmoid(self.gate_b(u))


def readout(g, H: Tensor, params: Readout) -> Tensor:
    return params(g, H)
