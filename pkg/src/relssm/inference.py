"""Structured proposal: belief recurrences over observations.

A deterministic belief state summarizes observations up to the current
step: per-vertex recurrent cells consume each observation, a first pooling
supplies graph context to a message-passing round over the belief states,
and a second pooling produces the graph-level belief. The proposal
densities condition jointly on these beliefs and on the generative model's
recurrent context of the same step (shared computation, no shared
weights), and sample by reparameterization so gradients reach the proposal
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dynamics import ModelConfig
from .gnf import build_flow_stack, flow_logprob
from .gnn import MhaBlock, Readout, with_edge_attrs
from .graph import BatchedGraph, as_batched
from .nn import GaussianHead, Module, StackedLSTM, gaussian_logpdf
from .tensor import Tensor

__all__ = ["ProposalParams", "BeliefState", "init_belief", "belief_update", "propose"]


class ProposalParams(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.obs_rnn = StackedLSTM(cfg.d_x + cfg.d_u, cfg.d_rnn, cfg.n_rnn_layers, rng)
        self.readout1 = Readout(cfg.d_rnn, cfg.d_g, rng)
        self.readout2 = Readout(cfg.d_rnn, cfg.d_readout, rng)
        self.gnn = [
            with_edge_attrs(
                MhaBlock(
                    cfg.d_rnn, cfg.d_g, cfg.d_vertex_attr, rng,
                    n_heads=cfg.n_heads, d_qk=cfg.d_qk, d_msg=cfg.d_msg,
                    d_vert_emb=cfg.d_vert_emb, combine="gru", d_hidden=cfg.d_mlp,
                ),
                cfg.d_edge_attr, rng, d_mlp=cfg.d_mlp,
            )
            for _ in range(cfg.gnn_layers)
        ]
        self.global_head = GaussianHead(cfg.d_rnn + cfg.d_readout, cfg.d_mlp, cfg.d_g, rng)
        self.local_head = GaussianHead(2 * cfg.d_rnn, cfg.d_mlp, cfg.d_z, rng)
        self.local_flow = (
            build_flow_stack(
                cfg.proposal_flow_units, cfg.d_z, cfg.d_g, cfg.d_vertex_attr, rng,
                width=cfg.flow_width,
            )
            if cfg.proposal_flow_units > 0
            else None
        )


@dataclass
class BeliefState:
    """Deterministic summary of observations seen so far."""

    obs_lstm: list
    B: Tensor | None = None
    b_global: Tensor | None = None

    def gather(self, vertex_idx, graph_idx) -> "BeliefState":
        return BeliefState(
            obs_lstm=[T.gather_rows(t, vertex_idx) for t in self.obs_lstm],
            B=None if self.B is None else T.gather_rows(self.B, vertex_idx),
            b_global=None if self.b_global is None else T.gather_rows(self.b_global, graph_idx),
        )


def init_belief(params: ProposalParams, g) -> BeliefState:
    bg = as_batched(g)
    return BeliefState(obs_lstm=params.obs_rnn.zero_state(bg.n_vertices))


def belief_update(belief: BeliefState, g, x_t, u_t, params: ProposalParams) -> BeliefState:
    """Fold one observation into the belief; purely deterministic."""
    bg = as_batched(g)
    x = T.tensor(x_t)
    if x.shape[0] != bg.n_vertices:
        raise T.ShapeError(f"x_t has {x.shape[0]} rows for {bg.n_vertices} vertices")
    inp = T.concat([x, T.tensor(u_t)], axis=1) if params.cfg.d_u > 0 else x
    b_tilde, bstate = params.obs_rnn(inp, belief.obs_lstm)
    ctx = params.readout1(bg, b_tilde)
    B = b_tilde
    for block in params.gnn:
        B = block(bg, ctx, B)
    bstate = list(bstate)
    bstate[2 * (params.obs_rnn.n_layers - 1)] = B
    return BeliefState(obs_lstm=bstate, B=B, b_global=params.readout2(bg, B))


def propose_global(params: ProposalParams, h_g: Tensor, b_g: Tensor, rng):
    """Sample the global latent by reparameterization; exact log-density."""
    mu, var = params.global_head(T.concat([h_g, b_g], axis=1))
    T.check_finite(mu, "proposal global mean")
    T.check_finite(var, "proposal global variance")
    eps = rng.standard_normal(mu.shape)
    z = mu + T.sqrt(var) * Tensor(eps)
    logq = T.sum_(gaussian_logpdf(z, mu, var), axis=1)
    return z, logq


def propose_local(params: ProposalParams, bg: BatchedGraph, H: Tensor, B: Tensor,
                  z_g: Tensor, rng):
    """Sample per-vertex latents; densities accumulated per graph copy."""
    mu, var = params.local_head(T.concat([H, B], axis=1))
    T.check_finite(mu, "proposal local mean")
    T.check_finite(var, "proposal local variance")
    eps = rng.standard_normal(mu.shape)
    z0 = mu + T.sqrt(var) * Tensor(eps)
    base = T.segment_sum(
        T.sum_(gaussian_logpdf(z0, mu, var), axis=1), bg.vertex_graph, bg.n_graphs
    )
    if params.local_flow is None:
        return z0, base
    Z, logdet = params.local_flow.forward(bg, z_g, z0)
    return Z, base - logdet


def proposal_local_logprob(params: ProposalParams, bg: BatchedGraph, H: Tensor, B: Tensor,
                           z_g: Tensor, Z: Tensor) -> Tensor:
    """Per-graph log r(Z | H, B); mirrors the sampling path's density."""
    mu, var = params.local_head(T.concat([H, B], axis=1))
    if params.local_flow is None:
        ll = gaussian_logpdf(Z, mu, var)
        return T.segment_sum(T.sum_(ll, axis=1), bg.vertex_graph, bg.n_graphs)
    return flow_logprob(params.local_flow, mu, var, bg, z_g, Z)


def propose(h_g: Tensor, b_g: Tensor, H: Tensor, B: Tensor, params: ProposalParams,
            g, rng):
    """Draw (z_g, Z) for one step given shared generative context.

    ``H`` must come from the generative transition of the same step. Returns
    the samples with their exact per-graph log proposal densities.
    """
    bg = as_batched(g)
    z_g, logq_g = propose_global(params, h_g, b_g, rng)
    Z, logq_l = propose_local(params, bg, H, B, z_g, rng)
    return z_g, Z, logq_g, logq_l
