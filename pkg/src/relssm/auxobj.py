"""Contrastive auxiliary objectives on future-observation summaries.

A backward recurrent net summarizes each vertex's future observations into
one vector per step. Two log-bilinear scores then rate how well (1) the
sampled latents and (2) the aggregated neighbour states of a vertex pick
out its own future summary from a pool containing negatives drawn from
other vertices in the minibatch at the same step. Both terms are
normalized log-ratios, hence always <= 0, and are averaged over the
resampled unweighted particles of the filter pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Module, StackedLSTM, fan_in_uniform
from .tensor import Tensor

__all__ = ["AuxParams", "FutureSummaries", "summarize_future", "aux_losses"]

log = logging.getLogger(__name__)


class AuxParams(Module):
    def __init__(self, cfg, rng, n_negatives: int = 8):
        self.backward_rnn = StackedLSTM(cfg.d_x, cfg.d_rnn, cfg.n_rnn_layers, rng)
        self.score1_W = Tensor(fan_in_uniform(rng, (cfg.d_g + cfg.d_z, cfg.d_rnn)))
        self.score2_W = Tensor(fan_in_uniform(rng, (cfg.d_rnn, cfg.d_rnn)))
        self.neighbor_mlp = MLP([cfg.d_rnn, cfg.d_mlp, cfg.d_rnn], rng)
        self.n_negatives = n_negatives


@dataclass
class FutureSummaries:
    """``c[t]`` summarizes observations strictly after step t (0-based).

    There is no summary for the final step; the list has length T-1.
    """

    c: list


def summarize_future(batch, params: AuxParams) -> FutureSummaries:
    """One reverse-time scan over the batch's observations."""
    n_steps = batch.n_steps
    if n_steps < 2:
        raise ValueError(f"future summaries need at least 2 steps, got {n_steps}")
    rows = sum(g.n_vertices for g in batch.graphs)
    state = params.backward_rnn.zero_state(rows)
    cs: list = [None] * (n_steps - 1)
    for s in range(n_steps - 1, 0, -1):
        x_s = Tensor(np.concatenate([batch.X[b, s] for b in range(batch.n_episodes)], axis=0))
        h, state = params.backward_rnn(x_s, state)
        cs[s - 1] = h
    return FutureSummaries(cs)


def _info_nce(projected: Tensor, c_t: Tensor, vertex_tile: np.ndarray,
              neg_idx: np.ndarray | None, tile_fn=None) -> Tensor:
    """Per-row log-softmax of the positive score against negative scores."""
    rows = projected.shape[0]
    if neg_idx is None:
        c_pos = tile_fn(c_t) if tile_fn is not None else T.gather_rows(c_t, vertex_tile)
        pos = T.sum_(projected * c_pos, axis=1)
        return pos - pos  # only the positive in the pool: every term is log 1
    # score every candidate summary at once, then select each row's pool
    # (negatives are sampled without replacement, so columns are unique)
    all_scores = projected @ T.transpose(c_t)
    pool_cols = np.concatenate([vertex_tile[:, None], neg_idx[vertex_tile]], axis=1)
    scores = T.take_pairs(all_scores, pool_cols, unique_cols=True)
    return T.reshape(scores[:, 0], (rows,)) - T.logsumexp(scores, axis=1)


def aux_losses(records: list, summaries: FutureSummaries, model, params: AuxParams, rng):
    """Monte Carlo estimates of both objectives, per episode.

    ``records[t]`` must hold the resampled unweighted particles of step t
    (tensors ``z_g``, ``Z``, ``H``); negatives are drawn fresh per step,
    uniformly without replacement from the other vertices of the minibatch.
    Returns two (B,) tensors.
    """
    bg = model.bg_model
    B, K = model.B, model.K
    belief_rows = model.bg_belief.n_vertices
    n_neg = min(params.n_negatives, belief_rows - 1)
    if n_neg == 0:
        log.warning("no negatives available (single-vertex minibatch); aux terms are 0")
    nonself = bg.edge_nonself
    src, dst = bg.edge_src[nonself], bg.edge_dst[nonself]
    l1 = Tensor(np.zeros(B))
    l2 = Tensor(np.zeros(B))
    for t, rec in enumerate(records):
        c_t = summaries.c[t]
        if n_neg > 0:
            noise = rng.random((belief_rows, belief_rows))
            np.fill_diagonal(noise, np.inf)
            neg_idx = np.argsort(noise, axis=1)[:, :n_neg]
        else:
            neg_idx = None
        from .gnn import per_vertex

        z_hat = T.concat([per_vertex(bg, rec["z_g"]), rec["Z"]], axis=1)
        term1 = _info_nce(z_hat @ params.score1_W, c_t, model.vertex_tile, neg_idx,
                          model.tile_to_particles)
        h_sum = T.segment_sum(
            T.gather_rows(rec["H"], src, bg.gather_plan("src_nonself", src)),
            dst, bg.n_vertices,
        )
        h_hat = params.neighbor_mlp(h_sum)
        term2 = _info_nce(h_hat @ params.score2_W, c_t, model.vertex_tile, neg_idx,
                          model.tile_to_particles)
        l1 = l1 + T.segment_sum(term1, model.vertex_episode, B) * (1.0 / K)
        l2 = l2 + T.segment_sum(term2, model.vertex_episode, B) * (1.0 / K)
    return l1, l2
