"""Generative model: coupled per-vertex and global latent state processes.

Each step advances per-vertex recurrent states from the previous latents,
pools them into a graph summary that drives a global recurrent state, draws
a global latent, mixes the per-vertex states through message passing
conditioned on that global latent, draws per-vertex latents, and finally
emits observations conditioned on both levels. The per-vertex transition
density can be sharpened by an invertible flow on top of its diagonal
Gaussian base.

The step is exposed both as a single sampling ``transition`` (used by
rollouts) and as the individual deterministic/probabilistic pieces (used by
the particle filter, which samples from a proposal instead).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gnf import FlowStack, build_flow_stack, flow_logprob
from .gnn import MhaBlock, Readout, with_edge_attrs
from .graph import BatchedGraph, as_batched, batch_graphs
from .nn import GaussianHead, Linear, MLP, Module, StackedLSTM, gaussian_logpdf
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "GenerativeParams",
    "ModelState",
    "init_state",
    "transition",
    "observe_logprob",
    "rollout",
]


@dataclass
class ModelConfig:
    """Architecture sizes shared by the generative and proposal networks."""

    d_x: int = 1
    d_u: int = 0
    d_z: int = 8
    d_g: int = 8
    d_rnn: int = 32
    n_rnn_layers: int = 2
    d_mlp: int = 64
    n_heads: int = 4
    d_qk: int = 16
    d_msg: int = 16
    d_vert_emb: int = 8
    gnn_layers: int = 1
    d_vertex_attr: int = 0
    d_edge_attr: int = 0
    obs_head: str = "gaussian"
    n_mix: int = 5
    flow_units: int = 0
    proposal_flow_units: int = 0
    flow_width: int = 32
    d_readout: int = 0  # 0 -> d_rnn

    def __post_init__(self):
        if self.d_readout == 0:
            self.d_readout = self.d_rnn
        if self.obs_head not in ("gaussian", "logistic_mixture"):
            raise ValueError(
                f"unknown observation head {self.obs_head!r}; "
                "valid options: gaussian, logistic_mixture"
            )


class LogisticMixtureHead(Module):
    """Per-dimension mixture of logistics with learned weights."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, n_mix: int, rng):
        self.net = MLP([d_in, d_hidden, 3 * n_mix * d_out], rng)
        self.d_out = d_out
        self.n_mix = n_mix

    def logprob(self, x: Tensor, feats: Tensor) -> Tensor:
        """Elementwise mixture log-density, shape (rows, d_out)."""
        raw = self.net(feats)
        C = self.n_mix
        cols = []
        for j in range(self.d_out):
            logits = raw[:, j * C : (j + 1) * C]
            locs = raw[:, self.d_out * C + j * C : self.d_out * C + (j + 1) * C]
            raw_s = raw[:, 2 * self.d_out * C + j * C : 2 * self.d_out * C + (j + 1) * C]
            T.check_finite(logits, "mixture weights")
            logw = T.shift_rows(logits, -T.logsumexp(logits, axis=1))
            scale = T.softplus(raw_s) + 1e-6
            xj = T.shift_rows(Tensor(np.zeros(logits.shape)), T.reshape(x[:, j], (x.shape[0],)))
            y = (xj - locs) / scale
            comp = -y - 2.0 * T.softplus(-y) - T.log(scale)
            cols.append(T.reshape(T.logsumexp(logw + comp, axis=1), (x.shape[0], 1)))
        return T.concat(cols, axis=1)

    def sample(self, feats: Tensor, rng) -> np.ndarray:
        raw = self.net(feats).value
        C, D = self.n_mix, self.d_out
        rows = raw.shape[0]
        out = np.empty((rows, D))
        for j in range(D):
            logits = raw[:, j * C : (j + 1) * C]
            locs = raw[:, D * C + j * C : D * C + (j + 1) * C]
            scale = np.logaddexp(0.0, raw[:, 2 * D * C + j * C : 2 * D * C + (j + 1) * C]) + 1e-6
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            comp = (rng.random((rows, 1)) < w.cumsum(axis=1)).argmax(axis=1)
            u = rng.uniform(1e-9, 1 - 1e-9, size=rows)
            pick = np.arange(rows)
            out[:, j] = locs[pick, comp] + scale[pick, comp] * (np.log(u) - np.log1p(-u))
        return out


class GenerativeParams(Module):
    """All learnable pieces of the generative side."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.vertex_rnn = StackedLSTM(cfg.d_z + cfg.d_u, cfg.d_rnn, cfg.n_rnn_layers, rng)
        self.readout = Readout(cfg.d_rnn, cfg.d_readout, rng)
        self.global_rnn = StackedLSTM(cfg.d_g + cfg.d_readout, cfg.d_rnn, cfg.n_rnn_layers, rng)
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
        self.global_head = GaussianHead(cfg.d_rnn, cfg.d_mlp, cfg.d_g, rng)
        self.local_head = GaussianHead(cfg.d_rnn, cfg.d_mlp, cfg.d_z, rng)
        d_obs_in = cfg.d_z + cfg.d_rnn + cfg.d_g + cfg.d_rnn
        if cfg.obs_head == "gaussian":
            self.obs_head = GaussianHead(d_obs_in, cfg.d_mlp, cfg.d_x, rng)
        else:
            self.obs_head = LogisticMixtureHead(d_obs_in, cfg.d_mlp, cfg.d_x, cfg.n_mix, rng)
        self.local_flow = (
            build_flow_stack(
                cfg.flow_units, cfg.d_z, cfg.d_g, cfg.d_vertex_attr, rng, width=cfg.flow_width
            )
            if cfg.flow_units > 0
            else None
        )
        # learnable initial states, shared across vertices / broadcast per graph
        self.init_vertex = [
            Tensor(np.zeros(cfg.d_rnn)) for _ in range(2 * cfg.n_rnn_layers)
        ]
        self.init_global = [
            Tensor(np.zeros(cfg.d_rnn)) for _ in range(2 * cfg.n_rnn_layers)
        ]
        self.init_z = Tensor(np.zeros(cfg.d_z))
        self.init_zg = Tensor(np.zeros(cfg.d_g))


@dataclass
class ModelState:
    """Per-particle recurrent and latent carry between steps.

    All per-vertex fields have one row per vertex of the batched graph; all
    global fields have one row per graph copy. ``context_H`` holds the
    post-message-passing vertex states of the latest transition.
    """

    vertex_lstm: list
    global_lstm: list
    z_prev: Tensor
    zg_prev: Tensor
    context_H: Tensor | None = None
    h_global: Tensor | None = None

    def gather(self, vertex_idx: np.ndarray, graph_idx: np.ndarray) -> "ModelState":
        """Reindex particle rows (used by resampling); gradients flow through."""
        return ModelState(
            vertex_lstm=[T.gather_rows(t, vertex_idx) for t in self.vertex_lstm],
            global_lstm=[T.gather_rows(t, graph_idx) for t in self.global_lstm],
            z_prev=T.gather_rows(self.z_prev, vertex_idx),
            zg_prev=T.gather_rows(self.zg_prev, graph_idx),
            context_H=None if self.context_H is None else T.gather_rows(self.context_H, vertex_idx),
            h_global=None if self.h_global is None else T.gather_rows(self.h_global, graph_idx),
        )


def _broadcast_rows(vec: Tensor, n: int) -> Tensor:
    return T.gather_rows(T.reshape(vec, (1, vec.shape[0])), np.zeros(n, dtype=np.intp))


def init_state(params: GenerativeParams, g) -> ModelState:
    """Broadcast the learnable initial states over a (batched) graph."""
    bg = as_batched(g)
    nv, ng = bg.n_vertices, bg.n_graphs
    return ModelState(
        vertex_lstm=[_broadcast_rows(v, nv) for v in params.init_vertex],
        global_lstm=[_broadcast_rows(v, ng) for v in params.init_global],
        z_prev=_broadcast_rows(params.init_z, nv),
        zg_prev=_broadcast_rows(params.init_zg, ng),
    )


# -- step pieces (shared between prior sampling and the particle filter) -------

def advance_context(params: GenerativeParams, bg: BatchedGraph, state: ModelState,
                    u_t: Tensor | None):
    """Deterministic first half of a step: returns (vstate, H_tilde, gstate, h_g)."""
    if u_t is not None and params.cfg.d_u > 0:
        inp = T.concat([state.z_prev, u_t], axis=1)
    else:
        inp = state.z_prev
    h_tilde, vstate = params.vertex_rnn(inp, state.vertex_lstm)
    pooled = params.readout(bg, h_tilde)
    h_g, gstate = params.global_rnn(T.concat([state.zg_prev, pooled], axis=1), state.global_lstm)
    return vstate, h_tilde, gstate, h_g


def global_density(params: GenerativeParams, h_g: Tensor):
    mu, var = params.global_head(h_g)
    T.check_finite(mu, "global transition mean")
    T.check_finite(var, "global transition variance")
    return mu, var


def apply_gnn(params: GenerativeParams, bg: BatchedGraph, z_g: Tensor, h_tilde: Tensor) -> Tensor:
    H = h_tilde
    for block in params.gnn:
        H = block(bg, z_g, H)
    return H


def local_density(params: GenerativeParams, H: Tensor):
    mu, var = params.local_head(H)
    T.check_finite(mu, "local transition mean")
    T.check_finite(var, "local transition variance")
    return mu, var


def local_logprob(params: GenerativeParams, bg: BatchedGraph, H: Tensor, z_g: Tensor,
                  Z: Tensor) -> Tensor:
    """Per-graph log f(Z | H, z_g), flow-adjusted when a flow is present."""
    mu, var = local_density(params, H)
    if params.local_flow is None:
        ll = gaussian_logpdf(Z, mu, var)
        return T.segment_sum(T.sum_(ll, axis=1), bg.vertex_graph, bg.n_graphs)
    return flow_logprob(params.local_flow, mu, var, bg, z_g, Z)


def global_logprob(params: GenerativeParams, h_g: Tensor, z_g: Tensor) -> Tensor:
    mu, var = global_density(params, h_g)
    return T.sum_(gaussian_logpdf(z_g, mu, var), axis=1)


def observe_logprob(params: GenerativeParams, bg: BatchedGraph, state: ModelState,
                    z_g: Tensor, Z: Tensor, x_t: Tensor) -> Tensor:
    """Per-vertex observation log-density log g(x | z, h, z_g, h_g)."""
    from .gnn import per_vertex

    feats = T.concat(
        [Z, state.context_H, per_vertex(bg, z_g), per_vertex(bg, state.h_global)],
        axis=1,
    )
    if params.cfg.obs_head == "gaussian":
        mu, var = params.obs_head(feats)
        return T.sum_(gaussian_logpdf(x_t, mu, var), axis=1)
    return T.sum_(params.obs_head.logprob(x_t, feats), axis=1)


def transition(state: ModelState, g, u_t, params: GenerativeParams, rng):
    """Sample one step from the prior; returns exact log-densities.

    Returns ``(new_state, z_g, Z, logp_global, logp_local)`` with the log
    densities accumulated per graph copy.
    """
    bg = as_batched(g)
    u = None if u_t is None else T.tensor(u_t)
    vstate, h_tilde, gstate, h_g = advance_context(params, bg, state, u)
    mu_g, var_g = global_density(params, h_g)
    eps_g = rng.standard_normal(mu_g.shape)
    z_g = mu_g + T.sqrt(var_g) * Tensor(eps_g)
    logp_g = T.sum_(gaussian_logpdf(z_g, mu_g, var_g), axis=1)

    H = apply_gnn(params, bg, z_g, h_tilde)
    mu_l, var_l = local_density(params, H)
    eps_l = rng.standard_normal(mu_l.shape)
    z0 = mu_l + T.sqrt(var_l) * Tensor(eps_l)
    base_ll = T.segment_sum(
        T.sum_(gaussian_logpdf(z0, mu_l, var_l), axis=1), bg.vertex_graph, bg.n_graphs
    )
    if params.local_flow is not None:
        Z, logdet = params.local_flow.forward(bg, z_g, z0)
        logp_l = base_ll - logdet
    else:
        Z = z0
        logp_l = base_ll

    vstate = list(vstate)
    vstate[2 * (params.vertex_rnn.n_layers - 1)] = H  # message passing rewrites the top state
    new_state = ModelState(
        vertex_lstm=vstate, global_lstm=gstate, z_prev=Z, zg_prev=z_g,
        context_H=H, h_global=h_g,
    )
    return new_state, z_g, Z, logp_g, logp_l


def sample_observation(params: GenerativeParams, bg: BatchedGraph, state: ModelState,
                       z_g: Tensor, Z: Tensor, rng) -> np.ndarray:
    from .gnn import per_vertex

    feats = T.concat(
        [Z, state.context_H, per_vertex(bg, z_g), per_vertex(bg, state.h_global)],
        axis=1,
    )
    if params.cfg.obs_head == "gaussian":
        mu, var = params.obs_head(feats)
        return mu.value + np.sqrt(var.value) * rng.standard_normal(mu.shape)
    return params.obs_head.sample(feats, rng)


def rollout(params: GenerativeParams, g, U, n_steps: int, rng,
            prefix=None, proposal=None, k_particles: int = 32,
            n_rollouts: int = 1) -> np.ndarray:
    """Ancestral samples from the model, shape (n_rollouts, n_steps, N, d_x).

    With a conditioning ``prefix`` of observations, the first ``len(prefix)``
    steps are filtered with ``proposal`` (one surviving particle seeds each
    rollout) and the remaining steps free-run the prior; the prefix
    observations are copied into the output.
    """
    bg = as_batched(g)
    if bg.n_graphs != 1:
        raise ValueError("rollout expects a single graph")
    n = bg.sizes[0]
    t0 = 0
    if prefix is not None:
        prefix = np.asarray(prefix, dtype=np.float64).reshape(-1, n, params.cfg.d_x)
        t0 = prefix.shape[0]
        if t0 > n_steps:
            raise ValueError(f"prefix of {t0} steps exceeds rollout length {n_steps}")
        if proposal is None:
            raise ValueError("conditioning prefix requires proposal parameters")

    out = np.empty((n_rollouts, n_steps, n, params.cfg.d_x))
    for r in range(n_rollouts):
        if t0 > 0:
            from .smc import filtered_state

            state = filtered_state(
                params, proposal, g, prefix, None if U is None else U[:t0],
                k_particles, rng,
            )
            out[r, :t0] = prefix
        else:
            state = init_state(params, bg)
        for t in range(t0, n_steps):
            u_t = None if U is None else Tensor(np.asarray(U[t], dtype=np.float64))
            state, z_g, Z, _, _ = transition(state, bg, u_t, params, rng)
            out[r, t] = sample_observation(params, bg, state, z_g, Z, rng).reshape(
                n, params.cfg.d_x
            )
    return out
