"""Variational sequential Monte Carlo over batched graph episodes.

The driver advances K weighted particles per episode, resampling
unconditionally at every step after the first, and accumulates the
log-mean of unnormalized importance weights into the evidence bound. All
weight arithmetic stays in log space. Gradients flow through particle
values and through the log-mean-exp of weights, never through ancestor
selection or the weight normalization used to resample (the biased
reparameterized estimator).

Belief states depend only on observations, so they are computed once per
episode and shared by all particles. The resampled, unweighted particles
of each step are optionally recorded for the contrastive auxiliary
objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dynamics import (
    GenerativeParams,
    ModelState,
    advance_context,
    apply_gnn,
    global_logprob,
    init_state,
    local_logprob,
    observe_logprob,
)
from .graph import AttributedGraph, batch_graphs
from .inference import (
    BeliefState,
    ProposalParams,
    belief_update,
    init_belief,
    propose_global,
    propose_local,
)
from .tensor import NonFiniteError, Tape, Tensor

__all__ = [
    "EpisodeBatch",
    "ParticleSystem",
    "ResampleScheme",
    "estimate_bound",
    "bound_gradient",
    "resample",
    "run_smc",
]


@dataclass
class EpisodeBatch:
    """One or more graph episodes with aligned observation/input arrays."""

    graphs: list
    X: np.ndarray            # (B, T, N, d_x)
    U: np.ndarray | None = None  # (B, T, N, d_u)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 4:
            raise ValueError(f"X must be (episodes, steps, vertices, d_x), got {self.X.shape}")
        if self.U is not None:
            self.U = np.asarray(self.U, dtype=np.float64)

    @property
    def n_episodes(self) -> int:
        return self.X.shape[0]

    @property
    def n_steps(self) -> int:
        return self.X.shape[1]


@dataclass
class ResampleScheme:
    kind: str = "systematic"
    every_step: bool = True

    def __post_init__(self):
        if self.kind not in ("systematic", "multinomial"):
            raise ValueError(f"unknown resampling scheme {self.kind!r}")


@dataclass
class ParticleSystem:
    """Diagnostics of one bound estimate: weights, genealogy, final carry."""

    n_particles: int
    log_weights: np.ndarray      # (T, B, K) unnormalized
    genealogy: list              # ancestor index arrays (B, K) per resampling
    bound: np.ndarray            # (B,) accumulated log bound values
    final_state: ModelState
    final_belief: BeliefState


def _normalized(logw: np.ndarray) -> np.ndarray:
    m = logw.max()
    w = np.exp(logw - m)
    return w / w.sum()


def resample(log_weights: np.ndarray, rng, scheme: str = "systematic") -> np.ndarray:
    """Ancestor indices for K particles given unnormalized log-weights."""
    logw = np.asarray(log_weights, dtype=np.float64)
    if not np.any(np.isfinite(logw)):
        raise NonFiniteError("resample: no particle has finite weight")
    w = _normalized(logw)
    k = len(w)
    if scheme == "systematic":
        positions = (rng.random() + np.arange(k)) / k
        return np.searchsorted(np.cumsum(w), positions).clip(0, k - 1).astype(np.intp)
    if scheme == "multinomial":
        return rng.choice(k, size=k, p=w).astype(np.intp)
    raise ValueError(f"unknown resampling scheme {scheme!r}")


class RssmSmcModel:
    """Stepper binding generative + proposal params to a batch of episodes."""

    def __init__(self, gen: GenerativeParams, prop: ProposalParams,
                 batch: EpisodeBatch, k_particles: int):
        if k_particles < 1:
            raise ValueError("need at least one particle")
        self.gen, self.prop = gen, prop
        self.batch = batch
        self.B = batch.n_episodes
        self.K = k_particles
        self.T = batch.n_steps
        self.bg_belief = batch_graphs(batch.graphs, 1)
        self.bg_model = batch_graphs(batch.graphs, self.K)
        # model vertex row (episode b, particle k, vertex i) -> belief row
        tiles = []
        for b in range(self.B):
            rows = np.arange(self.bg_belief.offsets[b], self.bg_belief.offsets[b] + self.bg_belief.sizes[b])
            tiles.extend([rows] * self.K)
        self.vertex_tile = np.concatenate(tiles)
        self.graph_tile = np.repeat(np.arange(self.B), self.K)
        self.copy_rows = [
            np.arange(self.bg_model.offsets[c], self.bg_model.offsets[c] + self.bg_model.sizes[c])
            for c in range(self.bg_model.n_graphs)
        ]
        # per-episode id of each model vertex row (for per-episode reductions)
        self.vertex_episode = self.bg_model.vertex_graph // self.K
        self.block = self.bg_belief.uniform_size
        # observations/inputs are constants: lay them out once as plain arrays
        self._x_belief_np = np.concatenate(
            [batch.X[:, t].reshape(-1, batch.X.shape[-1])[None] for t in range(self.T)]
        )
        self._x_model_np = self._x_belief_np[:, self.vertex_tile]
        if batch.U is not None and batch.U.shape[-1] > 0:
            self._u_belief_np = np.concatenate(
                [batch.U[:, t].reshape(-1, batch.U.shape[-1])[None] for t in range(self.T)]
            )
            self._u_model_np = self._u_belief_np[:, self.vertex_tile]
        else:
            self._u_belief_np = self._u_model_np = None

    def tile_to_particles(self, per_belief_vertex: Tensor) -> Tensor:
        """Expand a belief-layout per-vertex tensor to the particle layout."""
        if self.block:
            return T.tile_blocks(per_belief_vertex, self.K, self.block)
        return T.gather_rows(per_belief_vertex, self.vertex_tile)

    def _u(self, t: int):
        if self._u_belief_np is None:
            return None, None
        return Tensor(self._u_belief_np[t]), Tensor(self._u_model_np[t])

    def init(self):
        return {
            "state": init_state(self.gen, self.bg_model),
            "belief": init_belief(self.prop, self.bg_belief),
        }

    def gather(self, carry, ancestors: np.ndarray):
        flat_graph = np.concatenate(
            [b * self.K + ancestors[b] for b in range(self.B)]
        ).astype(np.intp)
        flat_vertex = np.concatenate([self.copy_rows[c] for c in flat_graph])
        carry = dict(carry)
        carry["state"] = carry["state"].gather(flat_vertex, flat_graph)
        carry["_idx"] = (flat_vertex, flat_graph)
        return carry

    def gather_extras(self, extras: dict, carry_after_gather) -> dict:
        flat_vertex, flat_graph = carry_after_gather["_idx"]
        out = {}
        for name, tens in extras.items():
            idx = flat_graph if tens.shape[0] == self.B * self.K else flat_vertex
            out[name] = T.gather_rows(tens, idx)
        return out

    def step(self, carry, t: int, rng):
        u_belief, u_model = self._u(t)
        x_belief = Tensor(self._x_belief_np[t])
        belief = belief_update(carry["belief"], self.bg_belief, x_belief, u_belief, self.prop)
        b_g = T.repeat_rows(belief.b_global, self.K)
        B_states = self.tile_to_particles(belief.B)

        vstate, h_tilde, gstate, h_g = advance_context(
            self.gen, self.bg_model, carry["state"], u_model
        )
        z_g, logq_g = propose_global(self.prop, h_g, b_g, rng)
        logp_g = global_logprob(self.gen, h_g, z_g)
        H = apply_gnn(self.gen, self.bg_model, z_g, h_tilde)
        Z, logq_l = propose_local(self.prop, self.bg_model, H, B_states, z_g, rng)
        logp_l = local_logprob(self.gen, self.bg_model, H, z_g, Z)

        vstate = list(vstate)
        vstate[2 * (self.gen.vertex_rnn.n_layers - 1)] = H
        state = ModelState(
            vertex_lstm=vstate, global_lstm=gstate, z_prev=Z, zg_prev=z_g,
            context_H=H, h_global=h_g,
        )
        x_model = Tensor(self._x_model_np[t])
        logg = observe_logprob(self.gen, self.bg_model, state, z_g, Z, x_model)
        logg_per_graph = T.segment_sum(logg, self.bg_model.vertex_graph, self.bg_model.n_graphs)
        logw = logp_g + logp_l + logg_per_graph - logq_g - logq_l

        kl_step = (
            (logq_g.value + logq_l.value - logp_g.value - logp_l.value)
            .reshape(self.B, self.K)
            .mean(axis=1)
        )
        extras = {"z_g": z_g, "Z": Z, "H": H}
        return {"state": state, "belief": belief}, logw, extras, kl_step


def run_smc(model, rng, scheme: ResampleScheme | None = None, record_aux: bool = False,
            predict_hook=None):
    """Drive the filter over all steps; returns (bound, system, aux records, kl).

    ``bound`` is a (B,) tensor of per-episode bound values on the active
    tape. Aux records hold, for each step t <= T-2, the resampled unweighted
    particles of that step (exactly what the contrastive objectives reuse).
    ``predict_hook(carry, t)`` runs after resampling and before the step, so
    the carry it sees is conditioned on observations strictly before t.
    """
    scheme = scheme or ResampleScheme()
    carry = model.init()
    B, K, n_steps = model.B, model.K, model.T
    logw_hist = np.empty((n_steps, B, K))
    genealogy: list[np.ndarray] = []
    aux_records: list[dict] = []
    kl_per_step = np.zeros((n_steps, B))
    bound = Tensor(np.zeros(B))
    prev_logw_val = None
    prev_extras = None
    for t in range(n_steps):
        if t >= 1:
            if K > 1:
                anc = np.empty((B, K), dtype=np.intp)
                for b in range(B):
                    anc[b] = resample(prev_logw_val[b], rng, scheme.kind)
                carry = model.gather(carry, anc)
                genealogy.append(anc)
                if record_aux:
                    aux_records.append(model.gather_extras(prev_extras, carry))
            else:
                genealogy.append(np.zeros((B, 1), dtype=np.intp))
                if record_aux:
                    aux_records.append(prev_extras)
        if predict_hook is not None:
            predict_hook(carry, t)
        carry, logw, extras, kl_step = model.step(carry, t, rng)
        vals = logw.value.reshape(B, K)
        for b in range(B):
            if not np.any(np.isfinite(vals[b])):
                raise NonFiniteError(f"all particle weights are -inf at step {t}")
        logw_hist[t] = vals
        kl_per_step[t] = kl_step
        bound = bound + T.logsumexp(T.reshape(logw, (B, K)), axis=1) - math.log(K)
        prev_logw_val = vals
        prev_extras = extras
    system = ParticleSystem(
        n_particles=K,
        log_weights=logw_hist,
        genealogy=genealogy,
        bound=bound.value.copy(),
        final_state=carry.get("state"),
        final_belief=carry.get("belief"),
    )
    return bound, system, aux_records, kl_per_step


def estimate_bound(gen: GenerativeParams, prop: ProposalParams, g, episode,
                   k_particles: int, rng, scheme: ResampleScheme | None = None,
                   record_aux: bool = False):
    """Evidence bound estimate for one episode; returns (L, system, aux records)."""
    if isinstance(episode, EpisodeBatch):
        batch = episode
    else:
        X, U = episode
        batch = EpisodeBatch(
            [g], np.asarray(X)[None, ...], None if U is None else np.asarray(U)[None, ...]
        )
    model = RssmSmcModel(gen, prop, batch, k_particles)
    bound, system, aux_records, _ = run_smc(model, rng, scheme, record_aux)
    if batch.n_episodes == 1:
        bound = T.reshape(bound, ())
    return bound, system, aux_records


def filtered_state(gen, prop, g, X, U, k_particles: int, rng) -> ModelState:
    """Filter a prefix of observations and return one surviving particle's state."""
    X = np.asarray(X, dtype=np.float64)
    batch = EpisodeBatch([g], X[None, ...], None if U is None else np.asarray(U)[None, ...])
    model = RssmSmcModel(gen, prop, batch, k_particles)
    _, system, _, _ = run_smc(model, rng)
    w = _normalized(system.log_weights[-1, 0])
    pick = int(rng.choice(k_particles, p=w))
    rows = model.copy_rows[pick]
    return system.final_state.gather(rows, np.array([pick], dtype=np.intp))


def bound_gradient(gen: GenerativeParams, prop: ProposalParams, aux_params,
                   batch: EpisodeBatch, k_particles: int, rng,
                   beta1: float = 1.0, beta2: float = 1.0,
                   scheme: ResampleScheme | None = None):
    """One forward/backward pass of the full objective over a batch.

    Maximizes  mean_b [ L_bound + beta1 * L1 + beta2 * L2 ].  Returns
    ``(grads, metrics)`` where grads maps parameter names of the three
    networks to gradient arrays (ascent direction is +grads) and metrics
    carries scalar diagnostics.
    """
    from .auxobj import aux_losses, summarize_future

    record = aux_params is not None and (beta1 != 0.0 or beta2 != 0.0) and batch.n_steps >= 2
    named = list(gen.named_parameters(prefix="gen."))
    named += list(prop.named_parameters(prefix="prop."))
    if aux_params is not None:
        named += list(aux_params.named_parameters(prefix="aux."))
    with Tape() as tape:
        model = RssmSmcModel(gen, prop, batch, k_particles)
        bound, system, aux_records, kl_steps = run_smc(model, rng, scheme, record_aux=record)
        objective = T.mean(bound)
        l1_val = l2_val = 0.0
        if record:
            summaries = summarize_future(batch, aux_params)
            l1, l2 = aux_losses(aux_records, summaries, model, aux_params, rng)
            objective = objective + beta1 * T.mean(l1) + beta2 * T.mean(l2)
            l1_val = float(T.mean(l1).value)
            l2_val = float(T.mean(l2).value)
        loss = -objective
    grad_arrays = tape.grad(loss, [p for _, p in named])
    grads = {name: g for (name, _), g in zip(named, grad_arrays)}
    metrics = {
        "objective": float(objective.value),
        "bound": float(bound.value.mean()),
        "l1_aux": l1_val,
        "l2_aux": l2_val,
        "kl_per_step": float(kl_steps.mean()),
    }
    return grads, metrics
