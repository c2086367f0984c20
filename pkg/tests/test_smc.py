import math

import numpy as np
import pytest

from relssm import tensor as T
from relssm.auxobj import AuxParams
from relssm.dynamics import (
    GenerativeParams,
    advance_context,
    apply_gnn,
    global_logprob,
    init_state,
    local_logprob,
    observe_logprob,
    ModelState,
)
from relssm.experiments import LgssmParams, LgssmSmcModel, kalman_loglik, sample_lgssm
from relssm.graph import as_batched
from relssm.inference import (
    ProposalParams,
    belief_update,
    init_belief,
    propose_global,
    propose_local,
)
from relssm.smc import (
    EpisodeBatch,
    ResampleScheme,
    RssmSmcModel,
    bound_gradient,
    estimate_bound,
    resample,
    run_smc,
)
from relssm.tensor import NonFiniteError, Tape, Tensor

from tests.test_dynamics import fixed_head, small_cfg
from tests.test_gnn import random_graph


def make_models(rng, **cfg_kw):
    cfg = small_cfg(**cfg_kw)
    gen = GenerativeParams(cfg, rng)
    prop = ProposalParams(cfg, rng)
    return cfg, gen, prop


def independent_elbo(gen, prop, g, X, rng):
    """Single-sample evidence bound coded directly from the density pieces."""
    bg = as_batched(g)
    state = init_state(gen, bg)
    belief = init_belief(prop, bg)
    total = 0.0
    for t in range(X.shape[0]):
        belief = belief_update(belief, bg, Tensor(X[t]), None, prop)
        vstate, h_tilde, gstate, h_g = advance_context(gen, bg, state, None)
        z_g, logq_g = propose_global(prop, h_g, belief.b_global, rng)
        logp_g = global_logprob(gen, h_g, z_g)
        H = apply_gnn(gen, bg, z_g, h_tilde)
        Z, logq_l = propose_local(prop, bg, H, belief.B, z_g, rng)
        logp_l = local_logprob(gen, bg, H, z_g, Z)
        vstate = list(vstate)
        vstate[2] = H
        state = ModelState(vertex_lstm=vstate, global_lstm=gstate, z_prev=Z,
                           zg_prev=z_g, context_H=H, h_global=h_g)
        logg = observe_logprob(gen, bg, state, z_g, Z, Tensor(X[t]))
        total += float(
            logp_g.value[0] + logp_l.value[0] + logg.value.sum()
            - logq_g.value[0] - logq_l.value[0]
        )
    return total


def test_k1_bound_equals_independent_elbo():
    rng = np.random.default_rng(0)
    cfg, gen, prop = make_models(rng)
    g = random_graph(rng, n=4, d_v=0)
    X = rng.standard_normal((5, 4, 1)) * 0.4
    L, _, _ = estimate_bound(gen, prop, g, (X, None), 1, np.random.default_rng(42))
    ref = independent_elbo(gen, prop, g, X, np.random.default_rng(42))
    assert abs(L.item() - ref) < 1e-8


def test_equal_prior_proposal_and_unit_obs_gives_zero_bound():
    rng = np.random.default_rng(1)
    cfg, gen, prop = make_models(rng)
    gen.global_head = fixed_head(cfg.d_g)
    gen.local_head = fixed_head(cfg.d_z)
    prop.global_head = fixed_head(cfg.d_g)
    prop.local_head = fixed_head(cfg.d_z)
    gen.obs_head = fixed_head(1, var=1.0 / (2 * math.pi))  # density exactly 1 at x=0
    g = random_graph(rng, n=3, d_v=0)
    X = np.zeros((4, 3, 1))
    L, system, _ = estimate_bound(gen, prop, g, (X, None), 3, np.random.default_rng(2))
    assert abs(L.item()) < 1e-10
    np.testing.assert_allclose(system.log_weights, 0.0, atol=1e-10)


def test_lgssm_unbiasedness_small():
    params = LgssmParams(a=0.9, q=0.1, c=1.0, r=0.1)
    rng = np.random.default_rng(3)
    xs = sample_lgssm(params, 5, rng)
    ll = kalman_loglik(params, xs)
    model = LgssmSmcModel(params, xs, n_reps=800, k_particles=4)
    bound, _, _, _ = run_smc(model, np.random.default_rng(4))
    est = np.exp(bound.value)
    se = est.std(ddof=1) / math.sqrt(len(est))
    assert abs(est.mean() - math.exp(ll)) < 3 * se


def test_resample_systematic_uniform_weights():
    idx = resample(np.zeros(6), np.random.default_rng(0), "systematic")
    assert sorted(idx.tolist()) == list(range(6))


def test_resample_degenerate_weight():
    logw = np.full(5, -np.inf)
    logw[3] = 0.0
    for scheme in ("systematic", "multinomial"):
        idx = resample(logw, np.random.default_rng(1), scheme)
        assert (idx == 3).all()


def test_resample_no_finite_weights_raises():
    with pytest.raises(NonFiniteError):
        resample(np.full(4, -np.inf), np.random.default_rng(0), "systematic")


def test_multinomial_counts_match_weights():
    rng = np.random.default_rng(5)
    logw = np.log(np.array([0.5, 0.3, 0.2]))
    draws = 100_000 // 3
    counts = np.zeros(3)
    for _ in range(draws):
        idx = resample(logw, rng, "multinomial")
        counts += np.bincount(idx, minlength=3)
    n = draws * 3
    p = np.array([0.5, 0.3, 0.2])
    se = np.sqrt(p * (1 - p) * n)
    assert (np.abs(counts - p * n) < 3 * se).all()


def test_all_weights_neg_inf_reports_step():
    params = LgssmParams(a=0.9, q=0.1, c=1.0, r=0.1)
    xs = np.array([0.0, 1e200, 0.0])
    model = LgssmSmcModel(params, xs, n_reps=1, k_particles=3)
    with pytest.raises(NonFiniteError, match="step 1"):
        run_smc(model, np.random.default_rng(0))


def test_beta_zero_equals_bare_bound_gradient():
    rng = np.random.default_rng(6)
    cfg, gen, prop = make_models(rng)
    aux = AuxParams(cfg, rng, n_negatives=2)
    g = random_graph(rng, n=3, d_v=0)
    X = rng.standard_normal((1, 4, 3, 1)) * 0.3
    batch = EpisodeBatch([g], X)
    g0, m0 = bound_gradient(gen, prop, aux, batch, 2, np.random.default_rng(7),
                            beta1=0.0, beta2=0.0)
    with Tape() as tape:
        model = RssmSmcModel(gen, prop, batch, 2)
        bound, _, _, _ = run_smc(model, np.random.default_rng(7))
        loss = -T.mean(bound)
    named = list(gen.named_parameters("gen.")) + list(prop.named_parameters("prop."))
    ref = tape.grad(loss, [p for _, p in named])
    for (name, _), r in zip(named, ref):
        np.testing.assert_array_equal(g0[name], r)
    for name, arr in g0.items():
        if name.startswith("aux."):
            assert np.all(arr == 0)


def test_genealogy_deterministic_under_frozen_rng():
    rng = np.random.default_rng(8)
    cfg, gen, prop = make_models(rng)
    g = random_graph(rng, n=3, d_v=0)
    X = rng.standard_normal((5, 3, 1)) * 0.3
    _, sys1, _ = estimate_bound(gen, prop, g, (X, None), 4, np.random.default_rng(9))
    _, sys2, _ = estimate_bound(gen, prop, g, (X, None), 4, np.random.default_rng(9))
    for a, b in zip(sys1.genealogy, sys2.genealogy):
        assert np.array_equal(a, b)
    np.testing.assert_array_equal(sys1.log_weights, sys2.log_weights)


def test_particle_exchangeability():
    # the per-step bound increment is a log-mean over particles, so permuting
    # the particle axis of the weights leaves every increment unchanged
    rng = np.random.default_rng(10)
    cfg, gen, prop = make_models(rng)
    g = random_graph(rng, n=3, d_v=0)
    X = rng.standard_normal((3, 3, 1)) * 0.3
    _, system, _ = estimate_bound(gen, prop, g, (X, None), 5, np.random.default_rng(11))
    logw = system.log_weights[:, 0, :]
    perm = np.random.default_rng(12).permutation(5)
    for t in range(logw.shape[0]):
        a = np.log(np.exp(logw[t] - logw[t].max()).mean()) + logw[t].max()
        b = np.log(np.exp(logw[t][perm] - logw[t].max()).mean()) + logw[t].max()
        assert abs(a - b) < 1e-12

    # distributional check: permuting the particle labels of the noise stream
    # leaves the mean bound statistically unchanged
    params = LgssmParams()
    xs = sample_lgssm(params, 4, np.random.default_rng(13))
    base = []
    permuted = []
    K = 4
    for seed in range(400):
        m = LgssmSmcModel(params, xs, n_reps=1, k_particles=K)
        b0, _, _, _ = run_smc(m, np.random.default_rng(1000 + seed))

        class PermRng:
            def __init__(self, seed):
                self.inner = np.random.default_rng(seed)

            def standard_normal(self, shape):
                x = self.inner.standard_normal(shape)
                return x.reshape(-1, K)[:, ::-1].reshape(shape) if x.size % K == 0 else x

            def random(self, *a, **k):
                return self.inner.random(*a, **k)

            def choice(self, *a, **k):
                return self.inner.choice(*a, **k)

        m2 = LgssmSmcModel(params, xs, n_reps=1, k_particles=K)
        b1, _, _, _ = run_smc(m2, PermRng(1000 + seed))
        base.append(b0.value[0])
        permuted.append(b1.value[0])
    base, permuted = np.array(base), np.array(permuted)
    se = math.sqrt(base.var(ddof=1) / len(base) + permuted.var(ddof=1) / len(permuted))
    assert abs(base.mean() - permuted.mean()) < 3 * se


def test_k_must_be_positive():
    rng = np.random.default_rng(14)
    cfg, gen, prop = make_models(rng)
    g = random_graph(rng, n=3, d_v=0)
    with pytest.raises(ValueError):
        RssmSmcModel(gen, prop, EpisodeBatch([g], np.zeros((1, 2, 3, 1))), 0)
