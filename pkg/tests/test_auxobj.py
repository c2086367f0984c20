import numpy as np
import pytest

from relssm import tensor as T
from relssm.auxobj import AuxParams, aux_losses, summarize_future
from relssm.dynamics import GenerativeParams
from relssm.graph import AttributedGraph
from relssm.inference import ProposalParams
from relssm.smc import EpisodeBatch, RssmSmcModel, run_smc
from relssm.tensor import Tape, Tensor

from tests.test_dynamics import small_cfg
from tests.test_gnn import random_graph


def setup_run(rng, n=4, steps=5, K=2, n_neg=2, B=1, **cfg_kw):
    cfg = small_cfg(**cfg_kw)
    gen = GenerativeParams(cfg, rng)
    prop = ProposalParams(cfg, rng)
    aux = AuxParams(cfg, rng, n_negatives=n_neg)
    graphs = [random_graph(rng, n=n, d_v=0) for _ in range(B)]
    X = rng.standard_normal((B, steps, n, 1)) * 0.4
    batch = EpisodeBatch(graphs, X)
    return cfg, gen, prop, aux, batch


def test_summaries_causal_and_deterministic():
    rng = np.random.default_rng(0)
    cfg, gen, prop, aux, batch = setup_run(rng, steps=6)
    s1 = summarize_future(batch, aux)
    s2 = summarize_future(batch, aux)
    assert len(s1.c) == 5
    for a, b in zip(s1.c, s2.c):
        assert np.array_equal(a.value, b.value)
    # c[t] must not respond to x at steps <= t
    X2 = batch.X.copy()
    X2[:, :3] += 50.0
    batch2 = EpisodeBatch(batch.graphs, X2)
    s3 = summarize_future(batch2, aux)
    for t in range(2, 5):
        assert np.array_equal(s1.c[t].value, s3.c[t].value)
    assert not np.array_equal(s1.c[1].value, s3.c[1].value)
    # the last summary depends only on the final observation
    X3 = batch.X.copy()
    X3[:, -1] += 1.0
    s4 = summarize_future(EpisodeBatch(batch.graphs, X3), aux)
    assert not np.array_equal(s1.c[4].value, s4.c[4].value)


def test_summaries_need_two_steps():
    rng = np.random.default_rng(1)
    cfg, gen, prop, aux, batch = setup_run(rng, steps=1)
    with pytest.raises(ValueError, match="at least 2"):
        summarize_future(batch, aux)


def run_aux(gen, prop, aux, batch, K, seed):
    model = RssmSmcModel(gen, prop, batch, K)
    _, _, records, _ = run_smc(model, np.random.default_rng(seed), record_aux=True)
    summaries = summarize_future(batch, aux)
    return aux_losses(records, summaries, model, aux, np.random.default_rng(seed + 1)), model


def test_aux_losses_nonpositive():
    rng = np.random.default_rng(2)
    cfg, gen, prop, aux, batch = setup_run(rng, B=2, n_neg=3)
    (l1, l2), _ = run_aux(gen, prop, aux, batch, 2, seed=3)
    assert (l1.value <= 1e-12).all()
    assert (l2.value <= 1e-12).all()


def test_only_positive_gives_zero():
    rng = np.random.default_rng(3)
    cfg, gen, prop, aux, batch = setup_run(rng, n_neg=0)
    (l1, l2), _ = run_aux(gen, prop, aux, batch, 2, seed=4)
    np.testing.assert_allclose(l1.value, 0.0, atol=1e-12)
    np.testing.assert_allclose(l2.value, 0.0, atol=1e-12)


def test_zero_score_matrix_gives_log_pool_size():
    rng = np.random.default_rng(4)
    n, steps, n_neg, K = 4, 5, 2, 3
    cfg, gen, prop, aux, batch = setup_run(rng, n=n, steps=steps, n_neg=n_neg, K=K)
    aux.score1_W.value = np.zeros_like(aux.score1_W.value)
    aux.score2_W.value = np.zeros_like(aux.score2_W.value)
    (l1, l2), _ = run_aux(gen, prop, aux, batch, K, seed=5)
    expect = -(steps - 1) * n * K * np.log(1 + n_neg) / K
    assert abs(l1.value[0] - expect) < 1e-10
    assert abs(l2.value[0] - expect) < 1e-10


def test_gradients_match_fd():
    from tests.test_tensor import check_sampled_grads

    rng = np.random.default_rng(5)
    cfg, gen, prop, aux, batch = setup_run(rng, n=3, steps=4, n_neg=2)
    params = [p for _, p in aux.named_parameters()]

    def run():
        with Tape() as tape:
            model = RssmSmcModel(gen, prop, batch, 2)
            _, _, records, _ = run_smc(model, np.random.default_rng(7), record_aux=True)
            summaries = summarize_future(batch, aux)
            l1, l2 = aux_losses(records, summaries, model, aux, np.random.default_rng(8))
            loss = T.sum_(l1) + T.sum_(l2)
        return loss, tape

    loss, tape = run()
    analytic = tape.grad(loss, params)
    check_sampled_grads(lambda: run()[0].item(), params, analytic,
                        np.random.default_rng(11), per_array=2)


def test_term_shift_invariance():
    # adding a constant to every score in one pool leaves the term unchanged;
    # doubling the score matrix changes it
    rng = np.random.default_rng(6)
    cfg, gen, prop, aux, batch = setup_run(rng, n_neg=2)
    (l1a, _), _ = run_aux(gen, prop, aux, batch, 2, seed=9)
    from relssm.auxobj import _info_nce

    proj = Tensor(rng.standard_normal((6, 3)))
    c = Tensor(rng.standard_normal((6, 3)))
    tile = np.arange(6)
    neg = np.stack([(np.arange(6) + 1) % 6, (np.arange(6) + 2) % 6], axis=1)
    base = _info_nce(proj, c, tile, neg)
    # shifting all scores of a row's pool == adding a constant column-wise is
    # not expressible through c, so check via direct logits arithmetic
    pos = (proj.value * c.value[tile]).sum(1)
    negs = np.stack([(proj.value * c.value[neg[:, j][tile]]).sum(1) for j in range(2)], 1)
    scores = np.concatenate([pos[:, None], negs], axis=1)
    shifted = scores + 17.0
    ref = scores[:, 0] - (np.log(np.exp(scores - scores.max(1, keepdims=True)).sum(1))
                          + scores.max(1))
    ref_shift = shifted[:, 0] - (np.log(np.exp(shifted - shifted.max(1, keepdims=True)).sum(1))
                                 + shifted.max(1))
    np.testing.assert_allclose(base.value, ref, atol=1e-10)
    np.testing.assert_allclose(ref, ref_shift, atol=1e-10)


def test_l2_score_ignores_own_state():
    # the neighbour sum excludes the vertex itself, so the L2 term for a
    # vertex has zero gradient w.r.t. that vertex's own state row
    rng = np.random.default_rng(7)
    cfg = small_cfg()
    aux = AuxParams(cfg, rng, n_negatives=1)
    g = AttributedGraph(2, [(0, 1)])  # vertex 1 sees vertex 0; vertex 0 sees nothing
    from relssm.graph import as_batched

    bg = as_batched(g)
    H = Tensor(rng.standard_normal((2, cfg.d_rnn)))
    c = Tensor(rng.standard_normal((2, cfg.d_rnn)))
    with Tape() as tape:
        src, dst = bg.edge_src[bg.edge_nonself], bg.edge_dst[bg.edge_nonself]
        h_sum = T.segment_sum(T.gather_rows(H, src), dst, bg.n_vertices)
        h_hat = aux.neighbor_mlp(h_sum)
        proj = h_hat @ aux.score2_W
        # term for vertex 1 only
        score_pos = T.sum_(proj[1:2] * c[1:2], axis=1)
        score_neg = T.sum_(proj[1:2] * c[0:1], axis=1)
        pool = T.concat([T.reshape(score_pos, (1, 1)), T.reshape(score_neg, (1, 1))], axis=1)
        term = T.reshape(pool[:, 0], (1,)) - T.logsumexp(pool, axis=1)
        loss = T.sum_(term)
    (gH,) = tape.grad(loss, [H])
    assert np.all(gH[1] == 0.0)  # own state row untouched
    assert np.abs(gH[0]).max() > 0  # neighbour's state does matter


def test_single_vertex_batch_warns(caplog):
    import logging

    rng = np.random.default_rng(8)
    cfg = small_cfg()
    gen = GenerativeParams(cfg, rng)
    prop = ProposalParams(cfg, rng)
    aux = AuxParams(cfg, rng, n_negatives=4)
    g1 = AttributedGraph(1, np.zeros((0, 2), dtype=int))
    batch = EpisodeBatch([g1], rng.standard_normal((1, 3, 1, 1)))
    model = RssmSmcModel(gen, prop, batch, 2)
    _, _, records, _ = run_smc(model, np.random.default_rng(9), record_aux=True)
    summaries = summarize_future(batch, aux)
    with caplog.at_level(logging.WARNING):
        l1, l2 = aux_losses(records, summaries, model, aux, np.random.default_rng(10))
    assert "no negatives" in caplog.text
    np.testing.assert_allclose(l1.value, 0.0, atol=1e-12)
