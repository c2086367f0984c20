import numpy as np
import pytest

from relssm import tensor as T
from relssm.gnn import AttentionHead, MhaBlock, Readout, gnn_stack, with_edge_attrs
from relssm.graph import AttributedGraph, as_batched, batch_graphs, permute_graph, sample_sbm, SbmConfig
from relssm.tensor import Tape, Tensor


def random_graph(rng, n=6, p=0.5, d_v=3, d_e=0):
    while True:
        mask = rng.random((n, n)) < p
        np.fill_diagonal(mask, False)
        src, dst = np.nonzero(mask)
        if len(src):
            break
    vattrs = rng.standard_normal((n, d_v))
    eattrs = rng.standard_normal((len(src), d_e)) if d_e else None
    return AttributedGraph(n, np.stack([src, dst], 1), vattrs, eattrs)


def make_block(rng, d_state=5, d_ctx=4, d_v=3, combine="gru", n_heads=2):
    return MhaBlock(d_state, d_ctx, d_v, rng, n_heads=n_heads, d_qk=6, d_msg=6,
                    d_vert_emb=4, combine=combine, d_hidden=16)


def test_single_in_neighbor_weight_is_one():
    rng = np.random.default_rng(0)
    g = AttributedGraph(3, [(0, 1)], rng.standard_normal((3, 2)))
    bg = as_batched(g)
    head = AttentionHead(d_tilde=4 + 2 + 0, d_qk=3, d_msg=3, d_edge=0, rng=rng)
    h_tilde = Tensor(np.concatenate([rng.standard_normal((3, 4)), bg.vertex_attrs], 1))
    _, alpha = head(bg, h_tilde)
    assert alpha.value.shape == (1,)
    assert abs(alpha.value[0] - 1.0) < 1e-12


def test_attention_weights_normalize_per_vertex():
    rng = np.random.default_rng(1)
    g = random_graph(rng, n=7, p=0.6, d_v=0)
    bg = as_batched(g)
    head = AttentionHead(d_tilde=5, d_qk=4, d_msg=4, d_edge=0, rng=rng)
    _, alpha = head(bg, Tensor(rng.standard_normal((7, 5))))
    sums = np.zeros(7)
    np.add.at(sums, bg.edge_dst, alpha.value)
    present = np.unique(bg.edge_dst)
    assert (alpha.value >= 0).all()
    np.testing.assert_allclose(sums[present], 1.0, atol=1e-9)


def test_no_in_neighbors_gets_zero_aggregate():
    rng = np.random.default_rng(2)
    # vertex 2 has no in-edges
    g = AttributedGraph(3, [(0, 1)], rng.standard_normal((3, 2)))
    bg = as_batched(g)
    head = AttentionHead(d_tilde=6, d_qk=3, d_msg=5, d_edge=0, rng=rng)
    agg, _ = head(bg, Tensor(rng.standard_normal((3, 6))))
    np.testing.assert_array_equal(agg.value[2], 0.0)
    np.testing.assert_array_equal(agg.value[0], 0.0)


@pytest.mark.parametrize("combine", ["gru", "residual"])
def test_block_equivariance(combine):
    rng = np.random.default_rng(3)
    for _ in range(10):
        g = random_graph(rng, n=6, d_v=3, d_e=2)
        block = with_edge_attrs(make_block(rng, combine=combine), 2, rng)
        ctx = Tensor(rng.standard_normal((1, 4)))
        H = rng.standard_normal((6, 5))
        out = block(g, ctx, Tensor(H)).value
        perm = rng.permutation(6)
        gp = permute_graph(g, perm)
        Hp = np.empty_like(H)
        Hp[perm] = H
        outp = block(gp, ctx, Tensor(Hp)).value
        np.testing.assert_allclose(outp[perm], out, atol=1e-9)


def test_missing_edge_attrs_raises():
    rng = np.random.default_rng(4)
    g = random_graph(rng, n=5, d_v=3, d_e=0)
    block = with_edge_attrs(make_block(rng), 2, rng)
    with pytest.raises(ValueError, match="edge attributes"):
        block(g, Tensor(rng.standard_normal((1, 4))), Tensor(rng.standard_normal((5, 5))))


def test_stack_empty_is_identity():
    rng = np.random.default_rng(5)
    g = random_graph(rng, n=4, d_v=0)
    H = Tensor(rng.standard_normal((4, 5)))
    out = gnn_stack(g, Tensor(rng.standard_normal((1, 4))), H, [])
    assert out is H


def test_stack_two_equals_composition():
    rng = np.random.default_rng(6)
    g = random_graph(rng, n=5, d_v=3)
    blocks = [make_block(rng), make_block(rng)]
    ctx = Tensor(rng.standard_normal((1, 4)))
    H = Tensor(rng.standard_normal((5, 5)))
    a = gnn_stack(g, ctx, H, blocks).value
    b = blocks[1](g, ctx, blocks[0](g, ctx, H)).value
    np.testing.assert_array_equal(a, b)


def test_stack_dim_mismatch():
    rng = np.random.default_rng(7)
    g = random_graph(rng, n=4, d_v=3)
    with pytest.raises(T.ShapeError, match="width"):
        gnn_stack(g, Tensor(np.zeros((1, 4))), Tensor(np.zeros((4, 9))), [make_block(rng)])


def test_readout_identical_rows_and_invariance():
    rng = np.random.default_rng(8)
    ro = Readout(5, 3, rng)
    g = AttributedGraph(4, np.zeros((0, 2), dtype=int))
    h = rng.standard_normal(5)
    H = Tensor(np.tile(h, (4, 1)))
    out = ro(g, H)
    # mean == max == h, so the output is the gated unit applied to [h, h]
    u = np.concatenate([h, h])
    expect = np.tanh(u @ ro.gate_a.W.value + ro.gate_a.b.value) * (
        1 / (1 + np.exp(-(u @ ro.gate_b.W.value + ro.gate_b.b.value)))
    )
    np.testing.assert_allclose(out.value[0], expect, atol=1e-12)

    H2 = rng.standard_normal((4, 5))
    perm = rng.permutation(4)
    a = ro(g, Tensor(H2)).value
    b = ro(g, Tensor(H2[perm])).value
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_readout_single_vertex():
    rng = np.random.default_rng(9)
    ro = Readout(3, 2, rng)
    g = AttributedGraph(1, np.zeros((0, 2), dtype=int))
    h = rng.standard_normal((1, 3))
    out = ro(g, Tensor(h))
    u = np.concatenate([h[0], h[0]])
    expect = np.tanh(u @ ro.gate_a.W.value + ro.gate_a.b.value) * (
        1 / (1 + np.exp(-(u @ ro.gate_b.W.value + ro.gate_b.b.value)))
    )
    np.testing.assert_allclose(out.value[0], expect, atol=1e-12)


def test_block_gradients_match_fd():
    from tests.test_tensor import assert_grads_close, finite_diff

    rng = np.random.default_rng(10)
    g = random_graph(rng, n=5, d_v=2)
    block = make_block(rng, d_state=4, d_ctx=3, d_v=2, combine="residual")
    ro = Readout(4, 2, rng)
    ctx = Tensor(rng.standard_normal((1, 3)))
    H = Tensor(rng.standard_normal((5, 4)))
    params = [p for _, p in block.named_parameters()] + [ctx, H]

    def run():
        with Tape() as tape:
            out = block(g, ctx, H)
            loss = T.sum_(ro(g, out))
        return loss, tape

    loss, tape = run()
    analytic = tape.grad(loss, params)
    numeric = finite_diff(lambda: run()[0].item(), params)
    assert_grads_close(analytic, numeric)


def test_batched_matches_separate_graphs():
    rng = np.random.default_rng(11)
    g1 = random_graph(rng, n=4, d_v=2)
    g2 = random_graph(rng, n=6, d_v=2)
    block = make_block(rng, d_state=4, d_ctx=3, d_v=2)
    c1 = rng.standard_normal((1, 3))
    c2 = rng.standard_normal((1, 3))
    H1 = rng.standard_normal((4, 4))
    H2 = rng.standard_normal((6, 4))
    o1 = block(g1, Tensor(c1), Tensor(H1)).value
    o2 = block(g2, Tensor(c2), Tensor(H2)).value
    bg = batch_graphs([g1, g2])
    ob = block(bg, Tensor(np.concatenate([c1, c2])), Tensor(np.concatenate([H1, H2]))).value
    np.testing.assert_allclose(ob, np.concatenate([o1, o2]), atol=1e-12)
