import numpy as np
import pytest

from relssm.graph import (
    AttributedGraph,
    GraphError,
    SbmConfig,
    batch_graphs,
    in_neighbors,
    permute_graph,
    sample_sbm,
)


def test_complete_graph_when_p_one():
    g = sample_sbm(SbmConfig(3, 1, 1.0, 1.0), rng=0)
    assert g.n_edges == 6
    assert not np.any(g.edges[:, 0] == g.edges[:, 1])


def test_empty_when_p_zero():
    g = sample_sbm(SbmConfig(6, 3, 0.0, 0.0), rng=0)
    assert g.n_edges == 0
    assert all(len(in_neighbors(g, i)) == 0 for i in range(6))


def test_sbm_expected_edge_count():
    # N=36, K=3: 3*C(12,2)=198 within pairs, 3*144=432 cross pairs
    cfg = SbmConfig(36, 3, 1 / 3, 1 / 18)
    expect = 198 * (1 / 3) + 432 * (1 / 18)
    rng = np.random.default_rng(7)
    counts = np.array([sample_sbm(cfg, rng).n_edges / 2 for _ in range(1000)])
    se = counts.std(ddof=1) / np.sqrt(len(counts))
    assert abs(counts.mean() - expect) < 3 * se


def test_in_neighbors_basic():
    g = AttributedGraph(2, [(0, 1)])
    assert in_neighbors(g, 1).tolist() == [0]
    assert in_neighbors(g, 0).tolist() == []
    full = sample_sbm(SbmConfig(3, 1, 1.0, 1.0), rng=1)
    assert in_neighbors(full, 0).tolist() == [1, 2]


def test_in_neighbors_out_of_range():
    g = AttributedGraph(2, [(0, 1)])
    with pytest.raises(GraphError):
        in_neighbors(g, 2)


def test_duplicate_edges_rejected():
    with pytest.raises(GraphError):
        AttributedGraph(3, [(0, 1), (0, 1)])


def test_permutation_consistency():
    rng = np.random.default_rng(3)
    for _ in range(20):
        g = sample_sbm(SbmConfig(8, 2, 0.6, 0.2), rng)
        perm = rng.permutation(8)
        gp = permute_graph(g, perm)
        for i in range(8):
            assert sorted(perm[in_neighbors(g, i)]) == in_neighbors(gp, perm[i]).tolist()


def test_sbm_reproducible():
    cfg = SbmConfig(12, 3, 0.5, 0.1)
    a = sample_sbm(cfg, rng=42)
    b = sample_sbm(cfg, rng=42)
    assert np.array_equal(a.edges, b.edges)


def test_sbm_k_not_dividing_raises():
    with pytest.raises(GraphError):
        sample_sbm(SbmConfig(10, 3, 0.5, 0.1), rng=0)


def test_batch_layout():
    g1 = AttributedGraph(2, [(0, 1)])
    g2 = AttributedGraph(3, [(1, 0), (2, 0)])
    bg = batch_graphs([g1, g2], copies=2)
    assert bg.n_graphs == 4
    assert bg.n_vertices == 10
    assert bg.offsets.tolist() == [0, 2, 4, 7]
    assert bg.vertex_graph.tolist() == [0, 0, 1, 1, 2, 2, 2, 3, 3, 3]
    # copy 1 of g1 occupies rows 2..3 with edge 2->3
    assert (bg.edge_src[1], bg.edge_dst[1]) == (2, 3)
