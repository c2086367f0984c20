"""Attributed directed graphs, block-model sampling, and batched layouts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AttributedGraph",
    "BatchedGraph",
    "SbmConfig",
    "as_batched",
    "batch_graphs",
    "in_neighbors",
    "permute_graph",
    "sample_sbm",
]


class GraphError(ValueError):
    pass


@dataclass
class AttributedGraph:
    """Static directed graph with per-vertex and per-edge attributes.

    ``edges`` is an (E, 2) int array of (tail, head) pairs; an edge (j, i)
    means j can influence i. Edges are stored sorted by (head, tail) so that
    neighbourhood reductions are bit-reproducible.
    """

    n_vertices: int
    edges: np.ndarray
    vertex_attrs: np.ndarray | None = None
    edge_attrs: np.ndarray | None = None
    _in_neighbors: list = field(default=None, repr=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= self.n_vertices):
            raise GraphError(f"edge endpoint out of range [0, {self.n_vertices})")
        order = np.lexsort((e[:, 0], e[:, 1])) if len(e) else np.array([], dtype=np.intp)
        e = e[order]
        if len(e) > 1 and np.any(np.all(e[1:] == e[:-1], axis=1)):
            raise GraphError("duplicate edges")
        self.edges = e
        if self.vertex_attrs is None:
            self.vertex_attrs = np.zeros((self.n_vertices, 0))
        else:
            self.vertex_attrs = np.asarray(self.vertex_attrs, dtype=np.float64)
            if self.vertex_attrs.shape[0] != self.n_vertices:
                raise GraphError("vertex_attrs row count != n_vertices")
        if self.edge_attrs is not None:
            self.edge_attrs = np.asarray(self.edge_attrs, dtype=np.float64)[order]
            if self.edge_attrs.shape[0] != len(e):
                raise GraphError("edge_attrs row count != edge count")
        neigh = [[] for _ in range(self.n_vertices)]
        for j, i in e:
            neigh[i].append(int(j))
        self._in_neighbors = [np.array(sorted(n), dtype=np.intp) for n in neigh]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def d_vertex(self) -> int:
        return self.vertex_attrs.shape[1]

    @property
    def d_edge(self) -> int:
        return 0 if self.edge_attrs is None else self.edge_attrs.shape[1]


def in_neighbors(g: AttributedGraph, i: int) -> np.ndarray:
    """Direct predecessors of vertex ``i``, ascending."""
    if not 0 <= i < g.n_vertices:
        raise GraphError(f"vertex {i} out of range [0, {g.n_vertices})")
    return g._in_neighbors[i]


def permute_graph(g: AttributedGraph, perm: np.ndarray) -> AttributedGraph:
    """Relabel vertices: old vertex ``i`` becomes ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.intp)
    edges = perm[g.edges] if g.n_edges else g.edges
    vattrs = np.empty_like(g.vertex_attrs)
    vattrs[perm] = g.vertex_attrs
    return AttributedGraph(g.n_vertices, edges, vattrs, g.edge_attrs)


@dataclass
class SbmConfig:
    """Symmetric stochastic block model with equal-sized communities."""

    n_vertices: int
    n_communities: int
    p_within: float
    p_cross: float

    def __post_init__(self):
        if not 0.0 <= self.p_cross <= self.p_within <= 1.0:
            raise GraphError("need 0 <= p_cross <= p_within <= 1")

    def communities(self) -> np.ndarray:
        return (np.arange(self.n_vertices) * self.n_communities) // self.n_vertices


def sample_sbm(cfg: SbmConfig, rng) -> AttributedGraph:
    """Sample an undirected block-model graph, stored as paired directed edges.

    Vertex ``i`` belongs to community ``floor(i*K/N)``; each unordered pair is
    drawn once with its block probability; no self-loops. Attribute slots are
    left empty for the caller to fill.
    """
    if cfg.n_vertices % cfg.n_communities != 0:
        raise GraphError(
            f"community count {cfg.n_communities} must divide {cfg.n_vertices}"
        )
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    comm = cfg.communities()
    n = cfg.n_vertices
    probs = np.where(comm[:, None] == comm[None, :], cfg.p_within, cfg.p_cross)
    draw = rng.random((n, n))
    hit = np.triu(draw < probs, k=1)
    ii, jj = np.nonzero(hit)
    edges = np.concatenate([np.stack([ii, jj], 1), np.stack([jj, ii], 1)], axis=0)
    return AttributedGraph(n, edges)


@dataclass
class BatchedGraph:
    """Disjoint union of graph copies, flattened for vectorized evaluation.

    ``n_graphs`` copies live side by side; vertex row ``offsets[c] + i`` is
    vertex ``i`` of copy ``c``. Edge arrays are sorted by (dst, src) within
    each copy so segment reductions stay deterministic.
    """

    n_graphs: int
    n_vertices: int            # total rows
    vertex_graph: np.ndarray   # (n_vertices,) copy index per vertex row
    offsets: np.ndarray        # (n_graphs,) first vertex row of each copy
    sizes: np.ndarray          # (n_graphs,) vertices per copy
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_nonself: np.ndarray   # bool mask of non-self-loop edges
    vertex_attrs: np.ndarray   # (n_vertices, d_v)
    edge_attrs: np.ndarray | None

    @property
    def d_vertex(self) -> int:
        return self.vertex_attrs.shape[1]

    @property
    def d_edge(self) -> int:
        return 0 if self.edge_attrs is None else self.edge_attrs.shape[1]

    @property
    def uniform_size(self) -> int:
        """Common vertex count when every copy has one, else 0."""
        first = int(self.sizes[0])
        return first if np.all(self.sizes == first) else 0

    def gather_plan(self, name: str, index: np.ndarray):
        """Cache scatter plans for index arrays tied to this graph batch."""
        from .tensor import make_gather_plan

        cache = getattr(self, "_plans", None)
        if cache is None:
            cache = {}
            object.__setattr__(self, "_plans", cache)
        if name not in cache:
            cache[name] = make_gather_plan(index)
        return cache[name]


def batch_graphs(graphs: list[AttributedGraph], copies: int = 1) -> BatchedGraph:
    """Stack every graph ``copies`` times: copy index = g * copies + c."""
    if not graphs:
        raise GraphError("batch of zero graphs")
    d_v = graphs[0].d_vertex
    d_e = graphs[0].d_edge
    sizes, vgr, srcs, dsts, vatt, eatt = [], [], [], [], [], []
    offset = 0
    copy_idx = 0
    offsets = []
    for g in graphs:
        if g.d_vertex != d_v or g.d_edge != d_e:
            raise GraphError("attribute dimensions differ across batch")
        for _ in range(copies):
            offsets.append(offset)
            sizes.append(g.n_vertices)
            vgr.append(np.full(g.n_vertices, copy_idx, dtype=np.intp))
            if g.n_edges:
                srcs.append(g.edges[:, 0] + offset)
                dsts.append(g.edges[:, 1] + offset)
                if d_e:
                    eatt.append(g.edge_attrs)
            vatt.append(g.vertex_attrs)
            offset += g.n_vertices
            copy_idx += 1
    edge_src = np.concatenate(srcs) if srcs else np.array([], dtype=np.intp)
    edge_dst = np.concatenate(dsts) if dsts else np.array([], dtype=np.intp)
    return BatchedGraph(
        n_graphs=copy_idx,
        n_vertices=offset,
        vertex_graph=np.concatenate(vgr),
        offsets=np.array(offsets, dtype=np.intp),
        sizes=np.array(sizes, dtype=np.intp),
        edge_src=edge_src,
        edge_dst=edge_dst,
        edge_nonself=edge_src != edge_dst,
        vertex_attrs=np.concatenate(vatt, axis=0),
        edge_attrs=np.concatenate(eatt, axis=0) if eatt else None,
    )


def as_batched(g) -> BatchedGraph:
    if isinstance(g, BatchedGraph):
        return g
    return batch_graphs([g])
