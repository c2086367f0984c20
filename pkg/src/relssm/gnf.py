"""Equivariant invertible maps on per-vertex state matrices.

Each unit chains an elementwise affine layer, a coupling layer whose
scale/shift conditioners are message-passing blocks (so the map commutes
with vertex relabeling), and an invertible 1x1 channel-mixing convolution
held in QR form. Every layer reports its exact log-determinant per graph,
accumulated additively along the stack.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .graph import BatchedGraph, as_batched
from .gnn import MhaBlock
from .nn import Linear, Module, gaussian_logpdf
from .tensor import Tensor

__all__ = [
    "AffineLayer",
    "CouplingLayer",
    "InvertibleConv",
    "FlowStack",
    "build_flow_stack",
    "flow_logprob",
]

COUPLING_SCALE_BOUND = 2.0


def _per_graph_rowsum(x: Tensor, bg: BatchedGraph) -> Tensor:
    """Sum a per-vertex matrix over rows and vertices of each graph copy."""
    return T.segment_sum(T.sum_(x, axis=1), bg.vertex_graph, bg.n_graphs)


class AffineLayer(Module):
    """Per-channel scale and shift; scale kept positive via log storage."""

    def __init__(self, d: int):
        self.log_gamma = Tensor(np.zeros(d))
        self.beta = Tensor(np.zeros(d))
        self.d = d

    def forward(self, bg: BatchedGraph, Z: Tensor):
        gamma = T.exp(self.log_gamma)
        out = Z * gamma + self.beta
        logdet = Tensor(bg.sizes.astype(np.float64)) * T.sum_(self.log_gamma)
        return out, logdet

    def inverse(self, bg: BatchedGraph, Zp: Tensor):
        gamma = T.exp(self.log_gamma)
        out = (Zp - self.beta) / gamma
        logdet = Tensor(-bg.sizes.astype(np.float64)) * T.sum_(self.log_gamma)
        return out, logdet

    def data_init(self, activations: np.ndarray) -> None:
        """Set scale/shift so the given activations standardize to N(0, 1)."""
        a = np.asarray(activations, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] < 2 or a.shape[1] != self.d:
            raise ValueError(f"data_init needs a (>=2, {self.d}) batch, got {a.shape}")
        std = a.std(axis=0)
        if np.any(std <= 0):
            raise ValueError("data_init: zero-variance channel")
        self.log_gamma = Tensor(-np.log(std))
        self.beta = Tensor(-a.mean(axis=0) / std)


class CouplingLayer(Module):
    """Split channels; transform the second half conditioned on the first.

    One message-passing trunk (residual merge) is shared by the scale and
    shift functions, which split off a final linear head. The raw scale is
    bounded through tanh before exponentiation so the Jacobian stays
    well-conditioned. Zero-initialized heads make a fresh layer the identity.
    """

    def __init__(self, d_channels: int, d_ctx: int, d_vertex_attr: int, rng,
                 width: int = 32, n_heads: int = 2):
        if d_channels < 2:
            raise ValueError("coupling needs at least 2 channels")
        self.split = d_channels // 2
        self.d = d_channels
        d_rest = d_channels - self.split
        self.in_proj = Linear(self.split, width, rng)
        self.trunk = MhaBlock(
            width, d_ctx, d_vertex_attr, rng,
            n_heads=n_heads, d_qk=max(width // n_heads, 4),
            d_msg=max(width // n_heads, 4), d_vert_emb=8,
            combine="residual", d_hidden=width,
        )
        self.head = Linear(width, 2 * d_rest, rng, zero_init=True)
        self.d_rest = d_rest

    def _scale_shift(self, bg: BatchedGraph, ctx: Tensor, za: Tensor):
        h = self.trunk(bg, ctx, T.tanh(self.in_proj(za)))
        both = self.head(h)
        s = COUPLING_SCALE_BOUND * T.tanh(both[:, : self.d_rest])
        t = both[:, self.d_rest :]
        return s, t

    def forward(self, bg: BatchedGraph, ctx: Tensor, Z: Tensor):
        za, zb = Z[:, : self.split], Z[:, self.split :]
        s, t = self._scale_shift(bg, ctx, za)
        out = T.concat([za, zb * T.exp(s) + t], axis=1)
        return out, _per_graph_rowsum(s, bg)

    def inverse(self, bg: BatchedGraph, ctx: Tensor, Zp: Tensor):
        za, zbp = Zp[:, : self.split], Zp[:, self.split :]
        s, t = self._scale_shift(bg, ctx, za)
        out = T.concat([za, (zbp - t) * T.exp(-s)], axis=1)
        return out, -_per_graph_rowsum(s, bg)


class InvertibleConv(Module):
    """Channel-mixing linear map W = Q R applied to every vertex state.

    Q is a product of Householder reflections (exactly orthogonal by
    construction); R is upper triangular with its diagonal stored in log
    space, so |det W| = prod(diag R) is positive and cheap.
    """

    def __init__(self, d: int, rng=None, n_reflections: int | None = None):
        self.d = d
        if rng is None or n_reflections == 0:
            self.reflections = []
        else:
            n_reflections = d if n_reflections is None else n_reflections
            self.reflections = [Tensor(rng.standard_normal(d)) for _ in range(n_reflections)]
        # diagonal holds log(diag R); strict upper holds R entries; lower unused
        self.r_params = Tensor(np.zeros((d, d)))
        self._eye = np.eye(d)
        self._upper = np.triu(np.ones((d, d)), k=1)

    @classmethod
    def identity(cls, d: int) -> "InvertibleConv":
        return cls(d, rng=None, n_reflections=0)

    def _q(self) -> Tensor:
        q = Tensor(self._eye)
        for v in self.reflections:
            col = T.reshape(v, (self.d, 1))
            outer = col @ T.transpose(col)
            q = q @ (Tensor(self._eye) - outer * (2.0 / T.sum_(v * v)))
        return q

    def _r(self) -> Tensor:
        return self.r_params * Tensor(self._upper) + T.exp(self.r_params) * Tensor(self._eye)

    def matrix(self) -> Tensor:
        return self._q() @ self._r()

    def forward(self, bg: BatchedGraph, Z: Tensor):
        w = self.matrix()
        out = Z @ T.transpose(w)
        logdiag = T.sum_(self.r_params * Tensor(self._eye))
        return out, Tensor(bg.sizes.astype(np.float64)) * logdiag

    def inverse(self, bg: BatchedGraph, Zp: Tensor):
        # z = W^-1 z' = R^-1 Q^T z'  (per row)
        y = Zp @ self._q()
        z = T.transpose(T.triangular_solve(self._r(), T.transpose(y), lower=False))
        logdiag = T.sum_(self.r_params * Tensor(self._eye))
        return z, Tensor(-bg.sizes.astype(np.float64)) * logdiag


class FlowStack(Module):
    """Ordered affine -> coupling -> conv units with additive log-dets."""

    def __init__(self, units: list):
        self.units = units

    @property
    def n_units(self) -> int:
        return len(self.units)

    def forward(self, g, context: Tensor, Z: Tensor):
        bg = as_batched(g)
        total = Tensor(np.zeros(bg.n_graphs))
        for affine, coupling, conv in self.units:
            Z, ld = affine.forward(bg, Z)
            total = total + ld
            Z, ld = coupling.forward(bg, context, Z)
            total = total + ld
            Z, ld = conv.forward(bg, Z)
            total = total + ld
        return Z, total

    def inverse(self, g, context: Tensor, Zp: Tensor):
        bg = as_batched(g)
        total = Tensor(np.zeros(bg.n_graphs))
        for affine, coupling, conv in reversed(self.units):
            Zp, ld = conv.inverse(bg, Zp)
            total = total + ld
            Zp, ld = coupling.inverse(bg, context, Zp)
            total = total + ld
            Zp, ld = affine.inverse(bg, Zp)
            total = total + ld
        return Zp, total


def build_flow_stack(n_units: int, d_channels: int, d_ctx: int, d_vertex_attr: int,
                     rng, width: int = 32, random_conv: bool = True) -> FlowStack:
    units = []
    for _ in range(n_units):
        affine = AffineLayer(d_channels)
        coupling = CouplingLayer(d_channels, d_ctx, d_vertex_attr, rng, width=width)
        conv = (
            InvertibleConv(d_channels, rng) if random_conv else InvertibleConv.identity(d_channels)
        )
        units.append((affine, coupling, conv))
    return FlowStack(units)


def flow_logprob(stack: FlowStack, base_mu: Tensor, base_var: Tensor, g,
                 context: Tensor, Zp: Tensor) -> Tensor:
    """Per-graph log-density of ``Zp`` under base Gaussian pushed through the stack."""
    bg = as_batched(g)
    z0, logdet_inv = stack.inverse(bg, context, Zp)
    base = _per_graph_rowsum(gaussian_logpdf(z0, base_mu, base_var), bg)
    return base + logdet_inv
