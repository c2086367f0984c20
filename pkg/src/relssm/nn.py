"""Small neural-net building blocks shared by the model components.

Everything holds its weights as :class:`~relssm.tensor.Tensor` attributes;
``Module.named_parameters`` walks the attribute tree so optimizers and
checkpoints can address every weight by a stable dotted name.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Module",
    "Linear",
    "MLP",
    "LSTMCell",
    "StackedLSTM",
    "GRUCell",
    "GaussianHead",
    "orthogonal",
    "fan_in_uniform",
]

VAR_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


def fan_in_uniform(rng, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng, shape) -> np.ndarray:
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    return q if shape[0] >= shape[1] else q.T


class Module:
    """Base class: parameter discovery over Tensor/Module/list/dict attrs."""

    def named_parameters(self, prefix: str = ""):
        for name, attr in vars(self).items():
            yield from _walk(f"{prefix}{name}", attr)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _walk(name, attr):
    if isinstance(attr, Tensor):
        yield name, attr
    elif isinstance(attr, Module):
        yield from attr.named_parameters(prefix=name + ".")
    elif isinstance(attr, (list, tuple)):
        for i, item in enumerate(attr):
            yield from _walk(f"{name}.{i}", item)
    elif isinstance(attr, dict):
        for k in attr:
            yield from _walk(f"{name}.{k}", attr[k])


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, bias: bool = True, zero_init: bool = False):
        if zero_init:
            self.W = Tensor(np.zeros((d_in, d_out)))
        else:
            self.W = Tensor(fan_in_uniform(rng, (d_in, d_out)))
        self.b = Tensor(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.W
        return out + self.b if self.b is not None else out


class MLP(Module):
    """Fully connected stack with tanh hidden activations."""

    def __init__(self, dims: list[int], rng, zero_last: bool = False):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, zero_init=(zero_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.tanh(x)
        return x


class LSTMCell(Module):
    """One LSTM layer; forget-gate bias starts at 1 for stable early training."""

    def __init__(self, d_in: int, d_hidden: int, rng):
        self.d_hidden = d_hidden
        self.Wx = Tensor(fan_in_uniform(rng, (d_in, 4 * d_hidden)))
        self.Wh = Tensor(
            np.concatenate([orthogonal(rng, (d_hidden, d_hidden)) for _ in range(4)], axis=1)
        )
        b = np.zeros(4 * d_hidden)
        b[d_hidden : 2 * d_hidden] = 1.0
        self.b = Tensor(b)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor):
        d = self.d_hidden
        hc = T.lstm_cell(x, h, c, self.Wx, self.Wh, self.b)
        return hc[:, 0:d], hc[:, d : 2 * d]


class StackedLSTM(Module):
    """Stacked LSTM layers; the state is a flat list [h0, c0, h1, c1, ...]."""

    def __init__(self, d_in: int, d_hidden: int, n_layers: int, rng):
        self.cells = [
            LSTMCell(d_in if i == 0 else d_hidden, d_hidden, rng) for i in range(n_layers)
        ]
        self.d_hidden = d_hidden

    @property
    def n_layers(self) -> int:
        return len(self.cells)

    def zero_state(self, n_rows: int) -> list[Tensor]:
        z = np.zeros((n_rows, self.d_hidden))
        return [Tensor(z.copy()) for _ in range(2 * self.n_layers)]

    def __call__(self, x: Tensor, state: list[Tensor]):
        new_state = []
        inp = x
        for i, cell in enumerate(self.cells):
            h, c = cell(inp, state[2 * i], state[2 * i + 1])
            new_state += [h, c]
            inp = h
        return inp, new_state


class GRUCell(Module):
    """Gated recurrent cell used to merge aggregated messages into a state."""

    def __init__(self, d_in: int, d_hidden: int, rng):
        self.d_hidden = d_hidden
        self.Wx = Tensor(fan_in_uniform(rng, (d_in, 3 * d_hidden)))
        self.Wh = Tensor(
            np.concatenate([orthogonal(rng, (d_hidden, d_hidden)) for _ in range(3)], axis=1)
        )
        self.b = Tensor(np.zeros(3 * d_hidden))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return T.gru_cell(x, h, self.Wx, self.Wh, self.b)


class GaussianHead(Module):
    """Mean/variance pair of 3-layer MLPs that share their first layer.

    The variance path ends in softplus with a small positive floor, so the
    produced diagonal Gaussians are never degenerate.
    """

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng):
        self.shared = Linear(d_in, d_hidden, rng)
        self.mean_mlp = MLP([d_hidden, d_hidden, d_out], rng)
        self.var_mlp = MLP([d_hidden, d_hidden, d_out], rng)
        self.d_out = d_out

    def __call__(self, x: Tensor):
        trunk = T.tanh(self.shared(x))
        mu = self.mean_mlp(trunk)
        var = T.softplus(self.var_mlp(trunk)) + VAR_FLOOR
        return mu, var


def gaussian_logpdf(x: Tensor, mu: Tensor, var: Tensor) -> Tensor:
    """Elementwise diagonal-Gaussian log-density (same shape as ``x``)."""
    return T.normal_logpdf(x, mu, var)
