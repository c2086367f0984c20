"""Dense float64 arrays with reverse-mode automatic differentiation.

All model math in this package runs on :class:`Tensor`, a thin immutable
wrapper around a ``numpy`` float64 array. When a :class:`Tape` is active,
every primitive records itself so that :meth:`Tape.grad` can later replay
the chain rule backwards. Without an active tape the same functions are
plain numpy calls, which is what evaluation-only code paths use.

Broadcasting is deliberately restricted: scalars combine with anything and
a row vector combines with a matrix; every other shape mismatch raises
:class:`ShapeError`. Per-row scaling is its own primitive
(:func:`scale_rows`) instead of implicit column broadcasting.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "concat",
    "cos",
    "exp",
    "gather_rows",
    "gru_cell",
    "log",
    "logsumexp",
    "lstm_cell",
    "matmul",
    "take_pairs",
    "max_",
    "mean",
    "normal_logpdf",
    "repeat_rows",
    "reshape",
    "scale_rows",
    "tile_blocks",
    "segment_max",
    "segment_mean",
    "segment_sum",
    "shift_rows",
    "sigmoid",
    "sin",
    "softmax",
    "softplus",
    "sqrt",
    "stop_gradient",
    "sum_",
    "tanh",
    "transpose",
    "triangular_solve",
]

_uid = itertools.count(1)
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a sanctioned value (density parameter, loss) is NaN/Inf."""


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """Immutable float64 array node. Do not mutate ``.value`` in place."""

    __slots__ = ("value", "uid")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.uid = next(_uid)

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return _slice(self, key)


def tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Use as a context manager around the recorded computation; one tape per
    thread, rebuilt each step. ``grad`` consumes the record in reverse.
    """

    def __init__(self):
        # entry: (out_uid, in_uids, vjp, fwd, in_tensors, out_tensor)
        self.entries: list[tuple] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already recording on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, out: Tensor, ins: Sequence[Tensor], vjp: Callable, fwd: Callable):
        self.entries.append((out.uid, tuple(t.uid for t in ins), vjp, fwd, tuple(ins), out))

    def replay(self) -> None:
        """Recompute every recorded output in order, in place of its value.

        Inputs recorded on the tape keep their current values, so replay
        after resetting them reproduces the original outputs bit-identically.
        """
        for _, _, _, fwd, ins, out in self.entries:
            out.value = fwd(*(t.value for t in ins))

    def grad(self, output: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
        """Adjoints of a scalar ``output`` w.r.t. ``params``.

        Parameters never touched by the recorded computation get a zero
        gradient rather than an error.
        """
        if output.value.shape != ():
            raise ShapeError(f"grad needs a scalar output, got shape {output.value.shape}")
        adjoint: dict[int, np.ndarray] = {output.uid: np.asarray(1.0)}
        for out_uid, in_uids, vjp, _, ins, _ in reversed(self.entries):
            g = adjoint.get(out_uid)
            if g is None:
                continue
            for t, gin in zip(ins, vjp(g)):
                if gin is None:
                    continue
                acc = adjoint.get(t.uid)
                adjoint[t.uid] = gin if acc is None else acc + gin
        return [adjoint.get(p.uid, np.zeros_like(p.value)) for p in params]


def _apply(fwd: Callable, vjp_builder: Callable, *ins: Tensor) -> Tensor:
    out = Tensor(fwd(*(t.value for t in ins)))
    tape = _active_tape()
    if tape is not None:
        tape._record(out, ins, vjp_builder(out, *ins), fwd)
    return out


# -- broadcasting policy -----------------------------------------------------

def _broadcast_check(name: str, a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    # row vector with matrix
    if a.ndim == 2 and b.ndim in (1, 2) and b.shape in ((a.shape[1],), (1, a.shape[1])):
        return
    if b.ndim == 2 and a.ndim in (1, 2) and a.shape in ((b.shape[1],), (1, b.shape[1])):
        return
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == () or int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    # row vector that was broadcast over matrix rows
    g = g.sum(axis=0)
    return g.reshape(shape)


# -- elementwise primitives ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a.value, b.value)

    def vjp_builder(out, a, b):
        return lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return _apply(np.add, vjp_builder, a, b)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a.value, b.value)

    def vjp_builder(out, a, b):
        return lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape))

    return _apply(np.subtract, vjp_builder, a, b)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a.value, b.value)

    def vjp_builder(out, a, b):
        av, bv = a.value, b.value
        return lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return _apply(np.multiply, vjp_builder, a, b)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("div", a.value, b.value)

    def vjp_builder(out, a, b):
        av, bv = a.value, b.value
        return lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        )

    return _apply(np.divide, vjp_builder, a, b)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _apply(np.negative, lambda out, a: lambda g: (-g,), a)


def power(a, p) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(p, (int, float)):
        raise TypeError("power exponent must be a python scalar")

    def vjp_builder(out, a):
        av = a.value
        return lambda g: (g * p * av ** (p - 1),)

    return _apply(lambda x: x ** p, vjp_builder, a)


def exp(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out, a):
        ov = out.value
        return lambda g: (g * ov,)

    return _apply(np.exp, vjp_builder, a)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out, a):
        av = a.value
        return lambda g: (g / av,)

    return _apply(np.log, vjp_builder, a)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out, a):
        ov = out.value
        return lambda g: (g / (2.0 * ov),)

    return _apply(np.sqrt, vjp_builder, a)


def tanh(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out, a):
        ov = out.value
        return lambda g: (g * (1.0 - ov * ov),)

    return _apply(np.tanh, vjp_builder, a)


def _sigmoid_np(x):
    # exp overflow on the far negative tail still yields the correct 0.0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out, a):
        ov = out.value
        return lambda g: (g * ov * (1.0 - ov),)

    return _apply(_sigmoid_np, vjp_builder, a)


def softplus(a) -> Tensor:
    a = _as_tensor(a)

    def fwd(x):
        return np.logaddexp(0.0, x)

    def vjp_builder(out, a):
        av = a.value
        return lambda g: (g * _sigmoid_np(av),)

    return _apply(fwd, vjp_builder, a)


def cos(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out, a):
        av = a.value
        return lambda g: (-g * np.sin(av),)

    return _apply(np.cos, vjp_builder, a)


def sin(a) -> Tensor:
    a = _as_tensor(a)

    def vjp_builder(out, a):
        av = a.value
        return lambda g: (g * np.cos(av),)

    return _apply(np.sin, vjp_builder, a)


def stop_gradient(a) -> Tensor:
    """Forward identity; blocks all gradient flow."""
    a = _as_tensor(a)
    return _apply(lambda x: x.copy(), lambda out, a: lambda g: (None,), a)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} @ {b.shape}")

    def vjp_builder(out, a, b):
        av, bv = a.value, b.value
        return lambda g: (g @ bv.T, av.T @ g)

    return _apply(np.matmul, vjp_builder, a, b)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _apply(lambda x: x.T.copy(), lambda out, a: lambda g: (g.T,), a)


def triangular_solve(a, b, lower: bool = False) -> Tensor:
    """Solve ``a @ x = b`` for triangular ``a``; differentiable in both."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeError(f"triangular_solve: bad shapes {a.shape}, {b.shape}")
    import scipy.linalg as sla

    def fwd(av, bv):
        return sla.solve_triangular(av, bv, lower=lower)

    def vjp_builder(out, a, b):
        av = a.value
        xv = out.value
        mask = np.tril(np.ones_like(av)) if lower else np.triu(np.ones_like(av))

        def vjp(g):
            gb = sla.solve_triangular(av.T, g, lower=not lower)
            ga = -(gb @ xv.T) * mask
            return ga, gb

        return vjp

    return _apply(fwd, vjp_builder, a, b)


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def vjp_builder(out, a):
        orig = a.value.shape
        return lambda g: (g.reshape(orig),)

    return _apply(lambda x: x.reshape(shape), vjp_builder, a)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of zero tensors")

    def fwd(*vals):
        return np.concatenate(vals, axis=axis)

    def vjp_builder(out, *parts):
        sizes = [p.value.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, splits, axis=axis))

        return vjp

    return _apply(fwd, vjp_builder, *parts)


def _slice(a: Tensor, key) -> Tensor:
    def fwd(x):
        out = x[key]
        if np.isscalar(out) or out.ndim == 0:
            return np.asarray(out, dtype=np.float64)
        return out.copy()

    def vjp_builder(out, a):
        shape = a.value.shape

        def vjp(g):
            buf = np.zeros(shape)
            buf[key] = g
            return (buf,)

        return vjp

    return _apply(fwd, vjp_builder, a)


def make_gather_plan(index) -> tuple:
    """Precomputed sort/segment structure for fast scatter-add of a gather.

    Worth building once for index arrays reused across many gathers (edge
    endpoints, batch tilings); pass to :func:`gather_rows` as ``plan``. The
    order slot is None when the index array is already sorted.
    """
    idx = np.asarray(index, dtype=np.intp)
    if len(idx) == 0:
        return None, np.zeros(0, dtype=np.intp), idx
    if np.all(idx[1:] >= idx[:-1]):
        order, sorted_idx = None, idx
    else:
        order = np.argsort(idx, kind="stable")
        sorted_idx = idx[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
    return order, starts, sorted_idx[starts]


def _scatter_add(shape, idx, g, plan):
    buf = np.zeros(shape)
    if len(idx) == 0:
        return buf
    if plan is not None:
        order, starts, uniq = plan
        buf[uniq] = np.add.reduceat(g if order is None else g[order], starts, axis=0)
    else:
        np.add.at(buf, idx, g)
    return buf


def gather_rows(a, index, plan: tuple | None = None) -> Tensor:
    """Select rows (axis 0) by an integer index array; rows may repeat."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)

    def fwd(x):
        return x[idx]

    def vjp_builder(out, a):
        shape = a.value.shape
        return lambda g: (_scatter_add(shape, idx, g, plan),)

    return _apply(fwd, vjp_builder, a)


def scale_rows(a, s) -> Tensor:
    """Multiply row ``i`` of matrix ``a`` by scalar ``s[i]``."""
    a, s = _as_tensor(a), _as_tensor(s)
    if a.ndim != 2 or s.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: got {a.shape} and {s.shape}")

    def fwd(x, sv):
        return x * sv[:, None]

    def vjp_builder(out, a, s):
        av, sv = a.value, s.value
        return lambda g: (g * sv[:, None], (g * av).sum(axis=1))

    return _apply(fwd, vjp_builder, a, s)


def shift_rows(a, s) -> Tensor:
    """Add scalar ``s[i]`` to every entry of row ``i`` of matrix ``a``."""
    a, s = _as_tensor(a), _as_tensor(s)
    if a.ndim != 2 or s.shape != (a.shape[0],):
        raise ShapeError(f"shift_rows: got {a.shape} and {s.shape}")

    def fwd(x, sv):
        return x + sv[:, None]

    def vjp_builder(out, a, s):
        return lambda g: (g, g.sum(axis=1))

    return _apply(fwd, vjp_builder, a, s)


def repeat_rows(a, reps: int) -> Tensor:
    """Repeat each row ``reps`` times consecutively (cheap structured gather)."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"repeat_rows expects a matrix, got {a.shape}")
    n, d = a.shape

    def fwd(x):
        return np.repeat(x, reps, axis=0)

    def vjp_builder(out, a):
        return lambda g: (g.reshape(n, reps, d).sum(axis=1),)

    return _apply(fwd, vjp_builder, a)


def tile_blocks(a, reps: int, block: int) -> Tensor:
    """Repeat each consecutive ``block`` of rows ``reps`` times.

    Rows [b*block:(b+1)*block] appear ``reps`` times in a row in the output.
    """
    a = _as_tensor(a)
    if a.ndim != 2 or a.shape[0] % block != 0:
        raise ShapeError(f"tile_blocks: {a.shape} not divisible into blocks of {block}")
    nb = a.shape[0] // block
    d = a.shape[1]

    def fwd(x):
        return np.broadcast_to(
            x.reshape(nb, 1, block, d), (nb, reps, block, d)
        ).reshape(nb * reps * block, d)

    def vjp_builder(out, a):
        return lambda g: (g.reshape(nb, reps, block, d).sum(axis=1).reshape(nb * block, d),)

    return _apply(fwd, vjp_builder, a)


def lstm_cell(x, h, c, wx, wh, b) -> Tensor:
    """Fused LSTM cell; returns [h', c'] concatenated along columns.

    Gate layout in the weight columns is (input, forget, candidate, output).
    One tape entry with a hand-derived backward pass; numerically identical
    to the composed elementwise form.
    """
    x, h, c = _as_tensor(x), _as_tensor(h), _as_tensor(c)
    wx, wh, b = _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    dh = h.value.shape[1]
    saved = {}

    def split(pre):
        return (
            _sigmoid_np(pre[:, 0:dh]),
            _sigmoid_np(pre[:, dh : 2 * dh]),
            np.tanh(pre[:, 2 * dh : 3 * dh]),
            _sigmoid_np(pre[:, 3 * dh : 4 * dh]),
        )

    def fwd(xv, hv, cv, wxv, whv, bv):
        gates = split(xv @ wxv + hv @ whv + bv)
        saved["gates"] = gates
        i, f, g_, o = gates
        c_new = f * cv + i * g_
        return np.concatenate([o * np.tanh(c_new), c_new], axis=1)

    def vjp_builder(out, x, h, c, wx, wh, b):
        xv, hv, cv = x.value, h.value, c.value
        wxv, whv = wx.value, wh.value
        i, f, g_, o = saved.pop("gates")
        c_new = out.value[:, dh:]
        tc = np.tanh(c_new)

        def vjp(g):
            gh, gc = g[:, :dh], g[:, dh:]
            dc = gc + gh * o * (1.0 - tc * tc)
            dpre = np.concatenate(
                [
                    dc * g_ * i * (1.0 - i),
                    dc * cv * f * (1.0 - f),
                    dc * i * (1.0 - g_ * g_),
                    gh * tc * o * (1.0 - o),
                ],
                axis=1,
            )
            return (
                dpre @ wxv.T,
                dpre @ whv.T,
                dc * f,
                xv.T @ dpre,
                hv.T @ dpre,
                dpre.sum(axis=0),
            )

        return vjp

    return _apply(fwd, vjp_builder, x, h, c, wx, wh, b)


def gru_cell(x, h, wx, wh, b) -> Tensor:
    """Fused gated recurrent cell (reset, update, candidate gate layout)."""
    x, h = _as_tensor(x), _as_tensor(h)
    wx, wh, b = _as_tensor(wx), _as_tensor(wh), _as_tensor(b)
    dh = h.value.shape[1]
    saved = {}

    def parts(xv, hv, wxv, whv, bv):
        gx = xv @ wxv + bv
        gh = hv @ whv
        r = _sigmoid_np(gx[:, 0:dh] + gh[:, 0:dh])
        u = _sigmoid_np(gx[:, dh : 2 * dh] + gh[:, dh : 2 * dh])
        ghc = gh[:, 2 * dh : 3 * dh]
        cand = np.tanh(gx[:, 2 * dh : 3 * dh] + r * ghc)
        return r, u, cand, ghc

    def fwd(xv, hv, wxv, whv, bv):
        saved["parts"] = parts(xv, hv, wxv, whv, bv)
        r, u, cand, _ = saved["parts"]
        return u * hv + (1.0 - u) * cand

    def vjp_builder(out, x, h, wx, wh, b):
        xv, hv = x.value, h.value
        wxv, whv = wx.value, wh.value
        r, u, cand, ghc = saved.pop("parts")

        def vjp(g):
            du = g * (hv - cand)
            dpre_c = g * (1.0 - u) * (1.0 - cand * cand)
            dpre_r = dpre_c * ghc * r * (1.0 - r)
            dpre_u = du * u * (1.0 - u)
            dgx = np.concatenate([dpre_r, dpre_u, dpre_c], axis=1)
            dgh = np.concatenate([dpre_r, dpre_u, dpre_c * r], axis=1)
            return (
                dgx @ wxv.T,
                g * u + dgh @ whv.T,
                xv.T @ dgx,
                hv.T @ dgh,
                dgx.sum(axis=0),
            )

        return vjp

    return _apply(fwd, vjp_builder, x, h, wx, wh, b)


def take_pairs(a, col_idx, unique_cols: bool = False) -> Tensor:
    """Select ``a[i, col_idx[i, j]]`` into an (n, k) matrix.

    With ``unique_cols`` the caller asserts no column repeats within a row,
    enabling a much faster scatter on the backward pass.
    """
    a = _as_tensor(a)
    cols = np.asarray(col_idx, dtype=np.intp)
    rows = np.arange(a.shape[0])[:, None]

    def fwd(x):
        return x[rows, cols]

    def vjp_builder(out, a):
        shape = a.value.shape

        def vjp(g):
            buf = np.zeros(shape)
            if unique_cols:
                np.put_along_axis(buf, cols, g, axis=1)
            else:
                np.add.at(buf, (rows, cols), g)
            return (buf,)

        return vjp

    return _apply(fwd, vjp_builder, a)


def normal_logpdf(x, mu, var) -> Tensor:
    """Elementwise diagonal-Gaussian log-density (one fused tape entry)."""
    x, mu, var = _as_tensor(x), _as_tensor(mu), _as_tensor(var)
    _broadcast_check("normal_logpdf", x.value, mu.value)
    _broadcast_check("normal_logpdf", x.value, var.value)
    log_2pi = 1.8378770664093453

    def fwd(xv, mv, vv):
        d = xv - mv
        return -0.5 * (log_2pi + np.log(vv)) - 0.5 * d * d / vv

    def vjp_builder(out, x, mu, var):
        xv, mv, vv = x.value, mu.value, var.value
        diff = xv - mv

        def vjp(g):
            gx = -g * diff / vv
            gv = g * (-0.5 / vv + 0.5 * diff * diff / (vv * vv))
            return (
                _unbroadcast(gx, xv.shape),
                _unbroadcast(-gx, mv.shape),
                _unbroadcast(gv, vv.shape),
            )

        return vjp

    return _apply(fwd, vjp_builder, x, mu, var)


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def fwd(x):
        return x.sum(axis=axis, keepdims=keepdims)

    def vjp_builder(out, a):
        shape = a.value.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).copy(),)

        return vjp

    return _apply(fwd, vjp_builder, a)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties share the adjoint equally."""
    a = _as_tensor(a)

    def fwd(x):
        return x.max(axis=axis, keepdims=keepdims)

    def vjp_builder(out, a):
        av = a.value
        ov = out.value

        def vjp(g):
            if axis is None:
                hit = (av == ov).astype(np.float64)
                return (hit / hit.sum() * g,)
            oo = ov if keepdims else np.expand_dims(ov, axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            hit = (av == oo).astype(np.float64)
            return (hit / hit.sum(axis=axis, keepdims=True) * gg,)

        return vjp

    return _apply(fwd, vjp_builder, a)


# -- segment reductions (grouped rows) -----------------------------------------

def segment_sum(a, segment_ids, num_segments: int, plan: tuple | None = None) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets; empty buckets are 0."""
    a = _as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if a.value.shape[0] != seg.shape[0]:
        raise ShapeError(f"segment_sum: {a.shape} rows vs {seg.shape[0]} ids")

    def fwd(x):
        return _scatter_add((num_segments,) + x.shape[1:], seg, x, plan)

    def vjp_builder(out, a):
        return lambda g: (g[seg],)

    return _apply(fwd, vjp_builder, a)


def segment_mean(a, segment_ids, num_segments: int, plan: tuple | None = None) -> Tensor:
    a = _as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    total = segment_sum(a, seg, num_segments, plan)
    if total.ndim == 1:
        return total * Tensor(1.0 / counts)
    return scale_rows(total, Tensor(1.0 / counts))


def segment_max(a, segment_ids, num_segments: int, plan: tuple | None = None) -> Tensor:
    """Max of rows per bucket; empty buckets are 0. Ties split the adjoint."""
    a = _as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.intp)
    if a.value.shape[0] != seg.shape[0]:
        raise ShapeError(f"segment_max: {a.shape} rows vs {seg.shape[0]} ids")

    def fwd(x):
        out = np.full((num_segments,) + x.shape[1:], -np.inf)
        if plan is not None and len(seg):
            order, starts, uniq = plan
            out[uniq] = np.maximum.reduceat(x if order is None else x[order], starts, axis=0)
        else:
            np.maximum.at(out, seg, x)
        out[np.isneginf(out)] = 0.0
        return out

    def vjp_builder(out, a):
        av = a.value
        ov = out.value

        def vjp(g):
            hit = (av == ov[seg]).astype(np.float64)
            norm = np.maximum(_scatter_add((num_segments,) + av.shape[1:], seg, hit, plan), 1.0)
            return (hit / norm[seg] * g[seg],)

        return vjp

    return _apply(fwd, vjp_builder, a)


# -- composite numerics ---------------------------------------------------------

def logsumexp(a, axis=None, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along an axis, computed shift-stably."""
    a = _as_tensor(a)
    if axis is None or a.ndim <= 1:
        m = stop_gradient(max_(a))
        out = log(sum_(exp(a - m))) + m
        return reshape(out, (1,) * a.ndim) if keepdims and a.ndim else out
    if a.ndim != 2:
        raise ShapeError(f"logsumexp: expects rank<=2, got {a.shape}")
    if axis in (0, -2):
        out = logsumexp(transpose(a), axis=1)
        return reshape(out, (1, a.shape[1])) if keepdims else out
    m = stop_gradient(max_(a, axis=1))
    out = log(sum_(exp(shift_rows(a, -m)), axis=1)) + m
    return reshape(out, (a.shape[0], 1)) if keepdims else out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if a.ndim <= 1:
        m = stop_gradient(max_(a))
        e = exp(a - m)
        return e / sum_(e)
    if a.ndim != 2:
        raise ShapeError(f"softmax: expects rank<=2, got {a.shape}")
    if axis in (0, -2):
        return transpose(softmax(transpose(a), axis=1))
    m = stop_gradient(max_(a, axis=1))
    e = exp(shift_rows(a, -m))
    return scale_rows(e, sum_(e, axis=1) ** -1.0)


def segment_softmax(scores, segment_ids, num_segments: int,
                    plan: tuple | None = None) -> Tensor:
    """Softmax of a 1-d score vector within each segment."""
    scores = _as_tensor(scores)
    seg = np.asarray(segment_ids, dtype=np.intp)
    m = stop_gradient(segment_max(scores, seg, num_segments))
    e = exp(scores - gather_rows(m, seg, plan))
    denom = segment_sum(e, seg, num_segments)
    return e / gather_rows(denom, seg, plan)


def check_finite(t: Tensor, what: str) -> Tensor:
    """Raise :class:`NonFiniteError` naming ``what`` if any entry is NaN/Inf."""
    if not np.all(np.isfinite(t.value)):
        raise NonFiniteError(f"non-finite values in {what}")
    return t
