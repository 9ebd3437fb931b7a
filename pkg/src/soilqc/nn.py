"""Minimal dense-tensor math with reverse-mode gradients, and the LSTM cell.

A Tensor wraps a float64 ndarray; every op records enough on the implicit
tape (parent links + a backward closure) to run exact reverse-mode
differentiation from a scalar loss. Ops that touch no gradient-requiring
input skip recording entirely, so inference pays almost nothing for the
machinery.

The LSTM step computes, in order,

    f_t = sigmoid(W_xf . x_t + b_xf + W_hf . h_{t-1} + b_hf)
    i_t = sigmoid(W_xi . x_t + b_xi + W_hi . h_{t-1} + b_hi)
    c~_t = tanh(W_xc . x_t + b_xc + W_hc . h_{t-1} + b_hc)
    C_t = f_t * C_{t-1} + i_t * c~_t
    o_t = sigmoid(W_xo . x_t + b_xo + W_ho . h_{t-1} + b_ho)
    h_t = o_t * tanh(C_t)

with the input-side and hidden-side biases kept as separate parameters
(mathematically redundant, but it keeps serialized weights aligned with
the conventional dual-bias layout).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from soilqc.errors import DataError, NumericError

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    previous = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = previous


class Tensor:
    """Dense float64 array plus tape bookkeeping for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, upstream=None) -> None:
        backward(self, upstream)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], make_backward) -> Tensor:
    """Build an op result, recording the tape node only if a parent needs grad."""
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = make_backward(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _accum_new(t: Tensor, g: np.ndarray) -> None:
    """Accumulate a gradient the caller just allocated (adopted, not copied)."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    def make(out):
        def back():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(out.grad, b.data.shape))
        return back
    return _result(a.data + b.data, (a, b), make)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def make(out):
        def back():
            if a.requires_grad:
                _accum(a, _unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-out.grad, b.data.shape))
        return back
    return _result(a.data - b.data, (a, b), make)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def make(out):
        def back():
            if a.requires_grad:
                _accum_new(a, _unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                _accum_new(b, _unbroadcast(out.grad * a.data, b.data.shape))
        return back
    return _result(a.data * b.data, (a, b), make)


def scale(a: Tensor, c: float) -> Tensor:
    def make(out):
        def back():
            _accum_new(a, out.grad * c)
        return back
    return _result(a.data * c, (a,), make)


def add_const(a: Tensor, c) -> Tensor:
    def make(out):
        def back():
            _accum(a, _unbroadcast(out.grad, a.data.shape))
        return back
    return _result(a.data + c, (a,), make)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = x . W^T + b for W of shape (out, in); x may be (in,) or (batch, in)."""
    if x.data.shape[-1] != W.data.shape[1]:
        raise DataError(f"affine: x has width {x.data.shape[-1]}, W expects {W.data.shape[1]}")
    if b.data.shape != (W.data.shape[0],):
        raise DataError(f"affine: bias shape {b.data.shape} does not match W rows {W.data.shape[0]}")

    def make(out):
        def back():
            g = out.grad
            if x.requires_grad:
                _accum_new(x, g @ W.data)
            if W.requires_grad:
                _accum_new(W, np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data)
            if b.requires_grad:
                if g.ndim == 1:
                    _accum(b, g)
                else:
                    _accum_new(b, g.sum(axis=0))
        return back
    return _result(x.data @ W.data.T + b.data, (x, W, b), make)


def dual_affine(x: Tensor, Wx: Tensor, bx: Tensor, h: Tensor, Wh: Tensor, bh: Tensor) -> Tensor:
    """Fused gate preactivation x.Wx^T + bx + h.Wh^T + bh (one tape node)."""
    if x.data.shape[-1] != Wx.data.shape[1] or h.data.shape[-1] != Wh.data.shape[1]:
        raise DataError(
            f"dual_affine: input widths ({x.data.shape[-1]}, {h.data.shape[-1]}) do not match "
            f"weights ({Wx.data.shape[1]}, {Wh.data.shape[1]})"
        )

    def make(out):
        def back():
            g = out.grad
            batched = g.ndim > 1
            if x.requires_grad:
                _accum_new(x, g @ Wx.data)
            if Wx.requires_grad:
                _accum_new(Wx, g.T @ x.data if batched else np.outer(g, x.data))
            if bx.requires_grad:
                if batched:
                    _accum_new(bx, g.sum(axis=0))
                else:
                    _accum(bx, g)
            if h.requires_grad:
                _accum_new(h, g @ Wh.data)
            if Wh.requires_grad:
                _accum_new(Wh, g.T @ h.data if batched else np.outer(g, h.data))
            if bh.requires_grad:
                if batched:
                    _accum_new(bh, g.sum(axis=0))
                else:
                    _accum(bh, g)
        return back

    data = x.data @ Wx.data.T + bx.data + h.data @ Wh.data.T + bh.data
    return _result(data, (x, Wx, bx, h, Wh, bh), make)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # two-branch form: the exponent is always <= 0, so exp never overflows
    safe = np.where(z >= 0, -z, z)
    e = np.exp(safe)
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)

    def make(out):
        def back():
            _accum_new(a, out.grad * (y * (1.0 - y)))
        return back
    return _result(y, (a,), make)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def make(out):
        def back():
            _accum_new(a, out.grad * (1.0 - y * y))
        return back
    return _result(y, (a,), make)


def log(a: Tensor) -> Tensor:
    def make(out):
        def back():
            _accum_new(a, out.grad / a.data)
        return back
    return _result(np.log(a.data), (a,), make)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside the bounds."""
    inside = (a.data >= lo) & (a.data <= hi)

    def make(out):
        def back():
            _accum_new(a, out.grad * inside)
        return back
    return _result(np.clip(a.data, lo, hi), (a,), make)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make(out):
        def back():
            g = out.grad
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _accum_new(p, np.take(g, np.arange(lo, hi), axis=axis))
        return back
    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, make)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    def make(out):
        def back():
            _accum_new(a, np.full(a.data.shape, float(out.grad)))
        return back
    return _result(np.asarray(a.data.sum()), (a,), make)


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


def backward(loss: Tensor, upstream=None) -> None:
    """Run reverse-mode accumulation from `loss` into every reachable .grad.

    upstream defaults to 1.0 and must match the loss shape. Raises if the
    loss has no recorded computation and requires no grad.
    """
    if not loss.requires_grad:
        raise DataError("backward called on a tensor with no recorded computation")
    if upstream is None:
        if loss.data.size != 1:
            raise DataError(f"backward needs an upstream gradient for non-scalar loss {loss.data.shape}")
        upstream = np.ones_like(loss.data)
    else:
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != loss.data.shape:
            raise DataError(f"upstream shape {upstream.shape} does not match loss shape {loss.data.shape}")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    _accum(loss, upstream)
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t


@dataclass
class LstmCellParams:
    """All weights of one LSTM cell: per-gate input/hidden matrices and dual biases.

    Weight matrices are (hidden, input) for the x side and (hidden, hidden)
    for the h side; biases are (hidden,).
    """

    W_xf: Tensor
    W_xi: Tensor
    W_xc: Tensor
    W_xo: Tensor
    W_hf: Tensor
    W_hi: Tensor
    W_hc: Tensor
    W_ho: Tensor
    b_xf: Tensor
    b_xi: Tensor
    b_xc: Tensor
    b_xo: Tensor
    b_hf: Tensor
    b_hi: Tensor
    b_hc: Tensor
    b_ho: Tensor

    def __post_init__(self) -> None:
        hidden, inp = self.W_xf.data.shape
        for name in ("W_xf", "W_xi", "W_xc", "W_xo"):
            if getattr(self, name).data.shape != (hidden, inp):
                raise DataError(f"{name} shape mismatch")
        for name in ("W_hf", "W_hi", "W_hc", "W_ho"):
            if getattr(self, name).data.shape != (hidden, hidden):
                raise DataError(f"{name} must be ({hidden}, {hidden})")
        for name in ("b_xf", "b_xi", "b_xc", "b_xo", "b_hf", "b_hi", "b_hc", "b_ho"):
            if getattr(self, name).data.shape != (hidden,):
                raise DataError(f"{name} must be ({hidden},)")

    @property
    def hidden_dim(self) -> int:
        return self.W_xf.data.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_xf.data.shape[1]

    FIELD_NAMES = (
        "W_xf", "W_xi", "W_xc", "W_xo",
        "W_hf", "W_hi", "W_hc", "W_ho",
        "b_xf", "b_xi", "b_xc", "b_xo",
        "b_hf", "b_hi", "b_hc", "b_ho",
    )

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in self.FIELD_NAMES]


@dataclass
class LstmState:
    """Hidden vector and cell state after one step; zeros before the first."""

    h: Tensor
    C: Tensor


def zero_state(params: LstmCellParams, like: Tensor) -> LstmState:
    hidden = params.hidden_dim
    shape = (hidden,) if like.data.ndim == 1 else (like.data.shape[0], hidden)
    return LstmState(h=Tensor(np.zeros(shape)), C=Tensor(np.zeros(shape)))


def lstm_step(params: LstmCellParams, x: Tensor, prev: LstmState) -> LstmState:
    """One LSTM update; x may be a single input vector or a (batch, input) block."""
    if x.data.shape[-1] != params.input_dim:
        raise DataError(
            f"lstm_step: input width {x.data.shape[-1]} does not match cell input {params.input_dim}"
        )
    if prev.h.data.shape[-1] != params.hidden_dim:
        raise DataError(
            f"lstm_step: state width {prev.h.data.shape[-1]} does not match hidden {params.hidden_dim}"
        )
    f = sigmoid(dual_affine(x, params.W_xf, params.b_xf, prev.h, params.W_hf, params.b_hf))
    i = sigmoid(dual_affine(x, params.W_xi, params.b_xi, prev.h, params.W_hi, params.b_hi))
    c_hat = tanh(dual_affine(x, params.W_xc, params.b_xc, prev.h, params.W_hc, params.b_hc))
    C = add(mul(f, prev.C), mul(i, c_hat))
    o = sigmoid(dual_affine(x, params.W_xo, params.b_xo, prev.h, params.W_ho, params.b_ho))
    h = mul(o, tanh(C))
    return LstmState(h=h, C=C)


def bilstm_forward(
    fwd: LstmCellParams, bwd: LstmCellParams, xs: Sequence[Tensor]
) -> list[Tensor]:
    """Per-step [h_fwd ; h_bwd] over the sequence, both directions from zero state."""
    if len(xs) == 0:
        raise DataError("bilstm_forward needs a nonempty sequence")
    if fwd.hidden_dim != bwd.hidden_dim or fwd.input_dim != bwd.input_dim:
        raise DataError("forward and backward cells must share dimensions")

    state = zero_state(fwd, xs[0])
    hs_fwd = []
    for x in xs:
        state = lstm_step(fwd, x, state)
        hs_fwd.append(state.h)

    state = zero_state(bwd, xs[0])
    hs_bwd: list[Optional[Tensor]] = [None] * len(xs)
    for t in range(len(xs) - 1, -1, -1):
        state = lstm_step(bwd, xs[t], state)
        hs_bwd[t] = state.h

    return [concat((hf, hb), axis=-1) for hf, hb in zip(hs_fwd, hs_bwd)]


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Weight tensor drawn uniformly from +/- 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_lstm_cell(rng: np.random.Generator, input_dim: int, hidden_dim: int) -> LstmCellParams:
    def wx():
        return uniform_init(rng, (hidden_dim, input_dim), input_dim)

    def wh():
        return uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim)

    def bx():
        return uniform_init(rng, (hidden_dim,), input_dim)

    def bh():
        return uniform_init(rng, (hidden_dim,), hidden_dim)

    return LstmCellParams(
        W_xf=wx(), W_xi=wx(), W_xc=wx(), W_xo=wx(),
        W_hf=wh(), W_hi=wh(), W_hc=wh(), W_ho=wh(),
        b_xf=bx(), b_xi=bx(), b_xc=bx(), b_xo=bx(),
        b_hf=bh(), b_hi=bh(), b_hc=bh(), b_ho=bh(),
    )
