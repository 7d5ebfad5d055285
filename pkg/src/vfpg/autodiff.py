"""Minimal reverse-mode automatic differentiation on numpy arrays.

Everything is double precision.  A ``Tape`` records primitive applications in
execution order (which is a valid topological order for eager evaluation);
``backward`` replays it once in reverse.  Only the primitives needed by the
path generator exist: affine maps, an LSTM cell, elementwise nonlinearities,
softmax / log-sum-exp, Gaussian-mixture log-densities, and reductions.
Broadcasting is supported just far enough for bias addition and scalar mixing;
anything fancier is out of scope.

The LSTM cell and the mixture log-density are fused primitives with
hand-written backward rules, which keeps tapes short (a few nodes per time
stamp) and makes both directly checkable against finite differences.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "LstmCellParams",
    "DenseParams",
    "backward",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "dense_forward",
    "lstm_cell_step",
    "tensor_sum",
    "tensor_mean",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "softmax",
    "logsumexp",
    "log_softmax",
    "slice_cols",
    "slice_rows",
    "reshape",
    "concat_rows",
    "gather",
    "lstm_gate_update",
    "lstm_step_fused",
    "gmm_log_prob",
    "init_lstm_params",
    "init_dense_params",
]

# When enabled, every primitive asserts that its outputs are finite.
DEBUG_CHECK_FINITE = False

_LOG_2PI = float(np.log(2.0 * np.pi))


class Tensor:
    """A double-precision array plus a requires_grad flag."""

    __slots__ = ("value", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # tensor arithmetic sugar used throughout the model code
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "outputs", "vjp")

    def __init__(self, inputs, outputs, vjp):
        self.inputs = inputs
        self.outputs = outputs
        self.vjp = vjp


class Tape:
    """Execution-order record of primitive applications."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self):
        _tls.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tls.stack.pop()
        assert popped is self
        return False


class _TapeLocal(threading.local):
    def __init__(self):
        self.stack: List[Tape] = []


_tls = _TapeLocal()


def _active_tape() -> Optional[Tape]:
    return _tls.stack[-1] if _tls.stack else None


def _record(inputs: Sequence[Tensor], outputs: Sequence[Tensor], vjp: Callable):
    """Register a primitive application on the active tape, if any."""
    if DEBUG_CHECK_FINITE:
        for t in outputs:
            if not np.all(np.isfinite(t.value)):
                raise FloatingPointError("non-finite value produced by a primitive")
    tape = _active_tape()
    if tape is None:
        return
    if any(t.requires_grad for t in inputs):
        for t in outputs:
            t.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), tuple(outputs), vjp))


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for every participating leaf.

    Returns a map from leaf tensor (requires_grad, not produced on this tape)
    to its gradient array.  d(loss)/d(loss) = 1.  A tape can be walked once.
    """
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    tape.consumed = True

    produced = set()
    for node in tape.nodes:
        for t in node.outputs:
            produced.add(id(t))

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        out_grads = tuple(grads.get(id(t)) for t in node.outputs)
        if all(g is None for g in out_grads):
            continue
        filled = tuple(
            g if g is not None else np.zeros_like(t.value)
            for g, t in zip(out_grads, node.outputs)
        )
        in_grads = node.vjp(*filled)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in produced:
                leaves[key] = t
    return {t: grads[key] for key, t in leaves.items()}


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise and linear primitives
# ----------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a.value.shape),
                                       _unbroadcast(g, b.value.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value - b.value)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a.value.shape),
                                       _unbroadcast(-g, b.value.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value)

    def vjp(g):
        return (_unbroadcast(g * b.value, a.value.shape),
                _unbroadcast(g * a.value, b.value.shape))

    _record((a, b), (out,), vjp)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value / b.value)

    def vjp(g):
        return (_unbroadcast(g / b.value, a.value.shape),
                _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    _record((a, b), (out,), vjp)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.value)
    _record((a,), (out,), lambda g: (-g,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    out = Tensor(a.value @ b.value)
    _record((a, b), (out,), lambda g: (g @ b.value.T, a.value.T @ g))
    return out


def affine(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w (+ b), with the bias summed over batch rows on the way back."""
    xv = x.value
    squeeze = xv.ndim == 1
    if squeeze:
        xv = xv[None, :]
    if xv.ndim != 2 or w.value.ndim != 2 or xv.shape[1] != w.value.shape[0]:
        raise ValueError(f"affine shape mismatch: {x.value.shape} @ {w.value.shape}")
    y = xv @ w.value
    if b is not None:
        if b.value.shape != (w.value.shape[1],):
            raise ValueError(f"bias shape {b.value.shape} does not match output "
                             f"width {w.value.shape[1]}")
        y = y + b.value
    out = Tensor(y[0] if squeeze else y)

    def vjp(g):
        gm = g[None, :] if squeeze else g
        gx = gm @ w.value.T
        if squeeze:
            gx = gx[0]
        gw = xv.T @ gm
        gb = gm.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    _record(inputs, (out,), vjp)
    return out


@dataclass
class DenseParams:
    """Parameters of an affine map: weights (d_in, d_out) and bias (d_out,)."""

    weights: Tensor
    bias: Tensor


def dense_forward(params: DenseParams, x: Tensor) -> Tensor:
    return affine(x, params.weights, params.bias)


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = Tensor(a.value.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    _record((a,), (out,), vjp)
    return out


def tensor_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.value.size if axis is None else a.value.shape[axis]
    out = Tensor(a.value.mean(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.value.shape).copy(),)

    _record((a,), (out,), vjp)
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    out = Tensor(y)
    _record((a,), (out,), lambda g: (g * y,))
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.value))
    _record((a,), (out,), lambda g: (g / a.value,))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    out = Tensor(y)
    _record((a,), (out,), lambda g: (g * (1.0 - y * y),))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.value)
    out = Tensor(y)
    _record((a,), (out,), lambda g: (g * y * (1.0 - y),))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow at very negative x saturates to inf and the ratio to 0,
    # which is the correct limit; suppressing the warning keeps this one pass
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def softplus(a: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, a.value))
    _record((a,), (out,), lambda g: (g * _sigmoid(a.value),))
    return out


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Probability simplex along ``axis``; max-subtraction keeps it stable."""
    v = logits.value
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax requires finite logits")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    _record((logits,), (out,), vjp)
    return out


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    v = a.value
    m = v.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(v - m).sum(axis=axis, keepdims=True)
    out_v = (m + np.log(s)).squeeze(axis=axis)
    out = Tensor(out_v)

    def vjp(g):
        w = np.exp(v - np.expand_dims(out_v, axis))
        return (np.expand_dims(g, axis) * w,)

    _record((a,), (out,), vjp)
    return out


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    v = logits.value
    lse = logsumexp(logits, axis=axis)
    # recompose: logits - lse broadcast along axis
    out = Tensor(v - np.expand_dims(lse.value, axis))

    def vjp(g):
        soft = np.exp(out.value)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    _record((logits,), (out,), vjp)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.value[..., start:stop])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)

    _record((a,), (out,), vjp)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.value[start:stop])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[start:stop] = g
        return (full,)

    _record((a,), (out,), vjp)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.value.reshape(shape))
    _record((a,), (out,), lambda g: (g.reshape(a.value.shape),))
    return out


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along axis 0."""
    values = [t.value for t in tensors]
    out = Tensor(np.concatenate(values, axis=0))
    sizes = [v.shape[0] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    _record(tuple(tensors), (out,), vjp)
    return out


def gather(a: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """out[..., i] = a[..., index[i]] along the last axis (or rows of a 1-D a)."""
    if axis != -1:
        raise ValueError("gather supports only the last axis")
    idx = np.asarray(index)
    out = Tensor(np.take(a.value, idx, axis=-1) if a.value.ndim == 1
                 else np.take_along_axis(a.value, idx, axis=-1))

    def vjp(g):
        full = np.zeros_like(a.value)
        if a.value.ndim == 1:
            np.add.at(full, idx, g)
        else:
            np.add.at(full, (np.arange(full.shape[0])[:, None], idx), g)
        return (full,)

    _record((a,), (out,), vjp)
    return out


# ----------------------------------------------------------------------------
# fused primitives: LSTM cell and Gaussian-mixture log-density
# ----------------------------------------------------------------------------

@dataclass
class LstmCellParams:
    """LSTM cell parameters.

    ``input_weights`` (d_in, 4H), ``hidden_weights`` (H, 4H), ``bias`` (4H,).
    Gate order along the 4H axis is input, forget, output, candidate, so the
    three sigmoid gates occupy one contiguous block.
    """

    input_weights: Tensor
    hidden_weights: Tensor
    bias: Tensor

    @property
    def hidden_size(self) -> int:
        return self.hidden_weights.value.shape[0]

    @property
    def input_size(self) -> int:
        return self.input_weights.value.shape[0]

    def validate(self):
        h = self.hidden_size
        d = self.input_size
        if self.input_weights.value.shape != (d, 4 * h):
            raise ValueError("input_weights shape inconsistent")
        if self.hidden_weights.value.shape != (h, 4 * h):
            raise ValueError("hidden_weights shape inconsistent")
        if self.bias.value.shape != (4 * h,):
            raise ValueError("bias shape inconsistent")


def _lstm_core(a: np.ndarray, cell: np.ndarray):
    """Shared forward math: gates [input, forget, output | candidate]."""
    hsz = a.shape[-1] // 4
    gates = _sigmoid(a[..., :3 * hsz])
    ig = gates[..., 0:hsz]
    fg = gates[..., hsz:2 * hsz]
    og = gates[..., 2 * hsz:3 * hsz]
    cand = np.tanh(a[..., 3 * hsz:])
    c_new = fg * cell + ig * cand
    tc = np.tanh(c_new)
    h_new = og * tc
    return ig, fg, og, cand, c_new, tc, h_new


def _lstm_backward(gh, gc, ig, fg, og, cand, cell, tc):
    hsz = ig.shape[-1]
    dc = gc + gh * og * (1.0 - tc * tc)
    da = np.empty(ig.shape[:-1] + (4 * hsz,))
    da[..., 0:hsz] = dc * cand * ig * (1.0 - ig)
    da[..., hsz:2 * hsz] = dc * cell * fg * (1.0 - fg)
    da[..., 2 * hsz:3 * hsz] = gh * tc * og * (1.0 - og)
    da[..., 3 * hsz:4 * hsz] = dc * ig * (1.0 - cand * cand)
    return da, dc * fg


def lstm_gate_update(preact: Tensor, cell: Tensor) -> Tuple[Tensor, Tensor]:
    """Elementwise LSTM recurrence given the summed gate preactivations.

    ``preact`` has width 4H split as [input gate, forget gate, output gate,
    candidate]; sigmoid gates, tanh candidate.
    """
    a = preact.value
    h4 = a.shape[-1]
    if h4 % 4 != 0:
        raise ValueError("gate preactivation width must be a multiple of 4")
    hsz = h4 // 4
    if cell.value.shape != a.shape[:-1] + (hsz,):
        raise ValueError(f"cell state shape {cell.value.shape} does not match "
                         f"gate width {h4}")
    ig, fg, og, cand, c_new, tc, h_new = _lstm_core(a, cell.value)
    out_h, out_c = Tensor(h_new), Tensor(c_new)

    def vjp(gh, gc):
        da, d_cell = _lstm_backward(gh, gc, ig, fg, og, cand, cell.value, tc)
        return (da, d_cell)

    _record((preact, cell), (out_h, out_c), vjp)
    return out_h, out_c


def lstm_step_fused(base: Tensor, w_h: Tensor, hidden: Tensor,
                    cell: Tensor) -> Tuple[Tensor, Tensor]:
    """LSTM step with the input projection precomputed: one tape node.

    ``base`` is x @ W_x + bias, shared across stamps when the input repeats;
    the hidden projection, gates, and state update happen inside the node so
    unrolled tapes stay short.
    """
    a = base.value + hidden.value @ w_h.value
    ig, fg, og, cand, c_new, tc, h_new = _lstm_core(a, cell.value)
    out_h, out_c = Tensor(h_new), Tensor(c_new)

    def vjp(gh, gc):
        da, d_cell = _lstm_backward(gh, gc, ig, fg, og, cand, cell.value, tc)
        return (da, hidden.value.T @ da, da @ w_h.value.T, d_cell)

    _record((base, w_h, hidden, cell), (out_h, out_c), vjp)
    return out_h, out_c


def lstm_cell_step(params: LstmCellParams, x: Tensor, hidden: Tensor,
                   cell: Tensor) -> Tuple[Tensor, Tensor]:
    """One step of the standard LSTM recurrence; returns (hidden', cell')."""
    base = affine(x, params.input_weights, params.bias)
    return lstm_step_fused(base, params.hidden_weights, hidden, cell)


def gmm_log_prob(weights: Tensor, means: Tensor, stds: Tensor, x: Tensor) -> Tensor:
    """log sum_j weights_j Normal(x; means_j, stds_j), via log-sum-exp.

    ``weights``/``means``/``stds`` share a trailing component axis; ``x`` has
    that axis dropped.  Differentiable in all four arguments.
    """
    w, m, s, xv = weights.value, means.value, stds.value, x.value
    if w.shape != m.shape or w.shape != s.shape:
        raise ValueError("mixture parameter shapes must match")
    if xv.shape != w.shape[:-1]:
        raise ValueError(f"x shape {xv.shape} must equal component shape "
                         f"{w.shape} minus the last axis")
    if np.any(s <= 0):
        raise ValueError("mixture standard deviations must be positive")
    xe = xv[..., None]
    zscore = (xe - m) / s
    log_norm = -0.5 * _LOG_2PI - np.log(s) - 0.5 * zscore * zscore
    with np.errstate(divide="ignore"):
        z = np.where(w > 0, np.log(np.maximum(w, 1e-300)), -np.inf) + log_norm
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    total = np.exp(z - zmax).sum(axis=-1, keepdims=True)
    out_v = (zmax + np.log(total)).squeeze(-1)
    out = Tensor(out_v)

    def vjp(g):
        resp = np.exp(z - out_v[..., None])          # posterior responsibilities
        ge = g[..., None]
        d_w = ge * np.exp(log_norm - out_v[..., None])
        d_m = ge * resp * zscore / s
        d_s = ge * resp * (zscore * zscore - 1.0) / s
        d_x = -(ge * resp * zscore / s).sum(axis=-1)
        return (d_w, d_m, d_s, d_x)

    _record((weights, means, stds, x), (out,), vjp)
    return out


# ----------------------------------------------------------------------------
# parameter initialization
# ----------------------------------------------------------------------------

def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_lstm_params(rng: np.random.Generator, input_size: int,
                     hidden_size: int) -> LstmCellParams:
    """Uniform(+-1/sqrt(fan_in)) weights; forget-gate bias set to 1."""
    wx = _uniform_fan_in(rng, input_size, (input_size, 4 * hidden_size))
    wh = _uniform_fan_in(rng, hidden_size, (hidden_size, 4 * hidden_size))
    b = np.zeros(4 * hidden_size)
    b[hidden_size:2 * hidden_size] = 1.0
    return LstmCellParams(
        input_weights=Tensor(wx, requires_grad=True),
        hidden_weights=Tensor(wh, requires_grad=True),
        bias=Tensor(b, requires_grad=True),
    )


def init_dense_params(rng: np.random.Generator, input_size: int,
                      output_size: int) -> DenseParams:
    w = _uniform_fan_in(rng, input_size, (input_size, output_size))
    b = np.zeros(output_size)
    return DenseParams(weights=Tensor(w, requires_grad=True),
                       bias=Tensor(b, requires_grad=True))
