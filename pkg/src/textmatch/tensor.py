"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. Outside
a tape nothing is recorded, which is the inference path.

    with Tape() as tape:
        loss = some_function(params)
    backward(loss, tape)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ACTIVE_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A layer or model configuration cannot be realised."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede the
    operations consuming them and ``backward`` can simply walk the list in
    reverse.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _record(out: Tensor, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    inputs = tuple(inputs)
    if not _ACTIVE_TAPES or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    node = _Node(out, inputs, backward_fn)
    out._node = node
    _ACTIVE_TAPES[-1].nodes.append(node)
    return out


def backward(scalar_output: Tensor, tape: Tape) -> None:
    """Accumulate d(scalar_output)/d(leaf) into every reachable leaf's ``grad``.

    Intermediate gradients live only for the duration of the call, so
    repeated calls accumulate on leaves without double counting.
    """
    if scalar_output.size != 1:
        raise ContractError(
            f"backward needs a scalar output, got shape {scalar_output.shape}"
        )
    node = scalar_output._node
    if node is None or not any(n is node for n in tape.nodes):
        raise ContractError("scalar output was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(scalar_output): np.ones_like(scalar_output.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor(a.data * factor)
    return _record(out, (a,), lambda g: (g * factor,))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def add_positions(emb: Tensor, pos: Tensor) -> Tensor:
    """Add a positional table to an embedding (leading batch axes broadcast)."""
    if emb.shape[-pos.ndim:] != pos.shape:
        raise ShapeError(f"embedding {emb.shape} and positions {pos.shape} do not align")
    return add(emb, pos)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    raw = a.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(raw)

    def bw(g):
        g = g.reshape(np.shape(raw))
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D table; ``indices`` may have any shape."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(table.data[idx])

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _record(out, (table,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bw)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by per-row max subtraction."""
    shifted = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(out, (m,), bw)


def l2_normalize_rows(m: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm; zero rows stay zero."""
    norm = np.sqrt((m.data * m.data).sum(axis=-1, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    y = np.where(nonzero, m.data / safe, 0.0)
    out = Tensor(y)

    def bw(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(nonzero, gx, 0.0),)

    return _record(out, (m,), bw)


# ---------------------------------------------------------------- convolution


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(input: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation.

    ``input`` is ``(c_in, h, w)`` or batched ``(n, c_in, h, w)``; ``kernels``
    is ``(c_out, c_in, kh, kw)``. Stride and padding take an int or an
    ``(vertical, horizontal)`` pair.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    batched = input.ndim == 4
    x = input.data if batched else input.data[None]
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: input {input.shape}, kernels {kernels.shape}")
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    ho = conv_output_extent(h, kh, sh, ph)
    wo = conv_output_extent(w, kw, sw, pw)

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]  # n, c_in, ho, wo, kh, kw
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * kh * kw)
    wmat = kernels.data.reshape(c_out, -1)
    y = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = Tensor(y if batched else y[0])

    def bw(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gk = (gmat.T @ cols).reshape(kernels.shape)
        if not input.requires_grad:
            return None, gk
        gcols = np.ascontiguousarray(
            (gmat @ wmat).reshape(n, ho, wo, c_in, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        )
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return (gx if batched else gx[0]), gk

    return _record(out, (input, kernels), bw)


# ---------------------------------------------------------------- recurrent


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm(x: Tensor, w_in: Tensor, w_rec: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Single-layer LSTM over axis 1 of ``x`` (batch, steps, features).

    Gate order in the ``4*hidden`` axis is input, forget, cell, output.
    Zero initial state. Returns the hidden sequence (batch, steps, hidden),
    aligned with the input steps also when ``reverse`` is set.
    """
    xs = x.data
    n, steps, _ = xs.shape
    hidden = w_rec.shape[0]
    if w_in.shape != (xs.shape[2], 4 * hidden) or w_rec.shape != (hidden, 4 * hidden):
        raise ShapeError(
            f"lstm weights {w_in.shape}, {w_rec.shape} do not fit input {xs.shape}"
        )
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    pre_x = xs @ w_in.data + bias.data  # n, steps, 4h
    hs = np.zeros((n, steps, hidden))
    cs = np.zeros((n, steps, hidden))
    gates = np.zeros((n, steps, 4 * hidden))
    h = np.zeros((n, hidden))
    c = np.zeros((n, hidden))
    for t in order:
        z = pre_x[:, t] + h @ w_rec.data
        i = _sigmoid(z[:, :hidden])
        f = _sigmoid(z[:, hidden : 2 * hidden])
        u = np.tanh(z[:, 2 * hidden : 3 * hidden])
        o = _sigmoid(z[:, 3 * hidden :])
        c = f * c + i * u
        h = o * np.tanh(c)
        gates[:, t] = np.concatenate([i, f, u, o], axis=1)
        cs[:, t] = c
        hs[:, t] = h
    out = Tensor(hs)

    def bw(g):
        gz_all = np.zeros_like(gates)
        dh_next = np.zeros((n, hidden))
        dc_next = np.zeros((n, hidden))
        for t in reversed(list(order)):
            i = gates[:, t, :hidden]
            f = gates[:, t, hidden : 2 * hidden]
            u = gates[:, t, 2 * hidden : 3 * hidden]
            o = gates[:, t, 3 * hidden :]
            tc = np.tanh(cs[:, t])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            prev = t + 1 if reverse else t - 1
            c_prev = cs[:, prev] if 0 <= prev < steps else np.zeros((n, hidden))
            gz = np.concatenate(
                [
                    dc * u * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - u * u),
                    dh * tc * o * (1.0 - o),
                ],
                axis=1,
            )
            gz_all[:, t] = gz
            dh_next = gz @ w_rec.data.T
            dc_next = dc * f
        gx = gz_all @ w_in.data.T
        gw_in = np.einsum("nsd,nsg->dg", xs, gz_all)
        h_prev = np.zeros_like(hs)
        if reverse:
            h_prev[:, :-1] = hs[:, 1:]
        else:
            h_prev[:, 1:] = hs[:, :-1]
        gw_rec = np.einsum("nsh,nsg->hg", h_prev, gz_all)
        gb = gz_all.sum(axis=(0, 1))
        return gx, gw_in, gw_rec, gb

    return _record(out, (x, w_in, w_rec, bias), bw)


# ---------------------------------------------------------------- optimisation


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: SgdState) -> Sequence[Tensor]:
    """Classical momentum update ``v = mu*v + g; p = p - lr*v`` in place."""
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ContractError("velocity buffers do not match parameter list")
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or v.shape != p.shape:
            raise ContractError(
                f"shape mismatch for {p.name or 'parameter'}: param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        v *= state.momentum
        v += g
        p.data -= state.learning_rate * v
    return params


def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor, step: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``; ``x`` is restored."""
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = float(f(x))
        flat[k] = orig - step
        lo = float(f(x))
        flat[k] = orig
        grad[k] = (hi - lo) / (2.0 * step)
    return Tensor(grad.reshape(x.shape))
