"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the tape that is active in the current thread (entered
with ``with Tape() as tape:``). Outside a tape nothing is recorded and results
never require gradients, which is the inference path.

Most ops accept leading batch dimensions: ``conv1d`` takes ``(C_in, L)`` or
``(N, C_in, L)``, pooling works on the last axis, ``softmax`` normalises the last
axis.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "grad_check",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "log_softmax",
    "concat",
    "stack",
    "slice_",
    "reshape",
    "sum_",
    "mean",
    "conv1d",
    "conv_output_length",
    "max_pool1d",
    "pool_output_length",
    "roi_bounds",
    "roi_pool1d",
    "lstm_cell",
    "sigmoid_cross_entropy",
    "stable_sigmoid",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_local, "tape", None)


class Tensor:
    """Immutable n-d array of float64 with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # op outputs are fresh arrays: skip the defensive copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations for one thread."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._previous = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    if needs:
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``.grad`` for every requires_grad tensor that ``loss`` depends on.

    Gradients accumulate into any existing ``.grad``; call ``zero_grad`` on the
    parameters between steps.
    """
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward needs the tape that recorded the loss")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        _deposit(node.output, g_out)
        for inp, g in zip(node.inputs, node.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    # leaves (parameters, inputs) are whatever is left
    for node in tape.nodes:
        for inp in node.inputs:
            g = grads.pop(id(inp), None)
            if g is not None:
                _deposit(inp, g)
    if id(loss) in grads:
        _deposit(loss, grads.pop(id(loss)))


def _deposit(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    # backward rules never write into their outputs, so sharing g is safe
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = stable_sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def _note_branch(choice: np.ndarray) -> None:
    """Record which piece a piecewise-linear op selected, when a trace is open."""
    trace = getattr(_local, "branches", None)
    if trace is not None:
        trace.append(np.array(choice, copy=True))


def _traced(f, x: np.ndarray):
    """Evaluate ``f`` at ``x``; returns the scalar value and the branch choices made."""
    previous = getattr(_local, "branches", None)
    _local.branches = []
    try:
        value = f(Tensor(x)).item()
        return value, _local.branches
    finally:
        _local.branches = previous


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _note_branch(mask)
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ------------------------------------------------------------------- algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape ``(..., m, k)`` and a 2-d ``b`` of shape ``(k, n)``."""
    if a.data.ndim < 1 or b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _record(out, (a, b), back)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), back)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = all(isinstance(i, (int, slice, type(Ellipsis))) for i in (index if isinstance(index, tuple) else (index,)))

    def back(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(out), (a,), back)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return np.split(g, sizes, axis=axis)

    return _record(out, tuple(parts), back)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("stack needs at least one tensor")
    out = np.stack([p.data for p in parts], axis=axis)

    def back(g):
        return [np.take(g, i, axis=axis) for i in range(len(parts))]

    return _record(out, tuple(parts), back)


# ------------------------------------------------------------------- softmax


def softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (z,), back)


def log_softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (z,), back)


def sigmoid_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Elementwise ``max(x,0) - x*y + log(1 + exp(-|x|))``; overflow-free in ``x``."""
    x = logits.data
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != x.shape:
        raise ShapeError(f"logits {x.shape} and targets {y.shape} differ")
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    s = stable_sigmoid(x)
    return _record(out, (logits,), lambda g: (g * (s - y),))


# ------------------------------------------------------------- convolutions


def conv_output_length(length: int, width: int) -> int:
    return length - width + 1


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation. ``x`` is ``(C_in, L)`` or ``(N, C_in, L)``."""
    batched = x.data.ndim == 3
    xd = x.data if batched else x.data[None]
    if xd.ndim != 3 or kernels.data.ndim != 3 or bias.data.ndim != 1:
        raise ShapeError(f"conv1d shapes: x {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    n, c_in, length = xd.shape
    c_out, k_in, width = kernels.shape
    if k_in != c_in or bias.shape[0] != c_out:
        raise ShapeError(f"conv1d channel mismatch: x {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    if length < width:
        raise ShapeError(f"conv1d input shorter than kernel: length {length} < width {width}")
    l_out = length - width + 1
    # (N, C_in, L_out, W) -> (N, L_out, C_in*W)
    cols = np.lib.stride_tricks.sliding_window_view(xd, width, axis=2)
    cols = cols.transpose(0, 2, 1, 3).reshape(n, l_out, c_in * width)
    kmat = kernels.data.reshape(c_out, c_in * width)
    out = (cols @ kmat.T).transpose(0, 2, 1) + bias.data[None, :, None]

    def back(g):
        gb = g if batched else g[None]
        gt = gb.transpose(0, 2, 1)  # (N, L_out, C_out)
        g_kernels = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * width)).reshape(kernels.shape)
        g_bias = gb.sum(axis=(0, 2))
        dcols = (gt @ kmat).reshape(n, l_out, c_in, width)
        gx = np.zeros((n, c_in, length))
        for w in range(width):
            gx[:, :, w : w + l_out] += dcols[:, :, :, w].transpose(0, 2, 1)
        return (gx if batched else gx[0]), g_kernels, g_bias

    return _record(out if batched else out[0], (x, kernels, bias), back)


def pool_output_length(length: int, width: int, stride: int) -> int:
    return (length - width) // stride + 1


def max_pool1d(x: Tensor, width: int, stride: int) -> Tensor:
    """Windowed max over the last axis; ties send gradient to the first maximum."""
    if width < 1 or stride < 1:
        raise ValueError(f"pool width and stride must be >= 1, got {width}, {stride}")
    length = x.shape[-1]
    if length < width:
        raise ShapeError(f"max_pool1d input shorter than window: length {length} < width {width}")
    l_out = pool_output_length(length, width, stride)
    win = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=-1)[..., ::stride, :][..., :l_out, :]
    arg = win.argmax(axis=-1)
    _note_branch(arg)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros(x.shape)
        for offset in range(width):
            pos = slice(offset, offset + (l_out - 1) * stride + 1, stride)
            gx[..., pos] += np.where(arg == offset, g, 0.0)
        return (gx,)

    return _record(out, (x,), back)


def roi_bounds(length: int, bins: int) -> list[tuple[int, int]]:
    """Half-open bin intervals ``[floor(b*L/bins), floor((b+1)*L/bins))``.

    An empty interval borrows the single index ``min(start, L-1)``.
    """
    bounds = []
    for b in range(bins):
        start = (b * length) // bins
        end = ((b + 1) * length) // bins
        if end <= start:
            start = min(start, length - 1)
            end = start + 1
        bounds.append((start, end))
    return bounds


def roi_pool1d(x: Tensor, bins: int) -> Tensor:
    """Fixed-size max pooling over the last axis, whatever its length."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    length = x.shape[-1] if x.data.ndim else 0
    if length < 1:
        raise ShapeError("roi_pool1d got an empty input")
    bounds = roi_bounds(length, bins)
    idx = np.empty(x.shape[:-1] + (bins,), dtype=np.int64)
    for b, (start, end) in enumerate(bounds):
        idx[..., b] = start + x.data[..., start:end].argmax(axis=-1)
    _note_branch(idx)
    out = np.take_along_axis(x.data, idx, axis=-1)

    def back(g):
        gx = np.zeros((int(np.prod(x.shape[:-1], dtype=np.int64)), length))
        flat_idx = idx.reshape(-1, bins)
        if length >= bins:
            np.put_along_axis(gx, flat_idx, g.reshape(-1, bins), axis=-1)
        else:
            # bins share indices when L < bins
            rows = np.arange(gx.shape[0])[:, None]
            np.add.at(gx, (rows, flat_idx), g.reshape(-1, bins))
        return (gx.reshape(x.shape),)

    return _record(out, (x,), back)


# --------------------------------------------------------------------- LSTM


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One LSTM step with gates packed as ``[input, forget, candidate, output]``.

    ``w_x`` is ``(d, 4H)``, ``w_h`` is ``(H, 4H)``, ``b`` is ``(4H,)``. Inputs may
    carry a leading batch axis.
    """
    hidden = h_prev.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * hidden) or w_h.shape != (hidden, 4 * hidden) or b.shape != (4 * hidden,):
        raise ShapeError(
            f"lstm_cell parameter shapes {w_x.shape}, {w_h.shape}, {b.shape} "
            f"do not fit input dim {x.shape[-1]} and hidden {hidden}"
        )
    if c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm_cell state shapes differ: h {h_prev.shape}, c {c_prev.shape}")
    z = add(add(matmul(x, w_x), matmul(h_prev, w_h)), b)
    i = sigmoid(slice_(z, (..., slice(0, hidden))))
    f = sigmoid(slice_(z, (..., slice(hidden, 2 * hidden))))
    g = tanh(slice_(z, (..., slice(2 * hidden, 3 * hidden))))
    o = sigmoid(slice_(z, (..., slice(3 * hidden, 4 * hidden))))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# --------------------------------------------------------- gradient check


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-3,
    coords: Optional[Sequence[int]] = None,
    min_step: float = 1e-7,
) -> float:
    """Max symmetric relative error between tape gradients and central differences.

    ``coords`` restricts the comparison to those flat indices (all by default).

    Central differences only estimate the derivative when both stencil points lie
    on the same linear piece of every relu/max selection as ``point`` does. When
    ``x +- step`` flips such a selection the step for that coordinate is halved
    until it does not (down to ``min_step``); smooth stencils use ``step`` as given.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if y.data.size != 1 or not np.isfinite(y.data).all():
        raise ValueError(f"grad_check needs a finite scalar, got {y.data!r}")
    backward(y, tape)
    analytic = np.zeros(base.size) if x.grad is None else x.grad.reshape(-1)
    _, branches = _traced(f, base)
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        h = step
        while True:
            hi = flat.copy()
            hi[i] += h
            lo = flat.copy()
            lo[i] -= h
            f_hi, b_hi = _traced(f, hi.reshape(base.shape))
            f_lo, b_lo = _traced(f, lo.reshape(base.shape))
            if (_same_branches(branches, b_hi) and _same_branches(branches, b_lo)) or h / 2 < min_step:
                break
            h /= 2
        numeric = (f_hi - f_lo) / (2 * h)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        worst = max(worst, err)
    return worst
