"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy
computation.  A tape is meant to live for one training step::

    with Tape():
        loss = cross_entropy(forward(params, arch, x), y)
    grads = backward(loss)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError, ShapeError, ValidationError

TEACHER_EPS = 1e-8

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array that may take part in a tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive operations for one backward pass."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op, inputs, output, backward_fn) -> None:
        output.node_id = len(self.nodes)
        output._tape = self
        output.requires_grad = True
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))


class no_tape:
    """Suspend recording inside an active tape (teacher forwards, evaluation)."""

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(None)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Gradients are written fresh on each call, never accumulated into a
    previous backward pass.  Returns a map from leaf tensor to its gradient.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None:
        raise ValidationError("loss was not produced on an active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node_id is None or inp._tape is not tape:
                leaves[id(inp)] = inp
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        result[leaf] = leaf.grad
    return result


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as err:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from err

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as err:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from err

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), out, bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), out, bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return _emit("relu", (x,), out, lambda g: (g * mask,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from err
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _emit("mean", (x,), np.array(x.data.mean()), lambda g: (np.full(x.shape, g / n),))


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x, w, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Zero-padded 2-D cross-correlation of ``x`` (b,c,h,w) with ``w`` (f,c,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    b, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(f"kernel {w.shape} larger than padded input {x.shape} with pad {pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # cols: (b, c, ho, wo, kh, kw)
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = cols[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs: tuple[Tensor, ...] = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (f,):
            raise DimensionError(f"conv2d bias must have shape ({f},), got {bias.shape}")
        out = out + bias.data[None, :, None, None]
        inputs = (x, w, bias)

    def bw(g):
        # g: (b, f, ho, wo)
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = np.tensordot(g, w.data, axes=([1], [0]))  # (b, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    ..., i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _emit("conv2d", inputs, np.ascontiguousarray(out), bw)


def maxpool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"pool size {size} larger than input {x.shape}")
    win = (
        x.data[:, :, : ho * size, : wo * size]
        .reshape(b, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, ho, wo, size * size)
    )
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def bw(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx, g[..., None], axis=-1)
        dx = np.zeros_like(x.data)
        dx[:, :, : ho * size, : wo * size] = (
            dwin.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * size, wo * size)
        )
        return (dx,)

    return _emit("maxpool2d", (x,), out, bw)


# ---------------------------------------------------------------------------
# probabilities and losses


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_t(logits, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / temperature``."""
    _check_temperature(temperature)
    x = as_tensor(logits)
    y = _softmax_np(x.data / temperature)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / temperature,)

    return _emit("softmax_t", (x,), y, bw)


def log_softmax_t(logits, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    x = as_tensor(logits)
    out = _log_softmax_np(x.data / temperature)

    def bw(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _emit("log_softmax_t", (x,), out, bw)


def cross_entropy(logits, labels) -> Tensor:
    """Batch mean of ``-ln softmax(logits)[label]``."""
    x = as_tensor(logits)
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy expects b x C logits, got {x.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, n_classes = x.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch of {b}")
    bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"label {labels[i]} of sample {i} outside [0, {n_classes})")
    logp = _log_softmax_np(x.data)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / b),)

    return _emit("cross_entropy", (x,), np.array(loss), bw)


def prepare_teacher(teacher_probs, eps: float = TEACHER_EPS) -> np.ndarray:
    """Validate probability rows, clamp them below at ``eps`` and renormalise."""
    q = np.asarray(teacher_probs.data if isinstance(teacher_probs, Tensor) else teacher_probs, dtype=np.float64)
    if q.ndim != 2:
        raise ShapeError(f"teacher probabilities must be b x C, got {q.shape}")
    sums = q.sum(axis=1)
    bad = np.flatnonzero((np.abs(sums - 1.0) > 1e-6) | (q < 0).any(axis=1) | ~np.isfinite(sums))
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"teacher row {i} is not a probability vector (sum {sums[i]!r})")
    q = np.maximum(q, eps)
    return q / q.sum(axis=1, keepdims=True)


def kl_divergence(student_logits, teacher_probs, temperature: float = 1.0, reverse: bool = False) -> Tensor:
    """Batch-mean KL(student || teacher) with the student softened by ``temperature``.

    The teacher is a constant: no gradient flows into it.  ``reverse=True``
    computes KL(teacher || student) instead, the direction classical
    distillation uses.  No T^2 factor is applied.
    """
    _check_temperature(temperature)
    x = as_tensor(student_logits)
    if x.ndim != 2:
        raise ShapeError(f"kl_divergence expects b x C logits, got {x.shape}")
    q = prepare_teacher(teacher_probs)
    if q.shape != x.shape:
        raise DimensionError(f"student {x.shape} and teacher {q.shape} shapes differ")
    b = x.shape[0]
    logp = _log_softmax_np(x.data / temperature)
    p = np.exp(logp)
    logq = np.log(q)
    if reverse:
        rows = (q * (logq - logp)).sum(axis=1)
    else:
        rows = (p * (logp - logq)).sum(axis=1)
    value = rows.mean()

    def bw(g):
        if reverse:
            d = p - q
        else:
            d = p * (logp - logq - rows[:, None])
        return (d * (g / (b * temperature)),)

    return _emit("kl_divergence", (x,), np.array(value), bw)


# ---------------------------------------------------------------------------
# finite differences


def numerical_grad(fn: Callable[[], float], x: np.ndarray, index: tuple, h: float = 1e-6) -> float:
    """Central difference of ``fn`` w.r.t. ``x[index]`` (``x`` is perturbed in place and restored)."""
    orig = x[index]
    x[index] = orig + h
    f_plus = fn()
    x[index] = orig - h
    f_minus = fn()
    x[index] = orig
    return (f_plus - f_minus) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_coords: int | None = None,
    h: float = 1e-6,
    seed: int = 0,
) -> float:
    """Compare ``backward`` against central differences; return the max relative error.

    ``loss_fn`` must rebuild the loss from the current contents of ``params``.
    With ``n_coords`` set, that many coordinates are sampled uniformly over all
    parameters; otherwise every coordinate is checked.
    """
    with Tape():
        loss = loss_fn()
    grads = backward(loss)
    coords = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if n_coords is not None and n_coords < len(coords):
        rng = np.random.default_rng(seed)
        coords = [coords[i] for i in sorted(rng.choice(len(coords), size=n_coords, replace=False))]

    def value() -> float:
        return float(loss_fn().data)

    worst = 0.0
    for k, idx in coords:
        p = params[k]
        analytic = float(grads.get(p, np.zeros_like(p.data))[idx])
        numeric = numerical_grad(value, p.data, idx, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
