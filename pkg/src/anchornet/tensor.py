"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one input requires a gradient.  Outside a tape, the same functions
are plain numpy computations, which is what inference uses.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(w, w))
    >>> backward(loss, tape)
    >>> w.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError, ValidationError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "elementwise",
    "add",
    "sub",
    "mul",
    "relu",
    "scale",
    "matmul",
    "add_bias",
    "conv2d",
    "avg_pool2d",
    "reshape",
    "sum_all",
    "logsumexp",
    "softmax",
    "log_softmax",
    "cross_entropy_soft",
    "one_hot",
    "uniform_target",
]


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ValidationError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered log of differentiable operations for one forward pass.

    Use as a context manager; tapes are thread-local so independent workers
    never see each other's records.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output, grad_fn) -> None:
        self.records.append(_Record(tuple(inputs), output, grad_fn))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericalError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    tape = _active_tape()
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(inputs, out, grad_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients are added to any existing ``.grad``; call ``zero_grad`` on
    parameters between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        for t, g in zip(rec.inputs, rec.grad_fn(g_out)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                touched[key] = t
    for key, t in touched.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _finish(a.data + float(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same(a, b, "add")
    return _finish(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _finish(a.data - float(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same(a, b, "sub")
    return _finish(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, b)
    b = _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _finish(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    return _finish(a.data * factor, (a,), lambda g: (g * factor,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _finish(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "scale": scale}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``b`` is ignored for ``relu`` and is the factor for ``scale``."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValidationError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind == "relu":
        return fn(a)
    return fn(a, b)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _finish(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x, bias) -> Tensor:
    """Add a per-feature bias along axis 1 (rank-2 or rank-4 input)."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match features of {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    sum_axes = (0,) + tuple(range(2, x.data.ndim))
    return _finish(
        x.data + bias.data.reshape(view), (x, bias), lambda g: (g, g.sum(axis=sum_axes))
    )


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return _finish(out, (x,), lambda g: (g.reshape(old),))


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _finish(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def conv2d(x, kernel, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and FCkk kernel, got {x.shape}, {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValidationError("stride must be >= 1 and padding >= 0")
    n, cin, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, kernel expects {kc}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({f},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N, C, Ho, Wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(f, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2) + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        dk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ kmat).reshape(n, ho, wo, cin, kh, kw)
            dxp = np.zeros((n, cin, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dk, db

    return _finish(out, (x, kernel, bias), grad_fn)


def avg_pool2d(x, window: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"avg_pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by window {window}")
    k = window
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = 1.0 / (k * k)

    def grad_fn(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) * inv,)

    return _finish(out, (x,), grad_fn)


def _lse(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def softmax(z) -> np.ndarray:
    """Row-wise softmax of an [N, C] array (no tape)."""
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    return z - _lse(z)[:, None]


def logsumexp(logits) -> Tensor:
    """Max-shifted log-sum-exp over the class axis of an [N, C] tensor."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 1:
        raise DimensionError(f"logsumexp expects [N, C] with C >= 1, got {logits.shape}")
    out = _lse(logits.data)

    def grad_fn(g):
        return (softmax(logits.data) * g[:, None],)

    return _finish(out, (logits,), grad_fn)


def cross_entropy_soft(logits, target) -> Tensor:
    """Mean over rows of ``-sum_c target * log_softmax(logits)``."""
    logits = _as_tensor(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if logits.data.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"cross_entropy_soft: logits {logits.shape} vs target {t.shape}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError("each target row must be a probability distribution")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -(t * logp).sum() / n

    def grad_fn(g):
        return ((np.exp(logp) - t) * (float(g) / n),)

    return _finish(np.asarray(loss), (logits,), grad_fn)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def uniform_target(n: int, num_classes: int) -> np.ndarray:
    return np.full((n, num_classes), 1.0 / num_classes)
