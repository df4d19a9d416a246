"""Dense float64 tensors with reverse-mode automatic differentiation.

Values wrap numpy arrays.  Every differentiable operation appends one node
to the active Tape; backward() replays the tape exactly once in reverse
append order, accumulates gradients into leaf tensors, and clears the tape.
Leaf gradients keep accumulating across backward calls until zero_grads().
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "NotScalar",
    "DetachedValue",
    "no_grad",
    "active_tape",
    "from_data",
    "constant",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "clip_min",
    "matmul",
    "conv2d",
    "pad2d",
    "avgpool2",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "stack",
]


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NotScalar(ValueError):
    """backward() was asked to differentiate a non-scalar value."""


class DetachedValue(RuntimeError):
    """Value is not recorded on the tape being differentiated."""


class TapeNode:
    """One recorded operation: kind, inputs, output, and a gradient rule.

    grad_fn maps the output gradient to one gradient array per input
    (None for inputs that do not receive gradient).
    """

    __slots__ = ("kind", "inputs", "output", "grad_fn")

    def __init__(self, kind, inputs, output, grad_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Append-only operation record replayed in reverse by backward().

    The epoch counter increments every time the tape is cleared, so values
    produced before a clear are recognised as detached afterwards.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.epoch = 0

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()
        self.epoch += 1

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


class _EngineState(threading.local):
    def __init__(self):
        self.stack = [Tape()]
        self.grad_enabled = True


_state = _EngineState()


def active_tape() -> Tape:
    """Tape that newly recorded operations append to."""
    return _state.stack[-1]


class no_grad:
    """Context manager that disables tape recording (evaluation mode)."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """Dense float64 value, optionally a trainable leaf carrying a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_epoch")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        if self.requires_grad:
            self.grad = np.zeros_like(arr)
            self._tape = active_tape()
        else:
            self.grad = None
            self._tape = None
        self._epoch = None  # leaves stay live across tape clears

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # operator sugar
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _live(t: Tensor) -> bool:
    """True when t participates in gradient flow on the current tape."""
    if t.requires_grad:
        return True
    tape = t._tape
    return tape is not None and t._epoch == tape.epoch


def _record(kind, inputs, out_data, grad_fn) -> Tensor:
    out = Tensor(out_data)
    if _state.grad_enabled and any(_live(t) for t in inputs):
        tape = active_tape()
        out._tape = tape
        out._epoch = tape.epoch
        tape.nodes.append(TapeNode(kind, inputs, out, grad_fn))
    return out


def from_data(shape, values, requires_grad: bool = False) -> Tensor:
    """Build a tensor from an explicit shape and a flat row-major sequence."""
    shape = tuple(int(s) for s in shape)
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    want = int(np.prod(shape)) if shape else 1
    if vals.size != want:
        raise ShapeMismatch(
            f"shape {shape} needs {want} values, got {vals.size}"
        )
    return Tensor(vals.reshape(shape), requires_grad=requires_grad)


def constant(values) -> Tensor:
    """Gradient-free tensor from array-like values."""
    return Tensor(values)


def zero_grads(params):
    """Reset the gradient buffer of every tensor in params."""
    for p in params:
        p.zero_grad()


def backward(loss: Tensor, tape: Tape | None = None):
    """Accumulate d loss / d leaf into every trainable leaf, then clear the tape.

    Repeated backward calls keep adding into leaf gradients until
    zero_grads() is called.  Raises NotScalar for non-scalar losses and
    DetachedValue when the loss is not recorded on the tape.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.data.shape}")
    t = tape if tape is not None else (loss._tape or active_tape())
    if loss.requires_grad:
        # scalar leaf: d loss / d loss = 1, nothing else to traverse
        loss.grad += np.ones_like(loss.data)
        t.clear()
        return
    if loss._tape is not t or loss._epoch != t.epoch:
        raise DetachedValue("loss value is not on the tape being differentiated")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(t.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gin in zip(node.inputs, node.grad_fn(g)):
            if gin is None:
                continue
            if inp.requires_grad:
                inp.grad += gin
            elif inp._tape is t and inp._epoch == t.epoch:
                prev = grads.get(id(inp))
                grads[id(inp)] = gin if prev is None else prev + gin
    t.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out, grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", (a, b), out, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record("mul", (a, b), out, grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _record("div", (a, b), out, grad_fn)


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    """max(x, 0) with subgradient 0 at exactly 0."""
    mask = a.data > 0.0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    mask = a.data > floor
    out = np.where(mask, a.data, floor)
    return _record("clip_min", (a,), out, lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors or two batched rank-3 tensors."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeMismatch(f"matmul {ad.shape} @ {bd.shape}")

        def grad_fn(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeMismatch(f"matmul {ad.shape} @ {bd.shape}")

        def grad_fn(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    else:
        raise ShapeMismatch(f"matmul supports rank 2 or 3, got {ad.ndim} and {bd.ndim}")
    return _record("matmul", (a, b), ad @ bd, grad_fn)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """[N,C,H,W] -> column matrix [N*oh*ow, C*kh*kw] for valid convolution."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C, oh, ow, kh, kw]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of [N,C,H,W] input with [D,C,kh,kw] kernel."""
    xd, kd = x.data, kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeMismatch(f"conv2d needs rank-4 operands, got {xd.ndim} and {kd.ndim}")
    n, c, h, w = xd.shape
    d, ck, kh, kw = kd.shape
    if ck != c:
        raise ShapeMismatch(f"conv2d channels: input {c}, kernel {ck}")
    if kh > h or kw > w:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise ShapeMismatch(f"stride must be positive, got {stride}")

    cols, oh, ow = _im2col(xd, kh, kw, stride)
    kmat = kd.reshape(d, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, oh, ow, d).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, d)
        gk = (gm.T @ cols).reshape(d, c, kh, kw)
        gcols = (gm @ kmat).reshape(n, oh, ow, c, kh, kw)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return gx, gk

    return _record("conv2d", (x, kernel), out, grad_fn)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two spatial dimensions of a [N,C,H,W] tensor."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"pad2d needs rank 4, got {x.data.ndim}")
    if pad < 0:
        raise ShapeMismatch(f"pad must be nonnegative, got {pad}")
    if pad == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    def grad_fn(g):
        return (g[:, :, pad:-pad, pad:-pad],)

    return _record("pad2d", (x,), out, grad_fn)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; trailing odd rows/cols are dropped."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"avgpool2 needs rank 4, got {x.data.ndim}")
    n, c, h, w = x.data.shape
    oh, ow = h // 2, w // 2
    if oh == 0 or ow == 0:
        raise ShapeMismatch(f"avgpool2 input too small: {h}x{w}")
    v = x.data[:, :, : oh * 2, : ow * 2].reshape(n, c, oh, 2, ow, 2)
    out = v.mean(axis=(3, 5))

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        spread = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        gx[:, :, : oh * 2, : ow * 2] = spread
        return (gx,)

    return _record("avgpool2", (x,), out, grad_fn)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if axes is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record("sum", (a,), out, grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    if axes is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[i] for i in axes]))

    def grad_fn(g):
        if axes is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _record("mean", (a,), out, grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _record("transpose", (a,), out, lambda g: (g.transpose(inv),))


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis (used for weight vectors)."""
    ts = list(tensors)
    base = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != base:
            raise ShapeMismatch(f"stack shapes differ: {base} vs {t.data.shape}")
    out = np.stack([t.data for t in ts], axis=axis)

    def grad_fn(g):
        parts = np.split(g, len(ts), axis=axis)
        return tuple(p.reshape(base) for p in parts)

    return _record("stack", tuple(ts), out, grad_fn)
