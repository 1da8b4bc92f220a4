"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations execute eagerly.  When a :class:`Tape` is active and at least one
operand participates in differentiation, the operation appends a record
(output, inputs, vector-Jacobian product) to the tape.  :func:`backward`
replays those records in exact reverse order.

Convolutions use the cross-correlation convention (no kernel flip) and zero
padding.  Images are ``[C, H, W]``; a leading batch axis ``[N, C, H, W]`` is
accepted everywhere a single image is.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NotScalar, ShapeMismatch

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "square",
    "tsum",
    "mean",
    "reshape",
    "relu",
    "conv2d",
    "conv2d_transposed",
    "mse_loss",
    "conv_output_size",
]

_ACTIVE: list["Tape"] = []


class Tensor:
    """N-dimensional array of float64 values.

    Args:
        data: anything ``np.asarray`` accepts.  The values are copied.
        requires_grad: leaf tensors with this flag receive ``.grad`` from
            :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tracked = self.requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, tracked: bool = False) -> "Tensor":
        # internal constructor: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tracked = tracked
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded on this tape.  Tapes nest, the innermost one records.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self):
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=np.float64))


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``out_data`` and, if needed, append the op to the active tape.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    tracked = bool(_ACTIVE) and any(t._tracked for t in inputs)
    out = Tensor._wrap(out_data, tracked=tracked)
    if tracked:
        _ACTIVE[-1].records.append((out, tuple(inputs), vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable on ``tape``.

    Gradients accumulate: a tensor used several times receives the sum of
    the contributions, and an existing ``.grad`` is added to rather than
    replaced.  Call :meth:`Tensor.zero_grad` to reset.

    Raises:
        NotScalar: if ``loss`` holds more than one element.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        leaves[id(loss)] = loss
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp._tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.requires_grad:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.array(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tsum(a) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    a = _as_tensor(a)
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    return _record(
        np.array(a.data.sum() / n), (a,), lambda g: (np.broadcast_to(g / n, a.shape),)
    )


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def relu(x) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),))


def mse_loss(pred, target) -> Tensor:
    """Mean over all elements of ``(pred - target)**2``."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def vjp(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return _record(np.array(np.sum(diff * diff) / n), (pred, target), vjp)


# ---------------------------------------------------------------------------
# convolutions


def conv_output_size(n: int, k: int, stride: int, padding: int, floor_mode: bool = False) -> int:
    """Output extent of a strided, zero-padded correlation.

    Raises:
        ShapeMismatch: if the kernel does not fit, or the stride does not
            divide the span exactly and ``floor_mode`` is off.
    """
    span = n + 2 * padding - k
    if span < 0:
        raise ShapeMismatch(f"kernel {k} larger than padded extent {n + 2 * padding}")
    if span % stride and not floor_mode:
        raise ShapeMismatch(
            f"extent {n} with kernel {k}, padding {padding}, stride {stride} "
            "gives a non-integral output size"
        )
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp [N, C, Hp, Wp] -> columns [kh*kw*C, N*ho*wo], rows ordered (a, b, c)
    n, c = xp.shape[:2]
    xc = xp.transpose(1, 0, 2, 3)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    cols = np.empty((kh, kw, c, n, ho, wo))
    for a in range(kh):
        for b in range(kw):
            cols[a, b] = xc[:, :, a : a + hs : stride, b : b + ws : stride]
    return cols.reshape(kh * kw * c, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int):
    # adjoint of _im2col; accumulation order is fixed so results are reproducible
    n, c, hp, wp = shape
    cols = cols.reshape(kh, kw, c, n, ho, wo)
    out = np.zeros((c, n, hp, wp))
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + hs : stride, b : b + ws : stride] += cols[a, b]
    return out.transpose(1, 0, 2, 3)


def _channel_major(x: np.ndarray) -> np.ndarray:
    # [N, C, H, W] -> [C, N*H*W]
    return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)


def _batched(x: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeMismatch(f"{name} must be [C,H,W] or [N,C,H,W], got {x.shape}")


def _check_kernel(kernels: Tensor, bias: Optional[Tensor], n_out: int) -> None:
    if kernels.ndim != 4:
        raise ShapeMismatch(f"kernels must be rank 4, got {kernels.shape}")
    kh, kw = kernels.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"kernel extents must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (n_out,):
        raise ShapeMismatch(f"bias shape {bias.shape} does not match {n_out} output channels")


def conv2d(
    input,
    kernels,
    bias=None,
    stride: int = 1,
    padding: int = 0,
    floor_mode: bool = False,
) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    Args:
        input: ``[C_in, H, W]`` or ``[N, C_in, H, W]``.
        kernels: ``[C_out, C_in, kH, kW]`` with odd ``kH``, ``kW``.
        bias: ``[C_out]`` or None.
        stride: positive step between output samples.
        padding: zeros added on every side.
        floor_mode: drop trailing rows/columns the stride cannot reach
            instead of raising.

    Returns:
        ``[C_out, H', W']`` (batched if the input was), with
        ``H' = (H + 2*padding - kH) / stride + 1``.
    """
    input, kernels = _as_tensor(input), _as_tensor(kernels)
    bias = None if bias is None else _as_tensor(bias)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    x, single = _batched(input, "conv2d input")
    c_out, c_in, kh, kw = kernels.shape if kernels.ndim == 4 else (0, 0, 0, 0)
    _check_kernel(kernels, bias, c_out)
    if x.shape[1] != c_in:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, kernels expect {c_in}")
    n, _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding, floor_mode)
    wo = conv_output_size(w, kw, stride, padding, floor_mode)

    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    y = wmat @ cols
    if bias is not None:
        y = y + bias.data[:, None]
    y = y.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if single:
        y = y[0]

    def vjp(g):
        gm = _channel_major(g.reshape(n, c_out, ho, wo))
        gx = gk = gb = None
        if input._tracked:
            gxp = _col2im(wmat.T @ gm, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, p : p + h, p : p + w]
            gx = gx[0] if single else gx
        if kernels._tracked:
            gk = (gm @ cols.T).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
        if bias is not None and bias._tracked:
            gb = gm.sum(axis=1)
        return gx, gk, gb

    inputs = (input, kernels) if bias is None else (input, kernels, bias)
    return _record(np.ascontiguousarray(y), inputs, vjp)


def conv2d_transposed(input, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d`.

    With zero bias and the same ``kernels`` array,
    ``<conv2d(u), v> == <u, conv2d_transposed(v)>``.

    Args:
        input: ``[C_in, H, W]`` or ``[N, C_in, H, W]``.
        kernels: ``[C_in, C_out, kH, kW]``.
        bias: ``[C_out]`` or None.

    Returns:
        ``[C_out, H'', W'']`` with ``H'' = (H - 1)*stride - 2*padding + kH``.
    """
    input, kernels = _as_tensor(input), _as_tensor(kernels)
    bias = None if bias is None else _as_tensor(bias)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    v, single = _batched(input, "conv2d_transposed input")
    c_in, c_out, kh, kw = kernels.shape if kernels.ndim == 4 else (0, 0, 0, 0)
    _check_kernel(kernels, bias, c_out)
    if v.shape[1] != c_in:
        raise ShapeMismatch(f"input has {v.shape[1]} channels, kernels expect {c_in}")
    n, _, h, w = v.shape
    hp = (h - 1) * stride + kh
    wp = (w - 1) * stride + kw
    p = padding
    ho, wo = hp - 2 * p, wp - 2 * p
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"padding {p} leaves no output for input {h}x{w}")

    vm = _channel_major(v)
    kmat = kernels.data.transpose(2, 3, 1, 0).reshape(-1, c_in)
    full = _col2im(kmat @ vm, (n, c_out, hp, wp), kh, kw, stride, h, w)
    y = full[:, :, p : p + ho, p : p + wo]
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    if single:
        y = y[0]

    def vjp(g):
        g = g.reshape(n, c_out, ho, wo)
        gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _im2col(gp, kh, kw, stride, h, w)
        gv = gk = gb = None
        if input._tracked:
            gv = (kmat.T @ gcols).reshape(c_in, n, h, w).transpose(1, 0, 2, 3)
            gv = gv[0] if single else gv
        if kernels._tracked:
            gk = (gcols @ vm.T).reshape(kh, kw, c_out, c_in).transpose(3, 2, 0, 1)
        if bias is not None and bias._tracked:
            gb = g.sum(axis=(0, 2, 3))
        return gv, gk, gb

    inputs = (input, kernels) if bias is None else (input, kernels, bias)
    return _record(np.ascontiguousarray(y), inputs, vjp)


# ---------------------------------------------------------------------------


def grad_check(op: Callable[[Tensor], Tensor], input, epsilon: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``op`` against central differences.

    Args:
        op: maps a tensor to a scalar tensor.
        input: point at which to check.
        epsilon: finite-difference half step.

    Returns:
        ``max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)``
        over all coordinates of ``input``.
    """
    base = np.array(_as_tensor(input).data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = op(x)
    backward(tape, out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    probe = base.copy()
    pflat = probe.reshape(-1)
    for i in range(pflat.size):
        orig = pflat[i]
        pflat[i] = orig + epsilon
        fp = op(Tensor(probe)).item()
        pflat[i] = orig - epsilon
        fm = op(Tensor(probe)).item()
        pflat[i] = orig
        flat[i] = (fp - fm) / (2.0 * epsilon)

    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0
