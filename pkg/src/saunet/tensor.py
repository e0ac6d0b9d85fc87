"""Dense float tensors with reverse-mode automatic differentiation.

The op set is exactly what the segmentation networks here need: 2-d
convolution and its stride-2 transpose, 2x2 max pooling, channel-axis
reductions and concatenation, ReLU/sigmoid, binary cross entropy, and the
broadcasting arithmetic that composite layers are built from.  Image
tensors are laid out NCHW.  float32 is the training precision; float64 is
the gradient-checking precision.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DEFAULT_DTYPE",
    "Tensor",
    "Node",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "power",
    "reshape",
    "tensor_sum",
    "tensor_mean",
    "relu",
    "sigmoid",
    "conv2d",
    "conv2d_transpose",
    "maxpool2d",
    "channel_reduce",
    "concat_channels",
    "bce_loss",
]

DEFAULT_DTYPE = np.float32
BCE_EPS = 1e-7

# Single-tensordot convolution is fastest for small problems but materializes
# an unfolded copy of the input; above this size, loop over kernel offsets
# instead, which never builds the unfolded array.
_COL_BYTES_LIMIT = 64 * 2**20

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """Record of the op that produced a tensor.

    ``backward`` maps the gradient w.r.t. the output to a tuple of gradients
    aligned with ``parents`` (``None`` for parents that take no gradient).
    Values needed by the backward rule (pooling indices, sampled masks,
    pre-activations) are captured in its closure.
    """

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.asarray(arr, dtype=dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if 0 in arr.shape:
            raise ValueError(f"tensors with a zero-sized dimension are not allowed: shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def check_finite(self, what: str = "tensor") -> "Tensor":
        """Raise if any element is NaN or infinite."""
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad leaf reachable from self.

        Gradients from multiple uses of a tensor accumulate additively.  The
        tensor must be a scalar; leaves must not already hold a gradient
        (call ``zero_grad`` between backward passes).
        """
        if self.size != 1:
            raise ValueError(f"backward expects a scalar, got shape {self.shape}")
        if self.node is None and not self.requires_grad:
            raise RuntimeError("backward on a tensor that tracks no gradients")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, processed = stack.pop()
            if processed:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        for t in order:
            if t.node is None and t.requires_grad and t.grad is not None:
                raise RuntimeError(
                    "a reachable leaf already holds a gradient; zero gradients before calling backward again"
                )

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    # materialize read-only broadcast views before handing them out
                    t.grad = g if (g.flags.owndata and g.flags.writeable) else g.copy()
                continue
            parent_grads = t.node.backward(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pid = id(p)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, "add", (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(data, "sub", (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, "mul", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _result(-a.data, "neg", (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    data = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(data, "power", (a,), backward)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        g = g.reshape(tuple(1 if i in axes else d for i, d in enumerate(shape)))
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _result(data, "sum", (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(data.size, 1)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _result(data, "mean", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(data, "reshape", (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        # subgradient 0 at exactly 0
        return (g * (a.data > 0),)

    return _result(data, "relu", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, "sigmoid", (a,), backward)


# ---------------------------------------------------------------------------
# convolution kernels
# ---------------------------------------------------------------------------


def _conv_pads(in_hw: tuple, kernel_hw: tuple, stride: int, padding: str) -> tuple:
    """(top, bottom, left, right) zero padding.

    "same" pads so the output has ceil(in/stride) positions, splitting the
    total with the smaller share on top/left (extra pad goes bottom/right).
    """
    if padding == "valid":
        return (0, 0, 0, 0)
    if padding != "same":
        raise ValueError(f"unknown padding mode {padding!r}")
    pads = []
    for in_, k in zip(in_hw, kernel_hw):
        out = -(-in_ // stride)
        total = max((out - 1) * stride + k - in_, 0)
        pads += [total // 2, total - total // 2]
    return tuple(pads)


def _pad_nchw(x: np.ndarray, pads: tuple) -> np.ndarray:
    pt, pb, pl, pr = pads
    if not (pt or pb or pl or pr):
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=x.dtype)
    out[:, :, pt : pt + h, pl : pl + w] = x
    return out


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pads: tuple) -> np.ndarray:
    n, cin, _, _ = x.shape
    cout, _, kh, kw = w.shape
    xp = _pad_nchw(x, pads)
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    col_bytes = n * cin * kh * kw * oh * ow * xp.itemsize
    if col_bytes <= _COL_BYTES_LIMIT:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # [N, OH, OW, Cout]
    else:
        out = np.zeros((n, oh, ow, cout), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride]
                out += np.tensordot(xs, w[:, :, i, j], axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_dx(dout: np.ndarray, w: np.ndarray, stride: int, pads: tuple, x_shape: tuple) -> np.ndarray:
    n, cin, h, wid = x_shape
    _, _, kh, kw = w.shape
    pt, pb, pl, pr = pads
    hp, wp = h + pt + pb, wid + pl + pr
    oh, ow = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, cin, hp, wp), dtype=dout.dtype)
    col_bytes = n * cin * kh * kw * oh * ow * dout.itemsize
    if col_bytes <= _COL_BYTES_LIMIT:
        dcol = np.tensordot(dout, w, axes=([1], [0]))  # [N, OH, OW, Cin, kh, kw]
        dcol = dcol.transpose(0, 3, 1, 2, 4, 5)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += dcol[
                    :, :, :, :, i, j
                ]
    else:
        for i in range(kh):
            for j in range(kw):
                piece = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))  # [N, OH, OW, Cin]
                dxp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                    piece.transpose(0, 3, 1, 2)
                )
    return dxp[:, :, pt : pt + h, pl : pl + wid]


def _conv_dw(x: np.ndarray, dout: np.ndarray, stride: int, pads: tuple, w_shape: tuple) -> np.ndarray:
    cout, cin, kh, kw = w_shape
    n = x.shape[0]
    xp = _pad_nchw(x, pads)
    oh, ow = dout.shape[2], dout.shape[3]
    col_bytes = n * cin * kh * kw * oh * ow * xp.itemsize
    if col_bytes <= _COL_BYTES_LIMIT:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        return np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))  # [Cout, Cin, kh, kw]
    dw = np.zeros(w_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride]
            dw[:, :, i, j] = np.tensordot(dout, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: str = "same",
) -> Tensor:
    """Cross-correlation of NCHW input with a [Cout, Cin, kh, kw] kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride}")
    n, cin, h, w_in = x.shape
    cout, cw, kh, kw = weight.shape
    if cw != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weight expects {cw}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    pads = _conv_pads((h, w_in), (kh, kw), stride, padding)
    data = _conv_fwd(x.data, weight.data, stride, pads)
    if bias is not None:
        data = data + bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gx = _conv_dx(g, weight.data, stride, pads, x.shape) if x.requires_grad else None
        gw = _conv_dw(x.data, g, stride, pads, weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, "conv2d", parents, backward)


def conv2d_transpose(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 2,
) -> Tensor:
    """Upsampling convolution: the exact adjoint of a same-padded strided conv2d.

    ``weight`` has shape [Cin, Cout, kh, kw]; the output spatial size is the
    input's multiplied by ``stride``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d_transpose expects 4-d input and weight")
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride}")
    n, cin, h, w_in = x.shape
    cw_in, cout, kh, kw = weight.shape
    if cw_in != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weight expects {cw_in}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {bias.shape}")
    out_h, out_w = h * stride, w_in * stride
    # weight doubles as the [Cout, Cin, kh, kw] kernel of the underlying conv
    pads = _conv_pads((out_h, out_w), (kh, kw), stride, "same")
    data = _conv_dx(x.data, weight.data, stride, pads, (n, cout, out_h, out_w))
    data = np.ascontiguousarray(data)
    if bias is not None:
        data = data + bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gx = _conv_fwd(g, weight.data, stride, pads) if x.requires_grad else None
        gw = _conv_dw(g, x.data, stride, pads, weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, "conv2d_transpose", parents, backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first element in
    row-major window order."""
    if x.ndim != 4:
        raise ValueError("maxpool2d expects a 4-d input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        gx = g4.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _result(data, "maxpool2d", (x,), backward)


def channel_reduce(x: Tensor, kind: str) -> Tensor:
    """Reduce over the channel axis to a single channel (``max`` or ``mean``)."""
    if x.ndim != 4:
        raise ValueError("channel_reduce expects a 4-d input")
    if kind == "mean":
        c = x.shape[1]
        data = x.data.mean(axis=1, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / c, x.shape),)

    elif kind == "max":
        idx = x.data.argmax(axis=1)  # lowest channel index on ties
        data = np.take_along_axis(x.data, idx[:, None], axis=1)

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            np.put_along_axis(gx, idx[:, None], g, axis=1)
            return (gx,)

    else:
        raise ValueError(f"unknown reduction kind {kind!r}")
    return _result(data, f"channel_{kind}", (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; a occupies the leading channels."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-d inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _result(data, "concat_channels", (a, b), backward)


def bce_loss(pred: Tensor, target: Tensor, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross entropy with predictions clamped to [eps, 1-eps].

    Differentiable w.r.t. ``pred`` only; the clamp passes no gradient where
    it is active.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("target must contain only 0 and 1")
    p = np.clip(pred.data, eps, 1.0 - eps)
    data = np.asarray(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean(), dtype=pred.dtype)
    count = pred.size
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)

    def backward(g):
        gp = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0) * (g / count)
        return gp.astype(pred.dtype, copy=False), None

    return _result(data, "bce_loss", (pred, target), backward)
