"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every value is a (batch, channels, height, width) float array. Tensors are
immutable once created; constructing one on a :class:`GradTape` makes every
operation that consumes it append a backward record to that tape. Records
are replayed in reverse creation order by :meth:`GradTape.backward`, which
is a valid topological order because operands always exist before results.

Storage precision is float32. Float64 inputs are kept as float64 so that
numerical checks (finite differences, oracle comparisons) can run the same
code path at higher precision.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "GradTape",
    "conv2d",
    "conv_transpose2d",
    "activation",
    "lrelu",
    "tanh",
    "sigmoid",
    "elementwise",
    "add",
    "mul",
    "affine",
    "absval",
    "reciprocal",
    "sum_all",
    "mean_all",
    "concat_channels",
]


class ShapeError(ValueError):
    """An operand violates an operation's shape contract."""


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    if arr.ndim != 4:
        raise ShapeError(
            f"tensor must be 4-D (batch, channels, height, width), got shape {arr.shape}"
        )
    return arr


class Tensor:
    """Immutable dense (batch, channels, height, width) value.

    ``tape`` is None for constants; gradients only flow to tensors created
    with a tape. The underlying array is marked read-only.
    """

    __slots__ = ("data", "tape", "_windows")

    def __init__(self, data, tape: "GradTape | None" = None):
        arr = _coerce(data)
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self._windows = None  # lazy im2col cache; derived data only

    @classmethod
    def _wrap(cls, data: np.ndarray, tape: "GradTape | None") -> "Tensor":
        # Fast path for op results: the array is freshly computed and owned.
        out = object.__new__(cls)
        if data.flags.writeable:
            data.flags.writeable = False
        out.data = data
        out.tape = tape
        out._windows = None
        return out

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.numel != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, taped={self.tape is not None})"


class GradTape:
    """Ordered record of differentiable operations for one backward pass.

    Nodes are stored in creation order; every node's operands precede it,
    so a reverse sweep is a topological traversal. Gradients accumulate
    additively when a tensor feeds several nodes.
    """

    __slots__ = ("_nodes", "_grads")

    def __init__(self):
        self._nodes: list[tuple[str, Tensor, tuple[Tensor, ...], object]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, name, out, inputs, bwd) -> None:
        self._nodes.append((name, out, inputs, bwd))

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of a scalar ``loss`` w.r.t. every taped tensor."""
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if loss.numel != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for name, out, inputs, bwd in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gt in zip(inputs, bwd(g)):
                if gt is None or t.tape is None:
                    continue
                if gt.shape != t.shape:
                    raise ShapeError(
                        f"{name}: backward produced gradient shape {gt.shape} "
                        f"for tensor of shape {t.shape}"
                    )
                prev = grads.get(id(t))
                grads[id(t)] = gt if prev is None else prev + gt
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. ``t`` (zeros if unreached)."""
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands were recorded on different tapes")
    return tape


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor._wrap(data, tape)
    if tape is not None:
        tape._record(name, out, inputs, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int):
    """Gather sliding windows of a padded (B,C,Hp,Wp) array into a matrix.

    Returns (cols, Ho, Wo) with cols of shape (B*Ho*Wo, C*kh*kw).
    """
    b, c, hp, wp = xp.shape
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * ho * wo, c * kh * kw), ho, wo


def _col2im(gcols, out_shape, kh, kw, stride, dilation, padding, hn, wn):
    """Scatter-add column gradients back onto a (possibly padded) image.

    Exact adjoint of :func:`_im2col`: ``hn``/``wn`` are the window position
    counts the columns were gathered at. One up-front transpose makes every
    per-tap source block contiguous.
    """
    b, c, h, w = out_shape
    buf = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    g6 = np.ascontiguousarray(
        gcols.reshape(b, hn, wn, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    )
    for i in range(kh):
        for j in range(kw):
            buf[
                :,
                :,
                i * dilation : i * dilation + stride * hn : stride,
                j * dilation : j * dilation + stride * wn : stride,
            ] += g6[:, :, i, j]
    if padding:
        buf = buf[:, :, padding : padding + h, padding : padding + w]
    return buf


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """Zero-padded 2-D cross-correlation of x (B,C,H,W) with w (O,C,kh,kw).

    Output spatial size is floor((H + 2*padding - dilation*(kh-1) - 1)/stride) + 1.
    ``b``, when given, is a per-output-channel bias of shape (1, O, 1, 1).
    Differentiable w.r.t. x, w and b.
    """
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1 and padding >= 0")
    bn, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(
            f"conv2d: weight {w.shape} expects {cw} input channels but x has shape {x.shape}"
        )
    if b is not None and b.shape != (1, o, 1, 1):
        raise ShapeError(f"conv2d: bias must have shape (1, {o}, 1, 1), got {b.shape}")
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    if h + 2 * padding < span_h or wd + 2 * padding < span_w:
        raise ShapeError(
            f"conv2d: kernel span ({span_h}, {span_w}) exceeds padded input "
            f"({h + 2 * padding}, {wd + 2 * padding})"
        )
    # several convolutions over one tensor (the DSA units) share the gather
    key = (kh, kw, stride, dilation, padding)
    if x._windows is None:
        x._windows = {}
    cached = x._windows.get(key)
    if cached is None:
        xp = (
            np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            if padding
            else x.data
        )
        cached = x._windows[key] = _im2col(xp, kh, kw, stride, dilation)
    cols, ho, wo = cached
    wm = w.data.reshape(o, c * kh * kw)
    out = (cols @ wm.T).reshape(bn, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bn * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = _col2im(g2 @ wm, x.shape, kh, kw, stride, dilation, padding, ho, wo)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)

    return _emit("conv2d", out, inputs, bwd)


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    out_hw: tuple[int, int] | None = None,
) -> Tensor:
    """Adjoint of :func:`conv2d` with the same weight layout.

    ``x`` has w.shape[0] channels, the result has w.shape[1] channels, so for
    tensors of matching shapes <conv2d(x, w), y> == <x, conv_transpose2d(y, w)>
    (bias zero). By default the minimal inverse size (H-1)*stride + kh - 2*padding
    is produced; strided geometry is ambiguous, pass ``out_hw`` to pick a larger
    valid size (at most stride-1 extra rows/columns).
    """
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    bn, o, h, wd = x.shape
    ow, c, kh, kw = w.shape
    if ow != o:
        raise ShapeError(
            f"conv_transpose2d: weight {w.shape} expects {ow} input channels "
            f"but x has shape {x.shape}"
        )
    if b is not None and b.shape != (1, c, 1, 1):
        raise ShapeError(f"conv_transpose2d: bias must have shape (1, {c}, 1, 1), got {b.shape}")
    min_h = (h - 1) * stride + kh - 2 * padding
    min_w = (wd - 1) * stride + kw - 2 * padding
    if out_hw is None:
        oh, owd = min_h, min_w
    else:
        oh, owd = out_hw
    if not (0 <= oh - min_h < stride and 0 <= owd - min_w < stride):
        raise ShapeError(
            f"conv_transpose2d: output size ({oh}, {owd}) is not reachable from input "
            f"({h}, {wd}) with stride {stride}; minimal size is ({min_h}, {min_w})"
        )
    if min(oh, owd) < 1:
        raise ShapeError(f"conv_transpose2d: output size ({oh}, {owd}) is empty")
    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(bn * h * wd, o)
    wm = w.data.reshape(o, c * kh * kw)
    out = _col2im(x2 @ wm, (bn, c, oh, owd), kh, kw, stride, 1, padding, h, wd)
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gp = (
            np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            if padding
            else g
        )
        cols_g, hn, wn = _im2col(gp, kh, kw, stride, 1)
        gx = (cols_g @ wm.T).reshape(bn, h, wd, o).transpose(0, 3, 1, 2)
        gw = (x2.T @ cols_g).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)

    return _emit("conv_transpose2d", out, inputs, bwd)


# ---------------------------------------------------------------------------
# pointwise operations
# ---------------------------------------------------------------------------

def _d_lrelu(x: np.ndarray, slope: float) -> np.ndarray:
    # subgradient at exactly 0 is the positive-side slope
    return np.where(x >= 0, x.dtype.type(1), x.dtype.type(slope))


def _d_tanh(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def _d_sigmoid(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """Elementwise nonlinearity: ``lrelu`` (negative slope), ``tanh`` or ``sigmoid``."""
    xd = x.data
    if kind == "lrelu":
        s = xd.dtype.type(slope)
        y = np.where(xd >= 0, xd, xd * s)

        def bwd(g):
            return (g * _d_lrelu(xd, slope),)

    elif kind == "tanh":
        y = np.tanh(xd)

        def bwd(g):
            return (g * _d_tanh(y),)

    elif kind == "sigmoid":
        # tanh-based form avoids exp overflow for large negative inputs
        y = 0.5 * (np.tanh(0.5 * xd) + 1.0)

        def bwd(g):
            return (g * _d_sigmoid(y),)

    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return _emit(kind, y, (x,), bwd)


def lrelu(x: Tensor, slope: float = 0.2) -> Tensor:
    return activation(x, "lrelu", slope)


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return activation(x, "sigmoid")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Elementwise ``add`` or ``mul`` of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {kind}: shapes {a.shape} and {b.shape} differ")
    if kind == "add":
        data = a.data + b.data

        def bwd(g):
            return g, g

    elif kind == "mul":
        data = a.data * b.data

        def bwd(g):
            return g * b.data, g * a.data

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _emit(kind, data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def affine(x: Tensor, gain: float, shift: float = 0.0) -> Tensor:
    """Elementwise gain*x + shift with python-scalar gain and shift."""
    data = x.data * gain + shift

    def bwd(g):
        return (g * gain,)

    return _emit("affine", data, (x,), bwd)


def absval(x: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at 0."""
    xd = x.data

    def bwd(g):
        return (g * np.sign(xd),)

    return _emit("abs", np.abs(xd), (x,), bwd)


def reciprocal(x: Tensor) -> Tensor:
    """Elementwise 1/x. The caller must keep x away from zero."""
    y = 1.0 / x.data

    def bwd(g):
        return (-g * y * y,)

    return _emit("reciprocal", y, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) tensor."""
    data = x.data.sum().reshape(1, 1, 1, 1)

    def bwd(g):
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", data, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    """Mean of all elements as a (1,1,1,1) tensor."""
    return affine(sum_all(x), 1.0 / x.numel)


def concat_channels(xs) -> Tensor:
    """Concatenate tensors along the channel axis, order preserved."""
    xs = tuple(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    b, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != b or t.shape[2] != h or t.shape[3] != w:
            raise ShapeError(
                f"concat_channels: shape {t.shape} does not match leading {xs[0].shape} "
                "in batch or spatial extents"
            )
    data = np.concatenate([t.data for t in xs], axis=1)
    edges = np.cumsum([0] + [t.shape[1] for t in xs])

    def bwd(g):
        return tuple(np.ascontiguousarray(g[:, e0:e1]) for e0, e1 in zip(edges[:-1], edges[1:]))

    return _emit("concat", data, xs, bwd)
