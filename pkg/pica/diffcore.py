"""
Dense tensors with reverse-mode differentiation for the handful of
primitives the codec needs (convolutions, leaky-relu, sine layers,
bilinear lookups and the glue arithmetic around them), plus Adam, a
finite-difference gradient checker and the checkpoint file format.
"""

import logging
import struct
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sparse
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PICA1"

# per-thread state: the tape stack and the working float dtype
_local = threading.local()


class ShapeError(ValueError):
    """raised when operand extents do not fit an op"""

    def __init__(self, op: str, message: str, **dims):
        report = ", ".join(f"{k}={v}" for k, v in dims.items())
        super().__init__(f"{op}: {message}" + (f" [{report}]" if report else ""))
        self.op = op
        self.dims = dims


class CheckpointError(ValueError):
    pass


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype):
    """Run the enclosed ops at the given float precision (float32 or float64), in this thread only."""
    previous = default_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "name")
    # ndarray op Tensor defers to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence]


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stop_gradient(x: Tensor) -> Tensor:
    """same values, detached from the tape"""
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class _Record:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
    op: str


class Tape:
    """Ordered log of differentiable ops executed while the tape is active.

    Usage:
        with Tape() as tape:
            loss = model_loss(...)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> List[str]:
        return [r.op for r in self.records]


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack = _tape_stack()
        if stack:
            stack[-1].records.append(_Record(out, tuple(inputs), vjp, op))
    return out


class Gradients:
    """gradients keyed by tensor identity; unreachable tensors read as zeros"""

    def __init__(self, table: Dict[int, np.ndarray]):
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table

    def named(self, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
        return {name: self[p] for name, p in params.items()}


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """
    Replay the tape in reverse and accumulate gradients of a scalar loss.

    Args:
        tape: tape the loss was computed under
        loss: scalar tensor

    Returns:
        Gradients for every tensor reachable from the loss
    """
    if loss.size != 1:
        raise ShapeError("backward", "loss must be a scalar", shape=loss.shape)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for record in reversed(tape.records):
        g = grads.pop(id(record.output), None)
        if g is None:
            continue
        for inp, ig in zip(record.inputs, record.vjp(g)):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(record.op, "gradient shape mismatch", expected=inp.shape, got=ig.shape)
            ig = ig.astype(inp.data.dtype, copy=False)
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig
    return Gradients(grads)


# ---------------------------------------------------------------------------
# Glue arithmetic
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _emit(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def absolute(x: Tensor) -> Tensor:
    return _emit(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / max(int(count), 1))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            # integer arrays may repeat rows
            np.add.at(gx, index, g)
        return (gx,)

    return _emit(x.data[index], (x,), vjp, "getitem")


def masked_fill(x: Tensor, mask: np.ndarray, value: float = 0.0) -> Tensor:
    """replace entries where mask is set; those entries get no gradient"""
    mask = np.asarray(mask, dtype=bool)
    keep = (~mask).astype(x.data.dtype)
    return _emit(np.where(mask, value, x.data), (x,), lambda g: (g * keep,), "masked_fill")


def scatter_rows(values: Tensor, index: np.ndarray, size: int) -> Tensor:
    """place row i of values at row index[i] of a zero array with `size` rows (index unique)"""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != values.shape[0]:
        raise ShapeError("scatter_rows", "index length must match rows", rows=values.shape[0], index=index.shape[0])
    out = np.zeros((size,) + values.shape[1:], dtype=values.data.dtype)
    out[index] = values.data
    return _emit(out, (values,), lambda g: (g[index],), "scatter_rows")


def sparse_matmul(matrix: sparse.spmatrix, x: Tensor) -> Tensor:
    """constant sparse matrix times dense tensor"""
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError("sparse_matmul", "inner extents differ", matrix=matrix.shape, x=x.shape)
    transposed = matrix.T.tocsr()
    return _emit(
        np.asarray(matrix @ x.data), (x,),
        lambda g: (np.asarray(transposed @ g),),
        "sparse_matmul",
    )


# ---------------------------------------------------------------------------
# Model primitives
# ---------------------------------------------------------------------------

def _conv_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, pad: int = 0) -> Tensor:
    """
    Cross-correlation of a C×H×W input with O×C×K×K filters plus a per-channel bias.

    Returns:
        O×Ho×Wo tensor with Ho = floor((H + 2·pad − K) / stride) + 1
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError("conv2d", "expected CHW input and OCKK weight", input=x.shape, weight=weight.shape)
    C, H, W = x.shape
    O, Cw, K, K2 = weight.shape
    if Cw != C or K != K2:
        raise ShapeError("conv2d", "weight does not match input channels", input=x.shape, weight=weight.shape)
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d", "invalid stride/pad", stride=stride, pad=pad)
    Ho, Wo = _conv_extent(H, K, stride, pad), _conv_extent(W, K, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", "kernel larger than padded input", input=x.shape, kernel=K, pad=pad)
    if bias is not None and bias.shape != (O,):
        raise ShapeError("conv2d", "bias must have one entry per output channel", bias=bias.shape, channels=O)

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (K, K), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    out = np.tensordot(weight.data, windows, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def vjp(g):
        gw = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        gwin = np.tensordot(weight.data, g, axes=([0], [0]))
        gxp = np.zeros_like(xp)
        for i in range(K):
            for j in range(K):
                gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gwin[:, i, j]
        gx = gxp[:, pad:pad + H, pad:pad + W]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, vjp, "conv2d")


def conv2d_untied_bias(x: Tensor, weight: Tensor, bias_map: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """conv2d whose bias is a learned value per (channel, row, col)"""
    out = conv2d(x, weight, None, stride, pad)
    if bias_map.shape != out.shape:
        raise ShapeError("conv2d_untied_bias", "bias map extents differ from output", bias=bias_map.shape, output=out.shape)
    return add(out, bias_map)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 2, pad: int = 1) -> Tensor:
    """
    Adjoint of conv2d's linear map (the 2× up-sampling step of the decoders).

    Args:
        x: C×H×W input
        weight: C×O×K×K filters
        bias: per-channel (O,) or untied per-location (O×Ho×Wo) bias, or None
    Returns:
        O×Ho×Wo tensor with Ho = (H − 1)·stride − 2·pad + K
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError("conv_transpose2d", "expected CHW input and COKK weight", input=x.shape, weight=weight.shape)
    C, H, W = x.shape
    Cw, O, K, K2 = weight.shape
    if Cw != C or K != K2:
        raise ShapeError("conv_transpose2d", "weight does not match input channels", input=x.shape, weight=weight.shape)
    Hf, Wf = (H - 1) * stride + K, (W - 1) * stride + K
    Ho, Wo = Hf - 2 * pad, Wf - 2 * pad
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv_transpose2d", "padding removes the whole output", input=x.shape, pad=pad)
    if bias is not None and bias.shape not in ((O,), (O, Ho, Wo)):
        raise ShapeError("conv_transpose2d", "bias must be (O,) or (O,Ho,Wo)", bias=bias.shape, output=(O, Ho, Wo))

    cols = np.tensordot(x.data, weight.data, axes=([0], [0]))  # H, W, O, K, K
    full = np.zeros((O, Hf, Wf), dtype=cols.dtype)
    for i in range(K):
        for j in range(K):
            full[:, i:i + stride * (H - 1) + 1:stride, j:j + stride * (W - 1) + 1:stride] += np.moveaxis(cols[:, :, :, i, j], 2, 0)
    out = full[:, pad:pad + Ho, pad:pad + Wo]
    if bias is not None:
        out = out + (bias.data[:, None, None] if bias.ndim == 1 else bias.data)

    def vjp(g):
        gfull = np.zeros((O, Hf, Wf), dtype=g.dtype)
        gfull[:, pad:pad + Ho, pad:pad + Wo] = g
        windows = sliding_window_view(gfull, (K, K), axis=(1, 2))[:, ::stride, ::stride][:, :H, :W]
        gx = np.tensordot(weight.data, windows, axes=([1, 2, 3], [0, 3, 4]))
        gw = np.tensordot(x.data, windows, axes=([1, 2], [1, 2]))
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(1, 2)) if bias.ndim == 1 else g)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, vjp, "conv_transpose2d")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    # derivative 1 at exactly zero
    scale = np.where(x.data >= 0, 1.0, slope).astype(x.data.dtype)
    return _emit(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def _affine_inputs(op: str, x: Tensor, weight: Tensor, bias: Tensor) -> np.ndarray:
    if weight.ndim != 2 or bias.shape != (weight.shape[0],):
        raise ShapeError(op, "expected out×in weight and out bias", weight=weight.shape, bias=bias.shape)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(op, "input width differs from weight inner extent", input=x.shape, weight=weight.shape)
    return x.data.reshape(-1, weight.shape[1])


def sine_linear(x: Tensor, weight: Tensor, bias: Tensor, omega: float = 30.0) -> Tensor:
    """sin(omega · (W x + b)) over the last axis of x"""
    flat = _affine_inputs("sine_linear", x, weight, bias)
    pre = omega * (flat @ weight.data.T + bias.data)
    out = np.sin(pre)

    def vjp(g):
        gpre = g.reshape(pre.shape) * omega * np.cos(pre)
        return (gpre @ weight.data).reshape(x.shape), gpre.T @ flat, gpre.sum(axis=0)

    return _emit(out.reshape(x.shape[:-1] + (weight.shape[0],)), (x, weight, bias), vjp, "sine_linear")


def linear_final(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """affine map W x + b over the last axis of x"""
    flat = _affine_inputs("linear_final", x, weight, bias)
    out = flat @ weight.data.T + bias.data

    def vjp(g):
        g2 = g.reshape(out.shape)
        return (g2 @ weight.data).reshape(x.shape), g2.T @ flat, g2.sum(axis=0)

    return _emit(out.reshape(x.shape[:-1] + (weight.shape[0],)), (x, weight, bias), vjp, "linear_final")


def bilinear_sample(texture: Tensor, coords: ArrayLike) -> Tensor:
    """
    Sample an H×W×C map at N (u, v) coordinates.

    Texel (i, j) is centred at ((j + 0.5) / W, (i + 0.5) / H); lookups
    beyond the outer centres clamp to the edge. An axis of extent 1 is not
    interpolated, which is how 1D tables (R×1×C) are read.
    """
    coords = as_tensor(coords)
    if texture.ndim != 3:
        raise ShapeError("bilinear_sample", "expected an H×W×C map", map=texture.shape)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError("bilinear_sample", "expected N×2 coordinates", coords=coords.shape)
    c = coords.data.astype(np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("bilinear_sample: non-finite coordinates")
    H, W, _ = texture.shape
    fx = c[:, 0] * W - 0.5
    fy = c[:, 1] * H - 0.5
    x = np.clip(fx, 0.0, W - 1)
    y = np.clip(fy, 0.0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    tx = (x - x0)[:, None]
    ty = (y - y0)[:, None]

    m = texture.data
    v00, v01, v10, v11 = m[y0, x0], m[y0, x1], m[y1, x0], m[y1, x1]
    top = v00 + tx * (v01 - v00)
    bottom = v10 + tx * (v11 - v10)
    out = top + ty * (bottom - top)

    def vjp(g):
        gm = np.zeros_like(m)
        np.add.at(gm, (y0, x0), g * ((1 - tx) * (1 - ty)))
        np.add.at(gm, (y0, x1), g * (tx * (1 - ty)))
        np.add.at(gm, (y1, x0), g * ((1 - tx) * ty))
        np.add.at(gm, (y1, x1), g * (tx * ty))
        if not coords.requires_grad:
            return gm, None
        dx = (1 - ty) * (v01 - v00) + ty * (v11 - v10)
        dy = bottom - top
        inside_x = ((fx > 0) & (fx < W - 1)).astype(np.float64)
        inside_y = ((fy > 0) & (fy < H - 1)).astype(np.float64)
        gu = np.sum(g * dx, axis=1) * W * inside_x
        gv = np.sum(g * dy, axis=1) * H * inside_y
        return gm, np.stack([gu, gv], axis=1).astype(coords.data.dtype)

    return _emit(out, (texture, coords), vjp, "bilinear_sample")


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def gradcheck(op_closure: Callable[..., Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-5) -> float:
    """
    Compare analytic gradients against central differences.

    The analytic gradient is taken at the inputs' own precision; the
    finite-difference reference is always evaluated in float64.

    Returns:
        max over all input entries of |analytic − numeric| / max(1e-8, |analytic| + |numeric|)
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for t in inputs:
        t.requires_grad = True
    with Tape() as tape:
        loss = op_closure(*inputs)
    grads = backward(tape, loss)
    analytic = [grads[t].astype(np.float64) for t in inputs]

    worst = 0.0
    with precision(np.float64):
        shifted = [Tensor(t.data.astype(np.float64)) for t in inputs]
        for moved, exact in zip(shifted, analytic):
            flat = moved.data.reshape(-1)
            exact_flat = exact.reshape(-1)
            for k in range(flat.size):
                original = flat[k]
                flat[k] = original + epsilon
                plus = float(op_closure(*shifted).data.sum())
                flat[k] = original - epsilon
                minus = float(op_closure(*shifted).data.sum())
                flat[k] = original
                numeric = (plus - minus) / (2.0 * epsilon)
                err = abs(exact_flat[k] - numeric) / max(1e-8, abs(exact_flat[k]) + abs(numeric))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Union[Gradients, Mapping[str, np.ndarray]],
    state: AdamState,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """one bias-corrected Adam update; parameters get fresh data arrays"""
    named = grads.named(params) if isinstance(grads, Gradients) else grads
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = np.asarray(named[name])
        if g.shape != p.shape:
            raise ShapeError("adam_step", f"gradient for {name} has wrong shape", param=p.shape, grad=g.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], entries: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    """write entries in name order as little-endian float32 records"""
    path = Path(path)
    try:
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(entries)))
            for name in sorted(entries):
                value = entries[name]
                arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f4")
                encoded = name.encode("utf-8")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.tobytes())
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint written: {path} ({len(entries)} entries)")


def load_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        (count,) = struct.unpack_from("<I", blob, 5)
        offset = 9
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + n].decode("utf-8")
            offset += n
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            entries[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape).copy()
            offset += 4 * size
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"truncated or corrupt checkpoint {path}: {e}") from e
    return entries
