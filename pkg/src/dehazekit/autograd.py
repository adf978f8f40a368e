"""Dense tensors with reverse-mode automatic differentiation.

Only the primitives used by the dehazing networks are provided. Every
differentiable operation is a :class:`Function` subclass whose ``forward``
works on raw numpy arrays and whose ``backward`` maps the output gradient to
one gradient per input (``None`` for inputs that do not need one).

Tensors carry a reference to the function that created them, so the graph
itself is the tape: :func:`backward` orders it topologically and replays the
backward rules in reverse, visiting each node once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericDomainError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float64

DIV_EPS = 1e-12


def set_precision(name: str) -> None:
    """Select the floating dtype used for newly created tensors."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


def get_precision() -> str:
    return np.dtype(_dtype).name


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """N-dimensional array (0 to 4 axes) with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=_dtype)
        if arr.ndim > 4:
            raise DimensionError(f"tensors have at most 4 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None
        self.name = name

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
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _as_tensor(other))

    def __radd__(self, other):
        return Add.apply(_as_tensor(other), self)

    def __sub__(self, other):
        return Sub.apply(self, _as_tensor(other))

    def __rsub__(self, other):
        return Sub.apply(_as_tensor(other), self)

    def __mul__(self, other):
        return Mul.apply(self, _as_tensor(other))

    def __rmul__(self, other):
        return Mul.apply(_as_tensor(other), self)

    def __truediv__(self, other):
        return Div.apply(self, _as_tensor(other))

    def __neg__(self):
        return Mul.apply(self, Tensor(-1.0))

    def __matmul__(self, other):
        return MatMul.apply(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


class Function:
    """A recorded differentiable operation."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot combine shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class Div(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        if np.any(np.abs(b) < DIV_EPS):
            raise NumericDomainError(f"division by a value with magnitude below {DIV_EPS}")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Maximum(Function):
    """Elementwise max; ties send the gradient to the first operand."""

    def forward(self, a, b):
        if a.shape != b.shape:
            raise DimensionError(f"maximum needs equal shapes, got {a.shape} and {b.shape}")
        self.first = a >= b
        return np.where(self.first, a, b)

    def backward(self, grad):
        return np.where(self.first, grad, 0.0), np.where(self.first, 0.0, grad)


class Clip(Function):
    def forward(self, x, lo, hi):
        self.mask = (x >= lo) & (x <= hi)
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return (grad * self.mask,)


_ELEMENTWISE = {"add": Add, "sub": Sub, "mul": Mul, "div": Div}


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Apply ``a op b`` for op in add, sub, mul, div.

    ``b`` may broadcast against ``a`` (per-channel ``[1, C, 1, 1]`` maps,
    trailing-dim vectors, scalars).
    """
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn.apply(_as_tensor(a), _as_tensor(b))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    return Maximum.apply(a, b)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return Clip.apply(x, lo=lo, hi=hi)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = np.mean(x, axis=axis, keepdims=keepdims)
        self.count = x.size // max(out.size, 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class AMax(Function):
    """Max along one axis; gradient goes to the first maximal entry."""

    def forward(self, x, axis, keepdims=True):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        self.idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.take_along_axis(x, self.idx, axis=axis)
        return out if keepdims else np.squeeze(out, axis)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        dx = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(dx, self.idx, grad, axis=self.axis)
        return (dx,)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def amax(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    return AMax.apply(x, axis=axis, keepdims=keepdims)


# --------------------------------------------------------------------------
# linear algebra and convolution
# --------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes follow numpy's matmul rules."""
    return MatMul.apply(a, b)


def _output_extent(size: int, k: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    if size + 2 * pad < k or out <= 0:
        raise DimensionError(f"window {k} with pad {pad} does not fit extent {size}")
    return out


def _pad_hw(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """``[N*Ho*Wo, C*kh*kw]`` patch matrix, columns in (C, kh, kw) order."""
    n, c = xp.shape[:2]
    out = np.empty((n, ho, wo, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out[..., i, j] = xp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride].transpose(0, 2, 3, 1)
    return out.reshape(n * ho * wo, -1)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


class Conv2d(Function):
    """Cross-correlation of an NCHW map with an FCkk kernel bank plus bias."""

    def forward(self, x, w, b, stride=1, pad=0, odd_only=True):
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"conv2d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
        f, _, kh, kw = w.shape
        if odd_only and (kh % 2 == 0 or kw % 2 == 0):
            raise DimensionError(f"conv2d kernels must be odd-sized, got {kh}x{kw}")
        if b.shape != (f,):
            raise DimensionError(f"bias shape {b.shape} does not match {f} filters")
        ho = _output_extent(x.shape[2], kh, stride, pad)
        wo = _output_extent(x.shape[3], kw, stride, pad)
        xp = _pad_hw(x, pad)
        n, c = x.shape[:2]
        # im2col: rows are output pixels, columns are (C, kh, kw) taps
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        wmat = w.reshape(f, -1)
        out = (cols @ wmat.T + b).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
        self.cols, self.w = cols, w
        self.xshape, self.xpshape = x.shape, xp.shape
        self.stride, self.pad, self.ho, self.wo = stride, pad, ho, wo
        return np.ascontiguousarray(out)

    def backward(self, grad):
        s, ho, wo = self.stride, self.ho, self.wo
        f, c, kh, kw = self.w.shape
        n = grad.shape[0]
        g2d = grad.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2d.T @ self.cols).reshape(self.w.shape)
        gb = g2d.sum(axis=0)
        p = self.pad
        if s == 1:
            # input gradient = full correlation of grad with the flipped kernel
            hp, wp = self.xpshape[2:]
            gpad = np.pad(grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gcols = _im2col(gpad, kh, kw, 1, hp, wp)
            wflip = self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            dxp = (gcols @ wflip.T).reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
            dx = dxp[:, :, p : p + self.xshape[2], p : p + self.xshape[3]]
            return np.ascontiguousarray(dx), gw, gb
        dcols = (g2d @ self.w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros(self.xpshape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + self.xshape[2], p : p + self.xshape[3]] if p else dxp
        return dx, gw, gb


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return Conv2d.apply(x, w, bias, stride=stride, pad=pad)


def patch_project(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Non-overlapping ``m x m`` patch projection (stride-``m`` correlation,
    ``m`` may be even)."""
    return Conv2d.apply(x, w, bias, stride=w.shape[-1], pad=0, odd_only=False)


class Pool2d(Function):
    def forward(self, x, kind="max", k=2, stride=2, pad=0):
        if x.ndim != 4:
            raise DimensionError(f"pool2d expects NCHW input, got {x.shape}")
        ho = _output_extent(x.shape[2], k, stride, pad)
        wo = _output_extent(x.shape[3], k, stride, pad)
        self.kind, self.k, self.stride, self.pad = kind, k, stride, pad
        self.xshape, self.ho, self.wo = x.shape, ho, wo
        if kind == "max":
            xp = _pad_hw(x, pad, value=-np.inf)
            win = _windows(xp, k, k, stride, ho, wo).reshape(*x.shape[:2], ho, wo, k * k)
            # np.argmax returns the first maximum: row-major tie-break
            self.arg = np.argmax(win, axis=-1)
            return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]
        if kind == "avg":
            xp = _pad_hw(x, pad)
            ones = _pad_hw(np.ones((1, 1) + x.shape[2:], dtype=x.dtype), pad)
            self.counts = _windows(ones, k, k, stride, ho, wo).sum(axis=(-2, -1))
            return _windows(xp, k, k, stride, ho, wo).sum(axis=(-2, -1)) / self.counts
        raise ValueError(f"unknown pool kind {kind!r}")

    def backward(self, grad):
        k, s, p, ho, wo = self.k, self.stride, self.pad, self.ho, self.wo
        n, c, h, w = self.xshape
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        share = None if self.kind == "max" else grad / self.counts
        for i in range(k):
            for j in range(k):
                if self.kind == "max":
                    contrib = np.where(self.arg == i * k + j, grad, 0.0)
                else:
                    contrib = share
                dxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += contrib
        return (dxp[:, :, p : p + h, p : p + w],)


def pool2d(x: Tensor, kind: str, k: int, stride: int, pad: int = 0) -> Tensor:
    """Max or average pooling.  Average pooling divides by in-bounds counts."""
    return Pool2d.apply(x, kind=kind, k=k, stride=stride, pad=pad)


# --------------------------------------------------------------------------
# activations, softmax, normalization
# --------------------------------------------------------------------------


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        self.y = expit(x)
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return ReLU.apply(x)
    if kind == "sigmoid":
        return Sigmoid.apply(x)
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


class Softmax(Function):
    def forward(self, x, axis=-1):
        z = np.exp(x - np.max(x, axis=axis, keepdims=True))
        self.y = z / np.sum(z, axis=axis, keepdims=True)
        self.axis = axis
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - np.sum(grad * y, axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def _norm_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    m1 = np.mean(g_hat, axis=axes, keepdims=True)
    m2 = np.mean(g_hat * x_hat, axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - x_hat * m2)


class LayerNorm(Function):
    """Normalize over the last axis, then scale and shift."""

    def forward(self, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mu) * self.inv_std
        self.gamma = gamma
        return self.x_hat * gamma + beta

    def backward(self, grad):
        lead = tuple(range(grad.ndim - 1))
        g_gamma = np.sum(grad * self.x_hat, axis=lead)
        g_beta = np.sum(grad, axis=lead)
        dx = _norm_backward(grad * self.gamma, self.x_hat, self.inv_std, -1)
        return dx, g_gamma, g_beta


class BatchNorm2d(Function):
    """Per-channel normalization of an NCHW map.

    In training mode the batch statistics over (N, H, W) are used and the
    running buffers are updated in place; in eval mode the running buffers
    are used and the map is affine in ``x``.
    """

    def forward(self, x, gamma, beta, eps=1e-5, running=None, training=True, momentum=0.1):
        if x.ndim != 4 or gamma.shape != (x.shape[1],):
            raise DimensionError(f"batchnorm2d needs NCHW input with C={gamma.shape}, got {x.shape}")
        axes = (0, 2, 3)
        self.training = training
        if training:
            mu = x.mean(axis=axes, keepdims=True)
            var = x.var(axis=axes, keepdims=True)
            if running is not None:
                n = x.size // x.shape[1]
                unbiased = var.reshape(-1) * (n / max(n - 1, 1))
                running["mean"] *= 1.0 - momentum
                running["mean"] += momentum * mu.reshape(-1)
                running["var"] *= 1.0 - momentum
                running["var"] += momentum * unbiased
        else:
            if running is None:
                raise ContractError("eval-mode batchnorm needs running statistics")
            mu = running["mean"].reshape(1, -1, 1, 1)
            var = running["var"].reshape(1, -1, 1, 1)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mu) * self.inv_std
        self.gamma = gamma.reshape(1, -1, 1, 1)
        return self.x_hat * self.gamma + beta.reshape(1, -1, 1, 1)

    def backward(self, grad):
        axes = (0, 2, 3)
        g_gamma = np.sum(grad * self.x_hat, axis=axes)
        g_beta = np.sum(grad, axis=axes)
        g_hat = grad * self.gamma
        if self.training:
            dx = _norm_backward(g_hat, self.x_hat, self.inv_std, axes)
        else:
            dx = g_hat * self.inv_std
        return dx, g_gamma, g_beta


def normalize(
    x: Tensor,
    kind: str,
    params: Optional[tuple] = None,
    eps: float = 1e-5,
    running: Optional[dict] = None,
    training: bool = True,
) -> Tensor:
    """Batch or layer normalization.

    ``params`` is ``(gamma, beta)``; when omitted the identity affine is
    used, which exposes the pre-affine normalized values.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if kind == "layernorm":
        d = x.shape[-1]
    elif kind == "batchnorm2d":
        d = x.shape[1]
    else:
        raise ValueError(f"unknown normalization {kind!r}")
    gamma, beta = params if params is not None else (Tensor(np.ones(d)), Tensor(np.zeros(d)))
    if kind == "layernorm":
        return LayerNorm.apply(x, gamma, beta, eps=eps)
    return BatchNorm2d.apply(x, gamma, beta, eps=eps, running=running, training=training)


# --------------------------------------------------------------------------
# shape operations
# --------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        try:
            out = x.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
        if out.ndim > 4:
            raise DimensionError("tensors have at most 4 axes")
        return out

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes):
        if sorted(axes) != list(range(x.ndim)):
            raise DimensionError(f"invalid permutation {axes} for {x.ndim}-D tensor")
        self.inverse = np.argsort(axes)
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class Concat(Function):
    def forward(self, *arrays, axis=1):
        ref = arrays[0].shape
        for a in arrays[1:]:
            if a.ndim != len(ref) or any(
                s != r for d, (s, r) in enumerate(zip(a.shape, ref)) if d != axis % len(ref)
            ):
                raise DimensionError(f"cannot concatenate shapes {ref} and {a.shape} on axis {axis}")
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        self.axis = axis
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Slice(Function):
    def forward(self, x, axis, start, stop):
        if not 0 <= start < stop <= x.shape[axis]:
            raise DimensionError(f"slice [{start}:{stop}] out of range for axis of size {x.shape[axis]}")
        self.shape, self.index = x.shape, [slice(None)] * x.ndim
        self.index[axis] = slice(start, stop)
        self.index = tuple(self.index)
        return x[self.index].copy()

    def backward(self, grad):
        dx = np.zeros(self.shape, dtype=grad.dtype)
        dx[self.index] = grad
        return (dx,)


def bilinear_matrix(n_in: int, n_out: int, align_corners: bool = True) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` matrix for 1-D linear interpolation."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if align_corners:
        pos = np.arange(n_out) * ((n_in - 1) / max(n_out - 1, 1))
    else:
        pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


class UpsampleBilinear(Function):
    def forward(self, x, size, align_corners=True):
        if x.ndim != 4:
            raise DimensionError(f"bilinear resize expects NCHW input, got {x.shape}")
        self.ry = bilinear_matrix(x.shape[2], size[0], align_corners).astype(x.dtype)
        self.rx = bilinear_matrix(x.shape[3], size[1], align_corners).astype(x.dtype)
        return self.ry @ x @ self.rx.T

    def backward(self, grad):
        return (self.ry.T @ grad @ self.rx,)


def reshape(x: Tensor, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor, axes) -> Tensor:
    return Transpose.apply(x, axes=tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return Slice.apply(x, axis=axis, start=start, stop=stop)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(x, 1, start, stop)


def upsample_bilinear(x: Tensor, size, align_corners: bool = True) -> Tensor:
    """Bilinear resize of the spatial axes.  With ``align_corners`` the
    corner pixels of input and output coincide."""
    return UpsampleBilinear.apply(x, size=tuple(size), align_corners=align_corners)


def shape_op(x, kind: str, *args, **kwargs) -> Tensor:
    table = {
        "reshape": reshape,
        "transpose": transpose,
        "concat_channels": concat_channels,
        "slice_channels": slice_channels,
        "upsample_bilinear": upsample_bilinear,
    }
    try:
        return table[kind](x, *args, **kwargs)
    except KeyError:
        raise ValueError(f"unknown shape op {kind!r}") from None


# --------------------------------------------------------------------------
# backward pass and gradient checking
# --------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``root``.

    Gradients accumulate into existing ``.grad`` arrays; call
    :meth:`Tensor.zero_grad` between independent backward passes.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._ctx.inputs, node._ctx.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Sequence[tuple]] = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    ``indices`` restricts the numeric sweep to a subset of coordinates.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    was = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()
    x.requires_grad = was

    coords = indices if indices is not None else list(np.ndindex(x.shape))
    worst = 0.0
    for idx in coords:
        orig = x.data[idx]
        x.data[idx] = orig + eps
        plus = f(x).item()
        x.data[idx] = orig - eps
        minus = f(x).item()
        x.data[idx] = orig
        numeric = (plus - minus) / (2.0 * eps)
        a = analytic[idx]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
