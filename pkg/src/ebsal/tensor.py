"""Dense tensors with reverse-mode automatic differentiation on numpy.

The engine is intentionally small. A Tensor wraps a numpy array; every
primitive records its input tensors and a closure mapping the output
gradient to input gradients; ``backward`` replays the recording in reverse
topological order. Gradients accumulate into ``.grad`` until explicitly
zeroed, which is exactly the semantics needed to sum per-sample gradient
contributions over a batch.

Numerical hygiene: any NaN or infinity appearing in forward data or in a
gradient raises ``NonFiniteError`` immediately instead of propagating.
"""

from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit


class TensorError(ValueError):
    pass


class DimensionError(TensorError):
    """Shape, axis, or size mismatch."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared in tensor data or gradients."""


_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def set_default_dtype(dtype) -> None:
    """Select 64-bit (default) or 32-bit storage for newly created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TensorError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _ensure_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        _ensure_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)


def _make(data: np.ndarray, parents, grad_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    _ensure_finite(g, "gradient")
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Topologically ordered record of the ops a root tensor depends on.

    Inputs always precede the operations consuming them; the reverse sweep in
    ``backward`` therefore visits each recorded node exactly once, after all
    of its consumers.
    """

    def __init__(self, root: Tensor):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, emit = stack.pop()
            if emit:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._grad_fn is not None:
                stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent._grad_fn is not None:
                    stack.append((parent, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor the scalar loss depends on.

    Repeated calls accumulate; call ``zero_grads`` between independent
    passes.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("loss is detached from any differentiable input")
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(Tape(loss).nodes):
        if node.grad is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is not None and parent.requires_grad:
                _accumulate(parent, g)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


@contextmanager
def no_grad():
    """Disable recording; outputs inside the block are detached."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextmanager
def frozen(tensors):
    """Temporarily mark tensors as constants (e.g. parameters during sampling)."""
    tensors = list(tensors)
    previous = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, previous):
            t.requires_grad = flag


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, forward, grad_a, grad_b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    try:
        data = forward(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def grad_fn(g):
        ga = _unbroadcast(grad_a(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(grad_b(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product; stacked (>=3-d) operands multiply their trailing axes."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            ga = _reduce_leading(ga, a.shape)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            gb = _reduce_leading(gb, b.shape)
        return ga, gb

    return _make(data, (a, b), grad_fn)


def _reduce_leading(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over leading axes broadcast by stacked matmul."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i in range(len(shape) - 2) if shape[i] == 1 and g.shape[i] != 1
    )
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# nonlinearities


def gelu(x) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _make(data, (x,), grad_fn)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for ndim {ndim}")
        axes.append(a % ndim)
    return tuple(sorted(set(axes)))


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(data), (x,), grad_fn)


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape) / count,)

    return _make(np.asarray(data), (x,), grad_fn)


def square_norm(x) -> Tensor:
    """Sum of squared entries, returned as a scalar tensor."""
    x = as_tensor(x)
    data = np.asarray((x.data * x.data).sum())
    return _make(data, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat axis {axis} out of range")
    axis = axis % ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        pieces = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(start, stop)
            pieces.append(g[tuple(index)] if t.requires_grad else None)
        return pieces

    return _make(data, tensors, grad_fn)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"narrow axis {axis} out of range")
    axis = axis % x.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError("narrow slice exceeds tensor extent")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index].copy(), (x,), grad_fn)


def split(x, sizes, axis: int = 0):
    """Inverse of concat along the same axis."""
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis % x.ndim]:
        raise DimensionError("split sizes must cover the axis exactly")
    parts = []
    start = 0
    for s in sizes:
        parts.append(narrow(x, axis, start, s))
        start += s
    return parts


def pad2d(x, pad) -> Tensor:
    """Zero padding of the two trailing axes; pad = ((top, bottom), (left, right))."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("pad2d expects at least 2 dimensions")
    (top, bottom), (left, right) = pad
    width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    data = np.pad(x.data, width)
    index = tuple(
        [slice(None)] * (x.ndim - 2)
        + [slice(top, top + x.shape[-2]), slice(left, left + x.shape[-1])]
    )
    return _make(data, (x,), lambda g: (g[index],))


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    ``x`` is [B, C, H, W] (or [C, H, W], treated as one sample), ``kernel``
    is [O, C, k, k] with odd k. Output size must be integral:
    (H + 2*padding - k) divisible by stride.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    squeeze = x.ndim == 3
    x4 = reshape(x, (1,) + x.shape) if squeeze else x

    if x4.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    B, C, H, W = x4.shape
    O, Ck, kh, kw = kernel.shape
    if kh != kw:
        raise DimensionError("conv2d kernel must be square")
    if kh % 2 != 1:
        raise DimensionError("conv2d kernel size must be odd")
    if Ck != C:
        raise DimensionError(f"kernel expects {Ck} input channels, got {C}")
    if stride < 1 or int(stride) != stride:
        raise DimensionError("stride must be a positive integer")
    if padding < 0:
        raise DimensionError("padding must be nonnegative")
    if (H + 2 * padding - kh) % stride or (W + 2 * padding - kw) % stride:
        raise DimensionError(
            f"non-integral conv2d output for input {H}x{W}, k={kh}, "
            f"stride={stride}, padding={padding}"
        )
    out = _conv2d_core(x4, kernel, stride, padding)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def _conv2d_core(x: Tensor, kernel: Tensor, stride: int, padding: int) -> Tensor:
    B, C, H, W = x.shape
    O, _, k, _ = kernel.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(B * Ho * Wo, C * k * k)
    wflat = kernel.data.reshape(O, C * k * k)
    y = (cols2 @ wflat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    # cols2 is only needed for the kernel gradient; drop it when parameters
    # are frozen (e.g. during Langevin sampling) to save memory and a GEMM.
    saved_cols = cols2 if kernel.requires_grad else None

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = gx = None
        if kernel.requires_grad:
            gw = (g2.T @ saved_cols).reshape(kernel.shape)
        if x.requires_grad:
            dcols = (g2 @ wflat).reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                        :, :, i, j
                    ]
            gx = (
                gxp[:, :, padding : padding + H, padding : padding + W]
                if padding
                else gxp
            )
        return gx, gw

    return _make(y, (x, kernel), grad_fn)


def upsample_nearest(x, factor) -> Tensor:
    """Nearest-neighbor upsampling of the two trailing axes of a 4-d tensor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("upsample_nearest expects a 4-d tensor")
    fh, fw = (factor, factor) if isinstance(factor, int) else factor
    if fh < 1 or fw < 1:
        raise DimensionError("upsample factor must be >= 1")
    B, C, H, W = x.shape
    data = np.repeat(np.repeat(x.data, fh, axis=2), fw, axis=3)

    def grad_fn(g):
        return (g.reshape(B, C, H, fh, W, fw).sum(axis=(3, 5)),)

    return _make(data, (x,), grad_fn)


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes: [B, C, H, W] -> [B, C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("global_avg_pool expects a 4-d tensor")
    B, C, H, W = x.shape
    data = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (H * W),)

    return _make(data, (x,), grad_fn)
