"""Dense-tensor reverse-mode autodiff engine.

Every differentiable operation in the package (warping, losses, the INR and
one-shot networks) is composed from the ops here. Tensors wrap numpy arrays
(float32 by default; float64 is kept when given, so numerical oracles can run
the same graph in double precision). Graphs are single-use: build, call
``backward`` on a scalar, read leaf ``.grad``.
"""

import math
from contextlib import contextmanager

import numpy as np

from . import _kernels

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _coerce(data):
    # float64 survives (numerical oracles run graphs in double precision);
    # anything else, including python scalars, becomes float32.
    if isinstance(data, (np.ndarray, np.generic)):
        arr = np.asarray(data)
        if arr.dtype == np.float32 or arr.dtype == np.float64:
            return arr
        return arr.astype(np.float32)
    return np.asarray(data, dtype=np.float32)


class Tensor:
    """A numpy-backed tensor with an op record for reverse-mode autodiff.

    ``_backward_fn`` maps the gradient w.r.t. this tensor to a tuple of
    gradient contributions for ``_parents`` (None for parents that do not
    need one). Leaves have no parents; ``backward`` accumulates into their
    ``.grad`` buffer with ``+=`` so repeated calls without zeroing add up.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = _coerce(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Reverse-topological gradient accumulation from a scalar loss."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                contribs = node._backward_fn(g)
                for parent, contrib in zip(node._parents, contribs):
                    if contrib is None:
                        continue
                    prev = pending.get(id(parent))
                    pending[id(parent)] = contrib if prev is None else prev + contrib
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _binary_operands(op, a, b):
    """Conform two operands: identical shapes, or scalar-with-tensor."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ValueError(
            f"{op}: shape mismatch {a.data.shape} vs {b.data.shape} "
            "(only scalar-with-tensor broadcast is supported)"
        )
    return a, b


def _reduce_to(grad, shape):
    # collapse a broadcast scalar operand's gradient back to its shape
    if grad.shape == tuple(shape):
        return grad
    return np.sum(grad).reshape(shape) * np.ones(shape, dtype=grad.dtype)


def add(a, b):
    a, b = _binary_operands("add", a, b)
    out = a.data + b.data

    def bw(g):
        return (
            _reduce_to(g, a.data.shape) if a.requires_grad else None,
            _reduce_to(g, b.data.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = _binary_operands("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return (
            _reduce_to(g, a.data.shape) if a.requires_grad else None,
            _reduce_to(-g, b.data.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = _binary_operands("mul", a, b)
    out = a.data * b.data

    def bw(g):
        return (
            _reduce_to(g * b.data, a.data.shape) if a.requires_grad else None,
            _reduce_to(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def div(a, b):
    a, b = _binary_operands("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data if a.requires_grad else None
        gb = -g * a.data / (b.data * b.data) if b.requires_grad else None
        return (
            _reduce_to(ga, a.data.shape) if ga is not None else None,
            _reduce_to(gb, b.data.shape) if gb is not None else None,
        )

    return _make(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def sin(a):
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),))


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (g * 2 * a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),))


def clamp(a, lo, hi):
    """Elementwise clamp; gradient passes only where the value was in range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * mask,))


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul: expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def bw(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _make(out, (a, b), bw)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expects 2-D, got {a.data.shape}")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def permute(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))


def linear(x, weight, bias=None):
    """Affine map rows of (N,I) by (I,O) weight plus optional (O,) bias."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(
            f"linear: incompatible shapes {x.data.shape} @ {weight.data.shape}"
        )
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (weight.data.shape[1],):
            raise ValueError(
                f"linear: bias shape {bias.data.shape} does not match output "
                f"width {weight.data.shape[1]}"
            )
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return (gx, gw)
        gb = g.sum(axis=0) if bias.requires_grad else None
        return (gx, gw, gb)

    return _make(out, tuple(parents), bw)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = np.sum(a.data, axis=axes)

    def bw(g):
        shape = list(a.data.shape)
        for ax in axes:
            shape[ax] = 1
        return (np.broadcast_to(g.reshape(shape), a.data.shape).copy(),)

    return _make(out, (a,), bw)


def reduce_mean(a, axis=None):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = np.mean(a.data, axis=axes)

    def bw(g):
        shape = list(a.data.shape)
        for ax in axes:
            shape[ax] = 1
        return (np.broadcast_to(g.reshape(shape), a.data.shape).copy() / count,)

    return _make(out, (a,), bw)


def reduce_max(a, axis=-1, keepdims=True):
    """Max along one axis; gradient routes to the first maximal element."""
    a = as_tensor(a)
    ax = axis % a.data.ndim
    out = np.max(a.data, axis=ax, keepdims=keepdims)
    idx = np.argmax(a.data, axis=ax)

    def bw(g):
        grad = np.zeros_like(a.data)
        gexp = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(grad, np.expand_dims(idx, ax), gexp, axis=ax)
        return (grad,)

    return _make(out, (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.data.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].data.ndim
    ax = axis % nd
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.data.shape[ax] for t in tensors]

    def bw(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=ax)
        return tuple(
            s if t.requires_grad else None for s, t in zip(splits, tensors)
        )

    return _make(out, tuple(tensors), bw)


def tslice(a, key):
    a = as_tensor(a)
    out = a.data[key]

    def bw(g):
        grad = np.zeros_like(a.data)
        grad[key] = g
        return (grad,)

    return _make(out, (a,), bw)


def flip(a, axis):
    a = as_tensor(a)
    return _make(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def softmax(a):
    """Numerically stable softmax over the last axis."""
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bw)


def cosine_similarity(a, b):
    """Cosine similarity of two flat vectors, as a differentiable scalar."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ValueError(
            f"cosine_similarity: expects flat vectors, got {a.data.shape} "
            f"and {b.data.shape}"
        )
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"cosine_similarity: length mismatch {a.data.shape} vs {b.data.shape}"
        )
    num = reduce_sum(mul(a, b))
    den = sqrt(mul(reduce_sum(square(a)), reduce_sum(square(b))))
    return div(num, den)


def conv2d(x, weight, stride=1, padding=None, bias=None):
    """Cross-correlation of (C,H,W) input with (O,C,K,K) kernels.

    K must be odd, stride 1 or 2, padding K//2 (same-size output at stride 1).
    Implemented as im2col + BLAS matmul; the backward pass reuses the column
    matrix for the kernel gradient and scatters for the input gradient.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ValueError(
            f"conv2d: expects (C,H,W) and (O,C,K,K), got {x.data.shape} "
            f"and {weight.data.shape}"
        )
    c, h, w = x.data.shape
    o, ck, kh, kw = weight.data.shape
    if ck != c:
        raise ValueError(
            f"conv2d: input has {c} channels but kernel expects {ck}"
        )
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    k = kh
    p = k // 2 if padding is None else padding
    if p != k // 2:
        raise ValueError(f"conv2d: padding must be K//2={k // 2}, got {p}")

    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols2 = cols.reshape(c * k * k, ho * wo)
    wmat = weight.data.reshape(o, c * k * k)
    out = (wmat @ cols2).reshape(o, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (o,):
            raise ValueError(
                f"conv2d: bias shape {bias.data.shape} does not match {o} filters"
            )
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def bw(g):
        gmat = g.reshape(o, ho * wo)
        gw = (gmat @ cols2.T).reshape(weight.data.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, p : p + h, p : p + w]
            if p == 0:
                gx = gx.copy()
        if bias is None:
            return (gx, gw)
        gb = g.sum(axis=(1, 2)) if bias.requires_grad else None
        return (gx, gw, gb)

    return _make(out, tuple(parents), bw)


def nearest_upsample(x, factor):
    """Replicate each pixel of (C,H,W) into a factor x factor block."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ValueError(f"nearest_upsample: expects (C,H,W), got {x.data.shape}")
    if factor < 2:
        raise ValueError(f"nearest_upsample: factor must be >= 2, got {factor}")
    c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _make(out, (x,), bw)


def grid_sample_bilinear(image, coords):
    """Bilinear sample of (H,W,C) image at absolute pixel coords (H',W',2).

    Out-of-range coordinates clamp to the border; differentiable w.r.t. both
    the image values and the coordinates (zero coordinate gradient where
    clamped).
    """
    image = as_tensor(image)
    coords = as_tensor(coords)
    if image.data.ndim != 3 or coords.data.ndim != 3 or coords.data.shape[-1] != 2:
        raise ValueError(
            f"grid_sample_bilinear: expects (H,W,C) image and (H',W',2) coords, "
            f"got {image.data.shape} and {coords.data.shape}"
        )
    out = _kernels.grid_sample_forward(image.data, coords.data.astype(image.data.dtype))

    def bw(g):
        gi, gc = _kernels.grid_sample_backward(
            image.data, coords.data.astype(image.data.dtype), g.astype(image.data.dtype)
        )
        return (
            gi if image.requires_grad else None,
            gc if coords.requires_grad else None,
        )

    return _make(out, (image, coords), bw)


def gaussian_kernel(kernel_size, sigma=None, dtype=np.float32):
    """Normalized 1-D Gaussian taps; default sigma puts +-3 sigma at the edge."""
    if kernel_size % 2 == 0 or kernel_size < 1:
        raise ValueError(f"gaussian kernel size must be odd and >= 1, got {kernel_size}")
    if sigma is None:
        sigma = kernel_size / 6.0
    if sigma <= 0:
        raise ValueError(f"gaussian sigma must be > 0, got {sigma}")
    r = kernel_size // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    k /= k.sum()
    return k.astype(dtype)


def gaussian_blur(field, kernel_size, sigma=None):
    """Separable Gaussian blur of an (H,W,C) field with replicate borders."""
    field = as_tensor(field)
    if field.data.ndim != 3:
        raise ValueError(f"gaussian_blur: expects (H,W,C), got {field.data.shape}")
    k = gaussian_kernel(kernel_size, sigma, dtype=field.data.dtype)
    if kernel_size == 1:
        return _make(field.data.copy(), (field,), lambda g: (g,))
    tmp = _kernels.correlate1d_replicate(field.data, k, axis=0)
    out = _kernels.correlate1d_replicate(tmp, k, axis=1)

    def bw(g):
        gt = _kernels.correlate1d_replicate_adjoint(g.astype(field.data.dtype), k, axis=1)
        return (_kernels.correlate1d_replicate_adjoint(gt, k, axis=0),)

    return _make(out, (field,), bw)


def external_scalar(source, value, grad_wrt_source):
    """Scalar node whose gradient w.r.t. ``source`` was computed externally.

    Used to splice guidance scorers that return (loss, gradient) pairs — e.g.
    the sidecar protocol — into an autodiff graph.
    """
    source = as_tensor(source)
    grad_wrt_source = np.asarray(grad_wrt_source, dtype=source.data.dtype)
    if grad_wrt_source.shape != source.data.shape:
        raise ValueError(
            f"external_scalar: gradient shape {grad_wrt_source.shape} does not "
            f"match source shape {source.data.shape}"
        )
    out = np.asarray(value, dtype=source.data.dtype)

    def bw(g):
        return (float(g) * grad_wrt_source,)

    return _make(out, (source,), bw)
