"""A small dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Every differentiable operation records its inputs
and a backward rule on the output tensor; ``Tensor.backward`` replays those
rules in reverse topological order. Arrays default to float32; float64 input
arrays are kept as float64 so finite-difference checks can run at double
precision through the same code path.

Operations accept leading batch dimensions wherever that is unambiguous, which
is what makes minibatch training in pure numpy affordable.
"""

import numpy as np

from .errors import ConfigError, DegenerateVectorError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
NORM_EPS = 1e-12


def _to_array(data, dtype=None):
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return np.asarray(arr, dtype=dtype, order="C")
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """N-dimensional array with an optional gradient and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _to_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None

    # -- array-like surface -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ----------------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- autodiff -----------------------------------------------------------

    def _topological_order(self):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that
        requires a gradient. Without ``grad`` the tensor must hold one element."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = _to_array(grad, self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        pending = {id(self): grad}
        for node in reversed(self._topological_order()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), backward, "div")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x):
    x = as_tensor(x)
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),), "relu")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


# ---------------------------------------------------------------------------
# shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def getitem(x, index):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward, "getitem")


def concat(tensors, axis=-1):
    """Concatenate along ``axis`` (last axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ConfigError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = g @ b.data.T
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # fold every leading dimension of a into the row axis
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# convolutional layers
# ---------------------------------------------------------------------------


def conv2d(x, kernels, bias=None):
    """Valid cross-correlation, stride 1, no padding.

    ``x`` is (C, H, W) or (B, C, H, W); ``kernels`` is (K, C, kh, kw).
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d kernels must be 4-d (K, C, kh, kw), got {kernels.shape}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be (C, H, W) or (B, C, H, W), got {x.shape}")
    n_out, channels, kh, kw = kernels.shape
    if xd.shape[1] != channels:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if xd.shape[2] < kh or xd.shape[3] < kw:
        raise DimensionError(f"conv2d input {x.shape} smaller than kernel {kh}x{kw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (n_out,):
            raise DimensionError(f"conv2d bias must have shape ({n_out},), got {bias.shape}")

    batch, _, height, width = xd.shape
    out_h, out_w = height - kh + 1, width - kw + 1
    # im2col laid out as (C, kh, kw, B, Ho, Wo): one contiguous slice copy per tap
    cols = np.empty((channels, kh, kw, batch, out_h, out_w), dtype=xd.dtype)
    for p in range(kh):
        for q in range(kw):
            cols[:, p, q] = xd[:, :, p:p + out_h, q:q + out_w].transpose(1, 0, 2, 3)
    cols = cols.reshape(channels * kh * kw, -1)
    wmat = kernels.data.reshape(n_out, -1)
    out = (wmat @ cols).reshape(n_out, batch, out_h, out_w)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(1, 0, 2, 3).reshape(n_out, -1)
        gx = gk = gb = None
        if kernels.requires_grad:
            gk = (gmat @ cols.T).reshape(kernels.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(channels, kh, kw, batch, out_h, out_w)
            gx = np.zeros((channels, batch, height, width), dtype=dcols.dtype)
            for p in range(kh):
                for q in range(kw):
                    gx[:, :, p:p + out_h, q:q + out_w] += dcols[:, p, q]
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
            gx = gx[0] if single else gx
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out[0] if single else out, parents, backward, "conv2d")


def maxpool2(x):
    """2x2 max pooling with stride 2 over the last two axes.

    Gradient flows to the first maximal element of each window in row-major
    order, so ties are resolved deterministically.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"maxpool2 needs at least 2 dimensions, got {x.shape}")
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dimensions, got {h}x{w}")
    taps = [x.data[..., p::2, q::2] for p in (0, 1) for q in (0, 1)]
    out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))

    def backward(g):
        gx = np.zeros_like(x.data)
        unclaimed = np.ones(out.shape, dtype=bool)
        for k, (p, q) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = unclaimed & (taps[k] == out)
            unclaimed &= ~hit
            gx[..., p::2, q::2] = g * hit
        return (gx,)

    return _result(out, (x,), backward, "maxpool2")


# ---------------------------------------------------------------------------
# normalisation, probabilities and losses
# ---------------------------------------------------------------------------


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"{what} received non-finite input")


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


def l2normalize(x, scale=1.0, axis=-1, eps=NORM_EPS):
    """``scale * x / ||x||`` along ``axis``.

    A norm at or below ``eps`` raises instead of being clamped.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if (norm <= eps).any() or not np.isfinite(norm).all():
        raise DegenerateVectorError(f"cannot l2-normalise a vector with norm <= {eps}")
    unit = x.data / norm

    def backward(g):
        return (scale / norm * (g - unit * (unit * g).sum(axis=axis, keepdims=True)),)

    return _result(scale * unit, (x,), backward, "l2normalize")


def dropout(x, p, rng=None, training=True):
    """Inverted dropout: zero each element with probability ``p`` and rescale
    survivors by ``1 / (1 - p)``. Identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def cross_entropy(logits, targets, weights=None):
    """Mean softmax cross-entropy of (B, C) logits against integer targets.

    Optional per-sample ``weights`` give a weighted mean.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (B, C) logits and (B,) targets, got {logits.shape}, {targets.shape}")
    _check_finite(logits.data, "cross_entropy")
    n = logits.shape[0]
    w = np.ones(n, dtype=np.float64) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(n)
    loss = -(w * logp[rows, targets]).sum()

    def backward(g):
        probs = np.exp(logp)
        probs[rows, targets] -= 1
        return ((g * probs * w[:, None]).astype(logits.dtype),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
