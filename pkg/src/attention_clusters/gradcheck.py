"""Central finite-difference gradient checking at double precision."""

import numpy as np

from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-3
FD_TOLERANCE = 1e-4


def numerical_gradient(func, arrays, index, step=FD_STEP):
    """Central-difference gradient of scalar ``func(*arrays)`` w.r.t. ``arrays[index]``.

    ``func`` receives float64 numpy arrays and must return a float.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = func(*arrays)
        flat[i] = orig - step
        lo = func(*arrays)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn, arrays, wrt=None, step=FD_STEP):
    """Compare autodiff gradients of ``fn`` against central differences.

    ``fn`` maps Tensors to a Tensor of any shape; the output is contracted with
    a fixed random projection so every output element contributes. Returns the
    worst relative error over the inputs listed in ``wrt`` (default: all).

    Example:
        >>> from attention_clusters import tensor as T
        >>> a = np.random.default_rng(0).normal(size=(3, 4))
        >>> b = np.random.default_rng(1).normal(size=(4, 2))
        >>> check_gradients(T.matmul, [a, b]) < 1e-4
        True
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = fn(*[Tensor(a) for a in arrays])
    projection = np.random.default_rng(12345).normal(size=probe.shape)

    def scalar(*arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * projection).sum())

    leaves = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    out.backward(projection.astype(out.dtype))
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        numeric = numerical_gradient(scalar, arrays, i, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# randomized cases for every differentiable operation
# ---------------------------------------------------------------------------
#
# Each builder draws one random instance and returns ``(fn, arrays, wrt)``.
# Inputs of piecewise-linear operations are kept away from their kinks by more
# than the finite-difference step, since central differences are meaningless
# across a kink.

KINK_MARGIN = 10 * FD_STEP


def _shape(rng, ndim, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < KINK_MARGIN, np.sign(x + 1e-300) * (KINK_MARGIN + 0.1), x)


def _distinct_windows(rng, shape):
    # values on a grid spaced well above the FD step, shuffled: no near-ties
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.05 - n * 0.025).astype(np.float64)


def _broadcast_pair(rng):
    shape = _shape(rng, 3)
    other = tuple(1 if rng.random() < 0.4 else s for s in shape)[int(rng.integers(0, 2)):]
    return rng.normal(size=shape), rng.normal(size=other)


def _case_add(rng):
    return T.add, list(_broadcast_pair(rng)), None


def _case_sub(rng):
    return T.sub, list(_broadcast_pair(rng)), None


def _case_mul(rng):
    return T.mul, list(_broadcast_pair(rng)), None


def _case_div(rng):
    a, b = _broadcast_pair(rng)
    return T.div, [a, np.sign(b) * (0.5 + np.abs(b))], None


def _case_exp(rng):
    return T.exp, [rng.normal(size=_shape(rng, 2))], None


def _case_log(rng):
    return T.log, [rng.uniform(0.3, 3.0, size=_shape(rng, 2))], None


def _case_relu(rng):
    return T.relu, [_away_from_zero(rng, _shape(rng, 3))], None


def _case_tanh(rng):
    return T.tanh, [rng.normal(size=_shape(rng, 3))], None


def _case_reshape(rng):
    x = rng.normal(size=_shape(rng, 3))
    return (lambda t: T.reshape(t, (-1,))), [x], None


def _case_transpose(rng):
    x = rng.normal(size=_shape(rng, 3))
    axes = tuple(int(a) for a in rng.permutation(3))
    return (lambda t: T.transpose(t, axes)), [x], None


def _case_sum(rng):
    x = rng.normal(size=_shape(rng, 3))
    axis = int(rng.integers(-1, 3))
    return (lambda t: T.tsum(t, axis=None if axis < 0 else axis, keepdims=bool(axis % 2))), [x], None


def _case_mean(rng):
    x = rng.normal(size=_shape(rng, 3))
    axis = int(rng.integers(-1, 3))
    return (lambda t: T.mean(t, axis=None if axis < 0 else axis)), [x], None


def _case_getitem(rng):
    x = rng.normal(size=_shape(rng, 2, 2, 5))
    rows = rng.integers(0, x.shape[0], size=int(rng.integers(1, 6)))  # repeats accumulate
    return (lambda t: T.getitem(t, rows)), [x], None


def _case_concat(rng):
    shape = _shape(rng, 2)
    axis = int(rng.integers(0, 2))
    other = list(shape)
    other[axis] = int(rng.integers(1, 4))
    return (lambda a, b: T.concat([a, b], axis=axis)), [rng.normal(size=shape), rng.normal(size=other)], None


def _case_matmul(rng):
    b, m, k, n = _shape(rng, 4)
    if rng.random() < 0.5:
        return T.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))], None
    return T.matmul, [rng.normal(size=(b, m, k)), rng.normal(size=(b, k, n))], None


def _case_linear(rng):
    b, i, o = _shape(rng, 3)
    return T.linear, [rng.normal(size=(b, i)), rng.normal(size=(o, i)), rng.normal(size=o)], None


def _case_conv2d(rng):
    b, c, k = _shape(rng, 3, 1, 2)
    kh, kw = _shape(rng, 2, 1, 3)
    h, w = kh + int(rng.integers(0, 3)), kw + int(rng.integers(0, 3))
    return T.conv2d, [rng.normal(size=(b, c, h, w)), rng.normal(size=(k, c, kh, kw)), rng.normal(size=k)], None


def _case_maxpool2(rng):
    b, c = _shape(rng, 2, 1, 2)
    h, w = 2 * _shape(rng, 2, 1, 2)[0], 2 * _shape(rng, 2, 1, 2)[1]
    return T.maxpool2, [_distinct_windows(rng, (b, c, h, w))], None


def _case_softmax(rng):
    x = rng.normal(size=_shape(rng, 2))
    axis = int(rng.integers(0, 2))
    return (lambda t: T.softmax(t, axis=axis)), [x], None


def _case_log_softmax(rng):
    x = rng.normal(size=_shape(rng, 2))
    axis = int(rng.integers(0, 2))
    return (lambda t: T.log_softmax(t, axis=axis)), [x], None


def _case_l2normalize(rng):
    x = rng.normal(size=_shape(rng, 2, 2, 4))
    # FD truncation error grows like step^2 / ||x||^3; keep rows well away from zero
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    x = x / norms * np.maximum(norms, 0.5)
    scale = float(rng.uniform(0.2, 2.0))
    return (lambda t: T.l2normalize(t, scale=scale)), [x], None


def _case_dropout(rng):
    x = rng.normal(size=_shape(rng, 2))
    seed = int(rng.integers(1 << 30))
    return (lambda t: T.dropout(t, 0.4, np.random.default_rng(seed), training=True)), [x], None


def _case_cross_entropy(rng):
    b, c = _shape(rng, 2, 2, 5)
    targets = rng.integers(0, c, size=b)
    weights = rng.uniform(0.5, 2.0, size=b)
    return (lambda t: T.cross_entropy(t, targets, weights)), [rng.normal(size=(b, c))], None


def _case_cluster_model(rng):
    """Composed model: two modalities (FC1 with shifting, FC2 without), hidden
    relu layer, classifier, cross-entropy."""
    from .clusters import ClusterConfig
    from .model import ClusterModel

    batch, length, n_classes, hidden = 3, int(rng.integers(2, 5)), 4, 5
    cfgs = [ClusterConfig("fc1", int(rng.integers(1, 4)), True, dim=3),
            ClusterConfig("fc2", int(rng.integers(1, 3)), False, hidden=2, dim=2)]
    template = ClusterModel(cfgs, n_classes, classifier_hidden=hidden, rng=rng)
    names = sorted(template.arrays())
    targets = rng.integers(0, n_classes, size=batch)
    while True:
        params = {k: rng.normal(scale=0.5, size=v.shape) for k, v in template.arrays().items()}
        params["m0.alpha"] = 1.0 + 0.3 * rng.normal(size=params["m0.alpha"].shape)
        params["m0.beta"] = rng.normal(size=params["m0.beta"].shape)
        xs = [rng.normal(size=(batch, length, c.dim)) for c in cfgs]
        model = ClusterModel(cfgs, n_classes, classifier_hidden=hidden, params=params)
        g = model.global_features(xs).data
        pre = g @ params["hid.w"].T + params["hid.b"]
        # shifted unit vectors near zero norm make central differences inaccurate
        v = model.clusters.clusters[0].weights(xs[0]).data @ xs[0]
        shifted = v * params["m0.alpha"][:, None] + params["m0.beta"][:, None]
        if np.abs(pre).min() > KINK_MARGIN and np.linalg.norm(shifted, axis=-1).min() > 1.0:
            break

    def fn(*arrays):
        k = len(names)
        model = ClusterModel(cfgs, n_classes, classifier_hidden=hidden, params=dict(zip(names, arrays[:k])))
        return T.cross_entropy(model.forward(list(arrays[k:])), targets)

    return fn, [params[k] for k in names] + xs, None


GRADCHECK_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "exp": _case_exp,
    "log": _case_log,
    "relu": _case_relu,
    "tanh": _case_tanh,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "sum": _case_sum,
    "mean": _case_mean,
    "getitem": _case_getitem,
    "concat": _case_concat,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "conv2d": _case_conv2d,
    "maxpool2": _case_maxpool2,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "l2normalize": _case_l2normalize,
    "dropout": _case_dropout,
    "cross_entropy": _case_cross_entropy,
    "cluster_model": _case_cluster_model,
}


def gradcheck_op(name, instances=100, seed=0):
    """Worst relative error of ``name`` over ``instances`` random draws."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(sorted(GRADCHECK_CASES).index(name),)))
    worst = 0.0
    for _ in range(instances):
        fn, arrays, wrt = GRADCHECK_CASES[name](rng)
        worst = max(worst, check_gradients(fn, arrays, wrt))
    return worst
