"""Attention units, attention clusters and the shifting operation.

A local feature set X (L x M) is summarised by an attention unit as v = a X,
where the weight vector a lies on the L-simplex and comes from a weighting
function:

* ``average``: a = 1/L everywhere,
* ``fc1``: a = softmax(X w + b),
* ``fc2``: a = softmax(tanh(X W1^T + b1) w2 + b2).

With shifting, v becomes (alpha * aX + beta) / (sqrt(N) * ||alpha * aX + beta||)
for learnable scalars alpha, beta, so each of the N units of a cluster has norm
1/sqrt(N) and the concatenated cluster output g has unit norm.

Biases are scalars broadcast over the L positions so the weighting functions
accept sets of any size and stay permutation invariant. A scalar bias cancels
inside the softmax; it is kept only so the parameterisation matches the usual
fully-connected form.

Two code paths are provided. The functional one (``compute_weights``,
``attention_unit``, ``attention_cluster``) works on one unit at a time and is
easy to read. ``AttentionCluster`` stacks the parameters of all N units and
evaluates a whole minibatch at once; it is what training uses.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError

WEIGHTINGS = ("average", "fc1", "fc2")
DEFAULT_FC2_HIDDEN = 10
WEIGHT_INIT_STD = 0.1
SHIFT_INIT_STD = 0.01


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class Average:
    kind = "average"


@dataclass
class FC1:
    w: np.ndarray  # (M,)
    b: float = 0.0
    kind = "fc1"


@dataclass
class FC2:
    W1: np.ndarray  # (H, M)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H,)
    b2: float = 0.0
    kind = "fc2"

    @property
    def hidden(self):
        return self.W1.shape[0]


@dataclass
class AttentionUnitParams:
    weighting: object
    shift: tuple = None  # (alpha, beta) or None


@dataclass
class ClusterConfig:
    """Architecture of one attention cluster over M-dimensional features."""

    weighting: str = "fc1"
    n_units: int = 1
    shifting: bool = True
    hidden: int = DEFAULT_FC2_HIDDEN
    dim: int = 50

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if int(self.n_units) < 1:
            raise ConfigError(f"cluster size must be >= 1, got {self.n_units}")
        if int(self.hidden) < 1:
            raise ConfigError(f"FC2 hidden width must be >= 1, got {self.hidden}")
        if int(self.dim) < 1:
            raise ConfigError(f"feature dimension must be >= 1, got {self.dim}")
        self.n_units, self.hidden, self.dim = int(self.n_units), int(self.hidden), int(self.dim)
        self.shifting = bool(self.shifting)

    @property
    def output_dim(self):
        return self.n_units * self.dim

    def to_dict(self):
        return {"weighting": self.weighting, "n_units": self.n_units, "shifting": self.shifting,
                "hidden": self.hidden, "dim": self.dim}


# ---------------------------------------------------------------------------
# functional, one unit at a time
# ---------------------------------------------------------------------------


def _feature_set(X):
    X = T.as_tensor(X)
    if X.ndim != 2 or X.shape[0] < 1:
        raise DimensionError(f"a feature set must be a non-empty (L, M) matrix, got {X.shape}")
    if not np.isfinite(X.data).all():
        raise NumericError("feature set contains non-finite values")
    return X


def compute_weights(weighting, X):
    """Weight vector (L,) on the simplex for feature set ``X`` (L, M)."""
    X = _feature_set(X)
    length = X.shape[0]
    if isinstance(weighting, Average):
        return T.Tensor(np.full(length, 1.0 / length, dtype=X.dtype))
    if isinstance(weighting, FC1):
        scores = T.matmul(X, T.reshape(T.as_tensor(weighting.w), (-1, 1)))
        return T.softmax(T.reshape(scores, (length,)) + weighting.b)
    if isinstance(weighting, FC2):
        hidden = T.tanh(T.linear(X, T.as_tensor(weighting.W1), T.as_tensor(weighting.b1)))
        scores = T.matmul(hidden, T.reshape(T.as_tensor(weighting.w2), (-1, 1)))
        return T.softmax(T.reshape(scores, (length,)) + weighting.b2)
    raise ConfigError(f"unknown weighting function {weighting!r}")


def shift_normalize(summary, alpha, beta, n_units):
    """(alpha * summary + beta) scaled to l2 norm 1/sqrt(n_units)."""
    shifted = T.as_tensor(summary) * alpha + beta
    return T.l2normalize(shifted, scale=1.0 / np.sqrt(n_units))


def attention_unit(params, X, n_units=1):
    """Output v (M,) of one attention unit."""
    X = _feature_set(X)
    a = compute_weights(params.weighting, X)
    v = T.reshape(T.matmul(T.reshape(a, (1, -1)), X), (X.shape[1],))
    if params.shift is None:
        return v
    alpha, beta = params.shift
    return shift_normalize(v, alpha, beta, n_units)


def attention_cluster(cfg, units, X):
    """Concatenation g (N*M,) of the outputs of the ``cfg.n_units`` units."""
    if len(units) != cfg.n_units:
        raise ConfigError(f"cluster expects {cfg.n_units} unit parameter sets, got {len(units)}")
    return T.concat([attention_unit(u, X, cfg.n_units) for u in units], axis=-1)


def multimodal_concat(features):
    """Concatenate per-modality global features in the given order."""
    if len(features) == 0:
        raise ConfigError("multimodal concatenation needs at least one modality")
    if len(features) == 1:
        return T.as_tensor(features[0])
    return T.concat(list(features), axis=-1)


def average_replicated_baseline(X, n_units):
    """Mean feature vector tiled ``n_units`` times; works on (L, M) or (B, L, M)."""
    if n_units < 1:
        raise ConfigError(f"replication count must be >= 1, got {n_units}")
    X = T.as_tensor(X)
    mean = T.mean(X, axis=-2)
    return T.concat([mean] * n_units, axis=-1)


def flatten_baseline(X, length=None):
    """Row-major flattening of an (L, M) set, or (B, L, M) batch, to L*M values.

    Order sensitive by construction; ``length`` pins the expected L.
    """
    X = T.as_tensor(X)
    if X.ndim not in (2, 3):
        raise DimensionError(f"flatten expects (L, M) or (B, L, M), got {X.shape}")
    if length is not None and X.shape[-2] != length:
        raise DimensionError(f"flatten configured for L={length}, got L={X.shape[-2]}")
    return T.reshape(X, X.shape[:-2] + (X.shape[-2] * X.shape[-1],))


# ---------------------------------------------------------------------------
# batched cluster with stacked unit parameters
# ---------------------------------------------------------------------------


class AttentionCluster:
    """N attention units with independent parameters, evaluated together.

    Parameter tensors hold one slice per unit along their first axis.
    """

    def __init__(self, cfg, rng=None, params=None, prefix=""):
        self.cfg = cfg
        self.prefix = prefix
        shapes = self.param_shapes(cfg)
        if params is None:
            params = self._init_params(cfg, np.random.default_rng(0) if rng is None else rng)
        self.params = {}
        for name, shape in shapes.items():
            key = prefix + name
            if key not in params:
                raise ConfigError(f"missing cluster parameter {key!r}")
            value = params[key]
            if tuple(np.shape(value.data if isinstance(value, T.Tensor) else value)) != shape:
                raise DimensionError(f"cluster parameter {key!r} has shape {np.shape(value)}, expected {shape}")
            if isinstance(value, T.Tensor):
                # shared, not copied: gradients flow back to the caller's tensor
                self.params[key] = value
                continue
            arr = np.asarray(value)
            dtype = arr.dtype if arr.dtype == np.float64 else np.float32
            self.params[key] = T.Tensor(arr.astype(dtype, copy=True), requires_grad=True)

    @staticmethod
    def param_shapes(cfg):
        n, m, h = cfg.n_units, cfg.dim, cfg.hidden
        shapes = {}
        if cfg.weighting == "fc1":
            shapes.update(w=(n, m), b=(n,))
        elif cfg.weighting == "fc2":
            shapes.update(W1=(n, h, m), b1=(n, h), w2=(n, h), b2=(n,))
        if cfg.shifting:
            shapes.update(alpha=(n,), beta=(n,))
        return shapes

    def _init_params(self, cfg, rng):
        params = {}
        for name, shape in self.param_shapes(cfg).items():
            if name == "alpha":
                value = 1.0 + SHIFT_INIT_STD * rng.standard_normal(shape)
            elif name == "beta":
                value = SHIFT_INIT_STD * rng.standard_normal(shape)
            else:
                value = WEIGHT_INIT_STD * rng.standard_normal(shape)
            params[self.prefix + name] = value.astype(np.float32)
        return params

    def _p(self, name):
        return self.params[self.prefix + name]

    def weights(self, X):
        """Attention weights (B, N, L) for a batch X (B, L, M)."""
        X = T.as_tensor(X)
        batch, length, dim = X.shape
        n = self.cfg.n_units
        if dim != self.cfg.dim:
            raise DimensionError(f"cluster expects feature dimension {self.cfg.dim}, got {dim}")
        if self.cfg.weighting == "average":
            return T.Tensor(np.full((batch, n, length), 1.0 / length, dtype=X.dtype))
        if self.cfg.weighting == "fc1":
            scores = T.matmul(X, T.transpose(self._p("w"))) + self._p("b")  # B, L, N
        else:
            h = self.cfg.hidden
            pre = T.matmul(X, T.transpose(T.reshape(self._p("W1"), (n * h, dim))))
            hidden = T.tanh(T.reshape(pre, (batch, length, n, h)) + self._p("b1"))
            scores = T.tsum(hidden * self._p("w2"), axis=-1) + self._p("b2")  # B, L, N
        return T.transpose(T.softmax(scores, axis=1), (0, 2, 1))

    def forward(self, X, return_weights=False):
        """Global features (B, N*M) for X (B, L, M); (L, M) input gives (N*M,)."""
        X = T.as_tensor(X)
        single = X.ndim == 2
        if single:
            X = T.reshape(X, (1,) + X.shape)
        if X.ndim != 3 or X.shape[1] < 1:
            raise DimensionError(f"cluster input must be (B, L, M) with L >= 1, got {X.shape}")
        a = self.weights(X)
        v = T.matmul(a, X)  # B, N, M
        if self.cfg.shifting:
            n = self.cfg.n_units
            shifted = v * T.reshape(self._p("alpha"), (n, 1)) + T.reshape(self._p("beta"), (n, 1))
            v = T.l2normalize(shifted, scale=1.0 / np.sqrt(n), axis=-1)
        g = T.reshape(v, (X.shape[0], self.cfg.output_dim))
        if single:
            g, a = T.reshape(g, (self.cfg.output_dim,)), T.reshape(a, a.shape[1:])
        return (g, a) if return_weights else g

    __call__ = forward

    def unit(self, k):
        """Parameters of unit ``k`` as an ``AttentionUnitParams``."""
        p = {name[len(self.prefix):]: t.data for name, t in self.params.items()}
        kind = self.cfg.weighting
        if kind == "average":
            weighting = Average()
        elif kind == "fc1":
            weighting = FC1(p["w"][k], float(p["b"][k]))
        else:
            weighting = FC2(p["W1"][k], p["b1"][k], p["w2"][k], float(p["b2"][k]))
        shift = (float(p["alpha"][k]), float(p["beta"][k])) if self.cfg.shifting else None
        return AttentionUnitParams(weighting, shift)

    def units(self):
        return [self.unit(k) for k in range(self.cfg.n_units)]


@dataclass
class MultimodalClusters:
    """Independent clusters per modality whose outputs are concatenated."""

    clusters: list = field(default_factory=list)

    @classmethod
    def build(cls, cfgs, rng=None, params=None):
        if not cfgs:
            raise ConfigError("at least one modality is required")
        rng = np.random.default_rng(0) if rng is None else rng
        return cls([AttentionCluster(cfg, rng=rng, params=params, prefix=f"m{i}.") for i, cfg in enumerate(cfgs)])

    @property
    def params(self):
        out = {}
        for c in self.clusters:
            out.update(c.params)
        return out

    @property
    def output_dim(self):
        return sum(c.cfg.output_dim for c in self.clusters)

    def forward(self, inputs, return_weights=False):
        if len(inputs) != len(self.clusters):
            raise ConfigError(f"expected {len(self.clusters)} modalities, got {len(inputs)}")
        outs = [c.forward(x, return_weights=True) for c, x in zip(self.clusters, inputs)]
        g = multimodal_concat([o[0] for o in outs])
        return (g, [o[1] for o in outs]) if return_weights else g

    __call__ = forward
