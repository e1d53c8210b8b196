"""Adam and RMSProp with optional global-norm gradient clipping.

The ``*_step`` functions are pure: they take dicts of parameter arrays,
gradient arrays and optimizer state and return new dicts. ``Optimizer``
subclasses apply them to named ``Tensor`` parameters in place of their data.
"""

import numpy as np

from .errors import ConfigError, TrainingError


def global_norm(grads):
    return float(np.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values())))


def clip_by_global_norm(grads, max_norm):
    """Scale every gradient by ``max_norm / norm`` when the joint l2 norm of all
    gradients exceeds ``max_norm``. Returns (clipped grads, pre-clip norm)."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}, norm


def check_finite_grads(grads):
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}", parameter=name)


def init_state(params, kind):
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    if kind == "adam":
        return {"t": 0, "m": zeros, "v": {k: np.zeros_like(p) for k, p in params.items()}}
    if kind == "rmsprop":
        return {"t": 0, "v": zeros}
    raise ConfigError(f"unknown optimizer {kind!r}")


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    t = state["t"] + 1
    new_params, m_new, v_new = {}, {}, {}
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state["m"][name] + (1.0 - beta1) * g
        v = beta2 * state["v"][name] + (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[name] = (p - update).astype(p.dtype)
        m_new[name], v_new[name] = m.astype(p.dtype), v.astype(p.dtype)
    return new_params, {"t": t, "m": m_new, "v": v_new}


def rmsprop_step(params, grads, state, lr, decay=0.9, eps=1e-8):
    new_params, v_new = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = decay * state["v"][name] + (1.0 - decay) * g * g
        new_params[name] = (p - lr * g / (np.sqrt(v) + eps)).astype(p.dtype)
        v_new[name] = v.astype(p.dtype)
    return new_params, {"t": state["t"] + 1, "v": v_new}


class Optimizer:
    kind = None

    def __init__(self, params, lr=1e-3, clip_norm=None):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if clip_norm is not None and clip_norm <= 0:
            raise ConfigError(f"clip norm must be positive, got {clip_norm}")
        self.params = params
        self.lr = lr
        self.clip_norm = clip_norm
        self.state = init_state({k: p.data for k, p in params.items()}, self.kind)
        self.last_grad_norm = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        check_finite_grads(grads)
        grads, self.last_grad_norm = clip_by_global_norm(grads, self.clip_norm)
        arrays = {k: p.data for k, p in self.params.items()}
        new, self.state = self._update(arrays, grads)
        for k, p in self.params.items():
            p.data = new[k]

    def _update(self, arrays, grads):
        raise NotImplementedError


class Adam(Optimizer):
    kind = "adam"

    def _update(self, arrays, grads):
        return adam_step(arrays, grads, self.state, self.lr)


class RMSProp(Optimizer):
    kind = "rmsprop"

    def _update(self, arrays, grads):
        return rmsprop_step(arrays, grads, self.state, self.lr)


def make_optimizer(kind, params, lr, clip_norm=None):
    kinds = {"adam": Adam, "rmsprop": RMSProp}
    if kind not in kinds:
        raise ConfigError(f"optimizer must be one of {sorted(kinds)}, got {kind!r}")
    return kinds[kind](params, lr=lr, clip_norm=clip_norm)
