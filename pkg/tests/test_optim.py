import numpy as np
import pytest

from attention_clusters import tensor as T
from attention_clusters.errors import ConfigError, TrainingError
from attention_clusters.optim import (
    Adam,
    RMSProp,
    adam_step,
    clip_by_global_norm,
    global_norm,
    init_state,
    make_optimizer,
    rmsprop_step,
)


def _params(rng):
    return {"a": T.Tensor(rng.normal(size=(3, 4))), "b": T.Tensor(rng.normal(size=5))}


@pytest.mark.parametrize("kind", ["adam", "rmsprop"])
def test_zero_gradient_is_a_no_op(rng, kind):
    params = _params(rng)
    before = {k: p.data.copy() for k, p in params.items()}
    opt = make_optimizer(kind, params, lr=0.1)
    for _ in range(3):
        opt.zero_grad()
        opt.step()  # missing gradients count as zero
    for k, p in params.items():
        np.testing.assert_array_equal(p.data, before[k])


def test_global_norm_and_clip():
    grads = {"a": np.full(4, 3.0), "b": np.full(9, 2.0)}
    assert global_norm(grads) == pytest.approx(np.sqrt(4 * 9 + 9 * 4))
    g = {"a": np.array([6.0, 8.0])}  # norm 10
    clipped, norm = clip_by_global_norm(g, 5.0)
    assert norm == 10.0
    np.testing.assert_allclose(clipped["a"], [3.0, 4.0])
    unclipped, _ = clip_by_global_norm(g, 20.0)
    np.testing.assert_array_equal(unclipped["a"], g["a"])
    untouched, _ = clip_by_global_norm(g, None)
    np.testing.assert_array_equal(untouched["a"], g["a"])


def test_clipping_happens_before_the_update():
    p = {"w": T.Tensor(np.zeros(2))}
    opt = make_optimizer("rmsprop", p, lr=1.0, clip_norm=5.0)
    p["w"].grad = np.array([6.0, 8.0])
    opt.step()
    assert opt.last_grad_norm == 10.0
    # v = 0.1 g_clipped^2, step = g_clipped / sqrt(v) = sqrt(10) * sign
    np.testing.assert_allclose(p["w"].data, -np.sqrt(10) * np.ones(2), rtol=1e-6)


def test_adam_first_step_closed_form():
    # bias-corrected first step is lr * g / (|g| + eps) = lr * sign(g)
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.3, -7.0, 1e-3])}
    new, state = adam_step(params, grads, init_state(params, "adam"), lr=0.001)
    np.testing.assert_allclose(params["w"] - new["w"], 0.001 * np.sign(grads["w"]), rtol=1e-4)
    assert state["t"] == 1


def test_adam_constant_gradient_moves_lr_per_step():
    params = {"w": np.zeros(1)}
    state = init_state(params, "adam")
    for step in range(1, 11):
        params, state = adam_step(params, {"w": np.array([0.25])}, state, lr=0.001)
        assert params["w"][0] == pytest.approx(-0.001 * step, rel=1e-5)


def test_adam_matches_loop_oracle(rng):
    w = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(6)]
    m = v = np.zeros(4)
    ref = w.copy()
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g ** 2
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    params, state = {"w": w}, init_state({"w": w}, "adam")
    for g in grads:
        params, state = adam_step(params, {"w": g}, state, lr=0.01)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12)


def test_rmsprop_matches_loop_oracle(rng):
    w = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(6)]
    v, ref = np.zeros(4), w.copy()
    for g in grads:
        v = 0.9 * v + 0.1 * g ** 2
        ref = ref - 0.01 * g / (np.sqrt(v) + 1e-8)
    params, state = {"w": w}, init_state({"w": w}, "rmsprop")
    for g in grads:
        params, state = rmsprop_step(params, {"w": g}, state, lr=0.01)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12)


def test_float32_parameters_stay_float32(rng):
    params = {"w": T.Tensor(rng.normal(size=3).astype(np.float32))}
    opt = Adam(params, lr=0.01)
    params["w"].grad = np.ones(3, dtype=np.float32)
    opt.step()
    assert params["w"].data.dtype == np.float32 and opt.state["m"]["w"].dtype == np.float32


def test_non_finite_gradient_names_parameter(rng):
    params = _params(rng)
    opt = RMSProp(params, lr=0.01)
    params["a"].grad = np.zeros((3, 4))
    params["b"].grad = np.array([0, 0, np.nan, 0, 0.0])
    before = params["b"].data.copy()
    with pytest.raises(TrainingError) as info:
        opt.step()
    assert info.value.parameter == "b" and "'b'" in str(info.value)
    np.testing.assert_array_equal(params["b"].data, before)


def test_optimizer_validation(rng):
    with pytest.raises(ConfigError):
        make_optimizer("sgd", _params(rng), 0.1)
    with pytest.raises(ConfigError):
        Adam(_params(rng), lr=0.0)
    with pytest.raises(ConfigError):
        Adam(_params(rng), lr=0.1, clip_norm=-1.0)
