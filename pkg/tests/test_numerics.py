import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fedpc.errors import ConfigError, NumericFault, ShapeError
from fedpc.numerics import (
    AdamState,
    LearningSchedule,
    LossConfig,
    ModelSpec,
    ParamVector,
    adam_step,
    forward,
    init_params,
    initial_model,
    learning_rate,
    nll_loss,
    proximal_term,
    total_loss_and_grad,
)


def test_spec_layout_counts():
    spec = ModelSpec((3, 4, 2), frozen_layers=1)
    assert spec.num_params == 3 * 4 + 4 + 4 * 2 + 2
    assert spec.frozen_len == 16
    assert spec.trainable_len == 10


@pytest.mark.parametrize(
    "sizes, frozen",
    [((3,), 0), ((3, 0, 2), 0), ((3, 2), 1), ((3, 4, 2), -1), ((3, 4, 2), 2)],
)
def test_spec_invariants(sizes, frozen):
    with pytest.raises(ConfigError):
        ModelSpec(sizes, frozen)


def test_param_vector_rejects_bad_length_and_nan():
    spec = ModelSpec((2, 2))
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(5), spec)
    bad = np.zeros(spec.num_params)
    bad[3] = np.nan
    with pytest.raises(NumericFault) as info:
        ParamVector(bad, spec)
    assert info.value.index == 3


# -- forward ------------------------------------------------------------------


def test_forward_zero_weights_is_uniform(rng):
    spec = ModelSpec((5, 7, 4))
    p = ParamVector(np.zeros(spec.num_params), spec)
    np.testing.assert_allclose(forward(p, rng.normal(size=5)), [0.25] * 4)


def test_forward_single_layer_softmax():
    # weights = identity, bias = [0, ln 3], input zero -> logits [0, ln 3]
    spec = ModelSpec((2, 2))
    p = ParamVector([1.0, 0.0, 0.0, 1.0, 0.0, math.log(3.0)], spec)
    np.testing.assert_allclose(forward(p, [0.0, 0.0]), [0.25, 0.75], rtol=1e-12)


def test_forward_matches_reference(rng):
    spec = ModelSpec((3, 5, 4, 3), 1)
    p = init_params(spec, rng)
    x = rng.normal(size=3)
    expected = oracles.probabilities(list(p.values), spec.layer_sizes, list(x))
    np.testing.assert_allclose(forward(p, x), expected, rtol=1e-12)


def test_forward_shape_error():
    spec = ModelSpec((3, 2))
    p = ParamVector(np.zeros(spec.num_params), spec)
    with pytest.raises(ShapeError):
        forward(p, np.zeros(4))


@settings(max_examples=60, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 6), min_size=2, max_size=4),
    seed=st.integers(0, 2**32 - 1),
    scale=st.floats(0.01, 20.0),
)
def test_softmax_normalization(sizes, seed, scale):
    spec = ModelSpec(sizes)
    r = np.random.default_rng(seed)
    p = ParamVector(r.normal(scale=scale, size=spec.num_params), spec)
    probs = forward(p, r.normal(scale=scale, size=(5, sizes[0])))
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


# -- losses -------------------------------------------------------------------


def test_nll_examples():
    assert nll_loss([0.5, 0.5], 0) == pytest.approx(0.6931471805599453, abs=1e-12)
    assert nll_loss([0.5, 0.5], 1) == pytest.approx(0.6931471805599453, abs=1e-12)
    assert nll_loss([0.0, 1.0], 1) == 0.0
    assert nll_loss([0.25, 0.75], 1) == pytest.approx(0.2876820724517809, abs=1e-12)


def test_nll_floor_and_batch_mean():
    assert nll_loss([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    probs = np.array([[0.25, 0.75], [0.5, 0.5]])
    assert nll_loss(probs, [1, 0]) == pytest.approx((-math.log(0.75) - math.log(0.5)) / 2)


def test_proximal_examples():
    assert proximal_term([1.0, 2.0], [1.0, 2.0], 3.7) == 0.0
    assert proximal_term([3.0, 4.0], [0.0, 0.0], 1.0) == 12.5
    assert proximal_term([1.0, 0.0], [0.0, 0.0], 2.0) == 1.0
    assert proximal_term([1.0, 5.0], [0.0, 0.0], 0.0) == 0.0
    with pytest.raises(ShapeError):
        proximal_term([1.0], [1.0, 2.0], 1.0)


def _random_problem(r, max_params=50):
    while True:
        sizes = [int(r.integers(1, 5)) for _ in range(int(r.integers(1, 3)))]
        sizes = [int(r.integers(1, 5))] + sizes + [int(r.integers(2, 4))]
        spec = ModelSpec(sizes, int(r.integers(0, len(sizes) - 1)))
        if spec.num_params <= max_params:
            break
    p = ParamVector(r.normal(scale=0.7, size=spec.num_params), spec)
    anchor = ParamVector(r.normal(scale=0.7, size=spec.num_params), spec)
    x = r.normal(size=(4, sizes[0]))
    y = r.integers(0, sizes[-1], size=4)
    cfg = LossConfig(float(r.uniform(0, 2)), float(r.uniform(0, 0.1)))
    return spec, p, anchor, x, y, cfg


def test_total_loss_decomposes(rng):
    for _ in range(20):
        spec, p, anchor, x, y, cfg = _random_problem(rng)
        loss, _ = total_loss_and_grad(p, anchor, (x, y), cfg)
        expected = nll_loss(forward(p, x), y) + proximal_term(p, anchor, cfg.mu)
        assert abs(loss - expected) <= 1e-12


def test_zero_mu_and_decay_give_pure_nll_gradient(rng):
    spec, p, anchor, x, y, _ = _random_problem(rng)
    _, g0 = total_loss_and_grad(p, anchor, (x, y), LossConfig(0.0, 0.0))
    _, g_self = total_loss_and_grad(p, p, (x, y), LossConfig(5.0, 0.0))
    np.testing.assert_array_equal(g0, g_self)
    loss0, _ = total_loss_and_grad(p, anchor, (x, y), LossConfig(0.0, 0.0))
    loss_self, _ = total_loss_and_grad(p, p, (x, y), LossConfig(5.0, 0.0))
    assert loss0 == loss_self


def test_frozen_gradient_is_exactly_zero(rng):
    spec = ModelSpec((4, 5, 3), 1)
    p = init_params(spec, rng)
    _, g = total_loss_and_grad(p, p, (rng.normal(size=(6, 4)), rng.integers(0, 3, 6)), LossConfig(1, 0.1))
    assert np.all(g[: spec.frozen_len] == 0.0)
    assert np.any(g[spec.frozen_len:] != 0.0)


def test_gradient_matches_finite_differences_small_net():
    r = np.random.default_rng(2024)
    spec, p, anchor, x, y, cfg = _random_problem(r)
    f = lambda v: oracles.objective(  # noqa: E731
        v, spec.layer_sizes, spec.frozen_len, list(anchor.values), x.tolist(), y.tolist(),
        cfg.mu, cfg.weight_decay,
    )
    _, g = total_loss_and_grad(p, anchor, (x, y), cfg)
    for i in range(spec.frozen_len, spec.num_params):
        fd = oracles.central_difference(f, list(p.values), i)
        assert oracles.relative_error(g[i], fd) < 1e-4


def test_empty_batch_rejected():
    spec = ModelSpec((2, 2))
    p = ParamVector(np.zeros(spec.num_params), spec)
    with pytest.raises(ConfigError):
        total_loss_and_grad(p, p, (np.zeros((0, 2)), np.zeros(0, dtype=int)), LossConfig())


# -- adam -----------------------------------------------------------------------


def test_adam_zero_gradient_is_null_update(rng):
    spec = ModelSpec((3, 4, 2), 1)
    p = init_params(spec, rng)
    q, state = adam_step(p, np.zeros(spec.num_params), AdamState.fresh(spec.num_params), 1e-3)
    np.testing.assert_array_equal(q.values, p.values)
    assert state.step_count == 1


def test_adam_first_step_closed_form(rng):
    spec = ModelSpec((3, 4, 2), 1)
    p = init_params(spec, rng)
    g = np.zeros(spec.num_params)
    g[spec.frozen_len:] = rng.choice([-2.0, 0.5, 3.0], size=spec.trainable_len)
    eta, eps = 1e-3, 1e-8
    q, _ = adam_step(p, g, AdamState.fresh(spec.num_params), eta)
    t = slice(spec.frozen_len, None)
    expected = -eta * g[t] / (np.abs(g[t]) + eps)
    np.testing.assert_allclose(q.values[t] - p.values[t], expected, rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(q.values[t] - p.values[t], -eta * np.sign(g[t]), rtol=1e-6)


def test_adam_second_step_matches_hand_computation():
    spec = ModelSpec((1, 1))
    p = ParamVector([0.0, 0.0], spec)
    s = AdamState.fresh(2)
    p1, s = adam_step(p, np.array([1.0, 1.0]), s, 0.1)
    p2, s = adam_step(p1, np.array([3.0, 3.0]), s, 0.1)
    m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
    m_hat, v_hat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    expected = p1.values[0] - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p2.values[0] == pytest.approx(expected, rel=1e-12)
    assert s.step_count == 2


def test_adam_rejects_non_finite_gradient():
    spec = ModelSpec((2, 2))
    p = ParamVector(np.zeros(spec.num_params), spec)
    g = np.zeros(spec.num_params)
    g[4] = np.inf
    with pytest.raises(NumericFault, match="index 4"):
        adam_step(p, g, AdamState.fresh(spec.num_params), 1e-3)


def test_frozen_prefix_survives_many_steps(rng):
    spec = ModelSpec((4, 6, 5, 3), 2)
    p0 = init_params(spec, rng)
    p, s = p0, AdamState.fresh(spec.num_params)
    for _ in range(50):
        p, s = adam_step(p, rng.normal(size=spec.num_params), s, 1e-2)
    assert p.values[: spec.frozen_len].tobytes() == p0.values[: spec.frozen_len].tobytes()
    assert s.step_count == 50
    assert np.all(s.first_moment[: spec.frozen_len] == 0)


# -- learning rate -----------------------------------------------------------


def test_learning_rate_examples():
    sched = LearningSchedule(1e-4, 0.5)
    assert learning_rate(sched, 0) == 1e-4
    assert learning_rate(sched, 1) == pytest.approx(5e-5, rel=1e-15)
    assert learning_rate(sched, 4) == pytest.approx(6.25e-6, rel=1e-15)
    with pytest.raises(ConfigError):
        learning_rate(sched, -1)


@given(st.floats(1e-8, 1.0), st.floats(0.01, 1.0), st.integers(0, 50))
def test_learning_rate_positive_non_increasing(eta0, decay, t):
    sched = LearningSchedule(eta0, decay)
    assert 0 < learning_rate(sched, t + 1) <= learning_rate(sched, t)


@pytest.mark.parametrize("eta0, decay", [(0.0, 0.5), (1e-3, 0.0), (1e-3, 1.5)])
def test_learning_schedule_invariants(eta0, decay):
    with pytest.raises(ConfigError):
        LearningSchedule(eta0, decay)


# -- initial model ------------------------------------------------------------


def test_initial_model_deterministic_and_pretrained():
    spec = ModelSpec((6, 8, 8, 3), 1)
    a = initial_model(spec, 11)
    b = initial_model(spec, 11)
    assert a.values.tobytes() == b.values.tobytes()
    plain = initial_model(spec, 11, pretrain=False)
    assert a.values[: spec.frozen_len].tobytes() != plain.values[: spec.frozen_len].tobytes()


def test_glorot_limits(rng):
    spec = ModelSpec((10, 30, 5))
    p = init_params(spec, rng)
    for (w, b), (fi, fo) in zip(p.layers(), [(10, 30), (30, 5)]):
        assert np.abs(w).max() <= math.sqrt(6 / (fi + fo))
        assert np.all(b == 0)
