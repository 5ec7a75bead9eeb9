import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moca_lab.errors import DegenerateVector, SchemaMismatch, ShapeMismatch, StaleCache
from moca_lab.net import (GradientBundle, ModelParams, WeightDelta, apply_weight_delta,
                          backward_from_feature_grad, ce_loss_and_feature_grad, cosine_ce,
                          cosine_logits, forward, forward_dropout, forward_with_cache, init_params,
                          l2_ball_project, load_checkpoint, params_from_dict, params_to_dict,
                          save_checkpoint, sgd_step)
from moca_lab.randkit import RngStream


def small(seed=0, sizes=(5, 7, 6, 4), k=3):
    return init_params(list(sizes), k, RngStream(seed))


def reference_forward(params, x):
    a = np.asarray(x, dtype=float)
    for i in range(len(params.weights)):
        z = np.zeros(params.weights[i].shape[0])
        for r in range(z.size):
            z[r] = sum(params.weights[i][r, c] * a[c] for c in range(a.size)) + params.biases[i][r]
        a = z if i == len(params.weights) - 1 else np.array([max(0.0, v) for v in z])
    return a


def test_identity_network():
    p = ModelParams([np.eye(3)], [np.zeros(3)], np.eye(3))
    x = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(forward(p, x), x)


def test_zero_input_propagates_bias():
    p = ModelParams([np.ones((2, 2)), np.ones((2, 2))], [np.array([1.0, -1.0]), np.array([0.5, 0.0])],
                    np.eye(2))
    np.testing.assert_allclose(forward(p, np.zeros(2)), [1.5, 1.0])


def test_forward_matches_reference():
    p = small(1)
    x = RngStream(2).standard_normal(5)
    np.testing.assert_allclose(forward(p, x), reference_forward(p, x), rtol=0, atol=1e-12)


def test_forward_batch_equals_rows():
    p = small(3)
    x = RngStream(4).standard_normal((6, 5))
    batch = forward(p, x)
    for i in range(6):
        np.testing.assert_allclose(batch[i], forward(p, x[i]), atol=1e-14)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward(small(), np.zeros(4))


def test_params_validate_chaining():
    with pytest.raises(ShapeMismatch):
        ModelParams([np.ones((3, 2)), np.ones((2, 4))], [np.zeros(3), np.zeros(2)], np.ones((2, 2)))


def test_dropout_rate_zero_is_forward():
    p = small(5)
    x = RngStream(6).standard_normal((4, 5))
    assert np.array_equal(forward_dropout(p, x, 0.0, RngStream(7)), forward(p, x))


def test_dropout_deterministic():
    p = small(5)
    x = RngStream(6).standard_normal((4, 5))
    a = forward_dropout(p, x, 0.5, RngStream(8))
    b = forward_dropout(p, x, 0.5, RngStream(8))
    assert np.array_equal(a, b)


def test_dropout_unbiased_on_linear_net():
    # ReLU is the identity on positive activations, so a positive network is linear
    rng = np.random.default_rng(9)
    p = ModelParams([rng.uniform(0.1, 1, (8, 4)), rng.uniform(0.1, 1, (3, 8))],
                    [np.zeros(8), np.zeros(3)], np.eye(3))
    x = rng.uniform(0.1, 1, 4)
    xs = np.repeat(x[None], 10_000, axis=0)
    mean = forward_dropout(p, xs, 0.5, RngStream(10)).mean(axis=0)
    np.testing.assert_allclose(mean, forward(p, x), rtol=0.02)


def test_dropout_rate_validation():
    with pytest.raises(ValueError):
        forward_dropout(small(), np.zeros(5), 1.0, RngStream(0))


def test_cosine_logits_cases():
    p = ModelParams([np.eye(2)], [np.zeros(2)], np.array([[2.0, 0.0], [0.0, 3.0]]), 10.0)
    logits = cosine_logits(p, np.array([5.0, 0.0]))
    np.testing.assert_allclose(logits, [10.0, 0.0], atol=1e-15)


def test_cosine_logits_scale_invariant():
    p = small(11)
    f = RngStream(12).standard_normal(4)
    np.testing.assert_allclose(cosine_logits(p, 10 * f), cosine_logits(p, f), atol=1e-12)


def test_cosine_logits_zero_feature():
    with pytest.raises(DegenerateVector):
        cosine_logits(small(), np.zeros(4))


def test_uniform_logits_loss_is_log_k():
    # every class row orthogonal to f gives all-zero logits
    p = ModelParams([np.eye(3)], [np.zeros(3)], np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
                                                           [0.0, 1.0, 1.0]]))
    loss, _ = ce_loss_and_feature_grad(p, np.array([1.0, 0.0, 0.0]), 1)
    assert loss == pytest.approx(math.log(3), abs=1e-15)


def test_saturated_loss_vanishes():
    p = ModelParams([np.eye(2)], [np.zeros(2)], np.array([[1.0, 0.0], [-1.0, 0.0]]), 200.0)
    loss, _ = ce_loss_and_feature_grad(p, np.array([3.0, 0.0]), 0)
    assert loss < 1e-100


def _fd(fn, x, step=1e-5):
    g = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = fn()
        flat[i] = old - step
        down = fn()
        flat[i] = old
        g.ravel()[i] = (up - down) / (2 * step)
    return g


def test_feature_grad_matches_finite_difference():
    p = init_params([5, 64], 10, RngStream(13))
    f = RngStream(14).standard_normal(64)
    _, g = ce_loss_and_feature_grad(p, f, 3)
    num = _fd(lambda: ce_loss_and_feature_grad(p, f, 3)[0], f)
    idx = np.random.default_rng(15).choice(64, 64, replace=False)
    rel = np.abs(g[idx] - num[idx]) / np.maximum(np.abs(num[idx]), 1e-8)
    assert np.all((rel < 1e-6) | (np.abs(g[idx] - num[idx]) < 1e-10))


def test_classifier_grad_matches_finite_difference():
    p = small(16)
    f = RngStream(17).standard_normal((5, 4))
    y = np.array([0, 2, 1, 1, 0])
    _, _, dw = cosine_ce(p, f, y)
    num = _fd(lambda: cosine_ce(p, f, y)[0], p.classifier)
    np.testing.assert_allclose(dw, num, rtol=1e-6, atol=1e-9)


def test_zero_injected_gradient():
    p = small(18)
    _, cache = forward_with_cache(p, RngStream(19).standard_normal((3, 5)))
    g = backward_from_feature_grad(p, cache, np.zeros((3, 4)))
    assert all(not np.any(w) for w in g.weights) and all(not np.any(b) for b in g.biases)


def test_linear_layer_closed_form():
    rng = np.random.default_rng(20)
    p = ModelParams([rng.standard_normal((3, 4))], [rng.standard_normal(3)], np.eye(3))
    x = rng.standard_normal(4)
    gf = rng.standard_normal(3)
    _, cache = forward_with_cache(p, x)
    g = backward_from_feature_grad(p, cache, gf)
    assert np.array_equal(g.weights[0], np.outer(gf, x))
    assert np.array_equal(g.biases[0], gf)


def test_encoder_gradient_matches_finite_difference():
    p = small(21)
    x = RngStream(22).standard_normal((6, 5))
    y = np.array([0, 1, 2, 0, 1, 2])

    def loss():
        return cosine_ce(p, forward(p, x), y)[0]

    f, cache = forward_with_cache(p, x)
    _, gf, _ = cosine_ce(p, f, y)
    g = backward_from_feature_grad(p, cache, gf)
    for w, gw in zip(p.weights, g.weights):
        np.testing.assert_allclose(gw, _fd(loss, w), rtol=1e-5, atol=1e-9)
    for b, gb in zip(p.biases, g.biases):
        np.testing.assert_allclose(gb, _fd(loss, b), rtol=1e-5, atol=1e-9)


def test_stale_cache():
    p = small(23)
    _, cache = forward_with_cache(p, RngStream(24).standard_normal((3, 5)))
    with pytest.raises(StaleCache):
        backward_from_feature_grad(p, cache, np.zeros((2, 4)))
    other = small(23, sizes=(5, 9, 4))
    with pytest.raises(StaleCache):
        backward_from_feature_grad(other, cache, np.zeros((3, 4)))


def test_weight_delta_algebra():
    p = small(25)
    zero = p.encoder_delta_zeros()
    q = apply_weight_delta(p, zero)
    assert all(np.array_equal(a, b) for a, b in zip(p.weights, q.weights))
    p.biases[0] += 1.5
    d = p.encoder_delta_zeros()
    d.biases[0] = -p.biases[0]
    assert not np.any(apply_weight_delta(p, d).biases[0])
    rng = np.random.default_rng(26)
    delta = WeightDelta([rng.standard_normal(w.shape) for w in p.weights],
                        [rng.standard_normal(b.shape) for b in p.biases])
    back = apply_weight_delta(apply_weight_delta(p, delta), -delta)
    for a, b in zip(p.weights, back.weights):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
    assert np.array_equal(back.classifier, p.classifier)


def test_weight_delta_shape_mismatch():
    p = small(27)
    with pytest.raises(ShapeMismatch):
        apply_weight_delta(p, WeightDelta([np.zeros((2, 2))], [np.zeros(2)]))


def _delta(norm, seed=0):
    rng = np.random.default_rng(seed)
    d = WeightDelta([rng.standard_normal((3, 2))], [rng.standard_normal(3)])
    return d.scaled(norm / d.norm())


def test_ball_projection():
    d = _delta(2.0)
    out = l2_ball_project(d, 1.0)
    assert out.norm() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(out.weights[0] * 2.0, d.weights[0], atol=1e-15)
    inner = _delta(0.5)
    assert l2_ball_project(inner, 1.0) is inner


@settings(max_examples=50)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.integers(0, 100))
def test_ball_projection_idempotent_and_bounded(norm, radius, seed):
    once = l2_ball_project(_delta(norm, seed), radius)
    twice = l2_ball_project(once, radius)
    assert once.norm() <= radius * (1 + 1e-12)
    np.testing.assert_allclose(twice.weights[0], once.weights[0], rtol=1e-12)


def test_sgd_quadratic_step():
    p = ModelParams([np.zeros((1, 1))], [np.zeros(1)], np.ones((1, 1)))
    w = p.weights[0][0, 0]
    g = GradientBundle([np.array([[w - 3.0]])], [np.zeros(1)], np.zeros((1, 1)))
    assert sgd_step(p, g, 0.1).weights[0][0, 0] == pytest.approx(0.3, abs=1e-15)


def test_sgd_noop_cases():
    p = small(28)
    zero = GradientBundle.zeros_like(p)
    same = sgd_step(p, zero, 0.5)
    assert all(np.array_equal(a, b) for a, b in zip(p.weights, same.weights))
    rng = np.random.default_rng(29)
    g = GradientBundle([rng.standard_normal(w.shape) for w in p.weights],
                       [rng.standard_normal(b.shape) for b in p.biases],
                       rng.standard_normal(p.classifier.shape))
    frozen = sgd_step(p, g, 0.0)
    assert np.array_equal(frozen.classifier, p.classifier)


def test_checkpoint_round_trip(tmp_path):
    p = small(30)
    save_checkpoint(p, tmp_path / "m.json")
    q = load_checkpoint(tmp_path / "m.json")
    assert all(np.array_equal(a, b) for a, b in zip(p.weights, q.weights))
    assert all(np.array_equal(a, b) for a, b in zip(p.biases, q.biases))
    assert np.array_equal(p.classifier, q.classifier) and p.scale == q.scale


def test_checkpoint_rejects_foreign_documents():
    doc = params_to_dict(small())
    doc["version"] = 2
    with pytest.raises(SchemaMismatch):
        params_from_dict(doc)
