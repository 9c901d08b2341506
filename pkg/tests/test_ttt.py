import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tttmem.numerics import DimensionError, MlpParams, NonFiniteError
from tttmem.optimizers import OptimizerSpec
from tttmem.ttt import (
    AUDIO,
    ContractError,
    FastWeights,
    TokenBatch,
    TttLayerParams,
    init_fast_weights,
    reconstruction_loss,
    sigmoid,
    token_learning_rates,
    ttt_output,
    ttt_step,
)


def small_layer(seed=0, d=8, heads=2, hidden=6, **kw):
    return TttLayerParams.near_identity(d=d, heads=heads, hidden=hidden, seed=seed, **kw)


def batch(rng, b=5, d=8):
    return TokenBatch(rng.standard_normal((b, d)))


# ---------------------------------------------------------------- scalar oracles


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def f_scalar(x, w: MlpParams, ln, act=_gelu):
    """Residual MLP on one vector, written as plain loops."""
    hid = [act(sum(x[i] * w.w1[i, j] for i in range(len(x))) + w.b1[j]) for j in range(w.hidden)]
    y = [sum(hid[j] * w.w2[j, c] for j in range(w.hidden)) + w.b2[c] for c in range(w.d_out)]
    mu = sum(y) / len(y)
    var = sum((v - mu) ** 2 for v in y) / len(y)
    return [x[c] + ln.gain[c] * (y[c] - mu) / math.sqrt(var + ln.eps) + ln.bias[c] for c in range(len(y))]


def loss_scalar(tokens, eta, layer, w):
    total = 0.0
    for i, x in enumerate(tokens):
        k = [sum(layer.theta_k[r, c] * x[c] for c in range(len(x))) for r in range(len(x))]
        v = [sum(layer.theta_v[r, c] * x[c] for c in range(len(x))) for r in range(len(x))]
        for h, wh in enumerate(w.heads):
            s = layer.head_slice(h)
            out = f_scalar(k[s], wh, layer.ln)
            total += eta[i] * sum((a - b) ** 2 for a, b in zip(out, v[s]))
    return total


# ---------------------------------------------------------------- init


def test_init_is_deterministic():
    layer = small_layer()
    a, b = init_fast_weights(layer, 3), init_fast_weights(layer, 3)
    for wa, wb in zip(a.heads, b.heads):
        assert np.array_equal(wa.to_vector(), wb.to_vector())
    c = init_fast_weights(layer, 4)
    assert not np.array_equal(a.heads[0].w1, c.heads[0].w1)
    assert a.step == 0 and len(a.heads) == layer.heads


def test_init_std_within_twenty_percent():
    layer = TttLayerParams.near_identity(d=64)
    w = init_fast_weights(layer, 0)
    entries = np.concatenate([np.concatenate([h.w1.ravel(), h.w2.ravel()]) for h in w.heads])
    assert abs(entries.std() / layer.weight_std - 1.0) <= 0.2
    assert all(not h.b1.any() and not h.b2.any() for h in w.heads)


def test_layer_validation():
    with pytest.raises(DimensionError):
        small_layer(d=9, heads=2)
    with pytest.raises(ValueError):
        small_layer(base_lr=0.0)


def test_batch_validation(rng):
    with pytest.raises(ContractError):
        TokenBatch(np.zeros((0, 4)))
    with pytest.raises(DimensionError):
        TokenBatch(rng.standard_normal((3, 4)), modality=np.zeros(2))
    with pytest.raises(DimensionError):
        TokenBatch(rng.standard_normal((3, 4)), targets=rng.standard_normal((2, 4)))


# ---------------------------------------------------------------- learning rates


def test_learning_rates_zero_weights_give_half(rng):
    layer = small_layer(base_lr=0.3)
    assert np.allclose(token_learning_rates(batch(rng), layer), 0.15)


def test_learning_rates_saturate(rng):
    layer = replace(small_layer(base_lr=0.3), lr_b=60.0)
    assert np.allclose(token_learning_rates(batch(rng), layer), 0.3)


def test_learning_rates_scalar_oracle(rng):
    layer = replace(small_layer(base_lr=0.2, lr_w_scale=1.0), lr_b=-0.4)
    b = batch(rng, 6)
    got = token_learning_rates(b, layer)
    for i, x in enumerate(b.tokens):
        z = sum(float(a) * float(c) for a, c in zip(x, layer.lr_w)) - 0.4
        assert got[i] == pytest.approx(0.2 / (1.0 + math.exp(-z)), abs=1e-14)
    assert np.all((got > 0) & (got < 0.2))


# ---------------------------------------------------------------- loss


def test_loss_scalar_oracle(rng):
    layer = small_layer(d=4, hidden=3, theta_noise=0.3)
    w = init_fast_weights(replace(layer, init_std=0.5), 1)
    b = batch(rng, 3, 4)
    eta = rng.random(3)
    assert abs(reconstruction_loss(b, eta, layer, w) - loss_scalar(b.tokens, eta, layer, w)) <= 1e-10


def test_loss_zero_eta(rng):
    layer = small_layer()
    assert reconstruction_loss(batch(rng), np.zeros(5), layer, init_fast_weights(layer)) == 0.0


def test_loss_self_reconstruction_is_zero(rng):
    # theta_k = theta_v, zero inner MLP and LN gain/bias 0: f is the identity
    layer = small_layer(theta_noise=0.0, ln_gain=0.0)
    w = init_fast_weights(replace(layer, init_std=0.0))
    assert reconstruction_loss(batch(rng), np.ones(5), layer, w) == 0.0


def test_loss_rejects_audio(rng):
    layer = small_layer()
    b = TokenBatch(rng.standard_normal((3, 8)), modality=np.array([0, AUDIO, 0]))
    with pytest.raises(ContractError):
        reconstruction_loss(b, np.ones(3), layer, init_fast_weights(layer))
    with pytest.raises(ContractError):
        ttt_step(b, init_fast_weights(layer), layer, OptimizerSpec("sgd"))


# ---------------------------------------------------------------- output


def test_closed_gate_returns_input(rng):
    layer = replace(small_layer(), gate_b=-80.0)
    b = batch(rng)
    assert np.allclose(ttt_output(b, layer, init_fast_weights(layer)), b.tokens, atol=1e-30)


def test_open_gate_returns_mlp_output(rng):
    layer = replace(small_layer(), gate_b=80.0)
    w = init_fast_weights(layer)
    b = batch(rng, 2)
    q = b.tokens @ layer.theta_q.T
    for i in range(2):
        ref = np.concatenate([f_scalar(q[i, layer.head_slice(h)], wh, layer.ln)
                              for h, wh in enumerate(w.heads)])
        assert np.allclose(ttt_output(b, layer, w)[i], ref, atol=1e-12)


def test_output_token_by_token(rng):
    layer = replace(small_layer(lr_w_scale=1.0), gate_w=rng.standard_normal(8), gate_b=0.3)
    w = init_fast_weights(replace(layer, init_std=0.3), 2)
    b = batch(rng, 4)
    full = ttt_output(b, layer, w)
    for i in range(4):
        one = ttt_output(TokenBatch(b.tokens[i:i + 1]), layer, w)
        assert np.allclose(full[i], one[0], atol=1e-13)


def test_output_shape_mismatch(rng):
    layer = small_layer()
    with pytest.raises(DimensionError):
        ttt_output(TokenBatch(rng.standard_normal((2, 6))), layer, init_fast_weights(layer))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), gate_b=st.floats(-5, 5))
def test_gated_output_is_convex_combination(seed, gate_b):
    rng = np.random.default_rng(seed)
    layer = replace(small_layer(seed=seed % 1000), gate_w=rng.standard_normal(8), gate_b=gate_b)
    w = init_fast_weights(replace(layer, init_std=0.4), seed % 1000)
    b = batch(rng, 6)
    z = ttt_output(b, layer, w)
    z_raw = ttt_output(b, replace(layer, gate_w=np.zeros(8), gate_b=800.0), w)
    lo, hi = np.minimum(b.tokens, z_raw), np.maximum(b.tokens, z_raw)
    assert np.all(z >= lo - 1e-12) and np.all(z <= hi + 1e-12)


# ---------------------------------------------------------------- step


def test_null_update_with_zero_eta(rng):
    layer = small_layer()
    w = init_fast_weights(layer)
    b = batch(rng)
    for spec in (OptimizerSpec("sgd"), OptimizerSpec("muon"), OptimizerSpec("hf")):
        res = ttt_step(b, w, layer, spec, eta=np.zeros(5))
        for a, c in zip(res.weights.heads, w.heads):
            assert np.array_equal(a.to_vector(), c.to_vector())
        assert np.array_equal(res.output, ttt_output(b, layer, w))
        assert res.weights.step == 1


def test_update_then_output(rng):
    layer = small_layer(base_lr=0.5)
    w = init_fast_weights(layer)
    b = batch(rng)
    res = ttt_step(b, w, layer, OptimizerSpec("sgd"))
    assert np.allclose(res.output, ttt_output(b, layer, res.weights), atol=1e-14)
    assert not np.allclose(res.output, ttt_output(b, layer, w), atol=1e-10)


def test_update_norm_metric_matches_weights(rng):
    layer = small_layer(base_lr=0.5)
    w = init_fast_weights(layer)
    for spec in (OptimizerSpec("sgd"), OptimizerSpec("muon"), OptimizerSpec("hf")):
        res = ttt_step(batch(rng), w, layer, spec)
        diff = np.sqrt(sum((a - c).dot(a - c) for a, c in zip(res.weights.heads, w.heads)))
        assert res.metrics.update_norm == pytest.approx(diff, rel=1e-12)


def test_metrics_loss_and_output_change(rng):
    layer = small_layer(base_lr=0.5)
    w = init_fast_weights(layer)
    b = batch(rng)
    res = ttt_step(b, w, layer, OptimizerSpec("hf"))
    eta = token_learning_rates(b, layer)
    m = res.metrics
    assert m.loss_before == pytest.approx(reconstruction_loss(b, eta, layer, w), rel=1e-12)
    assert m.loss_after == pytest.approx(reconstruction_loss(b, eta, layer, res.weights), rel=1e-12)
    open_gate = replace(layer, gate_b=800.0)
    f0, f1 = ttt_output(b, open_gate, w), ttt_output(b, open_gate, res.weights)
    assert m.relative_output_change == pytest.approx(np.linalg.norm(f1 - f0) / np.linalg.norm(f0), rel=1e-10)
    assert 1 <= m.cg_iterations <= 3 and m.wall_time is None
    assert ttt_step(b, w, layer, OptimizerSpec("hf"), timed=True).metrics.wall_time > 0


def test_target_norm_rescales(rng):
    layer = small_layer()
    res = ttt_step(batch(rng), init_fast_weights(layer), layer, OptimizerSpec("muon"), target_norm=0.1386)
    assert res.metrics.update_norm == pytest.approx(0.1386, rel=1e-12)


def test_input_weights_are_not_modified(rng):
    layer = small_layer()
    w = init_fast_weights(layer)
    before = [h.to_vector().copy() for h in w.heads]
    ttt_step(batch(rng), w, layer, OptimizerSpec("hf"))
    assert all(np.array_equal(a, h.to_vector()) for a, h in zip(before, w.heads))


def test_nonfinite_update_raises_and_keeps_state(rng):
    layer = small_layer()
    w = init_fast_weights(layer)
    before = [h.to_vector().copy() for h in w.heads]
    with pytest.raises(NonFiniteError):
        ttt_step(batch(rng), w, layer, OptimizerSpec("sgd"), eta=np.full(5, np.inf))
    assert all(np.array_equal(a, h.to_vector()) for a, h in zip(before, w.heads))
    assert w.step == 0


def test_sgd_descent_small_lr_twenty_seeds():
    # the near-zero initial MLP output makes the LN path very stiff, so "small" means 1e-5 here
    layer = small_layer(d=16, hidden=32, base_lr=1e-5)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        res = ttt_step(batch(rng, 8, 16), init_fast_weights(layer, seed), layer, OptimizerSpec("sgd"))
        assert res.metrics.loss_after < res.metrics.loss_before


@pytest.mark.parametrize("kind", ["sgd", "muon", "hf"])
def test_descent_rate_per_optimizer(kind):
    ok = 0
    for seed in range(50):
        layer = TttLayerParams.near_identity(seed=seed)
        rng = np.random.default_rng(seed)
        res = ttt_step(batch(rng, 32, 64), init_fast_weights(layer, seed), layer, OptimizerSpec(kind))
        ok += res.metrics.loss_after <= res.metrics.loss_before
    assert ok >= 45


def test_multi_head_isolation(rng):
    layer = small_layer(theta_noise=0.0)
    w = init_fast_weights(layer)
    x = rng.standard_normal((5, 8))
    x[:, layer.head_slice(1)] = 0.0
    for spec in (OptimizerSpec("sgd"), OptimizerSpec("hf")):
        res = ttt_step(TokenBatch(x), w, layer, spec)
        # head 1 sees zero keys and zero targets, so its loss gradient vanishes
        assert np.allclose(res.weights.heads[1].to_vector(), w.heads[1].to_vector(), atol=1e-15)
        assert not np.allclose(res.weights.heads[0].to_vector(), w.heads[0].to_vector())


def test_replay_is_bit_identical():
    layer = small_layer(base_lr=0.1)
    xs = np.random.default_rng(9).standard_normal((6, 4, 8))

    def run():
        w = init_fast_weights(layer, 5)
        outs = []
        for t, x in enumerate(xs):
            res = ttt_step(TokenBatch(x, stream_index=t), w, layer, OptimizerSpec("hf"))
            w = res.weights
            outs.append(res.output)
        return w, np.stack(outs)

    (w1, o1), (w2, o2) = run(), run()
    assert np.array_equal(o1, o2) and w1.step == w2.step == 6
    assert all(np.array_equal(a.to_vector(), b.to_vector()) for a, b in zip(w1.heads, w2.heads))


def test_fast_weights_helpers():
    layer = small_layer()
    w = init_fast_weights(layer)
    c = w.copy()
    c.heads[0].w1[0, 0] += 1.0
    assert c.heads[0].w1[0, 0] != w.heads[0].w1[0, 0]
    assert w.nbytes() == sum(h.size for h in w.heads) * 8
    assert w.allfinite() and isinstance(w, FastWeights)
    assert sigmoid(0.0) == 0.5
