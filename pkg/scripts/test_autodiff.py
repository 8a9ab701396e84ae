"""
Reverse-mode differentiation: per-op finite-difference checks, the composed
tiny codec, ParameterStore freezing and Adam.

Usage: pytest scripts/test_autodiff.py
"""

import numpy as np
import pytest

import autodiff as ad
from codec import Codec
from errors import ContractViolation, TrainingAbort
from conftest import tiny_noise_config, tiny_reverb_config

TOLERANCE = 1e-4


def leaf(rng, *shape, name="x"):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


def check(loss_fn, params, h=1e-5):
    errors = ad.gradient_check(loss_fn, params, h=h)
    assert max(errors.values()) < TOLERANCE, errors


def test_elementwise_ops(rng):
    x, y = leaf(rng, 5, 3), leaf(rng, 5, 3, name="y")
    weights = rng.standard_normal((5, 3))
    check(lambda: ((x * y + ad.square(x) - y) * weights).sum(), {"x": x, "y": y})
    check(lambda: (ad.elu(x) * weights).sum(), {"x": x})
    positive = ad.Tensor(rng.uniform(0.5, 2.0, (4,)), requires_grad=True)
    check(lambda: (ad.log(positive) + ad.sqrt(positive)).sum(), {"p": positive})


def test_matmul_and_shape_ops(rng):
    a, b = leaf(rng, 4, 3, name="a"), leaf(rng, 3, 2, name="b")
    weights = rng.standard_normal((6, 2))
    check(lambda: (ad.concat([a @ b, ad.take(a @ b, (slice(0, 2), slice(None)))], axis=0) * weights).sum(),
          {"a": a, "b": b})

    x = leaf(rng, 7, 2)
    check(lambda: (ad.repeat_frames(x, 3, 20) * rng_const(20, 2)).sum(), {"x": x})
    check(lambda: (ad.avg_pool(x, 2) * rng_const(3, 2)).sum(), {"x": x})
    check(lambda: (ad.reshape(x, (14,)) * rng_const(14)).sum(), {"x": x})


def rng_const(*shape):
    return np.random.default_rng(99).standard_normal(shape)


def test_framing(rng):
    x = leaf(rng, 32)
    check(lambda: (ad.frames(ad.pad_time(x, 12, 4), 16, 4) * rng_const(9, 16)).sum(), {"x": x})


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_causal_conv(rng, stride):
    x, kernel, bias = leaf(rng, 11, 2), leaf(rng, 4, 2, 3, name="k"), leaf(rng, 3, name="b")
    out_len = -(-11 // stride)
    weights = rng_const(out_len, 3)
    check(lambda: (ad.conv1d_causal(x, kernel, bias, stride) * weights).sum(), {"x": x, "k": kernel, "b": bias})


def test_causal_conv_reads_only_the_past(rng):
    x = rng.standard_normal((12, 1))
    kernel = ad.Tensor(rng.standard_normal((3, 1, 1)))
    base = ad.conv1d_causal(ad.Tensor(x), kernel, stride=2).value
    x[9] += 1.0
    changed = ad.conv1d_causal(ad.Tensor(x), kernel, stride=2).value
    # output t covers samples 2t-2 .. 2t
    assert np.array_equal(base[:5], changed[:5])
    assert not np.array_equal(base[5], changed[5])
    assert base.shape == (6, 1)


@pytest.mark.parametrize("causal", [False, True])
def test_transposed_conv(rng, causal):
    x, kernel, bias = leaf(rng, 5, 2), leaf(rng, 6, 2, 3, name="k"), leaf(rng, 3, name="b")
    weights = rng_const(15, 3)
    check(lambda: (ad.conv1d_transposed(x, kernel, bias, 3, causal=causal) * weights).sum(),
          {"x": x, "k": kernel, "b": bias})


def test_transposed_conv_is_adjoint_of_causal_conv(rng):
    x = rng.standard_normal((12, 2))
    y = rng.standard_normal((4, 3))
    kernel = rng.standard_normal((5, 2, 3))
    forward = ad.conv1d_causal(ad.Tensor(x), ad.Tensor(kernel), stride=3).value
    back = ad.conv1d_transposed(ad.Tensor(y), ad.Tensor(kernel.transpose(0, 2, 1)), stride=3).value
    assert np.sum(forward * y) == pytest.approx(np.sum(x * back), rel=1e-12)


@pytest.mark.parametrize("make_config", [tiny_noise_config, tiny_reverb_config])
def test_composed_codec_gradient(make_config):
    codec = Codec(make_config(quantization="none", channels=(2, 2, 2)), seed=5)
    assert codec.params.count() < 5000
    signal = np.random.default_rng(6).standard_normal(80)
    weights = np.random.default_rng(7).standard_normal(80)

    def loss():
        z, _ = codec.quantize_tensors(codec.embed(signal))
        out = codec.synthesize(z)
        return (out * weights).sum() + ad.square(out).sum()

    errors = ad.gradient_check(loss, dict(codec.params.params), h=1e-5)
    assert max(errors.values()) < TOLERANCE, {k: v for k, v in errors.items() if v >= TOLERANCE}


def test_straight_through_passes_gradient_unchanged(rng):
    v = leaf(rng, 3, 2)
    q = np.round(v.value)
    out = ad.straight_through(v, q)
    assert np.array_equal(out.value, q)
    (out * rng_const(3, 2)).sum().backward()
    assert np.array_equal(v.grad, rng_const(3, 2))


def test_backward_needs_scalar(rng):
    with pytest.raises(ContractViolation):
        leaf(rng, 3).backward()


def test_non_finite_forward_aborts():
    x = ad.Tensor(np.array([1e308, 1e308]), requires_grad=True)
    with pytest.raises(TrainingAbort):
        x * 10.0


def test_broadcasting_is_refused(rng):
    with pytest.raises(ContractViolation):
        leaf(rng, 3, 2) + leaf(rng, 2, 3)


def test_adam_skips_frozen_parameters():
    store = ad.ParameterStore()
    enc = store.add("encoder.w", np.ones(3))
    dec = store.add("decoder.w", np.ones(3))
    store.freeze(["encoder."])
    ((enc * 2.0).sum() + (dec * 2.0).sum()).backward()
    ad.adam_step(store, lr=0.1)
    assert np.array_equal(enc.value, np.ones(3))
    # first Adam step moves every coordinate by lr against the gradient sign
    assert np.allclose(dec.value, 0.9)
    assert store.step_count == 1


def test_non_finite_gradient_names_the_parameter():
    store = ad.ParameterStore()
    p = store.add("decoder.output.weight", np.zeros(2))
    p.grad = np.array([np.inf, 0.0])
    with pytest.raises(TrainingAbort, match="decoder.output.weight"):
        store.check_gradients()


def test_duplicate_parameter_names_are_refused():
    store = ad.ParameterStore()
    store.add("a", np.zeros(1))
    with pytest.raises(ContractViolation):
        store.add("a", np.zeros(1))


def test_gradient_of_sum_of_squares_is_twice_the_input(rng):
    p = leaf(rng, 6, 2, name="p")
    ad.square(p).sum().backward()
    assert np.array_equal(p.grad, 2.0 * p.value)


def test_adam_minimizes_a_scalar_quadratic():
    store = ad.ParameterStore()
    w = store.add("w", np.array(1.0))
    for _ in range(200):
        store.zero_grad()
        ad.square(w - 0.5).sum().backward()
        ad.adam_step(store, lr=1e-2)
    assert float(ad.square(w - 0.5).sum().value) < 1e-4


def test_gradient_clipping_rescales_the_global_norm():
    store = ad.ParameterStore()
    a = store.add("decoder.a", np.zeros(2))
    b = store.add("decoder.b", np.zeros(1))
    frozen = store.add("encoder.w", np.zeros(1))
    store.freeze(["encoder."])
    a.grad, b.grad, frozen.grad = np.array([3.0, 0.0]), np.array([4.0]), np.array([100.0])
    assert store.clip_grad_norm(1.0) == pytest.approx(5.0)
    assert np.allclose(a.grad, [0.6, 0.0])
    assert np.allclose(b.grad, [0.8])
    assert np.array_equal(frozen.grad, [100.0])
    assert store.clip_grad_norm(10.0) == pytest.approx(1.0)
    assert np.allclose(b.grad, [0.8])
