"""Model-level oracles: AdaIN closed form, init statistics, forward contracts,
clone/frozen view semantics, and state loading."""

import numpy as np
import pytest

import pden.autodiff as ad
from pden import nets
from pden.nets import (ArchConfig, adain, dense, forward_task, generate,
                       init_cycle_generator, init_generator, init_task_model,
                       kaiming_conv, kaiming_dense, load_state, param_digest, predict)
from pden.rng import Rng


def _identity_heads(noise_dim: int, channels: int, scale_value: float, shift_value: float):
    # heads with zero weights and constant biases give exact (scale, shift)
    fc_scale = nets.Dense(ad.parameter(np.zeros((noise_dim, channels))),
                          ad.parameter(np.full(channels, scale_value)))
    fc_shift = nets.Dense(ad.parameter(np.zeros((noise_dim, channels))),
                          ad.parameter(np.full(channels, shift_value)))
    return fc_scale, fc_shift


def test_adain_closed_form_single_channel():
    # x = [1, 2, 3, 4], scale 2, shift 3: 3 + 2 * (x - 2.5) / sqrt(1.25)
    feat = ad.constant(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    noise = ad.constant(np.zeros((1, 3)))
    fc_scale, fc_shift = _identity_heads(3, 1, 2.0, 3.0)
    out = adain(feat, noise, fc_scale, fc_shift)
    expected = np.array([0.31671842700025236, 2.1055728090000842,
                         3.8944271909999158, 5.683281572999747]).reshape(1, 1, 2, 2)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_adain_post_affine_moments_match_heads(tiny_arch):
    rng = Rng(31)
    gen = init_generator(tiny_arch, rng)
    feat = ad.constant(rng.derive("f").normal((4, tiny_arch.gen_channels[1], 4, 4)))
    noise = ad.constant(rng.derive("n").normal((4, tiny_arch.noise_dim)))
    out = adain(feat, noise, gen.fc_scale, gen.fc_shift)
    scale = dense(noise, gen.fc_scale).data
    shift = dense(noise, gen.fc_shift).data
    got_mu = out.data.mean(axis=(2, 3))
    got_sigma = out.data.std(axis=(2, 3))
    np.testing.assert_allclose(got_mu, shift, atol=1e-9)
    np.testing.assert_allclose(got_sigma, np.abs(scale), atol=1e-6)


def test_adain_shape_validation(tiny_arch):
    gen = init_generator(tiny_arch, Rng(0))
    c = tiny_arch.gen_channels[1]
    with pytest.raises(ad.ShapeError):
        adain(ad.constant(np.zeros((2, c, 4))), ad.constant(np.zeros((2, 3))),
              gen.fc_scale, gen.fc_shift)
    with pytest.raises(ad.ShapeError):
        adain(ad.constant(np.zeros((2, c, 4, 4))), ad.constant(np.zeros((3, 3))),
              gen.fc_scale, gen.fc_shift)
    with pytest.raises(ad.ShapeError):
        adain(ad.constant(np.zeros((2, c, 4, 4))), ad.constant(np.zeros((2, 9))),
              gen.fc_scale, gen.fc_shift)


def test_kaiming_init_std():
    d = kaiming_dense(Rng(5), 400, 300)
    assert abs(d.w.data.std() - np.sqrt(2.0 / 400)) < 0.2 * np.sqrt(2.0 / 400)
    np.testing.assert_array_equal(d.b.data, np.zeros(300))
    c = kaiming_conv(Rng(6), 64, 32, 3, 3)
    fan_in = 32 * 9
    assert abs(c.w.data.std() - np.sqrt(2.0 / fan_in)) < 0.2 * np.sqrt(2.0 / fan_in)


def test_generator_init_near_identity(tiny_arch):
    gen = init_generator(tiny_arch, Rng(9))
    np.testing.assert_array_equal(gen.fc_scale.b.data,
                                  np.ones_like(gen.fc_scale.b.data))
    np.testing.assert_array_equal(gen.fc_shift.b.data,
                                  np.zeros_like(gen.fc_shift.b.data))
    # head weights are shrunk so the affine starts close to (1, 0)
    assert np.abs(gen.fc_scale.w.data).max() < 0.5


def test_forward_task_contracts(tiny_arch, tiny_train):
    model = init_task_model(tiny_arch, Rng(2))
    x = ad.constant(tiny_train.images[:6])
    out = forward_task(model, x)
    assert out.yhat.shape == (6, tiny_arch.num_classes)
    np.testing.assert_allclose(out.yhat.data.sum(axis=1), np.ones(6), atol=1e-12)
    assert out.z.shape == (6, tiny_arch.embed_dim)
    np.testing.assert_allclose(np.linalg.norm(out.z.data, axis=1), np.ones(6),
                               atol=1e-9)
    labels = predict(model, x)
    np.testing.assert_array_equal(labels, out.yhat.data.argmax(axis=1))


def test_dead_feature_rows_are_rejected_not_normalized(tiny_arch, tiny_train):
    # this init produces an all-zero pooled feature row for some input; the
    # projection must refuse to normalize it rather than emit NaN/garbage
    model = init_task_model(tiny_arch, Rng(3))
    with pytest.raises(ad.DomainError):
        forward_task(model, ad.constant(tiny_train.images[:6]))


def test_generate_output_range_and_shape(tiny_arch, tiny_train):
    gen = init_generator(tiny_arch, Rng(4))
    x = ad.constant(tiny_train.images[:5])
    noise = ad.constant(Rng(8).normal((5, tiny_arch.noise_dim)))
    xhat = generate(gen, x, noise)
    assert xhat.shape == x.shape
    assert xhat.data.min() > 0.0 and xhat.data.max() < 1.0  # sigmoid range


def test_generate_validates_spatial_divisibility(tiny_arch):
    gen = init_generator(tiny_arch, Rng(4))
    bad = ad.constant(np.zeros((2, 1, 10, 10)))  # not divisible by 4
    with pytest.raises(ad.ShapeError):
        generate(gen, bad, ad.constant(np.zeros((2, tiny_arch.noise_dim))))
    with pytest.raises(ad.ShapeError):
        generate(gen, ad.constant(np.zeros((2, 1, 8, 8))),
                 ad.constant(np.zeros((3, tiny_arch.noise_dim))))


def test_cycle_same_shape(tiny_arch, tiny_train):
    cyc = init_cycle_generator(tiny_arch, Rng(5))
    x = ad.constant(tiny_train.images[:4])
    rec = nets.cycle(cyc, x)
    assert rec.shape == x.shape
    assert rec.data.min() > 0.0 and rec.data.max() < 1.0


def test_clone_is_independent(tiny_arch):
    model = init_task_model(tiny_arch, Rng(1))
    twin = model.clone()
    assert param_digest(twin) == param_digest(model)
    twin.parameters()[0].data += 1.0
    assert param_digest(twin) != param_digest(model)


def test_frozen_shares_arrays_without_grad(tiny_arch):
    model = init_task_model(tiny_arch, Rng(1))
    view = model.frozen()
    for (name, p), (vname, v) in zip(model.named_parameters(),
                                     view.named_parameters()):
        assert name == vname
        assert v.data is p.data  # same storage: the view tracks live training
        assert not v.requires_grad
    assert all(p.requires_grad for p in model.parameters())


def test_load_state_roundtrip_and_errors(tiny_arch):
    a = init_task_model(tiny_arch, Rng(1))
    b = init_task_model(tiny_arch, Rng(2))
    assert param_digest(a) != param_digest(b)
    state = {name: p.data.copy() for name, p in a.named_parameters()}
    load_state(b, state)
    assert param_digest(b) == param_digest(a)

    missing = dict(state)
    missing.pop(next(iter(missing)))
    with pytest.raises(KeyError):
        load_state(init_task_model(tiny_arch, Rng(3)), missing)

    wrong = {name: arr[..., :1] for name, arr in state.items()}
    with pytest.raises(ValueError):
        load_state(init_task_model(tiny_arch, Rng(3)), wrong)


def test_param_digest_sensitivity(tiny_arch):
    model = init_task_model(tiny_arch, Rng(1))
    before = param_digest(model)
    p = model.parameters()[-1]
    p.data.flat[0] += 1e-12  # any bit flip must change the digest
    assert param_digest(model) != before


def test_arch_config_roundtrip():
    arch = ArchConfig(num_classes=7, feat_channels=(8, 16, 24))
    again = ArchConfig.from_dict(arch.to_dict())
    assert again == arch
