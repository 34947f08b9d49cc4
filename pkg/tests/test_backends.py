# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import math

import numpy as np
import pytest

from lib.attnbias import AttentionBias
from lib.backends import UnknownPrompt, UnsupportedCapability, create_backend
from lib.backends.analytic import AnalyticGaussianBackend
from lib.backends.synthetic import SyntheticAttentionBackend, site_name
from lib.backends.toy import (
    END_TOKEN,
    START_TOKEN,
    HashEmbedder,
    IdentityCodec,
    PoolCodec,
    gaussian_posterior_eps,
    make_codec,
    prompt_key,
)
from lib.config import SyntheticBackendConfig
from lib.grid import ShapeMismatch
from lib.schedule import build_schedule, q_sample


@pytest.fixture
def synthetic(schedule) -> SyntheticAttentionBackend:
    return SyntheticAttentionBackend(
        schedule,
        token_targets={'crack': 0.9},
        codec=PoolCodec(16),
    )


def test_analytic_degenerate_posterior_recovers_eps(small_backend, rng):
    mu = small_backend.unconditional_mean
    backend = AnalyticGaussianBackend(
        small_backend.schedule,
        {'a photo of a bottle': mu},
        mu,
        data_std=0.0,
        codec=small_backend.codec,
    )
    emb = backend.encode_text('a photo of a bottle')
    eps = rng.standard_normal(mu.shape)

    for t in backend.schedule.executed_timesteps:
        a = backend.schedule.alpha_bar(t)
        z_t = q_sample(backend.schedule, mu, t, eps)
        pred = backend.predict_eps(z_t, t, emb)

        np.testing.assert_allclose(pred, (z_t - math.sqrt(a) * mu) / math.sqrt(1 - a), atol=1e-12)
        np.testing.assert_allclose(pred, eps, atol=1e-9)


def test_analytic_general_posterior_formula(small_backend, rng):
    mu = small_backend.unconditional_mean
    emb = small_backend.encode_text('a photo of a bottle')
    z_t = rng.standard_normal(mu.shape)
    t = small_backend.schedule.executed_timesteps[4]
    a = small_backend.schedule.alpha_bar(t)
    s0 = small_backend.data_std

    expected = math.sqrt(1 - a) * (z_t - math.sqrt(a) * mu) / (a * s0 ** 2 + 1 - a)

    np.testing.assert_allclose(small_backend.predict_eps(z_t, t, emb), expected, atol=1e-12)


def test_posterior_matches_monte_carlo():
    # Regression slope of eps on z_t for x0 ~ N(mu, s0^2).
    rng = np.random.default_rng(11)
    a, s0, mu = 0.4, 0.5, 0.3
    n = 400_000

    x0 = mu + s0 * rng.standard_normal(n)
    eps = rng.standard_normal(n)
    z = math.sqrt(a) * x0 + math.sqrt(1 - a) * eps

    slope = np.cov(eps, z)[0, 1] / np.var(z, ddof=1)
    closed = gaussian_posterior_eps(np.array([1.0]), a, np.array([mu]), s0)[0] \
        - gaussian_posterior_eps(np.array([0.0]), a, np.array([mu]), s0)[0]

    assert slope == pytest.approx(closed, rel=1e-2)

    # Conditional mean near z = sqrt(a) * mu is zero.
    near = np.abs(z - math.sqrt(a) * mu) < 0.02
    assert abs(eps[near].mean()) < 0.02


def test_analytic_prediction_is_affine(small_backend, rng):
    emb = small_backend.encode_text('a photo of a bottle')
    shape = small_backend.capabilities.latent_shape
    z1 = rng.standard_normal(shape)
    z2 = rng.standard_normal(shape)
    t = small_backend.schedule.executed_timesteps[2]

    f = lambda z: small_backend.predict_eps(z, t, emb)
    c = f(np.zeros(shape))

    np.testing.assert_allclose(
        f(2.0 * z1 - 0.5 * z2),
        2.0 * (f(z1) - c) - 0.5 * (f(z2) - c) + c,
        atol=1e-12,
    )


def test_analytic_rejects_bias_and_unknown_prompts(small_backend):
    shape = small_backend.capabilities.latent_shape
    z = np.zeros(shape)
    t = small_backend.schedule.t_start
    emb = small_backend.encode_text('a photo of a bottle')
    bias = AttentionBias(np.ones(shape[:2]), (5,), 2.0)

    assert not small_backend.capabilities.supports_attention_bias
    with pytest.raises(UnsupportedCapability):
        small_backend.predict_eps(z, t, emb, bias)
    with pytest.raises(UnknownPrompt):
        small_backend.predict_eps(z, t, small_backend.encode_text('a photo of a can'))
    with pytest.raises(ShapeMismatch):
        small_backend.predict_eps(np.zeros((2, 2, 4)), t, emb)


def test_unconditional_prediction_uses_unconditional_mean(small_backend, rng):
    z = rng.standard_normal(small_backend.capabilities.latent_shape)
    t = small_backend.schedule.t_start
    expected = gaussian_posterior_eps(
        z,
        small_backend.schedule.alpha_bar(t),
        small_backend.unconditional_mean,
        small_backend.data_std,
    )

    assert np.array_equal(small_backend.predict_eps(z, t, None), expected)


def test_identity_codec_round_trip(rng):
    codec = IdentityCodec((8, 8, 3))
    x = rng.uniform(size=(8, 8, 3))

    assert np.array_equal(codec.decode(codec.encode(x)), x)


def test_pool_codec_constant_image():
    codec = PoolCodec(8)
    z = codec.encode(np.full((8, 8, 3), 0.25))

    assert z.shape == (4, 4, 4)
    np.testing.assert_allclose(z, 0.25)
    np.testing.assert_allclose(codec.decode(z), 0.25)


def test_pool_codec_loses_only_subpixel_detail(rng):
    codec = PoolCodec(8)
    blocky = np.repeat(np.repeat(rng.uniform(size=(4, 4, 3)), 2, axis=0), 2, axis=1)

    np.testing.assert_allclose(codec.decode(codec.encode(blocky)), blocky, atol=1e-15)


def test_make_codec_checks_channels():
    assert make_codec('identity', 8, 3).latent_shape == (8, 8, 3)
    with pytest.raises(ValueError):
        make_codec('identity', 8, 4)
    with pytest.raises(ValueError):
        make_codec('vae', 8, 4)


def test_round_trip_psnr(small_backend, rng):
    lossless = AnalyticGaussianBackend(
        small_backend.schedule,
        {},
        np.zeros((8, 8, 3)),
        codec=IdentityCodec((8, 8, 3)),
    )
    image = rng.uniform(size=(8, 8, 3))

    assert lossless.round_trip_psnr(image) is None
    assert small_backend.round_trip_psnr(image) > 0


def test_hash_embedder_rows():
    embedder = HashEmbedder()
    emb = embedder.embed('crack crack')

    assert emb.words == (START_TOKEN, 'crack', 'crack', END_TOKEN)
    assert emb.special_indices == {0, 3}
    assert np.array_equal(emb.vectors[1], emb.vectors[2])


def test_hash_embedder_is_per_token():
    embedder = HashEmbedder()
    a = embedder.embed('a photo of a bottle')
    b = embedder.embed('a photo of a can')

    differs = [not np.array_equal(x, y) for x, y in zip(a.vectors, b.vectors)]
    assert differs == [False, False, False, False, False, True, False]


def test_hash_embedder_is_reproducible():
    a = HashEmbedder(seed=3).embed('bottle with crack')
    b = HashEmbedder(seed=3).embed('bottle with crack')
    c = HashEmbedder(seed=4).embed('bottle with crack')

    assert np.array_equal(a.vectors, b.vectors)
    assert not np.array_equal(a.vectors, c.vectors)


def test_prompt_key_canonicalizes():
    assert prompt_key('  A Photo of a BOTTLE ') == 'a photo of a bottle'


@pytest.mark.parametrize('prompt', ['', '   ', [], ['', ' ']])
def test_empty_prompt_rejected(small_backend, prompt):
    with pytest.raises(ValueError):
        small_backend.encode_text(prompt)


def test_token_sequence_prompt(small_backend):
    emb = small_backend.encode_text(['a', 'photo', 'of', 'a', 'bottle'])

    assert emb.key == 'a photo of a bottle'


def test_synthetic_zero_bias_equals_no_bias(synthetic, rng):
    emb = synthetic.encode_text('a photo of a bottle with crack').with_anomaly([7])
    z = rng.standard_normal(synthetic.capabilities.latent_shape)
    t = synthetic.schedule.t_start
    mask = np.zeros(synthetic.capabilities.latent_size)
    mask[2:5, 2:5] = 1.0

    unbiased = synthetic.predict_eps(z, t, emb, None)
    zero = synthetic.predict_eps(z, t, emb, AttentionBias(mask, (7,), 0.0))

    assert np.array_equal(unbiased, zero)


def test_synthetic_attention_rows_sum_to_one(synthetic):
    emb = synthetic.encode_text('a photo of a bottle with crack')
    mask = np.ones(synthetic.capabilities.latent_size)

    for site in synthetic.sites:
        for beta in (0.0, 2.0, 50.0):
            probs = synthetic.attention_probs(emb, AttentionBias(mask, (7,), beta), site.name)
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_synthetic_attention_mass_increases_with_beta(synthetic):
    emb = synthetic.encode_text('a photo of a bottle with crack')
    h, w = synthetic.capabilities.latent_size
    mask = np.zeros((h, w))
    mask[2:6, 2:6] = 1.0

    for site in synthetic.sites:
        inside = AttentionBias(mask, (7,), 0.0).mask_flat(site.size) > 0
        masses = [
            synthetic.attention_probs(emb, AttentionBias(mask, (7,), beta), site.name)[inside, 7].sum()
            for beta in (0.0, 1.0, 2.0, 4.0)
        ]
        assert all(a < b for a, b in zip(masses, masses[1:]))


def test_synthetic_layer_filter(synthetic, rng):
    emb = synthetic.encode_text('a photo of a bottle with crack')
    mask = np.ones(synthetic.capabilities.latent_size)
    only_fine = AttentionBias(mask, (7,), 4.0, frozenset({site_name(1)}))
    coarse = synthetic.site(site_name(2))

    assert np.array_equal(
        synthetic.attention_logits(emb, only_fine, coarse),
        synthetic.attention_logits(emb, None, coarse),
    )
    assert not np.array_equal(
        synthetic.attention_logits(emb, only_fine, synthetic.site(site_name(1))),
        synthetic.attention_logits(emb, None, synthetic.site(site_name(1))),
    )


def test_synthetic_is_deterministic(schedule, rng):
    a = SyntheticAttentionBackend(schedule, {'crack': 0.9}, codec=PoolCodec(16), seed=5)
    b = SyntheticAttentionBackend(schedule, {'crack': 0.9}, codec=PoolCodec(16), seed=5)
    emb = a.encode_text('a photo of a bottle with crack')
    z = rng.standard_normal(a.capabilities.latent_shape)

    assert np.array_equal(
        a.predict_eps(z, schedule.t_start, emb),
        b.predict_eps(z, schedule.t_start, emb),
    )


def test_synthetic_unconditional_mean_is_background(synthetic):
    mean = synthetic.class_mean(None)

    np.testing.assert_allclose(mean, 0.5)


def test_synthetic_region_affinity_raises_word_logits(synthetic, schedule):
    placed = SyntheticAttentionBackend(
        schedule,
        token_targets={'crack': 0.9},
        token_regions={'crack': [(2, 2, 4, 4)]},
        region_gain=3.0,
        codec=PoolCodec(16),
    )
    emb = synthetic.encode_text('a photo of a bottle with crack')
    gain = np.zeros((8, 8))
    gain[2:6, 2:6] = 3.0

    for site in synthetic.sites:
        diff = placed.attention_logits(emb, None, site) - synthetic.attention_logits(emb, None, site)
        expected = np.zeros_like(diff)
        expected[:, 7] = gain[::site.factor, ::site.factor].reshape(-1)
        np.testing.assert_allclose(diff, expected, atol=1e-12)

    normal = synthetic.encode_text('a photo of a bottle')
    assert np.array_equal(placed.class_mean(normal), synthetic.class_mean(normal))


def test_synthetic_region_outside_latent_rejected(schedule):
    with pytest.raises(ValueError):
        SyntheticAttentionBackend(
            schedule,
            token_regions={'crack': [(6, 6, 4, 4)]},
            codec=PoolCodec(16),
        )


def test_create_backend_from_config(schedule):
    backend = create_backend(SyntheticBackendConfig(image_size=16), schedule)

    assert isinstance(backend, SyntheticAttentionBackend)
    assert backend.capabilities.latent_shape == (8, 8, 4)
    assert backend.capabilities.supports_attention_bias
