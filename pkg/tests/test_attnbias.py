# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import logging

import numpy as np
import pytest

from lib.attnbias import (
    AttentionBias,
    ForegroundProvider,
    StaticForegroundProvider,
    bias_logits,
    foreground_prior,
    resize_prior,
)
from lib.backends.synthetic import softmax


class FailingProvider(ForegroundProvider):
    name = 'failing'

    def segment(self, image):
        raise RuntimeError('segmenter crashed')


def test_bias_off_is_identity(rng):
    logits = rng.standard_normal((6, 4))
    out = bias_logits(logits, rng.uniform(size=6), [1, 2], 0.0)

    assert np.array_equal(out, logits)


def test_single_cell_bias():
    logits = np.zeros((2, 3))
    out = bias_logits(logits, np.array([1.0, 0.0]), [2], 4.0)

    expected = np.zeros((2, 3))
    expected[0, 2] = 4.0
    assert np.array_equal(out, expected)
    assert np.array_equal(logits, np.zeros((2, 3)))


def test_bias_matches_per_cell_loop(rng):
    logits = rng.standard_normal((2, 12, 7))
    mask = rng.uniform(size=12)
    anomaly = [1, 4]
    beta = 2.5

    out = bias_logits(logits, mask, anomaly, beta)

    expected = logits.copy()
    for b in range(2):
        for u in range(12):
            for j in range(7):
                if j in anomaly:
                    expected[b, u, j] = logits[b, u, j] + beta * mask[u]
    assert np.array_equal(out, expected)


def test_non_anomaly_columns_preserved(rng):
    logits = rng.standard_normal((16, 9))
    out = bias_logits(logits, rng.uniform(size=16), [6, 7], 3.0)

    for j in range(9):
        if j not in (6, 7):
            assert np.array_equal(out[:, j], logits[:, j])


@pytest.mark.parametrize('beta', [0.0, 1.0, 10.0, 100.0])
def test_rows_sum_to_one_after_softmax(rng, beta):
    logits = rng.standard_normal((16, 9))
    probs = softmax(bias_logits(logits, rng.uniform(size=16), [6], beta) / 2.0)

    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_bias_errors(rng):
    logits = rng.standard_normal((4, 3))

    with pytest.raises(ValueError):
        bias_logits(logits, np.ones(5), [0], 1.0)
    with pytest.raises(IndexError):
        bias_logits(logits, np.ones(4), [3], 1.0)


def test_attention_bias_validation():
    with pytest.raises(ValueError):
        AttentionBias(np.full((2, 2), 1.5), (1,), 1.0)
    with pytest.raises(ValueError):
        AttentionBias(np.ones((2, 2)), (1,), -1.0)
    with pytest.raises(ValueError):
        AttentionBias(np.ones(4), (1,), 1.0)


def test_layer_filter_prefixes():
    everywhere = AttentionBias(np.ones((2, 2)), (1,), 1.0)
    filtered = AttentionBias(np.ones((2, 2)), (1,), 1.0, frozenset({'up_blocks'}))

    assert everywhere.applies_to('down_blocks.0.attentions.0')
    assert filtered.applies_to('up_blocks.1.attentions.2.transformer_blocks.0.attn2')
    assert not filtered.applies_to('down_blocks.0.attentions.0')


def test_resize_identity(rng):
    mask = rng.uniform(size=(8, 8))

    assert np.array_equal(resize_prior(mask, 8), mask)


@pytest.mark.parametrize('size', [1, 2, 3, 4, 6, 8, 16, (4, 2)])
def test_resize_preserves_constant(size):
    out = resize_prior(np.ones((8, 8)), size)

    np.testing.assert_allclose(out, 1.0)


def test_resize_checkerboard_averages():
    checker = np.indices((4, 4)).sum(axis=0) % 2

    np.testing.assert_allclose(resize_prior(checker.astype(float), 2), 0.5)


def test_resize_nearest_upsample():
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])

    out = resize_prior(mask, 4)

    assert np.array_equal(out, np.kron(mask, np.ones((2, 2))))


def test_resize_rejects_bad_size():
    with pytest.raises(ValueError):
        resize_prior(np.ones((4, 4)), 0)


def test_fallback_prior_is_whole_surface():
    prior = foreground_prior(np.zeros((8, 8, 3)), None, (4, 4))

    assert prior.fallback
    assert prior.source == 'fallback'
    assert np.array_equal(prior.mask, np.ones((4, 4)))


def test_binary_provider_passes_through():
    latent = np.zeros((4, 4))
    latent[1:3, 0:2] = 1.0
    image_mask = np.kron(latent, np.ones((2, 2)))

    prior = foreground_prior(np.zeros((8, 8, 3)), StaticForegroundProvider(image_mask), (4, 4))

    assert not prior.fallback
    assert prior.source == 'static'
    assert np.array_equal(prior.mask, latent)


def test_provider_values_clamped():
    raw = np.full((4, 4), 3.0)
    raw[0, 0] = -2.0

    prior = foreground_prior(np.zeros((8, 8, 3)), StaticForegroundProvider(raw), (4, 4))

    assert prior.mask.min() == 0.0
    assert prior.mask.max() == 1.0


def test_soft_prior_accepted():
    soft = np.full((4, 4), 0.25)

    prior = foreground_prior(np.zeros((8, 8, 3)), StaticForegroundProvider(soft), (4, 4))

    np.testing.assert_allclose(prior.mask, 0.25)


def test_provider_failure_falls_back(caplog):
    with caplog.at_level(logging.WARNING):
        prior = foreground_prior(np.zeros((8, 8, 3)), FailingProvider(), (4, 4))

    assert prior.fallback
    assert np.array_equal(prior.mask, np.ones((4, 4)))
    assert 'segmenter crashed' in caplog.text


def test_provider_wrong_shape_falls_back():
    prior = foreground_prior(
        np.zeros((8, 8, 3)), StaticForegroundProvider(np.ones((5, 5))), (4, 4),
    )

    assert prior.fallback
