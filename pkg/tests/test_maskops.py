# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import math

import numpy as np
import pytest

from lib.maskops import (
    BinaryMask,
    DeltaMap,
    clean,
    extract_mask,
    normalize,
    smooth,
    threshold,
    to_image_mask,
)


def blob_map(rng: np.random.Generator) -> np.ndarray:
    s = rng.uniform(0.0, 0.05, size=(32, 32))
    s[10:18, 12:22] += 1.0
    return s


def test_constant_map_normalizes_to_zero():
    assert np.array_equal(normalize(np.full((8, 8), 3.7)).values, np.zeros((8, 8)))
    assert np.array_equal(normalize(np.zeros((8, 8))).values, np.zeros((8, 8)))


def test_two_level_map():
    s = np.zeros((8, 8))
    s[:, 4:] = 10.0

    m = normalize(s)

    assert np.array_equal(m.values, s / 10.0)


def test_random_map_range_and_order(rng):
    s = rng.uniform(size=(32, 32))
    m = normalize(s, 'mid')

    assert m.values.min() == 0.0
    assert m.values.max() == 1.0
    assert m.provenance == 'mid'

    order = np.argsort(s, axis=None)
    assert np.all(np.diff(m.values.ravel()[order]) >= 0)


def test_normalize_rejects_negative():
    with pytest.raises(ValueError):
        normalize(np.array([[0.0, -1.0]]))


def test_delta_map_range_checked():
    with pytest.raises(ValueError):
        DeltaMap(np.full((2, 2), 1.5))


def test_smooth_zero_sigma_is_identity(rng):
    m = DeltaMap(rng.uniform(size=(8, 8)))

    assert smooth(m, 0.0) is m


def test_smooth_constant_unchanged():
    m = DeltaMap(np.full((9, 9), 0.4))

    np.testing.assert_allclose(smooth(m, 1.0).values, 0.4, atol=1e-12)


def test_smooth_impulse_matches_sampled_gaussian():
    impulse = np.zeros((21, 21))
    impulse[10, 10] = 1.0

    out = smooth(DeltaMap(impulse), 1.0).values

    x = np.arange(-4, 5)
    k = np.exp(-0.5 * x ** 2)
    k /= k.sum()
    expected = np.zeros((21, 21))
    expected[6:15, 6:15] = np.outer(k, k)

    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_smooth_rejects_negative_sigma():
    with pytest.raises(ValueError):
        smooth(DeltaMap(np.zeros((2, 2))), -1.0)


@pytest.mark.parametrize('tau', [0.35, 0.6])
def test_threshold_is_strict(tau):
    m = DeltaMap(np.full((4, 4), tau))

    assert threshold(m, tau).pixel_count == 0


def test_threshold_defaults_on_ramp():
    m = DeltaMap(np.array([[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]]))

    assert threshold(m, 0.6).pixel_count == 4
    assert threshold(m, 0.35).pixel_count == 7


@pytest.mark.parametrize('tau', [-0.1, 1.1])
def test_threshold_range(tau):
    with pytest.raises(ValueError):
        threshold(DeltaMap(np.zeros((2, 2))), tau)


def test_binary_mask_validation():
    with pytest.raises(ValueError):
        BinaryMask(np.array([[0.0, 0.5]]))

    mask = BinaryMask(np.array([[0, 1], [1, 1]]))
    assert mask.pixel_count == 3
    assert mask == BinaryMask(np.array([[False, True], [True, True]]))


def test_clean_empty():
    empty = BinaryMask(np.zeros((8, 8), dtype=bool))

    assert clean(empty, 4, 3) == empty


def test_clean_removes_isolated_pixel():
    values = np.zeros((8, 8), dtype=bool)
    values[3, 3] = True

    assert clean(BinaryMask(values), 2, 3).pixel_count == 0
    assert clean(BinaryMask(values), 2, 1).pixel_count == 0
    assert clean(BinaryMask(values), 0, 1).pixel_count == 1


def test_clean_keeps_solid_block():
    values = np.zeros((11, 11), dtype=bool)
    values[3:8, 3:8] = True

    assert clean(BinaryMask(values), 4, 3) == BinaryMask(values)


def test_clean_keeps_block_on_border():
    values = np.zeros((11, 11), dtype=bool)
    values[0:5, 0:5] = True

    assert clean(BinaryMask(values), 4, 3) == BinaryMask(values)


def test_component_filter_is_four_connected():
    values = np.zeros((6, 6), dtype=bool)
    values[1, 1] = values[2, 2] = True
    values[4, 3:6] = True

    out = clean(BinaryMask(values), 2, 1)

    expected = np.zeros((6, 6), dtype=bool)
    expected[4, 3:6] = True
    assert out == BinaryMask(expected)


def test_clean_is_idempotent():
    values = np.zeros((32, 32), dtype=bool)
    values[5:12, 5:14] = True
    values[20:26, 18:30] = True
    values[16, 2:10] = True
    values[2, 28] = values[28, 2] = True
    mask = BinaryMask(values)

    once = clean(mask, 4, 3)

    assert clean(once, 4, 3) == once


def test_clean_parameter_errors():
    mask = BinaryMask(np.ones((4, 4), dtype=bool))

    with pytest.raises(ValueError):
        clean(mask, 4, 2)
    with pytest.raises(ValueError):
        clean(mask, -1, 3)


def test_to_image_mask():
    one = BinaryMask(np.ones((1, 1), dtype=bool))
    assert to_image_mask(one, (4, 4)) == BinaryMask(np.ones((4, 4), dtype=bool))

    checker = BinaryMask(np.indices((2, 2)).sum(axis=0) % 2)
    assert to_image_mask(checker, (2, 2)) == checker

    up = to_image_mask(checker, (4, 4))
    assert up == BinaryMask(np.kron(checker.values, np.ones((2, 2), dtype=bool)))

    with pytest.raises(ValueError):
        to_image_mask(checker, (5, 4))


@pytest.mark.parametrize('c', [0.1, 10.0])
def test_mask_is_scale_invariant(rng, c):
    s = blob_map(rng)

    _, mask = extract_mask(s, 0.35, 1.0, 4, 3)
    _, scaled = extract_mask(c * s, 0.35, 1.0, 4, 3)

    assert mask.pixel_count > 0
    assert mask == scaled


def test_extract_mask_recovers_blob(rng):
    m, mask = extract_mask(blob_map(rng), 0.6, 1.0, 4, 3, provenance='final')

    assert m.provenance == 'final'
    assert mask.values[10:18, 12:22][1:-1, 1:-1].all()
    assert not mask.values[:8].any()


def test_extract_mask_order_thresholds_smoothed_map(rng):
    s = blob_map(rng)

    m, mask = extract_mask(s, 0.5, 1.0, 0, 1)

    assert mask == threshold(smooth(normalize(s), 1.0), 0.5)
    assert np.array_equal(m.values, smooth(normalize(s), 1.0).values)
    assert math.isclose(float(m.values.max()), 1.0, abs_tol=0.1)
