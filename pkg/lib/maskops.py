# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import dataclasses
import logging
from typing import Literal, TypeAlias

import numpy as np
import numpy.typing as npt
from scipy import ndimage

from lib.grid import Grid


logger = logging.getLogger(__name__)


Provenance: TypeAlias = Literal['mid', 'final']


# Percentiles used for robust min-max normalization.
CLIP_LOW = 1.0
CLIP_HIGH = 99.0

# Relative range below which a map counts as constant.
CONSTANT_RTOL = 1e-9

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclasses.dataclass(frozen=True, eq=False)
class DeltaMap:
    values: Grid
    provenance: Provenance | None = None

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f'Delta map must be 2D, got {values.shape}')
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError('Delta map values must lie in [0, 1]')

        values.setflags(write=False)
        object.__setattr__(self, 'values', values)


@dataclasses.dataclass(frozen=True, eq=False)
class BinaryMask:
    values: npt.NDArray[np.bool_]

    def __post_init__(self) -> None:
        raw = np.asarray(self.values)
        if raw.ndim != 2:
            raise ValueError(f'Mask must be 2D, got {raw.shape}')
        if not np.all((raw == 0) | (raw == 1)):
            raise ValueError('Mask values must be 0 or 1')

        values = raw.astype(np.bool_)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.values))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def as_float(self) -> Grid:
        return self.values.astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.values, other.values))

    def __hash__(self) -> int:
        return hash((self.shape, self.values.tobytes()))


def normalize(s: Grid, provenance: Provenance | None = None) -> DeltaMap:
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError('Delta accumulator has negative entries')

    lo, hi = np.percentile(s, [CLIP_LOW, CLIP_HIGH])
    peak = float(np.max(s)) if s.size else 0.0

    if hi - lo <= CONSTANT_RTOL * peak:
        return DeltaMap(np.zeros_like(s), provenance)

    out = (np.clip(s, lo, hi) - lo) / (hi - lo)

    return DeltaMap(np.clip(out, 0.0, 1.0), provenance)


def smooth(m: DeltaMap, sigma: float) -> DeltaMap:
    if sigma < 0:
        raise ValueError(f'Negative smoothing sigma: {sigma}')
    if sigma == 0:
        return m

    blurred = ndimage.gaussian_filter(m.values, sigma=sigma, mode='reflect')

    return DeltaMap(np.clip(blurred, 0.0, 1.0), m.provenance)


def threshold(m: DeltaMap, tau: float) -> BinaryMask:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f'Threshold outside [0, 1]: {tau}')

    return BinaryMask(m.values > tau)


def clean(mask: BinaryMask, min_component: int, kernel: int) -> BinaryMask:
    """Open, close, then drop 4-connected components below min_component."""
    if min_component < 0:
        raise ValueError(f'Negative minimum component size: {min_component}')
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f'Kernel size must be odd and positive: {kernel}')

    if mask.pixel_count == 0:
        return mask

    structure = np.ones((kernel, kernel), dtype=np.bool_)

    # Replicated borders so shapes touching the edge are not eroded by it.
    pad = kernel
    values = np.pad(mask.values, pad, mode='edge')
    values = ndimage.binary_opening(values, structure=structure)
    values = ndimage.binary_closing(values, structure=structure)
    values = values[pad:-pad, pad:-pad]

    if min_component > 0:
        labels, count = ndimage.label(values, structure=FOUR_CONNECTED)
        if count:
            sizes = np.bincount(labels.ravel())
            keep = sizes >= min_component
            keep[0] = False
            values = keep[labels]

    return BinaryMask(values)


def extract_mask(
    s: Grid,
    tau: float,
    sigma: float,
    min_component: int,
    kernel: int,
    provenance: Provenance | None = None,
) -> tuple[DeltaMap, BinaryMask]:
    m = smooth(normalize(s, provenance), sigma)
    mask = clean(threshold(m, tau), min_component, kernel)

    logger.debug(
        f'{provenance or "delta"} mask: tau={tau}, {mask.pixel_count} pixel(s)'
    )

    return m, mask


def to_image_mask(mask: BinaryMask, image_size: tuple[int, int]) -> BinaryMask:
    h, w = mask.shape
    ih, iw = image_size

    if ih % h or iw % w:
        raise ValueError(
            f'Image size {image_size} is not an integer multiple of {mask.shape}'
        )

    values = np.repeat(np.repeat(mask.values, ih // h, axis=0), iw // w, axis=1)

    return BinaryMask(values)
