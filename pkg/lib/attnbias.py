# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from abc import ABC, abstractmethod
from collections.abc import Iterable
import dataclasses
import logging
from typing_extensions import override

import numpy as np
import numpy.typing as npt
from PIL import Image

from lib.grid import Grid, ImageGrid


logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class AttentionBias:
    mask: Grid
    anomaly_indices: tuple[int, ...]
    beta: float
    # Attention site name prefixes. Empty means every cross-attention site.
    layer_filter: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        mask = np.array(self.mask, dtype=np.float64)

        if mask.ndim != 2:
            raise ValueError(f'Attention prior must be 2D, got {mask.shape}')
        if np.any(mask < 0) or np.any(mask > 1):
            raise ValueError('Attention prior values must lie in [0, 1]')
        if self.beta < 0:
            raise ValueError(f'Negative attention bias: {self.beta}')

        mask.setflags(write=False)
        object.__setattr__(self, 'mask', mask)
        object.__setattr__(self, 'anomaly_indices', tuple(self.anomaly_indices))
        object.__setattr__(self, 'layer_filter', frozenset(self.layer_filter))

    def applies_to(self, site: str) -> bool:
        return not self.layer_filter or any(
            site.startswith(prefix) for prefix in self.layer_filter
        )

    def mask_flat(self, size: int | tuple[int, int]) -> npt.NDArray[np.float64]:
        return resize_prior(self.mask, size).reshape(-1)


def bias_logits(
    logits: npt.NDArray[np.float64],
    mask_flat: npt.NDArray[np.float64],
    anomaly_indices: Iterable[int],
    beta: float,
) -> npt.NDArray[np.float64]:
    """Add beta * mask to the anomaly-token columns of (..., N, Z) logits."""
    n, z = logits.shape[-2:]
    indices = list(anomaly_indices)

    if mask_flat.shape != (n,):
        raise ValueError(f'Prior has {mask_flat.shape} entries, logits have {n} rows')
    if any(j < 0 or j >= z for j in indices):
        raise IndexError(f'Anomaly token index outside [0, {z}): {indices}')

    out = logits.copy()
    if indices:
        out[..., indices] += beta * mask_flat[:, None]

    return out


def resize_prior(mask: Grid, size: int | tuple[int, int]) -> Grid:
    """Area-average down / nearest up to an attention site's resolution."""
    h, w = mask.shape
    rh, rw = (size, size) if isinstance(size, int) else size

    if rh < 1 or rw < 1:
        raise ValueError(f'Bad prior resolution: {size}')

    if (rh, rw) == (h, w):
        out = mask.astype(np.float64)
    elif h % rh == 0 and w % rw == 0:
        out = mask.reshape(rh, h // rh, rw, w // rw).mean(axis=(1, 3))
    elif rh % h == 0 and rw % w == 0:
        out = np.repeat(np.repeat(mask, rh // h, axis=0), rw // w, axis=1)
    else:
        resample = Image.Resampling.BOX if rh * rw < h * w else Image.Resampling.NEAREST
        image = Image.fromarray(mask.astype(np.float32))
        out = np.asarray(image.resize((rw, rh), resample=resample), dtype=np.float64)

    return np.clip(out, 0.0, 1.0)


class ForegroundProvider(ABC):
    name: str = 'provider'

    @abstractmethod
    def segment(self, image: ImageGrid) -> Grid:
        """Foreground mask at image resolution."""
        ...


class StaticForegroundProvider(ForegroundProvider):
    name = 'static'

    def __init__(self, mask: Grid) -> None:
        self.mask: Grid = np.asarray(mask, dtype=np.float64)

    @override
    def segment(self, image: ImageGrid) -> Grid:
        return self.mask


@dataclasses.dataclass(frozen=True, eq=False)
class ForegroundPrior:
    mask: Grid
    source: str
    fallback: bool


def foreground_prior(
    image: ImageGrid,
    provider: ForegroundProvider | None,
    latent_size: tuple[int, int],
) -> ForegroundPrior:
    if provider is None:
        logger.info('No foreground provider, using the whole-surface prior')
        return ForegroundPrior(np.ones(latent_size), 'fallback', True)

    try:
        raw = np.asarray(provider.segment(image), dtype=np.float64)
        if raw.shape not in (image.shape[:2], latent_size):
            raise ValueError(
                f'Mask shape {raw.shape} matches neither the image '
                f'{image.shape[:2]} nor the latent {latent_size}'
            )
    except Exception as e:
        logger.warning(f'Foreground provider {provider.name} failed: {e}')
        return ForegroundPrior(np.ones(latent_size), 'fallback', True)

    mask = resize_prior(np.clip(raw, 0.0, 1.0), latent_size)

    return ForegroundPrior(mask, provider.name, False)
