# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from abc import ABC, abstractmethod
from collections.abc import Sequence
import dataclasses
import logging
from typing import TYPE_CHECKING, Callable

import numpy as np

from lib.attnbias import AttentionBias
from lib.grid import ImageGrid, LatentGrid, ShapeMismatch
from lib.promptopt import PromptEmbedding
from lib.schedule import Schedule

if TYPE_CHECKING:
    from lib.config import BackendConfig


logger = logging.getLogger(__name__)


class BackendError(Exception):
    pass


class UnsupportedCapability(BackendError):
    pass


class UnknownPrompt(BackendError):
    pass


@dataclasses.dataclass(frozen=True)
class Capabilities:
    latent_shape: tuple[int, int, int]
    image_shape: tuple[int, int, int]
    embedding_dim: int
    supports_attention_bias: bool
    # Human-readable description of the encode/decode round trip.
    codec: str

    @property
    def latent_size(self) -> tuple[int, int]:
        return self.latent_shape[0], self.latent_shape[1]


class DenoiserBackend(ABC):
    def __init__(self, capabilities: Capabilities, schedule: Schedule) -> None:
        self.capabilities: Capabilities = capabilities
        self.schedule: Schedule = schedule

    def predict_eps(
        self,
        z_t: LatentGrid,
        t: int,
        embedding: PromptEmbedding | None,
        bias: AttentionBias | None = None,
    ) -> LatentGrid:
        if z_t.shape != self.capabilities.latent_shape:
            raise ShapeMismatch(
                f'Latent shape {z_t.shape} != {self.capabilities.latent_shape}'
            )
        if bias is not None and not self.capabilities.supports_attention_bias:
            raise UnsupportedCapability(
                f'{type(self).__name__} cannot bias cross-attention'
            )
        if embedding is not None and embedding.dim != self.capabilities.embedding_dim:
            raise ShapeMismatch(
                f'Embedding dim {embedding.dim} != {self.capabilities.embedding_dim}'
            )

        return self._predict_eps(z_t, t, embedding, bias)

    def encode(self, image: ImageGrid) -> LatentGrid:
        if image.shape != self.capabilities.image_shape:
            raise ShapeMismatch(
                f'Image shape {image.shape} != {self.capabilities.image_shape}'
            )
        return self._encode(image)

    def decode(self, z0: LatentGrid) -> ImageGrid:
        if z0.shape != self.capabilities.latent_shape:
            raise ShapeMismatch(
                f'Latent shape {z0.shape} != {self.capabilities.latent_shape}'
            )
        return self._decode(z0)

    def encode_text(self, prompt: str | Sequence[str]) -> PromptEmbedding:
        text = prompt if isinstance(prompt, str) else ' '.join(prompt)
        if not text.strip():
            raise ValueError('Empty prompt')
        return self._encode_text(text)

    @abstractmethod
    def _predict_eps(
        self,
        z_t: LatentGrid,
        t: int,
        embedding: PromptEmbedding | None,
        bias: AttentionBias | None,
    ) -> LatentGrid:
        ...

    @abstractmethod
    def _encode(self, image: ImageGrid) -> LatentGrid:
        ...

    @abstractmethod
    def _decode(self, z0: LatentGrid) -> ImageGrid:
        ...

    @abstractmethod
    def _encode_text(self, text: str) -> PromptEmbedding:
        ...

    def round_trip_psnr(self, image: ImageGrid) -> float | None:
        restored = np.clip(self.decode(self.encode(image)), 0.0, 1.0)
        mse = float(np.mean((restored - image) ** 2))
        if mse == 0.0:
            return None
        return float(10.0 * np.log10(1.0 / mse))


def all_backends() -> dict[str, Callable[['BackendConfig', Schedule], DenoiserBackend]]:
    from lib.backends.analytic import AnalyticGaussianBackend
    from lib.backends.stable_diffusion import StableDiffusionBackend
    from lib.backends.synthetic import SyntheticAttentionBackend

    return {
        'analytic': AnalyticGaussianBackend.from_config,
        'synthetic': SyntheticAttentionBackend.from_config,
        'stable-diffusion': StableDiffusionBackend.from_config,
    }


def create_backend(cfg: 'BackendConfig', schedule: Schedule) -> DenoiserBackend:
    constructors = all_backends()
    if cfg.kind not in constructors:
        raise BackendError(f'Unknown backend: {cfg.kind!r}')

    logger.info(f'Creating {cfg.kind} backend')

    return constructors[cfg.kind](cfg, schedule)
