# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from collections.abc import Mapping
import logging
from typing import TYPE_CHECKING
from typing_extensions import override

import numpy as np

from lib import artifacts
from lib.attnbias import AttentionBias
from lib.backends import Capabilities, DenoiserBackend, UnknownPrompt
from lib.backends.toy import (
    Codec,
    HashEmbedder,
    gaussian_posterior_eps,
    make_codec,
    prompt_key,
)
from lib.grid import ImageGrid, LatentGrid, ShapeMismatch
from lib.promptopt import PromptEmbedding
from lib.schedule import Schedule

if TYPE_CHECKING:
    from lib.config import AnalyticBackendConfig


logger = logging.getLogger(__name__)


class AnalyticGaussianBackend(DenoiserBackend):
    def __init__(
        self,
        schedule: Schedule,
        class_means: Mapping[str, LatentGrid],
        unconditional_mean: LatentGrid,
        data_std: float = 0.01,
        codec: Codec | None = None,
        embedder: HashEmbedder | None = None,
    ) -> None:
        codec = codec or make_codec('pool', 64, 4)
        embedder = embedder or HashEmbedder()

        if data_std < 0:
            raise ValueError(f'Negative data std: {data_std}')

        means: dict[str, LatentGrid] = {}
        for prompt, mean in class_means.items():
            mean = np.array(mean, dtype=np.float64)
            if mean.shape != codec.latent_shape:
                raise ShapeMismatch(
                    f'Mean for {prompt!r} has shape {mean.shape}, '
                    f'expected {codec.latent_shape}'
                )
            mean.setflags(write=False)
            means[prompt_key(prompt)] = mean

        uncond = np.array(unconditional_mean, dtype=np.float64)
        if uncond.shape != codec.latent_shape:
            raise ShapeMismatch(
                f'Unconditional mean has shape {uncond.shape}, '
                f'expected {codec.latent_shape}'
            )
        uncond.setflags(write=False)

        super().__init__(
            Capabilities(
                latent_shape=codec.latent_shape,
                image_shape=codec.image_shape,
                embedding_dim=embedder.dim,
                supports_attention_bias=False,
                codec=codec.description,
            ),
            schedule,
        )

        self.class_means: Mapping[str, LatentGrid] = means
        self.unconditional_mean: LatentGrid = uncond
        self.data_std: float = data_std
        self.codec: Codec = codec
        self.embedder: HashEmbedder = embedder

    @classmethod
    def from_config(
        cls,
        cfg: 'AnalyticBackendConfig',
        schedule: Schedule,
    ) -> 'AnalyticGaussianBackend':
        class_means = {}
        for prompt, path in cfg.means.items():
            logger.info(f'Loading class mean for {prompt!r}: {path}')
            class_means[prompt] = artifacts.read_grid(path)

        return cls(
            schedule,
            class_means,
            artifacts.read_grid(cfg.unconditional_mean),
            data_std=cfg.data_std,
            codec=make_codec(cfg.codec, cfg.image_size, cfg.latent_channels),
            embedder=HashEmbedder(cfg.embedding_dim, cfg.seed),
        )

    def mean_for(self, embedding: PromptEmbedding | None) -> LatentGrid:
        if embedding is None:
            return self.unconditional_mean

        try:
            return self.class_means[embedding.key]
        except KeyError:
            raise UnknownPrompt(f'No class mean registered for {embedding.key!r}')

    @override
    def _predict_eps(
        self,
        z_t: LatentGrid,
        t: int,
        embedding: PromptEmbedding | None,
        bias: AttentionBias | None,
    ) -> LatentGrid:
        return gaussian_posterior_eps(
            z_t,
            self.schedule.alpha_bar(t),
            self.mean_for(embedding),
            self.data_std,
        )

    @override
    def _encode(self, image: ImageGrid) -> LatentGrid:
        return self.codec.encode(image)

    @override
    def _decode(self, z0: LatentGrid) -> ImageGrid:
        return self.codec.decode(z0)

    @override
    def _encode_text(self, text: str) -> PromptEmbedding:
        return self.embedder.embed(text)
