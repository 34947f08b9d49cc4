# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from collections.abc import Mapping, Sequence
import dataclasses
import logging
import math
from typing import TYPE_CHECKING, TypeAlias
from typing_extensions import override

import numpy as np
import numpy.typing as npt

from lib.attnbias import AttentionBias, bias_logits, resize_prior
from lib.backends import Capabilities, DenoiserBackend
from lib.backends.toy import (
    Codec,
    HashEmbedder,
    gaussian_posterior_eps,
    make_codec,
)
from lib.grid import Grid, ImageGrid, LatentGrid
from lib.promptopt import PromptEmbedding
from lib.schedule import Schedule

if TYPE_CHECKING:
    from lib.config import SyntheticBackendConfig


logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class AttentionSite:
    name: str
    factor: int
    height: int
    width: int
    # (N, d_h) queries, fixed at construction.
    queries: npt.NDArray[np.float64]

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width


def site_name(factor: int) -> str:
    return f'cross_attn.{factor}x'


def softmax(x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def fourier_features(
    height: int,
    width: int,
    num_features: int,
    rng: np.random.Generator,
) -> npt.NDArray[np.float64]:
    ys, xs = np.meshgrid(
        (np.arange(height) + 0.5) / height,
        (np.arange(width) + 0.5) / width,
        indexing='ij',
    )
    positions = np.stack([ys.ravel(), xs.ravel()], axis=-1)
    freqs = rng.normal(0.0, 3.0, size=(2, num_features))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=num_features)

    return math.sqrt(2.0 / num_features) * np.cos(2.0 * math.pi * positions @ freqs + phases)


Region: TypeAlias = tuple[int, int, int, int]


def region_mask(size: tuple[int, int], regions: Sequence[Sequence[int]]) -> Grid:
    """Union of (top, left, height, width) rectangles as a 0/1 grid."""
    h, w = size
    mask = np.zeros(size, dtype=np.float64)

    for region in regions:
        top, left, rh, rw = (int(v) for v in region)
        if rh < 1 or rw < 1 or top < 0 or left < 0 or top + rh > h or left + rw > w:
            raise ValueError(f'Region {list(region)} outside the {h}x{w} latent')
        mask[top:top + rh, left:left + rw] = 1.0

    return mask


class SyntheticAttentionBackend(DenoiserBackend):
    def __init__(
        self,
        schedule: Schedule,
        token_targets: Mapping[str, float | Sequence[float]] | None = None,
        token_regions: Mapping[str, Sequence[Sequence[int]]] | None = None,
        region_gain: float = 2.8,
        background: float = 0.5,
        data_std: float = 0.01,
        head_dim: int = 4,
        qk_scale: float = 4.0,
        num_features: int = 16,
        site_factors: Sequence[int] = (1, 2),
        codec: Codec | None = None,
        embedder: HashEmbedder | None = None,
        seed: int = 0,
    ) -> None:
        codec = codec or make_codec('pool', 64, 4)
        embedder = embedder or HashEmbedder()
        h, w, c = codec.latent_shape

        if not site_factors:
            raise ValueError('At least one attention site is required')
        if any(f < 1 or h % f or w % f for f in site_factors):
            raise ValueError(f'Site factors {list(site_factors)} must divide {h}x{w}')

        super().__init__(
            Capabilities(
                latent_shape=codec.latent_shape,
                image_shape=codec.image_shape,
                embedding_dim=embedder.dim,
                supports_attention_bias=True,
                codec=codec.description,
            ),
            schedule,
        )

        self.background: npt.NDArray[np.float64] = np.full(c, background, dtype=np.float64)
        self.targets: dict[str, npt.NDArray[np.float64]] = {}
        for word, target in (token_targets or {}).items():
            value = np.broadcast_to(np.asarray(target, dtype=np.float64), (c,)).copy()
            value.setflags(write=False)
            self.targets[word.lower()] = value

        # Positional affinity: extra logit for a word at positions inside its
        # regions, independent of the key.
        self.regions: dict[str, Grid] = {
            word.lower(): region_mask((h, w), regions)
            for word, regions in (token_regions or {}).items()
        }
        self.region_gain: float = region_gain

        self.data_std: float = data_std
        self.head_dim: int = head_dim
        self.qk_scale: float = qk_scale
        self.codec: Codec = codec
        self.embedder: HashEmbedder = embedder

        rng = np.random.default_rng(seed)
        w_q = rng.standard_normal((num_features, head_dim)) / math.sqrt(num_features)
        self.w_k: npt.NDArray[np.float64] = \
            rng.standard_normal((embedder.dim, head_dim)) / math.sqrt(embedder.dim)
        self.w_k.setflags(write=False)

        sites = []
        for f in site_factors:
            features = fourier_features(h // f, w // f, num_features, rng)
            queries = features @ w_q
            queries.setflags(write=False)
            sites.append(AttentionSite(site_name(f), f, h // f, w // f, queries))
        self.sites: tuple[AttentionSite, ...] = tuple(sites)

    @classmethod
    def from_config(
        cls,
        cfg: 'SyntheticBackendConfig',
        schedule: Schedule,
    ) -> 'SyntheticAttentionBackend':
        return cls(
            schedule,
            token_targets=cfg.token_targets,
            token_regions=cfg.token_regions,
            region_gain=cfg.region_gain,
            background=cfg.background,
            data_std=cfg.data_std,
            head_dim=cfg.head_dim,
            qk_scale=cfg.qk_scale,
            num_features=cfg.num_features,
            site_factors=cfg.site_factors,
            codec=make_codec(cfg.codec, cfg.image_size, cfg.latent_channels),
            embedder=HashEmbedder(cfg.embedding_dim, cfg.seed),
            seed=cfg.seed,
        )

    def site(self, name: str) -> AttentionSite:
        for site in self.sites:
            if site.name == name:
                return site
        raise KeyError(f'No attention site named {name!r}')

    def token_values(self, embedding: PromptEmbedding) -> npt.NDArray[np.float64]:
        return np.stack([self.targets.get(w, self.background) for w in embedding.words])

    def attention_logits(
        self,
        embedding: PromptEmbedding,
        bias: AttentionBias | None,
        site: AttentionSite,
    ) -> npt.NDArray[np.float64]:
        """Raw Q K^T logits plus positional affinity, biased when the site is
        selected, before the 1/sqrt(d_h) scaling."""
        keys = embedding.vectors @ self.w_k
        logits = self.qk_scale * (site.queries @ keys.T)

        for j, word in enumerate(embedding.words):
            region = self.regions.get(word)
            if region is not None:
                logits[:, j] += self.region_gain * resize_prior(region, site.size).reshape(-1)

        if bias is not None and bias.applies_to(site.name):
            logits = bias_logits(
                logits, bias.mask_flat(site.size), bias.anomaly_indices, bias.beta,
            )

        return logits

    def attention_probs(
        self,
        embedding: PromptEmbedding,
        bias: AttentionBias | None,
        site: str,
    ) -> npt.NDArray[np.float64]:
        logits = self.attention_logits(embedding, bias, self.site(site))
        return softmax(logits / math.sqrt(self.head_dim))

    def class_mean(
        self,
        embedding: PromptEmbedding | None,
        bias: AttentionBias | None = None,
    ) -> LatentGrid:
        h, w, c = self.capabilities.latent_shape
        if embedding is None:
            return np.broadcast_to(self.background, (h, w, c)).copy()

        values = self.token_values(embedding)
        mean = np.zeros((h, w, c), dtype=np.float64)

        for site in self.sites:
            probs = self.attention_probs(embedding, bias, site.name)
            out = (probs @ values).reshape(site.height, site.width, c)
            mean += np.repeat(np.repeat(out, site.factor, axis=0), site.factor, axis=1)

        return mean / len(self.sites)

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
            self.class_mean(embedding, bias),
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
