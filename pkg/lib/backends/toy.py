# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from abc import ABC, abstractmethod
import hashlib
import math
import re
from typing_extensions import override

import numpy as np
import numpy.typing as npt

from lib.grid import ImageGrid, LatentGrid
from lib.promptopt import PromptEmbedding


START_TOKEN = '<|startoftext|>'
END_TOKEN = '<|endoftext|>'

_WORD = re.compile(r"[\w']+")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def prompt_key(text: str) -> str:
    """Canonical form used to look up per-prompt class means."""
    return ' '.join(tokenize(text))


def token_id(word: str) -> int:
    digest = hashlib.blake2b(word.encode('UTF-8'), digest_size=4).digest()
    return int.from_bytes(digest, 'little')


class HashEmbedder:
    def __init__(self, dim: int = 64, seed: int = 0) -> None:
        if dim <= 0:
            raise ValueError(f'Bad embedding dimension: {dim}')

        self.dim: int = dim
        self.seed: int = seed

    def vector(self, word: str) -> npt.NDArray[np.float64]:
        rng = np.random.default_rng([self.seed, token_id(word)])
        return rng.standard_normal(self.dim) / math.sqrt(self.dim)

    def embed(self, text: str) -> PromptEmbedding:
        words = [START_TOKEN, *tokenize(text), END_TOKEN]
        if len(words) == 2:
            raise ValueError(f'Prompt has no tokens: {text!r}')

        return PromptEmbedding(
            key=prompt_key(text),
            tokens=tuple(token_id(w) for w in words),
            words=tuple(words),
            vectors=np.stack([self.vector(w) for w in words]),
            special_indices=frozenset({0, len(words) - 1}),
        )


class Codec(ABC):
    image_shape: tuple[int, int, int]
    latent_shape: tuple[int, int, int]
    description: str

    @abstractmethod
    def encode(self, image: ImageGrid) -> LatentGrid:
        ...

    @abstractmethod
    def decode(self, z0: LatentGrid) -> ImageGrid:
        ...


class IdentityCodec(Codec):
    def __init__(self, shape: tuple[int, int, int]) -> None:
        self.image_shape = shape
        self.latent_shape = shape
        self.description = 'identity (lossless)'

    @override
    def encode(self, image: ImageGrid) -> LatentGrid:
        return np.array(image, dtype=np.float64)

    @override
    def decode(self, z0: LatentGrid) -> ImageGrid:
        return np.array(z0, dtype=np.float64)


class PoolCodec(Codec):
    # Average-pooled RGB plus a luminance channel.

    def __init__(self, image_size: int = 64, factor: int = 2) -> None:
        if image_size % factor:
            raise ValueError(f'Image size {image_size} not divisible by {factor}')

        size = image_size // factor
        self.factor: int = factor
        self.image_shape = (image_size, image_size, 3)
        self.latent_shape = (size, size, 4)
        self.description = f'{factor}x average pool / nearest unpool'

    @override
    def encode(self, image: ImageGrid) -> LatentGrid:
        h, w, c = self.image_shape
        f = self.factor
        pooled = image.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))
        return np.concatenate([pooled, pooled.mean(axis=-1, keepdims=True)], axis=-1)

    @override
    def decode(self, z0: LatentGrid) -> ImageGrid:
        f = self.factor
        return np.repeat(np.repeat(z0[..., :3], f, axis=0), f, axis=1)


def make_codec(kind: str, image_size: int, latent_channels: int) -> Codec:
    if kind == 'pool':
        codec = PoolCodec(image_size)
    elif kind == 'identity':
        codec = IdentityCodec((image_size, image_size, 3))
    else:
        raise ValueError(f'Unknown codec: {kind!r}')

    if codec.latent_shape[2] != latent_channels:
        raise ValueError(
            f'{kind} codec yields {codec.latent_shape[2]} latent channels, '
            f'expected {latent_channels}'
        )

    return codec


def gaussian_posterior_eps(
    z_t: LatentGrid,
    alpha_bar: float,
    mean: LatentGrid,
    data_std: float,
) -> LatentGrid:
    """E[eps | z_t] when z_0 ~ N(mean, data_std^2 I)."""
    scale = math.sqrt(1.0 - alpha_bar) / (alpha_bar * data_std ** 2 + 1.0 - alpha_bar)
    return scale * (z_t - math.sqrt(alpha_bar) * mean)
