# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from collections.abc import Iterable, Sequence
import dataclasses
import logging
from typing import ClassVar, TypeAlias

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field


logger = logging.getLogger(__name__)


Vector: TypeAlias = npt.NDArray[np.float64]


class NoAnomalyTokens(ValueError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class PromptEmbedding:
    key: str
    tokens: tuple[int, ...]
    words: tuple[str, ...]
    vectors: npt.NDArray[np.float64]
    anomaly_indices: frozenset[int] = frozenset()
    special_indices: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        vectors = np.array(self.vectors, dtype=np.float64)
        z = len(self.tokens)

        if vectors.ndim != 2 or vectors.shape[0] != z:
            raise ValueError(f'Expected {z} embedding rows, got {vectors.shape}')
        if len(self.words) != z:
            raise ValueError(f'Expected {z} words, got {len(self.words)}')

        anomaly = frozenset(self.anomaly_indices)
        special = frozenset(self.special_indices)
        if any(i < 0 or i >= z for i in anomaly | special):
            raise IndexError(f'Token index outside [0, {z})')
        if anomaly & special:
            raise ValueError(f'Anomaly and special tokens overlap: {anomaly & special}')

        vectors.setflags(write=False)
        object.__setattr__(self, 'vectors', vectors)
        object.__setattr__(self, 'anomaly_indices', anomaly)
        object.__setattr__(self, 'special_indices', special)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.tokens)

    def content_indices(self) -> list[int]:
        return [i for i in range(len(self)) if i not in self.special_indices]

    def context_indices(self) -> list[int]:
        return [
            i for i in self.content_indices() if i not in self.anomaly_indices
        ]

    def with_vectors(self, vectors: npt.NDArray[np.float64]) -> 'PromptEmbedding':
        return dataclasses.replace(self, vectors=vectors)

    def with_anomaly(self, indices: Iterable[int]) -> 'PromptEmbedding':
        return dataclasses.replace(self, anomaly_indices=frozenset(indices))


class RefinementConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid', frozen=True)

    lam: float = Field(default=0.1, ge=0.0)
    eta: float = Field(default=1.0, ge=0.0)
    refine_lr: float = Field(default=1e-2, gt=0.0)
    num_iters: int = Field(default=10, ge=0)


@dataclasses.dataclass(frozen=True, eq=False)
class RefinementResult:
    embedding: PromptEmbedding
    # Loss at every iterate, including the initial and the final one.
    trace: tuple[float, ...]
    iterates: tuple[npt.NDArray[np.float64], ...]


def distill_anchor(descriptor: PromptEmbedding) -> Vector:
    rows = descriptor.content_indices()
    if not rows:
        raise ValueError(f'Descriptor has only special tokens: {descriptor.key!r}')

    vectors = descriptor.vectors[rows]
    mean = vectors.mean(axis=0)
    mean_norm = np.linalg.norm(mean)
    if mean_norm == 0.0:
        raise ValueError(f'Descriptor tokens cancel out: {descriptor.key!r}')

    target_norm = np.linalg.norm(vectors, axis=1).mean()

    return mean / mean_norm * target_norm


def _cosine(e: Vector, e_detail: Vector) -> tuple[float, float, float]:
    if e.shape != e_detail.shape:
        raise ValueError(f'Dimension mismatch: {e.shape} != {e_detail.shape}')

    norm_e = float(np.linalg.norm(e))
    norm_d = float(np.linalg.norm(e_detail))
    if norm_e == 0.0:
        raise ValueError('Cosine undefined for a zero embedding')
    if norm_d == 0.0:
        raise ValueError('Cosine undefined for a zero anchor')

    return float(e @ e_detail) / (norm_e * norm_d), norm_e, norm_d


def loss_anom(e: Vector, e_detail: Vector, lam: float) -> float:
    cos, _, _ = _cosine(e, e_detail)
    diff = e - e_detail
    return 1.0 - cos + lam * float(diff @ diff)


def grad_anom(e: Vector, e_detail: Vector, lam: float) -> Vector:
    cos, norm_e, norm_d = _cosine(e, e_detail)
    grad_cos = e_detail / (norm_e * norm_d) - cos * e / norm_e ** 2
    return -grad_cos + 2.0 * lam * (e - e_detail)


def loss_ctx(vectors: npt.NDArray[np.float64]) -> float:
    if len(vectors) == 0:
        raise ValueError('Context loss needs at least one token')

    centered = vectors - vectors.mean(axis=0)
    return float(np.sum(centered ** 2)) / len(vectors)


def grad_ctx(vectors: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    if len(vectors) == 0:
        raise ValueError('Context loss needs at least one token')

    # The centroid term drops out because the centered rows sum to zero.
    return 2.0 * (vectors - vectors.mean(axis=0)) / len(vectors)


def prompt_loss(
    embedding: PromptEmbedding,
    vectors: npt.NDArray[np.float64],
    e_detail: Vector,
    cfg: RefinementConfig,
) -> float:
    total = sum(
        loss_anom(vectors[i], e_detail, cfg.lam)
        for i in sorted(embedding.anomaly_indices)
    )

    context = embedding.context_indices()
    if cfg.eta > 0 and context:
        total += cfg.eta * loss_ctx(vectors[context])

    return float(total)


def prompt_grad(
    embedding: PromptEmbedding,
    vectors: npt.NDArray[np.float64],
    e_detail: Vector,
    cfg: RefinementConfig,
) -> npt.NDArray[np.float64]:
    grad = np.zeros_like(vectors)

    for i in embedding.anomaly_indices:
        grad[i] = grad_anom(vectors[i], e_detail, cfg.lam)

    context = embedding.context_indices()
    if cfg.eta > 0 and context:
        grad[context] = cfg.eta * grad_ctx(vectors[context])

    return grad


def refine(
    embedding: PromptEmbedding,
    e_detail: Vector,
    cfg: RefinementConfig,
) -> RefinementResult:
    if not embedding.anomaly_indices:
        raise NoAnomalyTokens(f'No anomaly tokens in {embedding.key!r}')
    if e_detail.shape != (embedding.dim,):
        raise ValueError(
            f'Anchor has shape {e_detail.shape}, expected ({embedding.dim},)'
        )

    if cfg.num_iters == 0:
        return RefinementResult(embedding=embedding, trace=(), iterates=())

    rows = sorted(embedding.anomaly_indices)
    if cfg.eta > 0:
        rows += embedding.context_indices()

    vectors = embedding.vectors.copy()
    trace: list[float] = []
    iterates: list[npt.NDArray[np.float64]] = []

    for _ in range(cfg.num_iters):
        trace.append(prompt_loss(embedding, vectors, e_detail, cfg))
        iterates.append(vectors.copy())

        grad = prompt_grad(embedding, vectors, e_detail, cfg)
        vectors[rows] -= cfg.refine_lr * grad[rows]

    trace.append(prompt_loss(embedding, vectors, e_detail, cfg))
    iterates.append(vectors.copy())

    logger.info(
        f'Refined {len(embedding.anomaly_indices)} anomaly token(s): '
        f'loss {trace[0]:.6f} -> {trace[-1]:.6f}'
    )

    return RefinementResult(
        embedding=embedding.with_vectors(vectors),
        trace=tuple(trace),
        iterates=tuple(iterates),
    )


def locate_anomaly_tokens(
    normal: PromptEmbedding,
    anomaly: PromptEmbedding,
) -> tuple[int, ...]:
    """Token span of `anomaly` left over after matching the longest common
    prefix and suffix against `normal`."""
    a = normal.tokens
    b = anomaly.tokens
    limit = min(len(a), len(b))

    prefix = 0
    while prefix < limit and a[prefix] == b[prefix]:
        prefix += 1

    suffix = 0
    while (
        suffix < limit - prefix
        and a[len(a) - 1 - suffix] == b[len(b) - 1 - suffix]
    ):
        suffix += 1

    span = tuple(range(prefix, len(b) - suffix))
    span = tuple(i for i in span if i not in anomaly.special_indices)
    if not span:
        raise NoAnomalyTokens(
            f'{anomaly.key!r} adds no tokens over {normal.key!r}'
        )

    return span


def find_tokens(embedding: PromptEmbedding, words: Sequence[str]) -> tuple[int, ...]:
    wanted = {w.lower() for w in words}
    indices = tuple(
        i for i in embedding.content_indices() if embedding.words[i] in wanted
    )
    if not indices:
        raise NoAnomalyTokens(f'None of {sorted(wanted)} occur in {embedding.key!r}')

    return indices
