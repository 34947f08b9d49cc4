# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from collections.abc import Callable
import dataclasses
import logging
from typing import Literal, TypeAlias

import numpy as np
import numpy.typing as npt

from lib.attnbias import AttentionBias
from lib.backends import DenoiserBackend
from lib.grid import Grid, LatentGrid, require_same_shape
from lib.maskops import BinaryMask, DeltaMap, extract_mask
from lib.promptopt import PromptEmbedding
from lib.schedule import (
    GuidanceConfig,
    Schedule,
    ScheduleError,
    cfg_combine,
    q_sample,
    reverse_step,
)


logger = logging.getLogger(__name__)


Stage: TypeAlias = Literal['early', 'late']


def step_delta(z_n: LatentGrid, z_a: LatentGrid) -> Grid:
    """Per-position L2 norm over channels of z_n - z_a."""
    require_same_shape(z_n, z_a, 'step_delta')
    return np.sqrt(np.sum((z_n - z_a) ** 2, axis=-1))


@dataclasses.dataclass(frozen=True, eq=False)
class DeltaAccumulator:
    values: Grid
    steps_absorbed: int = 0

    @classmethod
    def zeros(cls, size: tuple[int, int]) -> 'DeltaAccumulator':
        return cls(np.zeros(size, dtype=np.float64))

    def reset(self) -> 'DeltaAccumulator':
        return DeltaAccumulator.zeros(self.values.shape)


def accumulate(acc: DeltaAccumulator, d: Grid) -> DeltaAccumulator:
    require_same_shape(acc.values, d, 'accumulate')
    if np.any(d < 0):
        raise ValueError('Step delta has negative entries')

    return DeltaAccumulator(acc.values + d, acc.steps_absorbed + 1)


def blend_inpaint(z_edit: LatentGrid, z_src: LatentGrid, mask: Grid) -> LatentGrid:
    require_same_shape(z_edit, z_src, 'blend_inpaint')
    if mask.shape != z_edit.shape[:2]:
        raise ValueError(f'Mask shape {mask.shape} != latent size {z_edit.shape[:2]}')

    m = mask[..., None].astype(np.float64)
    return m * z_edit + (1.0 - m) * z_src


def src_latent_at(
    schedule: Schedule,
    z0_normal: LatentGrid,
    t: int,
    eps_shared: LatentGrid,
) -> LatentGrid:
    return q_sample(schedule, z0_normal, t, eps_shared)


@dataclasses.dataclass(frozen=True)
class PlannedStep:
    index: int
    t: int
    t_prev: int
    stage: Stage


@dataclasses.dataclass(frozen=True, eq=False)
class StagePlan:
    schedule: Schedule
    steps: tuple[PlannedStep, ...]
    # Number of early steps; the mask is extracted before step mid_index.
    mid_index: int

    @classmethod
    def from_schedule(cls, schedule: Schedule) -> 'StagePlan':
        k = len(schedule.executed_timesteps)
        if k < 2:
            raise ScheduleError(f'Need at least 2 executed steps to split stages, got {k}')

        mid = k // 2
        steps = tuple(
            PlannedStep(
                index=i,
                t=t,
                t_prev=schedule.prev_timestep(i),
                stage='early' if i < mid else 'late',
            )
            for i, t in enumerate(schedule.executed_timesteps)
        )

        return cls(schedule, steps, mid)

    @property
    def t_start(self) -> int:
        return self.steps[0].t

    @property
    def t_mid(self) -> int:
        """Timestep both branches sit at when the mid-stage mask is taken."""
        return self.steps[self.mid_index].t

    def describe(self) -> dict[str, object]:
        return {
            'executed_steps': len(self.steps),
            'early_steps': self.mid_index,
            'late_steps': len(self.steps) - self.mid_index,
            't_start': self.t_start,
            't_mid': self.t_mid,
            'timesteps': [s.t for s in self.steps],
        }


@dataclasses.dataclass(frozen=True, eq=False)
class BranchState:
    z_normal: LatentGrid
    z_anomaly: LatentGrid
    t: int
    stage: Stage

    def __post_init__(self) -> None:
        require_same_shape(self.z_normal, self.z_anomaly, 'branch state')


@dataclasses.dataclass(frozen=True)
class AttributionConfig:
    guidance: GuidanceConfig = GuidanceConfig()
    beta: float = 2.0
    tau_mid: float = 0.6
    smooth_sigma: float = 1.0
    min_component: int = 4
    kernel: int = 3
    inpaint: bool = True
    attention_bias: bool = True
    blend_normal: bool = True
    layer_filter: frozenset[str] = frozenset()


@dataclasses.dataclass(frozen=True, eq=False)
class StepRecord:
    index: int
    stage: Stage
    state: BranchState
    # Re-noised source the branches were blended toward, if any.
    src: LatentGrid | None
    delta: Grid
    bias: AttentionBias | None


@dataclasses.dataclass(frozen=True, eq=False)
class DualBranchResult:
    z_final: LatentGrid
    z_final_normal: LatentGrid
    s_mid: Grid
    s_final: Grid
    mid_map: DeltaMap
    m_mid: BinaryMask
    biased: bool


def _guided_eps(
    backend: DenoiserBackend,
    z: LatentGrid,
    t: int,
    emb: PromptEmbedding,
    emb_uncond: PromptEmbedding | None,
    bias: AttentionBias | None,
    w: float,
) -> LatentGrid:
    eps_uncond = backend.predict_eps(z, t, emb_uncond)
    eps_cond = backend.predict_eps(z, t, emb, bias)
    return cfg_combine(eps_cond, eps_uncond, w)


def run_dual_branch(
    z0_normal: LatentGrid,
    emb_n: PromptEmbedding,
    emb_a: PromptEmbedding,
    emb_uncond: PromptEmbedding | None,
    plan: StagePlan,
    backend: DenoiserBackend,
    fg_prior: Grid,
    cfg: AttributionConfig,
    eps_shared: LatentGrid,
    rng: np.random.Generator | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> DualBranchResult:
    require_same_shape(z0_normal, eps_shared, 'warm start')

    schedule = plan.schedule
    latent_size = backend.capabilities.latent_size
    if fg_prior.shape != latent_size:
        raise ValueError(f'Foreground prior {fg_prior.shape} != latent size {latent_size}')
    guidance = cfg.guidance
    if guidance.eta > 0 and rng is None:
        raise ValueError('Stochastic stepping needs a random generator')

    anomaly = tuple(sorted(emb_a.anomaly_indices))
    biased = cfg.attention_bias and bool(anomaly)
    if biased and not backend.capabilities.supports_attention_bias:
        logger.warning(
            f'{type(backend).__name__} cannot bias cross-attention, running unbiased'
        )
        biased = False

    z_warm = src_latent_at(schedule, z0_normal, plan.t_start, eps_shared)
    state = BranchState(z_warm, z_warm.copy(), plan.t_start, 'early')
    acc = DeltaAccumulator.zeros(latent_size)

    s_mid: npt.NDArray[np.float64] | None = None
    mid_map: DeltaMap | None = None
    m_mid: BinaryMask | None = None

    for step in plan.steps:
        if state.t != step.t:
            raise ScheduleError(f'Branches at t={state.t}, plan expects t={step.t}')

        if step.index == plan.mid_index:
            s_mid = acc.values.copy()
            mid_map, m_mid = extract_mask(
                s_mid,
                cfg.tau_mid,
                cfg.smooth_sigma,
                cfg.min_component,
                cfg.kernel,
                provenance='mid',
            )
            logger.info(
                f'Mid-stage mask after {acc.steps_absorbed} step(s): '
                f'{m_mid.pixel_count} pixel(s)'
            )
            acc = acc.reset()

        bias = None
        if biased:
            prior = fg_prior if step.stage == 'early' else m_mid.as_float()
            bias = AttentionBias(prior, anomaly, cfg.beta, cfg.layer_filter)

        eps_n = _guided_eps(
            backend, state.z_normal, step.t, emb_n, emb_uncond, None, guidance.guidance_scale,
        )
        eps_a = _guided_eps(
            backend, state.z_anomaly, step.t, emb_a, emb_uncond, bias, guidance.guidance_scale,
        )

        # One draw shared by both branches keeps them synchronized.
        noise = rng.standard_normal(z0_normal.shape) if guidance.eta > 0 else None

        z_n = reverse_step(
            schedule, state.z_normal, eps_n, step.t, step.t_prev, guidance.eta, noise,
        )
        z_a = reverse_step(
            schedule, state.z_anomaly, eps_a, step.t, step.t_prev, guidance.eta, noise,
        )

        src = None
        if step.stage == 'late' and cfg.inpaint:
            src = src_latent_at(schedule, z0_normal, step.t_prev, eps_shared)
            z_a = blend_inpaint(z_a, src, m_mid.values)
            if cfg.blend_normal:
                z_n = blend_inpaint(z_n, src, m_mid.values)

        d = step_delta(z_n, z_a)
        acc = accumulate(acc, d)
        state = BranchState(z_n, z_a, step.t_prev, step.stage)

        logger.debug(
            f'Step {step.index} ({step.stage}) t={step.t}->{step.t_prev}: '
            f'max delta {float(d.max()):.6g}'
        )

        if on_step is not None:
            on_step(StepRecord(step.index, step.stage, state, src, d, bias))

    return DualBranchResult(
        z_final=state.z_anomaly,
        z_final_normal=state.z_normal,
        s_mid=s_mid,
        s_final=acc.values,
        mid_map=mid_map,
        m_mid=m_mid,
        biased=biased,
    )
