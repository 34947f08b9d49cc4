# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import dataclasses
import logging
import math
from typing import Literal, TypeAlias

import numpy as np
import numpy.typing as npt

from lib.grid import LatentGrid, require_same_shape


logger = logging.getLogger(__name__)


# Timestep value used as the "previous" timestep of the last executed step.
# Its alpha_bar is 1, so the final reverse step lands on a clean latent.
TERMINAL = -1


BetaSchedule: TypeAlias = Literal['scaled_linear', 'linear']


class ScheduleError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class GuidanceConfig:
    guidance_scale: float = 7.5
    eta: float = 0.0

    def __post_init__(self) -> None:
        if self.guidance_scale < 0:
            raise ValueError(f'Negative guidance scale: {self.guidance_scale}')
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f'eta outside [0, 1]: {self.eta}')


@dataclasses.dataclass(frozen=True, eq=False)
class Schedule:
    num_train_steps: int
    alphas_bar: npt.NDArray[np.float64]
    executed_timesteps: tuple[int, ...]
    spacing: str = 'leading'

    def __post_init__(self) -> None:
        alphas_bar = np.array(self.alphas_bar, dtype=np.float64)

        if self.num_train_steps <= 0:
            raise ScheduleError(f'Bad native step count: {self.num_train_steps}')
        if alphas_bar.shape != (self.num_train_steps,):
            raise ScheduleError(
                f'alphas_bar has shape {alphas_bar.shape}, '
                f'expected ({self.num_train_steps},)'
            )
        if np.any(alphas_bar <= 0) or np.any(alphas_bar > 1):
            raise ScheduleError('alphas_bar entries must lie in (0, 1]')
        if np.any(np.diff(alphas_bar) >= 0):
            raise ScheduleError('alphas_bar must be strictly decreasing')
        if alphas_bar[0] <= 0.99:
            raise ScheduleError(f'alphas_bar[0] too small: {alphas_bar[0]}')

        timesteps = tuple(int(t) for t in self.executed_timesteps)
        if not timesteps:
            raise ScheduleError('No executed timesteps')
        if any(t < 0 or t >= self.num_train_steps for t in timesteps):
            raise ScheduleError(f'Timesteps outside [0, {self.num_train_steps})')
        if any(a <= b for a, b in zip(timesteps, timesteps[1:])):
            raise ScheduleError(f'Timesteps not strictly decreasing: {timesteps}')

        alphas_bar.setflags(write=False)
        object.__setattr__(self, 'alphas_bar', alphas_bar)
        object.__setattr__(self, 'executed_timesteps', timesteps)

    @property
    def t_start(self) -> int:
        return self.executed_timesteps[0]

    def alpha_bar(self, t: int) -> float:
        if t == TERMINAL:
            return 1.0
        if t < 0 or t >= self.num_train_steps:
            raise ScheduleError(f'Invalid timestep: {t}')
        return float(self.alphas_bar[t])

    def sigma(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bar(t))

    def prev_timestep(self, index: int) -> int:
        """Timestep the reverse step at `index` lands on."""
        if index + 1 < len(self.executed_timesteps):
            return self.executed_timesteps[index + 1]
        return TERMINAL


def make_alphas_bar(
    num_train_steps: int,
    beta_schedule: BetaSchedule = 'scaled_linear',
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
) -> npt.NDArray[np.float64]:
    if beta_schedule == 'scaled_linear':
        betas = np.linspace(
            beta_start ** 0.5, beta_end ** 0.5, num_train_steps, dtype=np.float64,
        ) ** 2
    elif beta_schedule == 'linear':
        betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    else:
        raise ScheduleError(f'Unknown beta schedule: {beta_schedule!r}')

    return np.cumprod(1.0 - betas)


def build_schedule(
    num_train_steps: int,
    num_inference_steps: int,
    start_index: int,
    beta_schedule: BetaSchedule = 'scaled_linear',
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
) -> Schedule:
    if num_train_steps <= 0 or num_inference_steps <= 0:
        raise ScheduleError(
            f'Step counts must be positive: {num_train_steps}, {num_inference_steps}'
        )
    if num_inference_steps > num_train_steps:
        raise ScheduleError(
            f'More inference steps ({num_inference_steps}) than native steps '
            f'({num_train_steps})'
        )
    if not 0 <= start_index < num_inference_steps:
        raise ScheduleError(
            f'start_index {start_index} outside [0, {num_inference_steps})'
        )

    # "leading" spacing: 0, r, 2r, ... walked backwards.
    step_ratio = num_train_steps // num_inference_steps
    timesteps = (np.arange(num_inference_steps) * step_ratio)[::-1]

    schedule = Schedule(
        num_train_steps=num_train_steps,
        alphas_bar=make_alphas_bar(
            num_train_steps, beta_schedule, beta_start, beta_end,
        ),
        executed_timesteps=tuple(int(t) for t in timesteps[start_index:]),
    )

    logger.debug(
        f'Schedule: {len(schedule.executed_timesteps)} of {num_inference_steps} '
        f'steps, t_start={schedule.t_start}'
    )

    return schedule


def q_sample(
    schedule: Schedule,
    z0: LatentGrid,
    t: int,
    eps: LatentGrid,
) -> LatentGrid:
    require_same_shape(z0, eps, 'q_sample')
    return math.sqrt(schedule.alpha_bar(t)) * z0 + schedule.sigma(t) * eps


def cfg_combine(
    eps_cond: LatentGrid,
    eps_uncond: LatentGrid,
    w: float,
) -> LatentGrid:
    require_same_shape(eps_cond, eps_uncond, 'cfg_combine')
    return eps_uncond + w * (eps_cond - eps_uncond)


def reverse_step(
    schedule: Schedule,
    z_t: LatentGrid,
    eps_hat: LatentGrid,
    t: int,
    t_prev: int,
    eta: float = 0.0,
    noise: LatentGrid | None = None,
) -> LatentGrid:
    """Deterministic (eta = 0) or stochastic DDIM update from t to t_prev."""
    require_same_shape(z_t, eps_hat, 'reverse_step')

    if t_prev != TERMINAL and t_prev >= t:
        raise ScheduleError(f'Reverse step must go backwards: {t} -> {t_prev}')

    a_t = schedule.alpha_bar(t)
    a_prev = schedule.alpha_bar(t_prev)
    if a_t == 0.0:
        raise ScheduleError(f'alpha_bar is zero at t={t}')

    x0_hat = (z_t - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)

    if eta == 0.0:
        return math.sqrt(a_prev) * x0_hat + math.sqrt(1.0 - a_prev) * eps_hat

    if not 0.0 < eta <= 1.0:
        raise ValueError(f'eta outside [0, 1]: {eta}')
    if noise is None:
        raise ValueError('Stochastic reverse step needs a noise draw')
    require_same_shape(z_t, noise, 'reverse_step noise')

    std = eta * math.sqrt((1.0 - a_prev) / (1.0 - a_t)) * math.sqrt(1.0 - a_t / a_prev)
    direction = math.sqrt(max(1.0 - a_prev - std ** 2, 0.0)) * eps_hat

    return math.sqrt(a_prev) * x0_hat + direction + std * noise
