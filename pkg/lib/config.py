# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import json
import logging
import os
from pathlib import Path
import shlex
from typing import Annotated, ClassVar, Literal, TypeAlias

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PlainSerializer,
    ValidationInfo,
    field_validator,
)
import tomlkit

from lib.promptopt import RefinementConfig
from lib.schedule import BetaSchedule


logger = logging.getLogger(__name__)


FOREGROUND_CMD_ENV = 'DELTADENO_FOREGROUND_CMD'


ConfigPath: TypeAlias = Annotated[
    Path,
    PlainSerializer(lambda p: str(p)),
]


SeedMode: TypeAlias = Literal['index', 'name']


CodecKind: TypeAlias = Literal['pool', 'identity']


def _resolve(path: Path, info: ValidationInfo) -> Path:
    base = info.context.get('base_dir') if info.context else None
    if base is None or path.is_absolute():
        return path
    return Path(base) / path


class ScheduleConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid', frozen=True)

    num_train_steps: int = Field(default=1000, gt=0)
    beta_schedule: BetaSchedule = 'scaled_linear'
    beta_start: float = Field(default=0.00085, gt=0.0, lt=1.0)
    beta_end: float = Field(default=0.012, gt=0.0, lt=1.0)


class CleanConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid', frozen=True)

    kernel: int = Field(default=3, ge=1)
    min_component: int = Field(default=4, ge=0)

    @field_validator('kernel')
    @classmethod
    def _odd_kernel(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError(f'Kernel size must be odd: {v}')
        return v


class PromptConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid', frozen=True)

    object_name: str = 'bottle'
    anomaly: str = 'crack'
    normal_template: str = 'a photo of a {object}'
    anomaly_template: str = 'a photo of a {object} with {anomaly}'
    # Richer phrase the anomaly token is steered toward. Never inserted into
    # the anomaly prompt itself.
    descriptor: str | None = None
    # Explicit anomaly words, bypassing the prompt diff.
    anomaly_tokens: list[str] | None = None

    def normal_prompt(self) -> str:
        return self.normal_template.format(object=self.object_name, anomaly=self.anomaly)

    def anomaly_prompt(self) -> str:
        return self.anomaly_template.format(object=self.object_name, anomaly=self.anomaly)

    def descriptor_prompt(self) -> str:
        return self.descriptor or self.anomaly


class ForegroundConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid', frozen=True)

    # Precomputed foreground mask (single-channel PNG). Takes precedence over
    # the command.
    mask: ConfigPath | None = None
    # Segmentation command; the image and mask paths are appended.
    command: list[str] | None = None
    timeout: float = Field(default=60.0, gt=0.0)

    @field_validator('mask', mode='after')
    @classmethod
    def _resolve_mask(cls, v: Path | None, info: ValidationInfo) -> Path | None:
        return None if v is None else _resolve(v, info)

    def resolve_command(self) -> list[str] | None:
        if self.command:
            return list(self.command)

        env = os.environ.get(FOREGROUND_CMD_ENV)
        if env:
            return shlex.split(env)

        return None


class AnalyticBackendConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid', frozen=True)

    kind: Literal['analytic'] = 'analytic'
    # Prompt -> class mean latent (raw float32 file with a JSON sidecar).
    means: dict[str, ConfigPath]
    unconditional_mean: ConfigPath
    data_std: float = Field(default=0.01, ge=0.0)
    codec: CodecKind = 'pool'
    image_size: int = Field(default=64, gt=0)
    latent_channels: int = Field(default=4, gt=0)
    embedding_dim: int = Field(default=64, gt=0)
    seed: int = 0

    @field_validator('means', mode='after')
    @classmethod
    def _resolve_means(cls, v: dict[str, Path], info: ValidationInfo) -> dict[str, Path]:
        return {k: _resolve(p, info) for k, p in v.items()}

    @field_validator('unconditional_mean', mode='after')
    @classmethod
    def _resolve_unconditional(cls, v: Path, info: ValidationInfo) -> Path:
        return _resolve(v, info)


class SyntheticBackendConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid', frozen=True)

    kind: Literal['synthetic'] = 'synthetic'
    # Latent value every token pulls its attended positions toward. A scalar
    # applies to all channels.
    token_targets: dict[str, float | list[float]] = {}
    # (top, left, height, width) latent rectangles where a word gets
    # region_gain added to its attention logit.
    token_regions: dict[str, list[tuple[int, int, int, int]]] = {}
    region_gain: float = 2.8
    background: float = 0.5
    data_std: float = Field(default=0.01, ge=0.0)
    head_dim: int = Field(default=4, gt=0)
    qk_scale: float = Field(default=4.0, ge=0.0)
    num_features: int = Field(default=16, gt=0)
    # Downscale factor of each cross-attention site relative to the latent.
    site_factors: list[int] = [1, 2]
    codec: CodecKind = 'pool'
    image_size: int = Field(default=64, gt=0)
    latent_channels: int = Field(default=4, gt=0)
    embedding_dim: int = Field(default=64, gt=0)
    seed: int = 0


class StableDiffusionBackendConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid', frozen=True)

    kind: Literal['stable-diffusion'] = 'stable-diffusion'
    model_id: str = 'runwayml/stable-diffusion-v1-5'
    device: str = 'cuda'
    dtype: Literal['float16', 'float32'] = 'float16'
    image_size: int = Field(default=512, gt=0)


BackendConfig = Annotated[
    AnalyticBackendConfig | SyntheticBackendConfig | StableDiffusionBackendConfig,
    Field(discriminator='kind'),
]


class DeltaDenoConfig(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid', frozen=True)

    num_steps: int = Field(default=100, ge=2)
    gamma: float = Field(default=0.3, gt=0.0, le=1.0)
    tau_mid: float = Field(default=0.6, ge=0.0, le=1.0)
    tau_final: float = Field(default=0.35, ge=0.0, le=1.0)
    beta: float = Field(default=2.0, ge=0.0)
    guidance_scale: float = Field(default=7.5, ge=0.0)
    eta: float = Field(default=0.0, ge=0.0, le=1.0)
    smooth_sigma: float = Field(default=1.0, ge=0.0)
    clean: CleanConfig = CleanConfig()
    refine: RefinementConfig = RefinementConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    prompts: PromptConfig = PromptConfig()
    foreground: ForegroundConfig = ForegroundConfig()
    backend: BackendConfig = SyntheticBackendConfig()
    seed: int = 0
    out_dir: ConfigPath | None = None

    # Ablation switches.
    inpaint: bool = True
    attention_bias: bool = True
    blend_normal: bool = True
    # Attention site name prefixes receiving the bias. Empty means all.
    layer_filter: list[str] = []

    save_trace: bool = False
    record_timings: bool = False

    samples_per_image: int = Field(default=1, ge=1)
    seed_mode: SeedMode = 'index'
    workers: int = Field(default=1, ge=1)


def load_config(path: Path) -> DeltaDenoConfig:
    logger.info(f'Loading config: {path}')

    with open(path, 'r') as f:
        if path.suffix == '.toml':
            data = tomlkit.load(f).unwrap()
        elif path.suffix == '.json':
            data = json.load(f)
        else:
            raise ValueError(f'Unsupported config format: {path}')

    return DeltaDenoConfig.model_validate(
        data,
        context={'base_dir': path.parent.absolute()},
    )


def dump_config(cfg: DeltaDenoConfig, path: Path) -> None:
    with open(path, 'w') as f:
        if path.suffix == '.toml':
            tomlkit.dump(cfg.model_dump(exclude_none=True), f)
        else:
            json.dump(cfg.model_dump(mode='json', exclude_none=True), f, indent=2)
            f.write('\n')
