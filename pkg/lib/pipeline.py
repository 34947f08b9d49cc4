# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from collections.abc import Callable, Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
import contextlib
import dataclasses
import logging
import os
from pathlib import Path
import shutil
import tempfile
import threading
import time
from typing import Any, ClassVar, Literal
import zlib

import numpy as np
from pydantic import BaseModel, ConfigDict
import tomlkit

from lib import artifacts
from lib.attnbias import (
    ForegroundProvider,
    StaticForegroundProvider,
    foreground_prior,
)
from lib.attribution import (
    AttributionConfig,
    StagePlan,
    StepRecord,
    run_dual_branch,
)
from lib.backends import DenoiserBackend, create_backend
from lib.config import DeltaDenoConfig
from lib.external import ExternalForegroundProvider
from lib.grid import ImageGrid, LatentGrid, ShapeMismatch
from lib.maskops import BinaryMask, DeltaMap, extract_mask, to_image_mask
from lib.promptopt import (
    NoAnomalyTokens,
    distill_anchor,
    find_tokens,
    locate_anomaly_tokens,
    refine,
)
from lib.schedule import GuidanceConfig, ScheduleError, build_schedule


logger = logging.getLogger(__name__)


MASK_ORDER = ('normalize', 'smooth', 'threshold', 'clean')

ANOMALY_IMAGE = 'anomaly.png'
MASK_IMAGE = 'mask.png'
MID_MASK_IMAGE = 'mask_mid.png'
DELTA_MID = 'delta_mid.f32'
DELTA_FINAL = 'delta_final.f32'
METADATA = 'metadata.json'
TRACE_DIR = 'trace'
MANIFEST = 'manifest.toml'


class GenerationError(Exception):
    pass


class ForegroundInfo(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid')

    source: str
    fallback: bool


class PromptInfo(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid')

    normal: str
    anomaly: str
    descriptor: str
    anomaly_indices: list[int]
    anomaly_words: list[str]


class StagePlanInfo(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid')

    spacing: str
    num_train_steps: int
    executed_steps: int
    early_steps: int
    late_steps: int
    t_start: int
    t_mid: int
    timesteps: list[int]


class MaskInfo(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid')

    order: list[str]
    mid_pixels: int
    final_pixels: int
    final_image_pixels: int


class RunMetadata(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid')

    # Output location is not part of the echo, so identical runs written to
    # different directories produce identical metadata.
    config: DeltaDenoConfig
    seed: int
    image_name: str | None = None
    backend: str
    codec: str
    prompts: PromptInfo
    stage_plan: StagePlanInfo
    foreground: ForegroundInfo
    attention_bias_applied: bool
    refinement_trace: list[float] | None
    masks: MaskInfo
    round_trip_psnr: float | None
    timings: dict[str, float] | None = None


@dataclasses.dataclass(frozen=True, eq=False)
class GenerationResult:
    anomaly_image: ImageGrid
    # Image resolution.
    final_mask: BinaryMask
    # Latent resolution.
    final_mask_latent: BinaryMask
    mid_mask: BinaryMask
    s_mid: np.ndarray
    s_final: np.ndarray
    mid_map: DeltaMap
    final_map: DeltaMap
    latent: LatentGrid
    metadata: RunMetadata
    timings: dict[str, float]
    out_dir: Path | None = None


@contextlib.contextmanager
def _phase(timings: dict[str, float], name: str) -> Iterator[None]:
    logger.info(f'Phase: {name}')
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[name] = time.perf_counter() - start


def plan_stages(cfg: DeltaDenoConfig) -> StagePlan:
    k = round(cfg.gamma * cfg.num_steps)
    if k < 2:
        raise ScheduleError(
            f'gamma={cfg.gamma} with {cfg.num_steps} steps executes {k} step(s), '
            f'need at least 2'
        )

    schedule = build_schedule(
        cfg.schedule.num_train_steps,
        cfg.num_steps,
        cfg.num_steps - k,
        cfg.schedule.beta_schedule,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )

    return StagePlan.from_schedule(schedule)


def attribution_config(cfg: DeltaDenoConfig) -> AttributionConfig:
    return AttributionConfig(
        guidance=GuidanceConfig(cfg.guidance_scale, cfg.eta),
        beta=cfg.beta,
        tau_mid=cfg.tau_mid,
        smooth_sigma=cfg.smooth_sigma,
        min_component=cfg.clean.min_component,
        kernel=cfg.clean.kernel,
        inpaint=cfg.inpaint,
        attention_bias=cfg.attention_bias,
        blend_normal=cfg.blend_normal,
        layer_filter=frozenset(cfg.layer_filter),
    )


def default_foreground(cfg: DeltaDenoConfig) -> ForegroundProvider | None:
    if cfg.foreground.mask is not None:
        return StaticForegroundProvider(artifacts.read_mask(cfg.foreground.mask))

    command = cfg.foreground.resolve_command()
    if command is None:
        return None
    return ExternalForegroundProvider(command, cfg.foreground.timeout)


def _check_backend(backend: DenoiserBackend, plan: StagePlan) -> None:
    ours = plan.schedule
    theirs = backend.schedule
    if ours.num_train_steps != theirs.num_train_steps \
            or not np.array_equal(ours.alphas_bar, theirs.alphas_bar):
        raise ScheduleError('Backend was built for a different noise schedule')


def _run(
    cfg: DeltaDenoConfig,
    image: ImageGrid,
    backend: DenoiserBackend | None,
    foreground: ForegroundProvider | None,
    name: str | None,
    on_step: Callable[[StepRecord], None] | None,
) -> GenerationResult:
    timings: dict[str, float] = {}
    plan = plan_stages(cfg)

    if backend is None:
        backend = create_backend(cfg.backend, plan.schedule)
    else:
        _check_backend(backend, plan)

    caps = backend.capabilities
    if image.shape != caps.image_shape:
        raise ShapeMismatch(f'Image shape {image.shape} != {caps.image_shape}')

    rng = np.random.default_rng(cfg.seed)
    eps_shared = rng.standard_normal(caps.latent_shape)

    with _phase(timings, 'foreground'):
        fg = foreground_prior(image, foreground, caps.latent_size)

    with _phase(timings, 'encode'):
        z0 = backend.encode(image)

    prompts = cfg.prompts
    normal_text = prompts.normal_prompt()
    anomaly_text = prompts.anomaly_prompt()
    descriptor_text = prompts.descriptor_prompt()

    with _phase(timings, 'prompts'):
        emb_n = backend.encode_text(normal_text)
        emb_a = backend.encode_text(anomaly_text)

        try:
            if prompts.anomaly_tokens:
                indices = find_tokens(emb_a, prompts.anomaly_tokens)
            else:
                indices = locate_anomaly_tokens(emb_n, emb_a)
        except NoAnomalyTokens as e:
            logger.warning(f'{e}; running without refinement or attention bias')
            indices = ()

        emb_a = emb_a.with_anomaly(indices)

        trace = None
        if indices and cfg.refine.num_iters > 0:
            e_detail = distill_anchor(backend.encode_text(descriptor_text))
            refined = refine(emb_a, e_detail, cfg.refine)
            emb_a = refined.embedding
            trace = list(refined.trace)

    with _phase(timings, 'denoise'):
        dual = run_dual_branch(
            z0,
            emb_n,
            emb_a,
            None,
            plan,
            backend,
            fg.mask,
            attribution_config(cfg),
            eps_shared,
            rng=rng,
            on_step=on_step,
        )

    with _phase(timings, 'mask'):
        final_map, final_mask = extract_mask(
            dual.s_final,
            cfg.tau_final,
            cfg.smooth_sigma,
            cfg.clean.min_component,
            cfg.clean.kernel,
            provenance='final',
        )
        image_mask = to_image_mask(final_mask, image.shape[:2])

    with _phase(timings, 'decode'):
        anomaly_image = np.clip(backend.decode(dual.z_final), 0.0, 1.0)
        psnr = backend.round_trip_psnr(image)

    plan_info = plan.describe()
    metadata = RunMetadata(
        config=cfg.model_copy(update={'out_dir': None}),
        seed=cfg.seed,
        image_name=name,
        backend=type(backend).__name__,
        codec=caps.codec,
        prompts=PromptInfo(
            normal=normal_text,
            anomaly=anomaly_text,
            descriptor=descriptor_text,
            anomaly_indices=sorted(emb_a.anomaly_indices),
            anomaly_words=[emb_a.words[i] for i in sorted(emb_a.anomaly_indices)],
        ),
        stage_plan=StagePlanInfo(
            spacing=plan.schedule.spacing,
            num_train_steps=plan.schedule.num_train_steps,
            **plan_info,
        ),
        foreground=ForegroundInfo(source=fg.source, fallback=fg.fallback),
        attention_bias_applied=dual.biased,
        refinement_trace=trace,
        masks=MaskInfo(
            order=list(MASK_ORDER),
            mid_pixels=dual.m_mid.pixel_count,
            final_pixels=final_mask.pixel_count,
            final_image_pixels=image_mask.pixel_count,
        ),
        round_trip_psnr=psnr,
        timings=dict(timings) if cfg.record_timings else None,
    )

    logger.info(
        f'Generated: mid mask {dual.m_mid.pixel_count} px, '
        f'final mask {final_mask.pixel_count} px'
    )

    return GenerationResult(
        anomaly_image=anomaly_image,
        final_mask=image_mask,
        final_mask_latent=final_mask,
        mid_mask=dual.m_mid,
        s_mid=dual.s_mid,
        s_final=dual.s_final,
        mid_map=dual.mid_map,
        final_map=final_map,
        latent=dual.z_final,
        metadata=metadata,
        timings=timings,
    )


def _write_result(
    result: GenerationResult,
    directory: Path,
    trace: Sequence[StepRecord],
) -> None:
    artifacts.write_image(directory / ANOMALY_IMAGE, result.anomaly_image)
    artifacts.write_mask(directory / MASK_IMAGE, result.final_mask.values)
    artifacts.write_mask(directory / MID_MASK_IMAGE, result.mid_mask.values)
    artifacts.write_grid(directory / DELTA_MID, result.s_mid)
    artifacts.write_grid(directory / DELTA_FINAL, result.s_final)

    if trace:
        trace_dir = directory / TRACE_DIR
        trace_dir.mkdir()
        for record in trace:
            artifacts.write_grid(trace_dir / f'step_{record.index:03d}.f32', record.delta)

    with open(directory / METADATA, 'w') as f:
        f.write(result.metadata.model_dump_json(indent=2))
        f.write('\n')


def _publish(staging: Path, out_dir: Path) -> None:
    if out_dir.exists():
        if (out_dir / METADATA).is_file():
            logger.info(f'Replacing previous result: {out_dir}')
            shutil.rmtree(out_dir)
        elif out_dir.is_dir() and not any(out_dir.iterdir()):
            out_dir.rmdir()
        else:
            raise GenerationError(f'Refusing to overwrite non-result path: {out_dir}')

    os.rename(staging, out_dir)


def generate(
    cfg: DeltaDenoConfig,
    image: ImageGrid,
    *,
    backend: DenoiserBackend | None = None,
    foreground: ForegroundProvider | None = None,
    out_dir: Path | None = None,
    name: str | None = None,
    on_step: Callable[[StepRecord], None] | None = None,
) -> GenerationResult:
    """Run the full method on one normal image.

    Results are persisted when an output directory is given (argument first,
    then the config). Artifacts are staged in a sibling temporary directory
    and renamed into place, so a failed run leaves nothing behind.
    """
    out_dir = out_dir or cfg.out_dir
    if foreground is None:
        foreground = default_foreground(cfg)

    trace: list[StepRecord] = []

    def record(step: StepRecord) -> None:
        if cfg.save_trace:
            trace.append(step)
        if on_step is not None:
            on_step(step)

    staging = None

    try:
        if out_dir is not None:
            out_dir.parent.mkdir(parents=True, exist_ok=True)
            staging = Path(tempfile.mkdtemp(prefix=f'.{out_dir.name}.', dir=out_dir.parent))

        result = _run(cfg, image, backend, foreground, name, record)

        if staging is not None:
            logger.info(f'Writing artifacts: {out_dir}')
            _write_result(result, staging, trace)
            _publish(staging, out_dir)
            staging = None
            result = dataclasses.replace(result, out_dir=out_dir)
    except Exception as e:
        raise GenerationError(
            f'Generation failed (seed={cfg.seed}, image={name or "<array>"}, '
            f'out={out_dir}): {e}'
        ) from e
    finally:
        if staging is not None:
            shutil.rmtree(staging, ignore_errors=True)

    return result


class ManifestRow(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid')

    index: int
    name: str
    source: str
    seed: int
    status: Literal['ok', 'failed']
    image: str | None = None
    mask: str | None = None
    metadata: str | None = None
    error: str | None = None


class BatchManifest(BaseModel):
    model_config: ClassVar[ConfigDict] = ConfigDict(extra='forbid')

    rows: list[ManifestRow] = []

    def failed(self) -> list[ManifestRow]:
        return [r for r in self.rows if r.status == 'failed']


def derive_seed(cfg: DeltaDenoConfig, index: int, name: str) -> int:
    if cfg.seed_mode == 'name':
        return cfg.seed + zlib.crc32(name.encode('UTF-8'))
    return cfg.seed + index


@dataclasses.dataclass(frozen=True)
class BatchItem:
    index: int
    name: str
    source: Path
    seed: int


def plan_batch(cfg: DeltaDenoConfig, images: Sequence[Path]) -> list[BatchItem]:
    if not images:
        raise ValueError('Empty image list')

    items = []
    for i, path in enumerate(images):
        for s in range(cfg.samples_per_image):
            index = i * cfg.samples_per_image + s
            name = path.stem if cfg.samples_per_image == 1 else f'{path.stem}_{s:03d}'
            items.append(BatchItem(index, name, path, derive_seed(cfg, index, name)))

    names = [item.name for item in items]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ValueError(f'Duplicate image names in batch: {duplicates}')

    return items


def write_manifest(manifest: BatchManifest, path: Path) -> None:
    temp = path.with_name(f'.{path.name}.tmp')
    with open(temp, 'w') as f:
        tomlkit.dump(manifest.model_dump(exclude_none=True), f)
    os.replace(temp, path)


def read_manifest(path: Path) -> BatchManifest:
    with open(path, 'r') as f:
        return BatchManifest.model_validate(tomlkit.load(f).unwrap())


def generate_batch(
    cfg: DeltaDenoConfig,
    images: Sequence[Path],
    out_dir: Path,
    *,
    backend: DenoiserBackend | None = None,
    foreground: ForegroundProvider | None = None,
) -> BatchManifest:
    items = plan_batch(cfg, images)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / MANIFEST

    if backend is None:
        backend = create_backend(cfg.backend, plan_stages(cfg).schedule)
    if foreground is None:
        foreground = default_foreground(cfg)

    manifest = BatchManifest()
    lock = threading.Lock()

    def run_item(item: BatchItem) -> ManifestRow:
        item_cfg = cfg.model_copy(update={'seed': item.seed})
        item_dir = out_dir / item.name
        try:
            generate(
                item_cfg,
                artifacts.read_image(item.source),
                backend=backend,
                foreground=foreground,
                out_dir=item_dir,
                name=item.name,
            )
        except Exception as e:
            logger.error(f'Batch item {item.name} failed', exc_info=e)
            return ManifestRow(
                index=item.index,
                name=item.name,
                source=str(item.source),
                seed=item.seed,
                status='failed',
                error=str(e),
            )

        return ManifestRow(
            index=item.index,
            name=item.name,
            source=str(item.source),
            seed=item.seed,
            status='ok',
            image=f'{item.name}/{ANOMALY_IMAGE}',
            mask=f'{item.name}/{MASK_IMAGE}',
            metadata=f'{item.name}/{METADATA}',
        )

    logger.info(f'Generating {len(items)} item(s) with {cfg.workers} worker(s)')

    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        futures = [executor.submit(run_item, item) for item in items]
        for future in as_completed(futures):
            row = future.result()
            with lock:
                manifest.rows.append(row)
                manifest.rows.sort(key=lambda r: r.index)
                write_manifest(manifest, manifest_path)

    failed = manifest.failed()
    if failed:
        logger.warning(f'{len(failed)} of {len(items)} item(s) failed')

    return manifest


def verify_manifest(manifest: BatchManifest, out_dir: Path) -> None:
    for row in manifest.rows:
        if row.status != 'ok':
            continue
        for relative in (row.image, row.mask, row.metadata):
            artifacts.check_artifact(out_dir / relative)


def inspect_result(directory: Path) -> dict[str, Any]:
    with open(directory / METADATA, 'r') as f:
        metadata = RunMetadata.model_validate_json(f.read())

    mask = artifacts.read_mask(directory / MASK_IMAGE) > 0.5
    mid = artifacts.read_mask(directory / MID_MASK_IMAGE) > 0.5
    s_final = artifacts.read_grid(directory / DELTA_FINAL)

    stats: dict[str, Any] = {
        'mask_pixels': int(mask.sum()),
        'mask_fraction': float(mask.mean()),
        'mid_mask_pixels': int(mid.sum()),
        'delta_final_max': float(s_final.max()),
        'delta_final_sum': float(s_final.sum()),
    }

    if mask.any():
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        stats['mask_bbox'] = [int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])]

    return {
        'metadata': metadata.model_dump(mode='json'),
        'stats': stats,
    }
