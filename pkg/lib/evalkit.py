# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
import csv
import dataclasses
import itertools
import logging
import math
from pathlib import Path
import time
from typing import Any, Literal, TypeAlias

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
from scipy import ndimage

from lib import artifacts
from lib.attnbias import ForegroundProvider, StaticForegroundProvider
from lib.backends import DenoiserBackend
from lib.backends.analytic import AnalyticGaussianBackend
from lib.backends.synthetic import Region, SyntheticAttentionBackend, region_mask
from lib.backends.toy import PoolCodec
from lib.config import (
    AnalyticBackendConfig,
    DeltaDenoConfig,
    ForegroundConfig,
    PromptConfig,
    SyntheticBackendConfig,
    dump_config,
)
from lib.grid import Grid, ImageGrid, LatentGrid, ShapeMismatch
from lib.maskops import BinaryMask, to_image_mask
from lib.pipeline import generate, plan_stages
from lib.schedule import Schedule


logger = logging.getLogger(__name__)


ScenarioKind: TypeAlias = Literal['analytic', 'synthetic']


REPORT_CSV = 'report.csv'
TIMINGS_CSV = 'timings.csv'
SUMMARY_TXT = 'summary.txt'
REPORT_PNG = 'report.png'

REPORT_FIELDS = (
    'cell',
    'params',
    'scenario',
    'seed',
    'iou',
    'energy_ratio',
    'outside_change',
    'mid_pixels',
    'final_pixels',
    'refinement_steps',
    'error',
)


def _as_bool(mask: BinaryMask | Grid) -> np.ndarray:
    values = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask)
    return values.astype(np.bool_)


def mask_iou(pred: BinaryMask | Grid, gt: BinaryMask | Grid) -> float:
    p = _as_bool(pred)
    g = _as_bool(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f'Mask shapes differ: {p.shape} != {g.shape}')

    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0

    return np.count_nonzero(p & g) / union


def dilate(gt: BinaryMask | Grid, pixels: int) -> np.ndarray:
    g = _as_bool(gt)
    if pixels < 0:
        raise ValueError(f'Negative dilation: {pixels}')
    if pixels == 0:
        return g
    return ndimage.binary_dilation(g, structure=np.ones((3, 3), dtype=np.bool_), iterations=pixels)


def region_energy_ratio(s: Grid, gt: BinaryMask | Grid, dilation: int = 0) -> float:
    """Share of the total of S inside the (dilated) ground-truth region."""
    s = np.asarray(s, dtype=np.float64)
    g = _as_bool(gt)
    if s.shape != g.shape:
        raise ShapeMismatch(f'Map {s.shape} and mask {g.shape} differ')
    if np.any(s < 0):
        raise ValueError('Energy map has negative entries')

    total = float(s.sum())
    if total == 0.0:
        return 0.0

    return float(s[dilate(g, dilation)].sum()) / total


def outside_change(z_final: LatentGrid, z0: LatentGrid, gt: BinaryMask | Grid) -> float:
    """Mean absolute latent change over positions outside the ground truth."""
    g = _as_bool(gt)
    outside = ~g
    if not outside.any():
        return 0.0
    return float(np.mean(np.abs(z_final - z0)[outside]))


# Synthetic scenarios: the object spans the anomaly spot padded by this many
# latent pixels.
OBJECT_PAD = 4
SYNTHETIC_BACKGROUND = 0.5
SYNTHETIC_QK_SCALE = 1.0
# Share of the largest mean difference a synthetic ground-truth position must
# exceed.
SYNTHETIC_GT_LEVEL = 0.5


def mean_difference_support(
    mu_normal: LatentGrid,
    mu_anomaly: LatentGrid,
    level: float = 0.0,
    within: BinaryMask | None = None,
) -> BinaryMask:
    """Positions where |mu_anomaly - mu_normal| exceeds level times its
    maximum, restricted to `within` if given."""
    magnitude = np.linalg.norm(mu_anomaly - mu_normal, axis=-1)
    support = magnitude > level * magnitude.max()
    if within is not None:
        support &= within.values
    return BinaryMask(support)


def synthetic_backend_config(
    prompts: PromptConfig,
    target: Sequence[float],
    regions: Sequence[Region],
    data_std: float,
    image_size: int,
) -> SyntheticBackendConfig:
    return SyntheticBackendConfig(
        token_targets={prompts.anomaly: list(target)},
        token_regions={prompts.anomaly: list(regions)},
        background=SYNTHETIC_BACKGROUND,
        data_std=data_std,
        qk_scale=SYNTHETIC_QK_SCALE,
        image_size=image_size,
        latent_channels=len(target),
    )


@dataclasses.dataclass(frozen=True, eq=False)
class ToyScenario:
    kind: ScenarioKind
    seed: int
    image: ImageGrid
    mu_normal: LatentGrid
    mu_anomaly: LatentGrid
    # Latent resolution; see mean_difference_support.
    gt: BinaryMask
    data_std: float
    prompts: PromptConfig
    gt_level: float = 0.0
    # Synthetic scenarios only: the coarse object region used as foreground,
    # the anomaly word's target latent value and its attention regions.
    object_mask: BinaryMask | None = None
    anomaly_target: tuple[float, ...] | None = None
    anomaly_regions: tuple[Region, ...] = ()

    def __post_init__(self) -> None:
        expected = mean_difference_support(
            self.mu_normal, self.mu_anomaly, self.gt_level, self.object_mask,
        )
        if expected != self.gt:
            raise ValueError('Ground truth does not match the mean difference')

    @property
    def name(self) -> str:
        return f'{self.kind}-{self.seed}'

    def synthetic_config(self) -> SyntheticBackendConfig:
        if self.kind != 'synthetic':
            raise ValueError(f'{self.name} has no synthetic backend')
        return synthetic_backend_config(
            self.prompts,
            self.anomaly_target,
            self.anomaly_regions,
            self.data_std,
            self.image.shape[0],
        )

    def backend(self, schedule: Schedule) -> DenoiserBackend:
        if self.kind == 'analytic':
            return AnalyticGaussianBackend(
                schedule,
                {
                    self.prompts.normal_prompt(): self.mu_normal,
                    self.prompts.anomaly_prompt(): self.mu_anomaly,
                },
                self.mu_normal,
                data_std=self.data_std,
                codec=PoolCodec(self.image.shape[0]),
            )

        return SyntheticAttentionBackend.from_config(self.synthetic_config(), schedule)

    def foreground(self) -> ForegroundProvider | None:
        # The analytic backend has no attention to steer.
        if self.object_mask is None:
            return None
        return StaticForegroundProvider(self.object_image().as_float())

    def gt_image(self) -> BinaryMask:
        return to_image_mask(self.gt, self.image.shape[:2])

    def object_image(self) -> BinaryMask:
        return to_image_mask(self.object_mask, self.image.shape[:2])

    def configure(self, cfg: DeltaDenoConfig) -> DeltaDenoConfig:
        return cfg.model_copy(update={'prompts': self.prompts, 'seed': self.seed})

    def run(self, cfg: DeltaDenoConfig, out_dir: Path | None = None):
        cfg = self.configure(cfg)
        backend = self.backend(plan_stages(cfg).schedule)
        return generate(
            cfg,
            self.image,
            backend=backend,
            foreground=self.foreground(),
            out_dir=out_dir,
            name=self.name,
        )

    def write(self, directory: Path, base: DeltaDenoConfig) -> DeltaDenoConfig:
        """Write the scenario's inputs and a config that reproduces it through
        the command line."""
        directory = directory.absolute()
        directory.mkdir(parents=True, exist_ok=True)

        artifacts.write_image(directory / 'normal.png', self.image)
        artifacts.write_mask(directory / 'gt.png', self.gt_image().values)

        if self.kind == 'analytic':
            artifacts.write_grid(directory / 'mu_normal.f32', self.mu_normal)
            artifacts.write_grid(directory / 'mu_anomaly.f32', self.mu_anomaly)
            backend = AnalyticBackendConfig(
                means={
                    self.prompts.normal_prompt(): directory / 'mu_normal.f32',
                    self.prompts.anomaly_prompt(): directory / 'mu_anomaly.f32',
                },
                unconditional_mean=directory / 'mu_normal.f32',
                data_std=self.data_std,
                image_size=self.image.shape[0],
                latent_channels=self.mu_normal.shape[2],
            )
            foreground = ForegroundConfig()
        else:
            artifacts.write_mask(directory / 'foreground.png', self.object_image().values)
            backend = self.synthetic_config()
            foreground = ForegroundConfig(mask=directory / 'foreground.png')

        cfg = self.configure(base).model_copy(
            update={'backend': backend, 'foreground': foreground},
        )
        # Round trip through validation so the written file is checked.
        cfg = DeltaDenoConfig.model_validate(cfg.model_dump())
        dump_config(cfg, directory / 'config.json')

        return cfg


def _random_rect(rng: np.random.Generator, size: int) -> Region:
    h = int(rng.choice(np.arange(6, 13)))
    w = int(rng.choice(np.arange(6, 13)))
    top = int(rng.choice(np.arange(3, size - 3 - h + 1)))
    left = int(rng.choice(np.arange(3, size - 3 - w + 1)))

    return top, left, h, w


def _mirror(region: Region, size: int) -> Region:
    top, left, h, w = region
    return top, size - left - w, h, w


def _object_layout(rng: np.random.Generator, size: int) -> tuple[Region, Region, Region]:
    """(spot, object, spurious): an anomaly spot, the object around it, and a
    second spot on the background half. Even coordinates only, so every
    attention site sees the regions without resampling error."""
    half = size // 2
    pad = OBJECT_PAD

    h, w = (int(rng.choice([6, 8])) for _ in range(2))
    top = int(rng.choice(np.arange(pad, size - pad - h + 1, 2)))
    left = int(rng.choice(np.arange(pad, half - pad - w + 1, 2)))
    spot = (top, left, h, w)
    obj = (top - pad, left - pad, h + 2 * pad, w + 2 * pad)

    bh, bw = (int(rng.choice([6, 8, 10])) for _ in range(2))
    btop = int(rng.choice(np.arange(2, size - 2 - bh + 1, 2)))
    bleft = int(rng.choice(np.arange(half + 2, size - 2 - bw + 1, 2)))
    spurious = (btop, bleft, bh, bw)

    if rng.uniform() < 0.5:
        return _mirror(spot, size), _mirror(obj, size), _mirror(spurious, size)
    return spot, obj, spurious


def _texture(rng: np.random.Generator, size: int) -> ImageGrid:
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing='ij')
    channels = []
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        channels.append(0.5 + 0.15 * np.sin(2.0 * math.pi * (fy * ys + fx * xs) / size + phase))
    return np.stack(channels, axis=-1)


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    direction = rng.standard_normal(dim)
    return direction / np.linalg.norm(direction)


def _synthetic_scenario(
    rng: np.random.Generator,
    seed: int,
    codec: PoolCodec,
    amplitude: float,
    data_std: float,
    prompts: PromptConfig,
) -> ToyScenario:
    size = codec.latent_shape[0]
    if size < 32:
        raise ValueError(f'Synthetic scenarios need a latent of at least 32x32, got {size}')

    spot, obj, spurious = _object_layout(rng, size)
    direction = _unit(rng, codec.latent_shape[2])
    target = tuple(float(v) for v in SYNTHETIC_BACKGROUND + amplitude * direction)

    backend = SyntheticAttentionBackend.from_config(
        synthetic_backend_config(
            prompts, target, (spot, spurious), data_std, codec.image_shape[0],
        ),
        plan_stages(DeltaDenoConfig()).schedule,
    )
    mu_normal = backend.class_mean(backend.encode_text(prompts.normal_prompt()))
    mu_anomaly = backend.class_mean(backend.encode_text(prompts.anomaly_prompt()))
    object_mask = BinaryMask(region_mask((size, size), [obj]))

    return ToyScenario(
        kind='synthetic',
        seed=seed,
        image=np.full(codec.image_shape, SYNTHETIC_BACKGROUND),
        mu_normal=mu_normal,
        mu_anomaly=mu_anomaly,
        gt=mean_difference_support(mu_normal, mu_anomaly, SYNTHETIC_GT_LEVEL, object_mask),
        data_std=data_std,
        prompts=prompts,
        gt_level=SYNTHETIC_GT_LEVEL,
        object_mask=object_mask,
        anomaly_target=target,
        anomaly_regions=(spot, spurious),
    )


def make_rect_scenario(
    seed: int,
    kind: ScenarioKind = 'analytic',
    image_size: int = 64,
    amplitude: float = 0.2,
    data_std: float = 0.01,
    prompts: PromptConfig | None = None,
) -> ToyScenario:
    """Rectangle scenario on the 2x pool codec (latent = image / 2, 4 channels).

    Analytic scenarios plant a rectangle directly in the anomaly class mean.
    Synthetic scenarios give the anomaly word an attention affinity for a spot
    on the object and a spot on the background; the ground truth is where the
    backend's own mean difference is strong and on the object."""
    rng = np.random.default_rng(seed)
    codec = PoolCodec(image_size)
    prompts = prompts or PromptConfig()

    if kind == 'synthetic':
        return _synthetic_scenario(rng, seed, codec, amplitude, data_std, prompts)

    size = codec.latent_shape[0]
    top, left, h, w = _random_rect(rng, size)
    gt = np.zeros((size, size), dtype=np.bool_)
    gt[top:top + h, left:left + w] = True

    direction = _unit(rng, codec.latent_shape[2])
    image = _texture(rng, image_size)
    mu_normal = codec.encode(image)
    mu_anomaly = mu_normal + amplitude * gt[..., None] * direction

    return ToyScenario(
        kind=kind,
        seed=seed,
        image=image,
        mu_normal=mu_normal,
        mu_anomaly=mu_anomaly,
        gt=BinaryMask(gt),
        data_std=data_std,
        prompts=prompts,
    )


@dataclasses.dataclass(frozen=True)
class SweepRow:
    cell: int
    params: str
    scenario: str
    seed: int
    iou: float | None = None
    energy_ratio: float | None = None
    outside_change: float | None = None
    mid_pixels: int | None = None
    final_pixels: int | None = None
    refinement_steps: int | None = None
    error: str | None = None
    seconds: float = 0.0

    def csv_row(self) -> dict[str, Any]:
        row = dataclasses.asdict(self)
        del row['seconds']
        return {k: '' if v is None else v for k, v in row.items()}


@dataclasses.dataclass(frozen=True)
class SweepReport:
    rows: tuple[SweepRow, ...]
    cells: tuple[dict[str, Any], ...]

    def cell_rows(self, cell: int) -> list[SweepRow]:
        return [r for r in self.rows if r.cell == cell]

    def mean(self, cell: int, metric: str) -> float:
        values = [getattr(r, metric) for r in self.cell_rows(cell)]
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else math.nan


def set_path(data: dict[str, Any], path: str, value: Any) -> None:
    *parents, leaf = path.split('.')
    for key in parents:
        data = data.setdefault(key, {})
    data[leaf] = value


def apply_overrides(cfg: DeltaDenoConfig, overrides: Mapping[str, Any]) -> DeltaDenoConfig:
    """Set dotted config paths (e.g. `refine.num_iters`) and revalidate."""
    data = cfg.model_dump()
    for path, value in overrides.items():
        set_path(data, path, value)
    return DeltaDenoConfig.model_validate(data)


def expand_grid(grid: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def _format_params(params: Mapping[str, Any]) -> str:
    return ' '.join(f'{k}={v}' for k, v in params.items())


def run_cell(
    base: DeltaDenoConfig,
    cell: int,
    params: Mapping[str, Any],
    scenario: ToyScenario,
) -> SweepRow:
    label = _format_params(params)
    start = time.perf_counter()

    try:
        cfg = apply_overrides(base, params)
        result = scenario.run(cfg)
    except Exception as e:
        logger.warning(f'Sweep cell {cell} ({label}) on {scenario.name} failed: {e}')
        return SweepRow(
            cell, label, scenario.name, scenario.seed,
            error=f'{type(e).__name__}: {e}',
            seconds=time.perf_counter() - start,
        )

    trace = result.metadata.refinement_trace

    return SweepRow(
        cell=cell,
        params=label,
        scenario=scenario.name,
        seed=scenario.seed,
        iou=mask_iou(result.final_mask_latent, scenario.gt),
        energy_ratio=region_energy_ratio(result.s_final, scenario.gt, 1),
        outside_change=outside_change(result.latent, scenario.mu_normal, scenario.gt),
        mid_pixels=result.mid_mask.pixel_count,
        final_pixels=result.final_mask_latent.pixel_count,
        refinement_steps=0 if trace is None else len(trace) - 1,
        seconds=time.perf_counter() - start,
    )


def sweep(
    base: DeltaDenoConfig,
    grid: Mapping[str, Sequence[Any]],
    scenarios: Sequence[ToyScenario],
    out_dir: Path | None = None,
    workers: int = 1,
) -> SweepReport:
    cells = expand_grid(grid)
    if not cells or not scenarios:
        raise ValueError('Sweep needs at least one cell and one scenario')

    logger.info(f'Sweeping {len(cells)} cell(s) over {len(scenarios)} scenario(s)')

    jobs = [
        (i, params, scenario)
        for i, params in enumerate(cells)
        for scenario in scenarios
    ]

    with ThreadPoolExecutor(max_workers=workers) as executor:
        rows = list(executor.map(lambda job: run_cell(base, *job), jobs))

    report = SweepReport(tuple(rows), tuple(cells))

    if out_dir is not None:
        write_report(report, out_dir)

    return report


def write_report(report: SweepReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / REPORT_CSV, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row.csv_row())

    with open(out_dir / TIMINGS_CSV, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=('cell', 'scenario', 'seconds'))
        writer.writeheader()
        for row in report.rows:
            writer.writerow({
                'cell': row.cell,
                'scenario': row.scenario,
                'seconds': f'{row.seconds:.6f}',
            })

    lines = [f'{"cell":>4}  {"mean IoU":>8}  {"energy":>8}  {"failed":>6}  params']
    for i, params in enumerate(report.cells):
        failed = sum(1 for r in report.cell_rows(i) if r.error is not None)
        lines.append(
            f'{i:>4}  {report.mean(i, "iou"):>8.4f}  '
            f'{report.mean(i, "energy_ratio"):>8.4f}  {failed:>6}  '
            f'{_format_params(params)}'
        )

    with open(out_dir / SUMMARY_TXT, 'w') as f:
        f.write('\n'.join(lines))
        f.write('\n')

    labels = [_format_params(p) or '(base)' for p in report.cells]
    ious = [report.mean(i, 'iou') for i in range(len(report.cells))]
    energies = [report.mean(i, 'energy_ratio') for i in range(len(report.cells))]
    x = np.arange(len(labels))

    fig, ax = plt.subplots(figsize=(max(6, len(labels) * 1.2), 4))
    ax.bar(x - 0.2, ious, width=0.4, label='mask IoU')
    ax.bar(x + 0.2, energies, width=0.4, label='energy ratio')
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha='right')
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / REPORT_PNG, dpi=100)
    plt.close(fig)

    logger.info(f'Wrote sweep report: {out_dir}')
