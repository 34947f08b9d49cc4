#!/usr/bin/env python3

# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Any

from lib import artifacts, evalkit, pipeline
from lib.config import DeltaDenoConfig, load_config


logger = logging.getLogger(__name__)


IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg')


def parse_grid_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_grid(specs: list[str]) -> dict[str, list[Any]]:
    grid = {}

    for spec in specs:
        key, sep, values = spec.partition('=')
        if not sep or not key or not values:
            raise ValueError(f'Bad grid axis (expected key=v1,v2,...): {spec!r}')
        grid[key] = [parse_grid_value(v) for v in values.split(',')]

    return grid


def list_images(source: Path) -> list[Path]:
    if source.is_dir():
        images = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        with open(source, 'r') as f:
            images = [source.parent / line.strip() for line in f if line.strip()]

    if not images:
        raise ValueError(f'No images found: {source}')

    return images


def load_run_config(args: argparse.Namespace) -> DeltaDenoConfig:
    cfg = load_config(args.config) if args.config else DeltaDenoConfig()

    update: dict[str, Any] = {}
    if getattr(args, 'seed', None) is not None:
        update['seed'] = args.seed
    if getattr(args, 'output', None) is not None:
        update['out_dir'] = args.output

    return cfg.model_copy(update=update) if update else cfg


def run_generate(args: argparse.Namespace):
    cfg = load_run_config(args)
    if cfg.out_dir is None:
        raise ValueError('No output directory (use --out or out_dir in the config)')

    image = artifacts.read_image(args.image)
    result = pipeline.generate(cfg, image, name=args.image.stem)

    print(json.dumps({
        'out_dir': str(result.out_dir),
        'mask_pixels': result.final_mask.pixel_count,
    }))


def run_batch(args: argparse.Namespace):
    cfg = load_run_config(args)
    if cfg.out_dir is None:
        raise ValueError('No output directory (use --out or out_dir in the config)')

    manifest = pipeline.generate_batch(cfg, list_images(args.images), cfg.out_dir)

    print(json.dumps({
        'manifest': str(cfg.out_dir / pipeline.MANIFEST),
        'items': len(manifest.rows),
        'failed': len(manifest.failed()),
    }))

    if manifest.failed():
        raise RuntimeError(f'{len(manifest.failed())} batch item(s) failed')


def run_inspect(args: argparse.Namespace):
    print(json.dumps(pipeline.inspect_result(args.result), indent=2))


def run_scenario(args: argparse.Namespace):
    base = load_config(args.config) if args.config else DeltaDenoConfig()
    scenario = evalkit.make_rect_scenario(args.seed, kind=args.kind)
    scenario.write(args.output, base)

    logger.info(f'Wrote {scenario.name} scenario: {args.output}')


def run_sweep(args: argparse.Namespace):
    base = load_config(args.config) if args.config else DeltaDenoConfig()
    scenarios = [
        evalkit.make_rect_scenario(args.seed + i, kind=args.kind)
        for i in range(args.trials)
    ]

    report = evalkit.sweep(
        base,
        parse_grid(args.grid),
        scenarios,
        out_dir=args.output,
        workers=args.workers,
    )

    failed = sum(1 for r in report.rows if r.error is not None)
    print(json.dumps({
        'report': str(args.output / evalkit.REPORT_CSV),
        'rows': len(report.rows),
        'failed': failed,
    }))


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description='Zero-shot anomaly generation by dual-branch delta denoising',
    )
    parser.add_argument(
        '-v', '--verbose',
        action='store_true',
        help='Log per-step details',
    )

    subparsers = parser.add_subparsers(dest='command', required=True)

    generate = subparsers.add_parser('generate', help='Generate one anomaly image')
    generate.set_defaults(func=run_generate)
    generate.add_argument('--config', type=Path, help='JSON or TOML config')
    generate.add_argument('--image', type=Path, required=True, help='Normal image')
    generate.add_argument('--out', dest='output', type=Path, help='Result directory')
    generate.add_argument('--seed', type=int, help='Override the config seed')

    batch = subparsers.add_parser('batch', help='Generate a dataset')
    batch.set_defaults(func=run_batch)
    batch.add_argument('--config', type=Path, help='JSON or TOML config')
    batch.add_argument(
        '--images',
        type=Path,
        required=True,
        help='Directory of images or a file listing one image path per line',
    )
    batch.add_argument('--out', dest='output', type=Path, help='Dataset directory')
    batch.add_argument('--seed', type=int, help='Override the base seed')

    inspect = subparsers.add_parser('inspect', help='Summarize a result directory')
    inspect.set_defaults(func=run_inspect)
    inspect.add_argument('result', type=Path, help='Result directory')

    scenario = subparsers.add_parser('scenario', help='Write a toy rectangle scenario')
    scenario.set_defaults(func=run_scenario)
    scenario.add_argument('--kind', choices=('analytic', 'synthetic'), default='analytic')
    scenario.add_argument('--seed', type=int, default=0)
    scenario.add_argument('--config', type=Path, help='Base config')
    scenario.add_argument('--out', dest='output', type=Path, required=True)

    sweep = subparsers.add_parser('sweep', help='Sweep parameters on toy scenarios')
    sweep.set_defaults(func=run_sweep)
    sweep.add_argument('--config', type=Path, help='Base config')
    sweep.add_argument(
        '--grid',
        action='append',
        default=[],
        help='Axis as key=v1,v2,... (dotted keys for nested fields, repeatable)',
    )
    sweep.add_argument('--kind', choices=('analytic', 'synthetic'), default='analytic')
    sweep.add_argument('--trials', type=int, default=5)
    sweep.add_argument('--seed', type=int, default=0)
    sweep.add_argument('--workers', type=int, default=1)
    sweep.add_argument('--out', dest='output', type=Path, required=True)

    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='\x1b[1m[%(levelname)s] %(message)s\x1b[0m',
    )

    try:
        args.func(args)
    except Exception as e:
        logging.error(f'Failed to run {args.command}', exc_info=e)
        print(json.dumps({'error': type(e).__name__, 'message': str(e)}), file=sys.stderr)
        return 1

    return 0


if __name__ == '__main__':
    sys.exit(main())
