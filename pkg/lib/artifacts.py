# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from PIL import Image

from lib.grid import Grid, ImageGrid


logger = logging.getLogger(__name__)


# Grids are raw row-major float32 with the shape in a JSON sidecar.
GRID_DTYPE = '<f4'


class ArtifactError(ValueError):
    pass


def sidecar_path(path: Path) -> Path:
    return path.with_suffix('.json')


def write_image(path: Path, image: ImageGrid) -> None:
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PNG')


def read_image(path: Path) -> ImageGrid:
    with Image.open(path) as image:
        pixels = np.asarray(image.convert('RGB'), dtype=np.float64)
    return pixels / 255.0


def write_mask(path: Path, mask: npt.NDArray[Any]) -> None:
    pixels = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PNG')


def read_mask(path: Path) -> Grid:
    """Single-channel mask as floats in [0, 1]. Soft masks are preserved."""
    with Image.open(path) as image:
        pixels = np.asarray(image.convert('L'), dtype=np.float64)
    return pixels / 255.0


def write_grid(path: Path, grid: npt.NDArray[np.float64]) -> None:
    if grid.ndim not in (2, 3):
        raise ArtifactError(f'Grid must be 2D or 3D, got {grid.shape}')

    info: dict[str, Any] = {
        'height': grid.shape[0],
        'width': grid.shape[1],
        'dtype': 'float32',
        'byte_order': 'little',
        'order': 'row-major',
    }
    if grid.ndim == 3:
        info['channels'] = grid.shape[2]

    with open(path, 'wb') as f:
        f.write(np.ascontiguousarray(grid, dtype=GRID_DTYPE).tobytes(order='C'))

    with open(sidecar_path(path), 'w') as f:
        json.dump(info, f, indent=2)
        f.write('\n')


def read_grid(path: Path) -> npt.NDArray[np.float64]:
    with open(sidecar_path(path), 'r') as f:
        info = json.load(f)

    if info.get('dtype') != 'float32' or info.get('order') != 'row-major':
        raise ArtifactError(f'Unsupported grid layout: {info}')

    shape = [info['height'], info['width']]
    if 'channels' in info:
        shape.append(info['channels'])

    data = np.fromfile(path, dtype=GRID_DTYPE)
    if data.size != np.prod(shape):
        raise ArtifactError(
            f'{path}: {data.size} values, sidecar declares shape {tuple(shape)}'
        )

    return data.reshape(shape).astype(np.float64)


def check_artifact(path: Path) -> None:
    """Raise ArtifactError unless the file parses in its declared format."""
    if not path.is_file():
        raise ArtifactError(f'Missing artifact: {path}')

    try:
        if path.suffix == '.png':
            with Image.open(path) as image:
                image.verify()
        elif path.suffix == '.f32':
            read_grid(path)
        elif path.suffix == '.json':
            with open(path, 'r') as f:
                json.load(f)
        else:
            raise ArtifactError(f'Unknown artifact type: {path}')
    except ArtifactError:
        raise
    except Exception as e:
        raise ArtifactError(f'Corrupt artifact: {path}: {e}') from e
