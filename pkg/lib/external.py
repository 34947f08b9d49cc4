# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from collections.abc import Sequence
import logging
from pathlib import Path
import subprocess
import tempfile
from typing_extensions import override

from lib import artifacts
from lib.attnbias import ForegroundProvider
from lib.grid import Grid, ImageGrid


logger = logging.getLogger(__name__)


def segment_foreground(
    command: Sequence[str],
    image: Path,
    mask: Path,
    timeout: float | None = None,
):
    logger.info(f'Segmenting foreground: {image}')

    cmd = [*command, image, mask]

    subprocess.check_call(cmd, timeout=timeout, stdout=subprocess.DEVNULL)


class ExternalForegroundProvider(ForegroundProvider):
    name = 'external'

    def __init__(self, command: Sequence[str], timeout: float | None = None) -> None:
        if not command:
            raise ValueError('Empty foreground provider command')

        self.command: list[str] = list(command)
        self.timeout: float | None = timeout

    @override
    def segment(self, image: ImageGrid) -> Grid:
        with tempfile.TemporaryDirectory(prefix='deltadeno-fg-') as temp_dir:
            image_path = Path(temp_dir) / 'image.png'
            mask_path = Path(temp_dir) / 'mask.png'

            artifacts.write_image(image_path, image)
            segment_foreground(self.command, image_path, mask_path, self.timeout)

            return artifacts.read_mask(mask_path)
