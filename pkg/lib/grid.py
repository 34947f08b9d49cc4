# SPDX-FileCopyrightText: 2026 DeltaDeno contributors
# SPDX-License-Identifier: GPL-3.0-only

from typing import TypeAlias

import numpy as np
import numpy.typing as npt


# H_z x W_z x C latent.
LatentGrid: TypeAlias = npt.NDArray[np.float64]

# H x W x 3 image with values in [0, 1].
ImageGrid: TypeAlias = npt.NDArray[np.float64]

# H_z x W_z map (delta maps, priors, masks as floats).
Grid: TypeAlias = npt.NDArray[np.float64]


class ShapeMismatch(ValueError):
    pass


def require_same_shape(a: npt.NDArray, b: npt.NDArray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f'{what}: shape {a.shape} != {b.shape}')
