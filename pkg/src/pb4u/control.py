"""Resolution-aware propagation-depth arithmetic.

Calibration fixes a physical propagation distance D = k_base * l_base; a mesh
with mean edge length L then propagates K = floor(D / L) steps, so the
receptive field covers the same physical distance at every resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

# floor((D/L) * GUARD) instead of floor(D/L): a half-ulp of division rounding
# must not drop an exact mathematical integer to the one below
_GUARD = 1.0 + 4.0 * float(np.finfo(np.float64).eps)


@dataclass(frozen=True)
class ControlConfig:
    k_base: int
    l_base: float
    d: float  # propagation distance, k_base * l_base as stored


def calibrate(k_base: int, l_base: float) -> ControlConfig:
    if k_base < 1:
        raise InvalidArgument(f"k_base must be >= 1, got {k_base}")
    if l_base <= 0:
        raise InvalidArgument(f"l_base must be positive, got {l_base}")
    return ControlConfig(k_base=int(k_base), l_base=float(l_base), d=float(k_base) * float(l_base))


def propagation_steps(config: ControlConfig, mean_edge: float) -> int:
    """K for a mesh with the given mean edge length, clamped to at least one
    step so very coarse meshes still aggregate."""
    if mean_edge <= 0:
        raise InvalidArgument(f"mean edge length must be positive, got {mean_edge}")
    k = math.floor((config.d / mean_edge) * _GUARD)
    return max(1, int(k))
