"""Standard example maps used by tests, the CLI selftest, and docs."""

from __future__ import annotations

import cmath
import math

from .core import SkewProductMap, build_map


def chebyshev_map(lam: complex = 0.5) -> SkewProductMap:
    """c(z) = -2 + z: the fiber over 0 is the real Chebyshev quadratic."""
    return build_map(lam, 2, [[-2.0, 1.0]])


def basilica_map(lam: complex = 0.5) -> SkewProductMap:
    """c(z) = -1 + z: superattracting fiber 2-cycle {0, -1}."""
    return build_map(lam, 2, [[-1.0, 1.0]])


def nearfixed_map(lam: complex = 0.5) -> SkewProductMap:
    """c(z) = 0.2 + z: attracting fiber fixed point near 0.276."""
    return build_map(lam, 2, [[0.2, 1.0]])


def siegel_map(lam: complex = 0.5) -> SkewProductMap:
    """Quadratic fiber with a golden-mean Siegel fixed point.

    The fixed point p = sigma/2 with sigma = exp(2*pi*i*theta),
    theta = (sqrt(5) - 1)/2, has multiplier sigma; c = p - p^2.
    """
    theta = (math.sqrt(5.0) - 1.0) / 2.0
    sigma = cmath.exp(2j * math.pi * theta)
    p = sigma / 2.0
    c = p - p * p
    return build_map(lam, 2, [[c, 1.0]])


def general_embedding(map: SkewProductMap) -> SkewProductMap:
    """Re-build a unicritical map in general mode with identical coefficients."""
    coeffs = [list(poly) for poly in map.fiber_coeffs]
    return build_map(map.lam, map.degree, coeffs, mode="general")
