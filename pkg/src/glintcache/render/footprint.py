"""Ray footprints in texel space."""

from __future__ import annotations

import math

import numpy as np

from ..oracle import Footprint

# a box pixel of width w has standard deviation w / sqrt(12); the 1.5 widens
# it to cover the reconstruction filter's overlap with neighbouring pixels
PIXEL_SIGMA = 1.5 / math.sqrt(12.0)


def differential_sigma(du_dx, du_dy, spp=1, pixel_angle=None, distance=None, texel_extent=None):
    """Isotropic footprint deviation (texels) from texel-space ray differentials.

    ``du_dx``, ``du_dy`` (N, 2) are texel offsets per pixel step along the
    image axes.  The deviation is the geometric mean of their lengths,
    scaled to a Gaussian pixel and divided by ``sqrt(spp)``.  Degenerate
    differentials fall back to ``distance * pixel_angle / texel_extent``.
    """
    lx = np.linalg.norm(np.atleast_2d(du_dx), axis=-1)
    ly = np.linalg.norm(np.atleast_2d(du_dy), axis=-1)
    g = np.sqrt(lx * ly)
    bad = ~np.isfinite(g) | (g <= 0)
    if bad.any():
        if pixel_angle is None or distance is None or texel_extent is None:
            raise ValueError("degenerate ray differentials and no fallback estimate")
        fb = np.broadcast_to(np.asarray(distance, dtype=np.float64) * pixel_angle / texel_extent,
                             g.shape)
        g = np.where(bad, fb, g)
    return PIXEL_SIGMA * g / math.sqrt(spp)


def compute_footprint(center, du_dx, du_dy, spp=1, **fallback) -> Footprint:
    return Footprint(tuple(center), float(differential_sigma(du_dx, du_dy, spp, **fallback)[0]))


def amplify_indirect_footprint(fp: Footprint, glossiness: float, path_length: float,
                               texel_extent: float = 1.0, spread_scale: float = 1.0):
    """Widen a footprint after a glossy bounce.

    The lobe of a bounce with ``glossiness`` in (0, 1] spreads by an angle
    ``spread_scale * (1 - glossiness)`` (radians, small-angle); travelling
    ``path_length`` world units turns that into a positional spread that is
    added in quadrature to the incoming footprint.  A mirror bounce
    (glossiness 1) or zero travel leaves the footprint unchanged.
    """
    if not 0.0 < glossiness <= 1.0:
        raise ValueError("glossiness must lie in (0, 1]")
    if path_length < 0:
        raise ValueError("path length must be non-negative")
    spread = spread_scale * (1.0 - glossiness) * path_length / texel_extent
    return Footprint(fp.center, math.hypot(fp.sigma_p, spread))
