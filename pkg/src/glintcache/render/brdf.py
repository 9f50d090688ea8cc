"""Microfacet BRDF assembly around a glinty NDF.

``f(i, o) = F(i.h) G(i, o) D(h) / (4 (i.n) (o.n))``, where ``D`` is a
density over projected half vectors.  That density already integrates to
one against ``(h.n) dw_h``, the usual microfacet normalisation, so it is
used as ``D`` without conversion.
"""

from __future__ import annotations

import numpy as np


def fresnel_schlick(f0, cos_theta):
    """Schlick's approximation; ``f0`` (channels,), ``cos_theta`` (N,) -> (N, channels)."""
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), 0.0, 1.0)
    f0 = np.asarray(f0, dtype=np.float64)
    return f0 + (1.0 - f0) * ((1.0 - c) ** 5)[:, None]


def smith_lambda(cos_theta, alpha):
    c = np.clip(np.asarray(cos_theta, dtype=np.float64), 1e-9, 1.0)
    tan2 = (1.0 - c * c) / (c * c)
    return 0.5 * (np.sqrt(1.0 + alpha * alpha * tan2) - 1.0)


def smith_g1(cos_theta, alpha=0.1):
    return 1.0 / (1.0 + smith_lambda(cos_theta, alpha))


def smith_g2(cos_i, cos_o, alpha):
    """Height-correlated masking-shadowing."""
    return 1.0 / (1.0 + smith_lambda(cos_i, alpha) + smith_lambda(cos_o, alpha))


def masking_alpha(sigma_r, slope_rms=0.0):
    """Beckmann-style roughness proxy from intrinsic roughness and normal-map slope spread."""
    return float(np.sqrt(2.0 * (sigma_r ** 2 + slope_rms ** 2)))


def eval_brdf(f0, D, cos_i, cos_o, cos_ih, alpha=None):
    """BRDF values (N, channels) given NDF values ``D`` at the half vectors.

    ``alpha`` None disables masking (G = 1).  Directions below the horizon
    give 0.
    """
    cos_i = np.asarray(cos_i, dtype=np.float64)
    cos_o = np.broadcast_to(np.asarray(cos_o, dtype=np.float64), cos_i.shape)
    ok = (cos_i > 0) & (cos_o > 0)
    G = 1.0 if alpha is None else smith_g2(cos_i, cos_o, alpha)
    denom = np.where(ok, 4.0 * cos_i * cos_o, 1.0)
    scalar = np.where(ok, G * np.asarray(D) / denom, 0.0)
    return fresnel_schlick(f0, cos_ih) * scalar[:, None]
