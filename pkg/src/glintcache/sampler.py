"""Importance sampling of projected half vectors from compressed NDFs.

A sample first picks an angular block in proportion to its blended average,
then descends ``log2(t)`` times through quadrants, each time choosing in
proportion to the quadrant averages returned by range queries, and finally
jitters uniformly inside the pixel it reaches.  Because every range average
is exact, the chance of landing in a pixel is that pixel's share of the
image, and the density of the sample is the NDF value itself.

Two uniform variates drive the whole descent: each choice splits first on
x (marginal) then on y (conditional) and rescales the variate it used, so
what remains of the pair is still uniform for the next step and for the
final jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .oracle import Footprint, eval_pndf_image
from .store import CompressedNdf, _fallback_boundary, eval_ndf_batch


@dataclass(eq=False)
class SampleRecord:
    """Sampled half vectors for one batch.

    ``h`` (N, 2), ``pdf`` (N,) in projected-half-vector measure, ``valid``
    (N,) false where no sample could be drawn (all-zero NDF, or a jittered
    point outside the unit disk), and ``path`` (N, depth + 1, 2) holding the
    pixel origin of the chosen block and of every quadrant on the way down.
    """

    h: np.ndarray
    pdf: np.ndarray
    valid: np.ndarray
    path: np.ndarray

    def __len__(self):
        return len(self.pdf)


def _choose(u, w_lo, w_hi):
    """Pick the upper branch with probability w_hi / (w_lo + w_hi); rescale u."""
    total = w_lo + w_hi
    p_lo = np.divide(w_lo, total, out=np.zeros_like(total), where=total > 0)
    hi = u >= p_lo
    u_new = np.where(hi, (u - p_lo) / np.where(1.0 - p_lo > 0, 1.0 - p_lo, 1.0),
                     u / np.where(p_lo > 0, p_lo, 1.0))
    return hi, np.clip(u_new, 0.0, np.nextafter(1.0, 0.0))


def _choose_index(u, weights):
    """Inverse-CDF choice along the last axis of ``weights``; rescale u."""
    cdf = np.cumsum(weights, axis=-1)
    total = cdf[..., -1]
    target = u * total
    idx = np.sum(cdf <= target[..., None], axis=-1)
    idx = np.minimum(idx, weights.shape[-1] - 1)
    # skip zero-weight entries that the comparison may land on at the top end
    lower = np.where(idx > 0, np.take_along_axis(cdf, np.maximum(idx - 1, 0)[..., None],
                                                 axis=-1)[..., 0], 0.0)
    width = np.take_along_axis(weights, idx[..., None], axis=-1)[..., 0]
    u_new = np.divide(target - lower, width, out=np.zeros_like(target), where=width > 0)
    return idx, np.clip(u_new, 0.0, np.nextafter(1.0, 0.0)), total > 0


class _StoreBackend:
    def __init__(self, store, centers, sigmas):
        self.store = store
        self.centers = centers
        self.sigmas = sigmas

    def blocks(self, f_idx):
        s = self.store
        A, t = s.blocks_per_side, s.t
        by, bx = np.divmod(np.arange(A * A), A)
        out = np.empty((len(f_idx), A, A))
        for k, f in enumerate(f_idx):
            c = np.repeat(self.centers[f][None], A * A, axis=0)
            v, _, _ = s.blend_ranges(c, np.full(A * A, self.sigmas[f]), bx * t, bx * t + t - 1,
                                     by * t, by * t + t - 1)
            out[k] = v.reshape(A, A)
        return out

    def ranges(self, f, x1, x2, y1, y2):
        v, _, _ = self.store.blend_ranges(self.centers[f], self.sigmas[f], x1, x2, y1, y2)
        return v


class _DenseBackend:
    """Same interface over explicit oracle images (footprints below the finest level)."""

    def __init__(self, images, t):
        self.t = t
        self.sat = np.zeros((len(images), images.shape[1] + 1, images.shape[2] + 1))
        self.sat[:, 1:, 1:] = np.cumsum(np.cumsum(images, axis=1), axis=2)

    def blocks(self, f_idx):
        t = self.t
        res = self.sat.shape[1] - 1
        A = res // t
        edges = np.arange(0, res + 1, t)
        s = self.sat[np.asarray(f_idx)][:, edges][:, :, edges]
        sums = s[:, 1:, 1:] - s[:, :-1, 1:] - s[:, 1:, :-1] + s[:, :-1, :-1]
        return sums.reshape(len(f_idx), A, A) / (t * t)

    def ranges(self, f, x1, x2, y1, y2):
        s = self.sat
        tot = s[f, y2 + 1, x2 + 1] - s[f, y1, x2 + 1] - s[f, y2 + 1, x1] + s[f, y1, x1]
        return np.maximum(tot / ((x2 - x1 + 1) * (y2 - y1 + 1)), 0.0)


def _descend(backend, f, u, block_table, t, res):
    """Core descent for samples whose footprint index is ``f`` (N,)."""
    n = len(f)
    A = res // t
    # block choice: column by marginal, then row given the column
    cols = block_table.sum(axis=1)[f]  # (N, A) summed over rows
    bx, u0, ok = _choose_index(u[:, 0], cols)
    col_w = block_table[f, :, bx]  # (N, A) rows of the chosen column
    by, u1, ok2 = _choose_index(u[:, 1], col_w)
    ok &= ok2
    x0 = bx * t
    y0 = by * t
    depth = int(np.log2(t))
    path = np.zeros((n, depth + 1, 2), dtype=np.int64)
    path[:, 0] = np.column_stack([x0, y0])
    size = t
    for d in range(depth):
        half = size // 2
        # quadrant averages, evaluated once per distinct (footprint, node)
        key = np.stack([f, x0, y0], axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        inv = inv.ravel()
        uf, ux, uy = uniq[:, 0], uniq[:, 1], uniq[:, 2]
        quads = []
        for qy in (0, 1):
            for qx in (0, 1):
                xa = ux + qx * half
                ya = uy + qy * half
                quads.append(backend.ranges(uf, xa, xa + half - 1, ya, ya + half - 1))
        q00, q10, q01, q11 = (q[inv] for q in quads)
        right, u0 = _choose(u0, q00 + q01, q10 + q11)
        lo_row = np.where(right, q10, q00)
        hi_row = np.where(right, q11, q01)
        down, u1 = _choose(u1, lo_row, hi_row)
        ok &= (q00 + q01 + q10 + q11) > 0
        x0 = x0 + right * half
        y0 = y0 + down * half
        size = half
        path[:, d + 1] = np.column_stack([x0, y0])
    hx = -1.0 + 2.0 * (x0 + u0) / res
    hy = -1.0 + 2.0 * (y0 + u1) / res
    return np.column_stack([hx, hy]), ok, path


def sample_batch(store: CompressedNdf, centers, sigmas, u, fallback=None) -> SampleRecord:
    """Draw one half vector per row of ``u`` (N, 2) for per-sample footprints."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    u = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    n = len(u)
    centers = np.broadcast_to(centers, (n, 2))
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (n,))
    res, t = store.resolution, store.t

    fkey = np.column_stack([centers, sigmas])
    ukeys, f_of = np.unique(fkey, axis=0, return_inverse=True)
    f_of = f_of.ravel()
    below = store.continuous_level(ukeys[:, 2]) < 0
    use_dense = below & (fallback is not None)

    h = np.zeros((n, 2))
    ok = np.zeros(n, dtype=bool)
    path = np.zeros((n, int(np.log2(t)) + 1, 2), dtype=np.int64)
    for dense in (False, True):
        fsel = np.nonzero(use_dense == dense)[0]
        if len(fsel) == 0:
            continue
        rows = np.nonzero(np.isin(f_of, fsel))[0]
        local = np.searchsorted(fsel, f_of[rows])
        if dense:
            imgs = np.stack([eval_pndf_image(fallback, Footprint(ukeys[k, :2], ukeys[k, 2]),
                                             store.params.roughness, res,
                                             boundary=_fallback_boundary(fallback)).values
                             for k in fsel])
            backend = _DenseBackend(imgs, t)
        else:
            backend = _StoreBackend(store, ukeys[fsel, :2], ukeys[fsel, 2])
        table = backend.blocks(np.arange(len(fsel)))
        h[rows], ok[rows], path[rows] = _descend(backend, local, u[rows], table, t, res)

    ok &= np.sum(h * h, axis=1) < 1.0
    pdf_vals = np.zeros(n)
    if ok.any():
        pdf_vals[ok] = eval_ndf_batch(store, centers[ok], sigmas[ok], h[ok], fallback)
    ok &= pdf_vals > 0
    return SampleRecord(h=h, pdf=np.where(ok, pdf_vals, 0.0), valid=ok, path=path)


def sample_half_vector(store: CompressedNdf, fp: Footprint, u, fallback=None) -> SampleRecord:
    """Sample projected half vectors for one footprint; ``u`` is (2,) or (N, 2)."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    return sample_batch(store, np.asarray(fp.center)[None], fp.sigma_p, u, fallback)


def pdf(store: CompressedNdf, fp: Footprint, h, fallback=None):
    """Density of the sampler at ``h``: the blended NDF value itself."""
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    out = eval_ndf_batch(store, np.repeat(np.asarray(fp.center)[None], len(h2), axis=0),
                         np.full(len(h2), fp.sigma_p), h2, fallback)
    return float(out[0]) if single else out
