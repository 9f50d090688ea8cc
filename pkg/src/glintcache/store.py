"""Compressed NDF container and its queries.

Every NDF image of a pyramid is cut into ``t x t`` angular blocks.  Blank
blocks are dropped; the rest are grouped by (spatial region of the footprint
centre, angular block position) across all levels, and each group is
CP-decomposed.  Queries never decompress a whole image:

* a point query evaluates one rank sum;
* a range query splits the rectangle on block boundaries and evaluates one
  rank sum of SAT segment means per touched block.

Footprint-level evaluation blends eight point (or range) queries with
trilinear weights in (u, v, log2 sigma_p).
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .cpd import cp_als, prefix_sums
from .errors import ChecksumError, FormatError
from .oracle import (Footprint, eval_pndf_image, eval_pndf_point, pixel_of)
from .pyramid import NdfPyramid, PyramidParams

log = logging.getLogger(__name__)

MAGIC = b"CNDF"
VERSION = 1
DEFAULT_BLOCK = 16
DEFAULT_REGIONS = 8

_HEADER = struct.Struct("<4sIII")
_SECTION = struct.Struct("<IQQ")
_LEVEL = struct.Struct("<iidii")
_GROUP = struct.Struct("<iiiiIIQQ")
_PAYLOAD_HEAD = struct.Struct("<III")
SECTION_NAMES = ("params", "levels", "occupancy", "groups", "slabs", "payload")


@dataclass(frozen=True)
class AngularRange:
    """Inclusive pixel rectangle ``[x1, x2] x [y1, y2]`` on an NDF image."""

    x1: int
    x2: int
    y1: int
    y2: int

    def validate(self, resolution):
        if not (0 <= self.x1 <= self.x2 < resolution and 0 <= self.y1 <= self.y2 < resolution):
            raise ValueError(f"invalid angular range {self} for resolution {resolution}")
        return self

    @property
    def area(self):
        return (self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)

    @classmethod
    def centered(cls, h, side, resolution):
        """Square of ``side`` pixels centred on the pixel containing ``h``, clipped."""
        px, py = pixel_of(h, resolution)
        side = int(max(1, min(resolution, side)))
        lo_x = int(px) - (side - 1) // 2
        lo_y = int(py) - (side - 1) // 2
        return cls(max(lo_x, 0), min(lo_x + side - 1, resolution - 1),
                   max(lo_y, 0), min(lo_y + side - 1, resolution - 1))


@numba.njit(cache=True, nogil=True)
def _point_kernel(cell, px, py, t, slab_table, group_of_slab, C, X, Y, Zs, out):
    """Rank sums for (cell, pixel) triples; blank blocks give 0."""
    for q in range(len(cell)):
        s = slab_table[cell[q], py[q] // t, px[q] // t]
        if s < 0:
            out[q] = 0.0
            continue
        g = group_of_slab[s]
        lx = px[q] % t
        ly = py[q] % t
        acc = 0.0
        for r in range(C.shape[1]):
            acc += C[g, r] * X[g, r, lx] * Y[g, r, ly] * Zs[s, r]
        out[q] = acc


@numba.njit(cache=True, nogil=True)
def _range_kernel(cell, x1, x2, y1, y2, t, slab_table, group_of_slab, C, X_sat, Y_sat, Zs, out):
    """Exact rectangle averages: one SAT-factorised rank sum per touched block."""
    for q in range(len(cell)):
        total = 0.0
        for by in range(y1[q] // t, y2[q] // t + 1):
            ly1 = max(y1[q], by * t) - by * t
            ly2 = min(y2[q], by * t + t - 1) - by * t
            for bx in range(x1[q] // t, x2[q] // t + 1):
                s = slab_table[cell[q], by, bx]
                if s < 0:
                    continue
                lx1 = max(x1[q], bx * t) - bx * t
                lx2 = min(x2[q], bx * t + t - 1) - bx * t
                g = group_of_slab[s]
                # block sum = sum_r C Z (sum_x X) (sum_y Y); area cancels the means
                acc = 0.0
                for r in range(C.shape[1]):
                    acc += (C[g, r] * Zs[s, r] * (X_sat[g, r, lx2 + 1] - X_sat[g, r, lx1])
                            * (Y_sat[g, r, ly2 + 1] - Y_sat[g, r, ly1]))
                total += acc
        out[q] = total / ((x2[q] - x1[q] + 1) * (y2[q] - y1[q] + 1))


@dataclass(frozen=True)
class LevelInfo:
    level: int
    stride: int
    sigma: float
    offset: int
    n: int


@dataclass(eq=False)
class CompressedNdf:
    params: PyramidParams
    map_shape: tuple
    tileable: bool
    margin: int
    t: int
    rank: int
    region_size: int
    levels: list  # LevelInfo
    slab_table: np.ndarray  # (cells, A, A) int32, -1 for blank
    group_keys: np.ndarray  # (G, 4) int32: region row, region col, block row, block col
    group_of_slab: np.ndarray  # (S,) int32
    z_of_slab: np.ndarray  # (S,) int32
    group_rank: np.ndarray  # (G,) int32
    C: np.ndarray  # (G, Rmax) float32-representable float64
    X: np.ndarray  # (G, Rmax, t)
    Y: np.ndarray  # (G, Rmax, t)
    Zs: np.ndarray  # (S, Rmax): Z factor per slab
    fit_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X_sat = prefix_sums(self.X)
        self.Y_sat = prefix_sums(self.Y)
        self.cell_base = np.cumsum([0] + [lv.n * lv.n for lv in self.levels])[:-1]
        self._log2_base = math.log2(self.params.base_sigma)

    # -- geometry ------------------------------------------------------------
    @property
    def resolution(self):
        return self.params.ndf_resolution

    @property
    def blocks_per_side(self):
        return self.resolution // self.t

    @property
    def top(self):
        return len(self.levels) - 1

    @property
    def n_groups(self):
        return len(self.group_keys)

    @property
    def n_slabs(self):
        return len(self.group_of_slab)

    def blank_fraction(self):
        return float(np.mean(self.slab_table < 0))

    def cell_id(self, level, i, j):
        """Flat id of cell column ``i``, row ``j`` on ``level`` (array indices)."""
        lv = self.levels[level]
        return self.cell_base[level] + np.asarray(j) * lv.n + np.asarray(i)

    def _check_cell(self, level, i, j):
        if not 0 <= level <= self.top:
            raise IndexError(f"level {level} out of range 0..{self.top}")
        n = self.levels[level].n
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"cell ({i}, {j}) outside the {n}x{n} grid of level {level}")

    # -- raw queries -----------------------------------------------------------
    def _point_raw(self, cell, px, py):
        """Pre-clamp rank sums for arrays of (cell, pixel); blank blocks give 0."""
        cell, px, py = (np.array(np.ravel(a), dtype=np.int64) for a in
                        np.broadcast_arrays(np.asarray(cell), np.asarray(px), np.asarray(py)))
        out = np.empty(len(cell))
        _point_kernel(cell, px, py, self.t, self.slab_table, self.group_of_slab, self.C,
                      self.X, self.Y, self.Zs, out)
        return out

    def _range_raw(self, cell, x1, x2, y1, y2):
        """Pre-clamp exact averages over inclusive pixel rectangles."""
        cell, x1, x2, y1, y2 = (np.array(np.ravel(a), dtype=np.int64) for a in
                                np.broadcast_arrays(*(np.asarray(a) for a in
                                                      (cell, x1, x2, y1, y2))))
        out = np.empty(len(cell))
        _range_kernel(cell, x1, x2, y1, y2, self.t, self.slab_table, self.group_of_slab,
                      self.C, self.X_sat, self.Y_sat, self.Zs, out)
        return out

    # -- public single queries -----------------------------------------------------
    def point_query(self, level, i, j, pixel) -> float:
        """Clamped NDF value of pixel ``(x, y)`` of the image at cell ``(i, j)``."""
        self._check_cell(level, i, j)
        x, y = pixel
        if not (0 <= x < self.resolution and 0 <= y < self.resolution):
            raise IndexError(f"pixel {pixel} outside the NDF image")
        v = self._point_raw(np.array([self.cell_id(level, i, j)]), np.array([x]), np.array([y]))
        return max(float(v[0]), 0.0)

    def range_query(self, level, i, j, rng: AngularRange, clamp=True) -> float:
        """Exact average over ``rng`` (clamped to >= 0 unless ``clamp=False``)."""
        self._check_cell(level, i, j)
        rng.validate(self.resolution)
        v = float(self._range_raw(np.array([self.cell_id(level, i, j)]), rng.x1, rng.x2,
                                  rng.y1, rng.y2)[0])
        return max(v, 0.0) if clamp else v

    def image(self, level, i, j, clamp=True) -> np.ndarray:
        """Full decompressed image (diagnostics only)."""
        self._check_cell(level, i, j)
        res = self.resolution
        py, px = np.mgrid[0:res, 0:res]
        cell = np.full(px.size, self.cell_id(level, i, j))
        v = self._point_raw(cell, px.ravel(), py.ravel()).reshape(res, res)
        return np.maximum(v, 0.0) if clamp else v

    # -- footprint interpolation ------------------------------------------------------
    def continuous_level(self, sigma):
        return np.log2(np.asarray(sigma, dtype=np.float64)) - self._log2_base

    def neighbors(self, centers, sigmas):
        """Trilinear neighbours of footprints.

        Returns ``(cells, weights, below, clamped)``: ``cells`` and
        ``weights`` have shape (N, 8); ``below`` marks footprints smaller than
        the finest level (handled by the oracle fallback), ``clamped`` those
        larger than the coarsest level.
        """
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        ell = np.broadcast_to(self.continuous_level(sigmas), (len(centers),))
        below = ell < 0
        clamped = ell > self.top
        ell = np.clip(ell, 0.0, self.top)
        l0 = np.minimum(np.floor(ell).astype(np.int64), self.top)
        fl = ell - l0
        l1 = np.minimum(l0 + 1, self.top)
        fl = np.where(l0 == self.top, 0.0, fl)

        cells = np.empty((len(centers), 8), dtype=np.int64)
        weights = np.empty((len(centers), 8))
        strides = np.array([lv.stride for lv in self.levels], dtype=np.float64)
        offsets = np.array([lv.offset for lv in self.levels], dtype=np.float64)
        ns = np.array([lv.n for lv in self.levels], dtype=np.int64)
        for slot, (lvl, wl) in enumerate(((l0, 1.0 - fl), (l1, fl))):
            q = centers / strides[lvl][:, None] - 0.5 - offsets[lvl][:, None]
            k0 = np.floor(q).astype(np.int64)
            f = q - k0
            n = ns[lvl][:, None]
            k1 = k0 + 1
            if self.tileable and self.margin == 0:
                k0, k1 = np.mod(k0, n), np.mod(k1, n)
            else:
                k0, k1 = np.clip(k0, 0, n - 1), np.clip(k1, 0, n - 1)
            base = self.cell_base[lvl]
            for c, (kx, wx) in enumerate(((k0[:, 0], 1 - f[:, 0]), (k1[:, 0], f[:, 0]))):
                for d, (ky, wy) in enumerate(((k0[:, 1], 1 - f[:, 1]), (k1[:, 1], f[:, 1]))):
                    col = slot * 4 + d * 2 + c
                    cells[:, col] = base + ky * n[:, 0] + kx
                    weights[:, col] = wl * wx * wy
        return cells, weights, below, clamped

    def blend_points(self, centers, sigmas, h):
        """Trilinear blend of clamped point queries (no fallback)."""
        h = np.asarray(h, dtype=np.float64).reshape(-1, 2)
        cells, w, below, clamped = self.neighbors(centers, sigmas)
        px, py = pixel_of(h, self.resolution).T
        v = self._point_raw(cells.ravel(), np.repeat(px, 8), np.repeat(py, 8))
        v = np.maximum(v.reshape(-1, 8), 0.0)
        return np.add.reduce(w * v, axis=1), below, clamped

    def blend_ranges(self, centers, sigmas, x1, x2, y1, y2):
        """Trilinear blend of clamped range queries (no fallback)."""
        cells, w, below, clamped = self.neighbors(centers, sigmas)
        rep = lambda a: np.repeat(np.broadcast_to(np.asarray(a), (len(cells),)), 8)
        v = self._range_raw(cells.ravel(), rep(x1), rep(x2), rep(y1), rep(y2))
        v = np.maximum(v.reshape(-1, 8), 0.0)
        return np.add.reduce(w * v, axis=1), below, clamped

    # -- serialization -------------------------------------------------------------------
    def to_bytes(self) -> bytes:
        return serialize(self)

    def save(self, path):
        Path(path).write_bytes(serialize(self))

    @classmethod
    def load(cls, path):
        return deserialize(Path(path).read_bytes())

    def nbytes(self):
        return len(serialize(self))


# -- footprint-level evaluation ----------------------------------------------------------

def _fallback_boundary(fallback):
    return None if fallback is None else ("wrap" if fallback.tileable else "clip")


def _group_footprints(centers, sigmas, mask):
    """Yield ``(rows, Footprint)`` for each distinct footprint among masked rows."""
    idx = np.nonzero(mask)[0]
    keys = np.column_stack([centers[idx], sigmas[idx]])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    for k, key in enumerate(uniq):
        yield idx[inv == k], Footprint(key[:2], key[2])


def eval_ndf(store: CompressedNdf, fp: Footprint, h, fallback=None) -> float:
    """NDF density of footprint ``fp`` at projected half vector ``h``.

    Footprints finer than the finest level are delegated to the brute-force
    oracle on ``fallback`` (a NormalMap) when one is given, otherwise they
    use the finest level.  Footprints coarser than the top level are clamped
    to it.
    """
    h = np.asarray(h, dtype=np.float64)
    if h @ h > 1.0 + 1e-12:
        raise ValueError("projected half vector must satisfy |h| <= 1")
    return float(eval_ndf_batch(store, [fp.center], [fp.sigma_p], h[None], fallback)[0])


def eval_ndf_batch(store: CompressedNdf, centers, sigmas, h, fallback=None, stats=None):
    """Vectorised :func:`eval_ndf` for N (centre, sigma, h) triples."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (len(centers),))
    h = np.asarray(h, dtype=np.float64).reshape(-1, 2)
    out, below, clamped = store.blend_points(centers, sigmas, h)
    if fallback is not None and below.any():
        for rows, fp in _group_footprints(centers, sigmas, below):
            out[rows] = eval_pndf_point(fallback, fp, h[rows], store.params.roughness,
                                        store.resolution, boundary=_fallback_boundary(fallback))
    if stats is not None:
        used = below if fallback is not None else np.zeros_like(below)
        stats["point_queries"] = stats.get("point_queries", 0) + 8 * int(np.sum(~used))
        stats["fallback"] = stats.get("fallback", 0) + int(np.sum(used))
        stats["below_finest"] = stats.get("below_finest", 0) + int(np.sum(below))
        stats["clamped"] = stats.get("clamped", 0) + int(np.sum(clamped))
    return out


def eval_ndf_range(store: CompressedNdf, fp: Footprint, rng: AngularRange,
                   fallback=None) -> float:
    """Average NDF density of footprint ``fp`` over an angular pixel range."""
    rng.validate(store.resolution)
    return float(eval_ndf_range_batch(store, [fp.center], [fp.sigma_p], rng.x1, rng.x2,
                                      rng.y1, rng.y2, fallback)[0])


def eval_ndf_range_batch(store, centers, sigmas, x1, x2, y1, y2, fallback=None, stats=None):
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (len(centers),))
    out, below, clamped = store.blend_ranges(centers, sigmas, x1, x2, y1, y2)
    if fallback is not None and below.any():
        b = np.broadcast_arrays(*(np.asarray(a) for a in (x1, x2, y1, y2, sigmas)))
        for rows, fp in _group_footprints(centers, sigmas, below):
            img = eval_pndf_image(fallback, fp, store.params.roughness, store.resolution,
                                  boundary=_fallback_boundary(fallback)).values
            sat = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
            sat[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
            a1, a2, c1, c2 = (b[q][rows].astype(np.int64) for q in range(4))
            tot = sat[c2 + 1, a2 + 1] - sat[c1, a2 + 1] - sat[c2 + 1, a1] + sat[c1, a1]
            out[rows] = tot / ((a2 - a1 + 1) * (c2 - c1 + 1))
    if stats is not None:
        used = below if fallback is not None else np.zeros_like(below)
        stats["range_queries"] = stats.get("range_queries", 0) + 8 * int(np.sum(~used))
        stats["fallback"] = stats.get("fallback", 0) + int(np.sum(used))
        stats["below_finest"] = stats.get("below_finest", 0) + int(np.sum(below))
        stats["clamped"] = stats.get("clamped", 0) + int(np.sum(clamped))
    return out


# -- compression -------------------------------------------------------------------------

def default_region_size(map_size, base_stride):
    """Side of the spatial clustering regions in texels.

    The map is split into an 8 x 8 grid, but a region never holds fewer
    than 4 x 4 finest-level footprint centres.
    """
    return max(map_size // DEFAULT_REGIONS, 4 * base_stride)


def compress(pyramid: NdfPyramid, R: int = 16, *, t: int = DEFAULT_BLOCK,
             region_size: int | None = None, tol: float = 1e-4, max_iter: int = 500,
             seed: int = 0, workers: int = 1) -> CompressedNdf:
    """Cluster, prune and CP-compress all NDF blocks of a pyramid."""
    if not pyramid.levels:
        raise ValueError("cannot compress an empty pyramid")
    params = pyramid.params
    res = params.ndf_resolution
    if res % t:
        raise ValueError(f"block size {t} does not divide NDF resolution {res}")
    A = res // t
    if region_size is None:
        region_size = default_region_size(pyramid.map_shape[1], params.base_stride)
    t0 = time.perf_counter()

    levels = []
    tables = []
    members = {}  # group key -> list of (table position, slab array)
    for lv in pyramid.levels:
        n = lv.grid_shape[0]
        levels.append(LevelInfo(lv.level, lv.stride, float(lv.sigma), lv.offset, n))
        blocks = lv.images.reshape(n, n, A, t, A, t).transpose(0, 1, 2, 4, 5, 3)
        # blocks[j, i, by, bx] is indexed [x, y]
        nonblank = np.any(blocks != 0, axis=(4, 5))
        table = np.full((n, n, A, A), -1, dtype=np.int64)
        tables.append(table)
        for j, i, by, bx in zip(*np.nonzero(nonblank)):
            cx, cy = lv.center(i, j)
            key = (math.floor(cy / region_size), math.floor(cx / region_size), by, bx)
            members.setdefault(key, []).append(((len(tables) - 1, j, i, by, bx),
                                                blocks[j, i, by, bx]))

    keys = sorted(members)
    group_rank = np.zeros(len(keys), dtype=np.int64)
    slab_group, slab_z = [], []
    factor_list = [None] * len(keys)

    def fit(gi):
        stack = np.stack([blk for _, blk in members[keys[gi]]], axis=2).astype(np.float64)
        factor_list[gi] = cp_als(stack, R, tol=tol, max_iter=max_iter, seed=seed)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(fit, range(len(keys))))
    else:
        for gi in range(len(keys)):
            fit(gi)

    rmax = max((f.R for f in factor_list), default=1)
    G = len(keys)
    C = np.zeros((G, rmax))
    X = np.zeros((G, rmax, t))
    Y = np.zeros((G, rmax, t))
    z_rows = []
    fit_errors = np.zeros(G)
    next_slab = 0
    for gi, key in enumerate(keys):
        f = factor_list[gi]
        r = f.R
        group_rank[gi] = r
        C[gi, :r] = f.C.astype(np.float32)
        X[gi, :r] = quantize_for_sat(f.X)
        Y[gi, :r] = quantize_for_sat(f.Y)
        fit_errors[gi] = f.fit_error
        for z, (pos, _) in enumerate(members[key]):
            lvl, j, i, by, bx = pos
            tables[lvl][j, i, by, bx] = next_slab
            row = np.zeros(rmax)
            row[:r] = f.Z[:, z].astype(np.float32)
            z_rows.append(row)
            slab_group.append(gi)
            slab_z.append(z)
            next_slab += 1

    slab_table = np.concatenate([tb.reshape(-1, A, A) for tb in tables]).astype(np.int32)
    store = CompressedNdf(
        params=params, map_shape=tuple(pyramid.map_shape), tileable=pyramid.tileable,
        margin=pyramid.margin, t=t, rank=R, region_size=region_size, levels=levels,
        slab_table=slab_table, group_keys=np.array(keys, dtype=np.int32).reshape(-1, 4),
        group_of_slab=np.array(slab_group, dtype=np.int32),
        z_of_slab=np.array(slab_z, dtype=np.int32), group_rank=group_rank.astype(np.int32),
        C=C, X=X, Y=Y, Zs=np.array(z_rows).reshape(-1, rmax), fit_errors=fit_errors)
    store.stats = {
        "groups": G,
        "slabs": store.n_slabs,
        "blank_fraction": store.blank_fraction(),
        "raw_bytes": pyramid.raw_nbytes(),
        "seconds": time.perf_counter() - t0,
    }
    store.stats["bytes"] = store.nbytes()
    store.stats["ratio"] = store.stats["bytes"] / store.stats["raw_bytes"]
    log.info("compressed %d slabs into %d groups at rank %d (%.2f%% of raw)",
             store.n_slabs, G, R, 100 * store.stats["ratio"])
    return store


def quantize_for_sat(v):
    """Round each row to a power-of-two grid fine enough for float32.

    Every entry and every prefix sum of a row becomes an integer multiple
    of ``2**-e`` bounded by ``2**23`` in magnitude, so both the vector and
    its prefix sums are exact in float32.
    """
    v = np.asarray(v, dtype=np.float64)
    total = np.sum(np.abs(v), axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    step = np.exp2(np.ceil(np.log2(safe)) - 23)
    return np.round(v / step) * step


def reconstruction_error(store: CompressedNdf, pyramid: NdfPyramid) -> float:
    """Relative squared error of the clamped decompressed pyramid."""
    num = den = 0.0
    for l, lv in enumerate(pyramid.levels):
        n = lv.grid_shape[0]
        for j in range(n):
            for i in range(n):
                ref = lv.images[j, i].astype(np.float64)
                num += float(np.sum((store.image(l, i, j) - ref) ** 2))
                den += float(np.sum(ref * ref))
    return num / den


# -- container format ----------------------------------------------------------------------

def _section(blob):
    return blob + struct.pack("<I", zlib.crc32(blob))


def serialize(store: CompressedNdf) -> bytes:
    """Encode as a CNDF container (see the README for the layout)."""
    A = store.blocks_per_side
    meta = {
        "params": asdict(store.params),
        "map_shape": list(store.map_shape),
        "tileable": store.tileable,
        "margin": store.margin,
        "t": store.t,
        "rank": store.rank,
        "region_size": store.region_size,
        "fit_convention": "relative fit change per ALS sweep",
    }
    sec_params = json.dumps(meta, sort_keys=True).encode()
    sec_levels = b"".join(_LEVEL.pack(lv.level, lv.stride, lv.sigma, lv.offset, lv.n)
                          for lv in store.levels)
    occupancy = store.slab_table >= 0
    sec_occ = np.packbits(occupancy.ravel(), bitorder="little").tobytes()

    payloads = []
    directory = []
    offset = 0
    slab_ids = np.arange(store.n_slabs)
    order = np.lexsort((store.z_of_slab, store.group_of_slab))
    per_group = np.split(slab_ids[order], np.cumsum(np.bincount(store.group_of_slab,
                                                                minlength=store.n_groups))[:-1])
    for g in range(store.n_groups):
        r = int(store.group_rank[g])
        slabs = per_group[g]
        L = len(slabs)
        Z = store.Zs[slabs, :r].T  # (r, L)
        body = b"".join([
            _PAYLOAD_HEAD.pack(r, store.t, L),
            store.C[g, :r].astype("<f4").tobytes(),
            store.X[g, :r].astype("<f4").tobytes(),
            store.Y[g, :r].astype("<f4").tobytes(),
            np.ascontiguousarray(Z).astype("<f4").tobytes(),
            store.X_sat[g, :r].astype("<f4").tobytes(),
            store.Y_sat[g, :r].astype("<f4").tobytes(),
        ])
        ry, rx, by, bx = (int(v) for v in store.group_keys[g])
        directory.append(_GROUP.pack(ry, rx, by, bx, r, L, offset, len(body)))
        payloads.append(body)
        offset += len(body)
    sec_groups = b"".join(directory)
    # slab list in occupancy order: group id and slab index within the group
    occ_slabs = store.slab_table[occupancy]
    sec_slabs = np.column_stack([store.group_of_slab[occ_slabs],
                                 store.z_of_slab[occ_slabs]]).astype("<u4").tobytes()
    sec_payload = b"".join(payloads)

    sections = [sec_params, sec_levels, sec_occ, sec_groups, sec_slabs, sec_payload]
    table_size = _HEADER.size + _SECTION.size * len(sections)
    out = [_HEADER.pack(MAGIC, VERSION, len(sections), A)]
    pos = table_size
    for sid, body in enumerate(sections):
        out.append(_SECTION.pack(sid, pos, len(body)))
        pos += len(body) + 4
    out.extend(_section(body) for body in sections)
    return b"".join(out)


def section_table(blob: bytes):
    """Parse and return the header fields and section table (for audits)."""
    if len(blob) < _HEADER.size:
        raise FormatError("truncated container header")
    magic, version, count, A = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if len(blob) < _HEADER.size + count * _SECTION.size:
        raise FormatError("truncated section table")
    table = [_SECTION.unpack_from(blob, _HEADER.size + k * _SECTION.size) for k in range(count)]
    return {"version": version, "blocks_per_side": A, "sections": table}


def deserialize(blob: bytes) -> CompressedNdf:
    info = section_table(blob)
    sections = []
    for sid, offset, length in info["sections"]:
        end = offset + length
        if end + 4 > len(blob):
            raise FormatError(f"section {SECTION_NAMES[sid]} truncated")
        body = blob[offset:end]
        (crc,) = struct.unpack_from("<I", blob, end)
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"checksum mismatch in section '{SECTION_NAMES[sid]}'")
        sections.append(body)
    last = info["sections"][-1]
    if last[1] + last[2] + 4 != len(blob):
        raise FormatError("trailing bytes after the last section")
    sec_params, sec_levels, sec_occ, sec_groups, sec_slabs, sec_payload = sections

    meta = json.loads(sec_params)
    params = PyramidParams(**meta["params"])
    t = meta["t"]
    A = info["blocks_per_side"]
    levels = [LevelInfo(*_LEVEL.unpack_from(sec_levels, k * _LEVEL.size))
              for k in range(len(sec_levels) // _LEVEL.size)]
    cells = sum(lv.n * lv.n for lv in levels)
    occupancy = np.unpackbits(np.frombuffer(sec_occ, dtype=np.uint8), bitorder="little",
                              count=cells * A * A).astype(bool).reshape(cells, A, A)

    G = len(sec_groups) // _GROUP.size
    dirs = [_GROUP.unpack_from(sec_groups, k * _GROUP.size) for k in range(G)]
    rmax = max((d[4] for d in dirs), default=1)
    keys = np.array([d[:4] for d in dirs], dtype=np.int32).reshape(-1, 4)
    ranks = np.array([d[4] for d in dirs], dtype=np.int32)
    C = np.zeros((G, rmax))
    X = np.zeros((G, rmax, t))
    Y = np.zeros((G, rmax, t))
    Zg = []
    for g, (_, _, _, _, r, L, off, length) in enumerate(dirs):
        body = sec_payload[off:off + length]
        r2, t2, L2 = _PAYLOAD_HEAD.unpack_from(body)
        if (r2, t2, L2) != (r, t, L):
            raise FormatError(f"group {g} payload header mismatch")
        pos = _PAYLOAD_HEAD.size

        def take(count, dtype, size):
            nonlocal pos
            a = np.frombuffer(body, dtype=dtype, count=count, offset=pos).astype(np.float64)
            pos += count * size
            return a

        C[g, :r] = take(r, "<f4", 4)
        X[g, :r] = take(r * t, "<f4", 4).reshape(r, t)
        Y[g, :r] = take(r * t, "<f4", 4).reshape(r, t)
        Zg.append(take(r * L, "<f4", 4).reshape(r, L))
        xs = take(r * (t + 1), "<f4", 4).reshape(r, t + 1)
        ys = take(r * (t + 1), "<f4", 4).reshape(r, t + 1)
        if not (np.array_equal(xs, prefix_sums(X[g, :r]))
                and np.array_equal(ys, prefix_sums(Y[g, :r]))):
            raise FormatError(f"group {g} prefix sums do not match its factors")
        if pos != length:
            raise FormatError(f"group {g} payload has unexpected length")

    pairs = np.frombuffer(sec_slabs, dtype="<u4").reshape(-1, 2).astype(np.int64)
    if len(pairs) != int(occupancy.sum()):
        raise FormatError("slab list does not match occupancy")
    # global slab ids: ordered by group then z, as produced by compress()
    starts = np.concatenate([[0], np.cumsum([d[5] for d in dirs])])
    slab_ids = starts[pairs[:, 0]] + pairs[:, 1]
    slab_table = np.full(occupancy.shape, -1, dtype=np.int32)
    slab_table[occupancy] = slab_ids
    S = int(starts[-1])
    group_of_slab = np.repeat(np.arange(G), [d[5] for d in dirs]).astype(np.int32)
    z_of_slab = np.concatenate([np.arange(d[5]) for d in dirs]).astype(np.int32) if G else \
        np.zeros(0, np.int32)
    Zs = np.zeros((S, rmax))
    for g in range(G):
        r = ranks[g]
        Zs[starts[g]:starts[g + 1], :r] = Zg[g].T
    return CompressedNdf(params=params, map_shape=tuple(meta["map_shape"]),
                         tileable=meta["tileable"], margin=meta["margin"], t=t,
                         rank=meta["rank"], region_size=meta["region_size"], levels=levels,
                         slab_table=slab_table, group_keys=keys, group_of_slab=group_of_slab,
                         z_of_slab=z_of_slab, group_rank=ranks, C=C, X=X, Y=Y, Zs=Zs)
