"""Implicit Wang tiling with per-tile compressed NDFs.

Sixteen tiles cover every combination of two horizontal-edge colours (N, S)
and two vertical-edge colours (E, W).  A tile's id is ``N<<3 | E<<2 | S<<1 | W``.

Tiles are cut from one periodic exemplar by blending four kinds of crops:
a private interior crop, one crop per vertical edge colour, one per
horizontal edge colour and a shared corner crop.  Edge crops are indexed by
the signed distance to the edge, so two tiles that meet along an edge of
colour ``c`` see the same exemplar texels on both sides of it and the
assembled surface is seamless there.

The infinite plane is tiled implicitly: lattice vertex ``(i, j)`` hashes to
the colours of the edges to its right and below, so the tile of any cell is
recomputed from the seed alone.
"""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .oracle import TRUNCATION, Footprint
from .pyramid import PyramidParams, build_pyramid
from .sampler import SampleRecord, sample_batch
from .store import CompressedNdf, compress, deserialize, eval_ndf_batch, serialize
from .texture import NormalMap, normalize

log = logging.getLogger(__name__)

N_COLORS = 2
N_TILES = 16
TABLE_SIZE = 256
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def tile_id(n, e, s, w):
    return (np.asarray(n) << 3) | (np.asarray(e) << 2) | (np.asarray(s) << 1) | np.asarray(w)


def tile_colors(tid):
    """(N, E, S, W) colours of tile id(s)."""
    tid = np.asarray(tid)
    return (tid >> 3) & 1, (tid >> 2) & 1, (tid >> 1) & 1, tid & 1


# -- hashing ------------------------------------------------------------------

def splitmix64(x):
    """The splitmix64 finaliser on uint64 arrays (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def _hash_vertex(i, j, seed, salt):
    i = np.asarray(i, dtype=np.int64).astype(np.uint64)
    j = np.asarray(j, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = splitmix64(np.uint64(seed) * np.uint64(4) + np.uint64(salt))
        h = splitmix64(h ^ i)
        return splitmix64(h ^ (j * np.uint64(0xD6E8FEB86659FD93)))


@dataclass(frozen=True)
class TileField:
    """Stateless infinite tiling.

    Colours are ``table[hash(vertex, seed, salt) % 256]``; ``table`` defaults
    to a seeded balanced 0/1 table, and can be overridden (e.g. all zeros)
    to force a fixed layout.
    """

    seed: int = 0
    table: tuple | None = None

    def __post_init__(self):
        if self.table is None:
            rng = np.random.default_rng(self.seed)
            tab = rng.permutation(np.arange(TABLE_SIZE) % N_COLORS)
        else:
            tab = np.asarray(self.table, dtype=np.int64)
            if tab.shape != (TABLE_SIZE,) or np.any((tab < 0) | (tab >= N_COLORS)):
                raise ValueError(f"colour table must hold {TABLE_SIZE} ids in [0, {N_COLORS})")
        object.__setattr__(self, "table", tuple(int(v) for v in tab))

    def vertex_edge_colors(self, i, j):
        """Colours of the edges to the right of and below lattice vertex ``(i, j)``."""
        tab = np.asarray(self.table)
        right = tab[(_hash_vertex(i, j, self.seed, 0) % np.uint64(TABLE_SIZE)).astype(np.int64)]
        below = tab[(_hash_vertex(i, j, self.seed, 1) % np.uint64(TABLE_SIZE)).astype(np.int64)]
        return right, below

    def cell_colors(self, cx, cy):
        """(N, E, S, W) colours of cell ``(cx, cy)`` (column, row; rows grow downward)."""
        cx = np.asarray(cx, dtype=np.int64)
        cy = np.asarray(cy, dtype=np.int64)
        n, w = self.vertex_edge_colors(cx, cy)
        _, e = self.vertex_edge_colors(cx + 1, cy)
        s, _ = self.vertex_edge_colors(cx, cy + 1)
        return n, e, s, w

    def tile_at(self, cx, cy):
        return tile_id(*self.cell_colors(cx, cy))


def tiles_from_colors(h_colors, v_colors):
    """Tile ids of an explicit layout.

    ``h_colors`` (rows + 1, cols) holds horizontal edge colours (row ``r`` is
    the top edge of cell row ``r``); ``v_colors`` (rows, cols + 1) holds
    vertical edge colours (column ``c`` is the left edge of cell column ``c``).
    """
    h_colors = np.asarray(h_colors)
    v_colors = np.asarray(v_colors)
    return tile_id(h_colors[:-1], v_colors[:, 1:], h_colors[1:], v_colors[:, :-1])


# -- tile authoring ---------------------------------------------------------------

def _fade(d, plateau, margin):
    """1 within ``plateau`` texels of an edge, smoothly 0 beyond ``margin``."""
    t = np.clip((d - plateau) / max(margin - plateau, 1e-9), 0.0, 1.0)
    return 1.0 - t * t * (3.0 - 2.0 * t)


def _crop(normals, ox, oy, xs, ys):
    m_h, m_w = normals.shape[:2]
    return normals[np.mod(oy + ys, m_h)[:, None], np.mod(ox + xs, m_w)[None, :]]


def make_tiles(exemplar: NormalMap, tile_size: int, seed: int = 0, *, plateau: int = 2,
               margin: int | None = None):
    """Cut 16 edge-compatible tiles (list indexed by tile id) from a periodic exemplar."""
    if not exemplar.tileable:
        raise ValueError("tile authoring needs a periodic (tileable) exemplar")
    T = int(tile_size)
    margin = T // 4 if margin is None else margin
    if not 0 <= plateau < margin <= T // 2:
        raise ValueError("need 0 <= plateau < margin <= tile_size / 2")
    E = exemplar.normals
    m_h, m_w = E.shape[:2]
    rng = np.random.default_rng(seed)
    off = lambda: (int(rng.integers(m_w)), int(rng.integers(m_h)))
    corner = off()
    vert = [off() for _ in range(N_COLORS)]
    horiz = [off() for _ in range(N_COLORS)]
    interior = [off() for _ in range(N_TILES)]

    x = np.arange(T)
    near_w = x < T / 2
    xi = np.where(near_w, x, x - T)  # signed offset from the nearest vertical edge
    eta = xi.copy()                  # same along y for horizontal edges
    a = _fade(np.abs(xi), plateau, margin)  # vertical-edge influence per column
    b = _fade(np.abs(eta), plateau, margin)  # horizontal-edge influence per row
    A = a[None, :, None]
    B = b[:, None, None]
    K = _crop(E, corner[0], corner[1], xi, eta)
    tiles = []
    for tid in range(N_TILES):
        n, e, s, w = (int(c) for c in tile_colors(tid))
        V = np.where(near_w[None, :, None],
                     _crop(E, vert[w][0], vert[w][1], xi, x),
                     _crop(E, vert[e][0], vert[e][1], xi, x))
        H = np.where(near_w[:, None, None],
                     _crop(E, horiz[n][0], horiz[n][1], x, eta),
                     _crop(E, horiz[s][0], horiz[s][1], x, eta))
        I = _crop(E, interior[tid][0], interior[tid][1], x, x)
        blend = A * B * K + A * (1 - B) * V + (1 - A) * B * H + (1 - A) * (1 - B) * I
        tiles.append(NormalMap(normalize(blend), texel_extent=exemplar.texel_extent,
                               tileable=False, name=f"{exemplar.name or 'tile'}-{tid:02d}"))
    return tiles


def assemble(tiles, ids) -> NormalMap:
    """Explicit normal map laid out from a 2D array of tile ids."""
    ids = np.asarray(ids)
    rows = [np.concatenate([tiles[t].normals for t in row], axis=1) for row in ids]
    return NormalMap(np.concatenate(rows, axis=0), texel_extent=tiles[0].texel_extent,
                     tileable=False, name="assembled")


# -- tile set ---------------------------------------------------------------------

@dataclass(eq=False)
class WangTileSet:
    tile_size: int
    tiles: list
    stores: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.tiles) != N_TILES:
            raise ValueError(f"a tile set needs {N_TILES} tiles, got {len(self.tiles)}")
        for t in self.tiles:
            if t.shape != (self.tile_size, self.tile_size):
                raise ValueError("tile shape does not match tile_size")

    @property
    def edge_to_tile(self):
        """(N, E, S, W) -> tile id, as a 2x2x2x2 array."""
        table = np.empty((N_COLORS,) * 4, dtype=np.int64)
        for tid in range(N_TILES):
            table[tuple(int(c) for c in tile_colors(tid))] = tid
        return table

    @property
    def compressed(self):
        return len(self.stores) == N_TILES

    def nbytes(self):
        return sum(s.nbytes() for s in self.stores)

    def save(self, path):
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            manifest = {"format": "glintcache-wangtiles", "version": 1,
                        "tile_size": self.tile_size, "n_tiles": N_TILES,
                        "colors": [list(map(int, tile_colors(t))) for t in range(N_TILES)],
                        "texel_extent": self.tiles[0].texel_extent,
                        "compressed": self.compressed, "meta": self.meta}
            zf.writestr("manifest.json", json.dumps(manifest, indent=2))
            for tid, tile in enumerate(self.tiles):
                buf = io.BytesIO()
                np.save(buf, tile.normals.astype(np.float64))
                zf.writestr(f"tiles/{tid:02d}.npy", buf.getvalue())
            for tid, store in enumerate(self.stores):
                zf.writestr(f"stores/{tid:02d}.cndf", serialize(store))

    @classmethod
    def load(cls, path):
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != "glintcache-wangtiles":
                raise ValueError(f"{path}: not a Wang tile archive")
            tiles = [NormalMap(np.load(io.BytesIO(zf.read(f"tiles/{t:02d}.npy"))),
                               texel_extent=manifest["texel_extent"], tileable=False,
                               name=f"tile-{t:02d}") for t in range(N_TILES)]
            stores = ([deserialize(zf.read(f"stores/{t:02d}.cndf")) for t in range(N_TILES)]
                      if manifest["compressed"] else [])
        return cls(manifest["tile_size"], tiles, stores, manifest.get("meta", {}))


def build_tileset(exemplar: NormalMap, tile_size: int = 512, R: int = 16, *, seed: int = 0,
                  params: PyramidParams = PyramidParams(), compress_tiles: bool = True,
                  workers: int = 1, **compress_kw) -> WangTileSet:
    """Author 16 tiles and compress an extended-support pyramid for each."""
    tiles = make_tiles(exemplar, tile_size, seed)
    stores = []
    if compress_tiles:
        for tid, tile in enumerate(tiles):
            pyr = build_pyramid(tile, params, extended=True, workers=workers)
            stores.append(compress(pyr, R, workers=workers, **compress_kw))
            log.info("tile %d: %d levels, %d bytes", tid, len(pyr.levels), stores[-1].nbytes())
    return WangTileSet(tile_size, tiles, stores,
                       {"seed": seed, "rank": R, "exemplar": exemplar.name or ""})


# -- cross-tile evaluation ------------------------------------------------------------

def _axis_cells(center, sigma, T):
    """Footprint mass per tile column along one axis: (cell indices, masses)."""
    lo = math.floor(center - TRUNCATION * sigma)
    hi = math.floor(center + TRUNCATION * sigma)
    idx = np.arange(lo, hi + 1)
    d = idx + 0.5 - center
    g = np.where(np.abs(d) <= TRUNCATION * sigma, np.exp(-0.5 * (d / sigma) ** 2), 0.0)
    cells = np.floor_divide(idx, T)
    uc, inv = np.unique(cells, return_inverse=True)
    m = np.bincount(inv.ravel(), weights=g)
    keep = m > 0
    return uc[keep], m[keep] / g.sum()


def overlapped_cells(tset: WangTileSet, fp: Footprint):
    """Cells under a world-space footprint: (cx (K,), cy (K,), mass (K,))."""
    T = tset.tile_size
    cx, mx = _axis_cells(fp.center[0], fp.sigma_p, T)
    cy, my = _axis_cells(fp.center[1], fp.sigma_p, T)
    gx, gy = np.meshgrid(cx, cy)
    return gx.ravel(), gy.ravel(), np.outer(my, mx).ravel()


def _expand(field_, tset, centers, sigmas):
    """Flatten (footprint, overlapped cell) pairs for a batch."""
    rows, tids, local, mass, sig = [], [], [], [], []
    T = tset.tile_size
    for k, (c, s) in enumerate(zip(centers, sigmas)):
        cx, cy, m = overlapped_cells(tset, Footprint(c, s))
        rows.append(np.full(len(m), k))
        tids.append(field_.tile_at(cx, cy))
        local.append(np.column_stack([c[0] - cx * T, c[1] - cy * T]))
        mass.append(m)
        sig.append(np.full(len(m), s))
    return (np.concatenate(rows), np.concatenate(tids), np.concatenate(local),
            np.concatenate(mass), np.concatenate(sig))


def eval_ndf_tiled_batch(field_: TileField, tset: WangTileSet, centers, sigmas, h,
                         use_fallback=True, stats=None):
    """Blended NDF of world-space footprints over an implicit tiling.

    Every overlapped cell contributes its tile's NDF for the footprint
    expressed in tile-local coordinates, weighted by the footprint's mass
    inside the cell.
    """
    if not tset.compressed:
        raise ValueError("tile set has no compressed NDFs")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (len(centers),))
    h = np.asarray(h, dtype=np.float64).reshape(-1, 2)
    key = np.column_stack([centers, sigmas])
    ukey, f_of = np.unique(key, axis=0, return_inverse=True)
    f_of = f_of.ravel()
    urow, utid, ulocal, umass, usig = _expand(field_, tset, ukey[:, :2], ukey[:, 2])
    # pair every query with every overlapped cell of its footprint
    order = np.argsort(urow, kind="stable")
    starts = np.searchsorted(urow[order], np.arange(len(ukey)))
    counts = np.bincount(urow, minlength=len(ukey))
    n_per = counts[f_of]
    rows = np.repeat(np.arange(len(centers)), n_per)
    offs = np.arange(len(rows)) - np.repeat(np.cumsum(n_per) - n_per, n_per)
    pair = order[np.repeat(starts[f_of], n_per) + offs]
    tids, local, mass, sig = utid[pair], ulocal[pair], umass[pair], usig[pair]
    vals = np.zeros(len(rows))
    for tid in np.unique(tids):
        m = tids == tid
        fb = tset.tiles[tid] if use_fallback else None
        vals[m] = eval_ndf_batch(tset.stores[tid], local[m], sig[m], h[rows[m]], fb, stats)
    num = np.bincount(rows, weights=mass * vals, minlength=len(centers))
    den = np.bincount(rows, weights=mass, minlength=len(centers))
    return num / np.where(den > 0, den, 1.0)


def eval_ndf_tiled(field_: TileField, tset: WangTileSet, fp: Footprint, h) -> float:
    return float(eval_ndf_tiled_batch(field_, tset, [fp.center], [fp.sigma_p],
                                      np.asarray(h)[None])[0])


def sample_tiled_batch(field_: TileField, tset: WangTileSet, centers, sigmas, u,
                       use_fallback=True) -> SampleRecord:
    """Sample by picking one overlapped cell uniformly, then descending its tile.

    The first variate selects the cell and is rescaled for reuse by the tile
    sampler.  The returned pdf is the blended tiled NDF at the sample, as the
    method prescribes; it equals the true sampling density only when the
    overlapped cells carry equal footprint mass (or there is just one).
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    u = np.array(u, dtype=np.float64).reshape(-1, 2)
    n = len(u)
    centers = np.broadcast_to(centers, (n, 2))
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (n,))
    T = tset.tile_size
    local = np.empty((n, 2))
    tids = np.empty(n, dtype=np.int64)
    key = np.column_stack([centers, sigmas])
    ukey, f_of = np.unique(key, axis=0, return_inverse=True)
    f_of = f_of.ravel()
    for f in range(len(ukey)):
        rows = np.nonzero(f_of == f)[0]
        cx, cy, _ = overlapped_cells(tset, Footprint(ukey[f, :2], ukey[f, 2]))
        tt = field_.tile_at(cx, cy)
        K = len(tt)
        scaled = u[rows, 0] * K
        pick = np.minimum(scaled.astype(np.int64), K - 1)
        u[rows, 0] = np.minimum(scaled - pick, np.nextafter(1.0, 0.0))
        tids[rows] = tt[pick]
        local[rows] = ukey[f, :2] - np.column_stack([cx[pick] * T, cy[pick] * T])
    h = np.zeros((n, 2))
    valid = np.zeros(n, dtype=bool)
    path = None
    for tid in np.unique(tids):
        m = tids == tid
        fb = tset.tiles[tid] if use_fallback else None
        rec = sample_batch(tset.stores[tid], local[m], sigmas[m], u[m], fb)
        h[m], valid[m] = rec.h, rec.valid
        if path is None:
            path = np.zeros((n,) + rec.path.shape[1:], dtype=np.int64)
        path[m] = rec.path
    pdf = np.zeros(n)
    if valid.any():
        pdf[valid] = eval_ndf_tiled_batch(field_, tset, centers[valid], sigmas[valid], h[valid],
                                          use_fallback)
    valid &= pdf > 0
    return SampleRecord(h=h, pdf=np.where(valid, pdf, 0.0), valid=valid, path=path)


def sample_tiled(field_: TileField, tset: WangTileSet, fp: Footprint, u) -> SampleRecord:
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    return sample_tiled_batch(field_, tset, np.asarray(fp.center)[None], fp.sigma_p, u)
