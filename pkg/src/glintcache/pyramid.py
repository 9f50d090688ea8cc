"""Multi-level grid of precomputed NDF images.

Level ``l`` samples footprints every ``s * 2**l`` texels with standard
deviation ``sigma_p * 2**l``.  Centres sit at cell centres
``(i + 1/2) * stride``.  Pyramids built for Wang tiles carry a margin of
extra cells on every side so that footprints centred just outside the tile
still have samples.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import FormatError
from .oracle import (DEFAULT_RESOLUTION, DEFAULT_SIGMA_R, TRUNCATION, Footprint,
                     IntrinsicRoughness, NdfImage, save_png, splat_image, texel_samples)
from .texture import NormalMap

log = logging.getLogger(__name__)


def default_sigma(stride):
    return 1.5 * stride / math.sqrt(12.0)


@dataclass(frozen=True)
class PyramidParams:
    base_stride: int = 32
    base_sigma: float | None = None
    ndf_resolution: int = DEFAULT_RESOLUTION
    convergence_mse: float = 1e-4
    sigma_r: float = DEFAULT_SIGMA_R
    max_levels: int = 16

    def __post_init__(self):
        if self.base_sigma is None:
            object.__setattr__(self, "base_sigma", default_sigma(self.base_stride))
        if self.base_stride <= 0 or not self.base_sigma > 0:
            raise ValueError("base_stride and base_sigma must be positive")
        if self.ndf_resolution <= 0:
            raise ValueError("ndf_resolution must be positive")

    @property
    def roughness(self):
        return IntrinsicRoughness(self.sigma_r)

    def stride(self, level):
        return self.base_stride * 2 ** level

    def sigma(self, level):
        return self.base_sigma * 2 ** level


@dataclass(eq=False)
class PyramidLevel:
    level: int
    stride: int
    sigma: float
    offset: int  # index of the first cell; negative when the grid has a margin
    images: np.ndarray  # (ny, nx, res, res) float32
    stats: dict = field(default_factory=dict)

    @property
    def grid_shape(self):
        return self.images.shape[:2]

    def center(self, i, j):
        """Texel-space centre of cell column ``i``, row ``j`` (array indices)."""
        return ((i + self.offset + 0.5) * self.stride, (j + self.offset + 0.5) * self.stride)

    def image(self, i, j) -> NdfImage:
        return NdfImage(self.images[j, i].astype(np.float64))


@dataclass(eq=False)
class NdfPyramid:
    params: PyramidParams
    map_shape: tuple
    tileable: bool
    levels: list
    margin: int = 0

    @property
    def top(self):
        return len(self.levels) - 1

    def raw_nbytes(self):
        """Bytes of all images stored as float32."""
        return sum(lv.images.size * 4 for lv in self.levels)

    # -- persistence -----------------------------------------------------
    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": "glintcache-pyramid",
            "version": 1,
            "params": asdict(self.params),
            "map_shape": list(self.map_shape),
            "tileable": self.tileable,
            "margin": self.margin,
            "levels": [],
        }
        for lv in self.levels:
            sub = directory / f"level{lv.level}"
            sub.mkdir(exist_ok=True)
            ny, nx = lv.grid_shape
            for j in range(ny):
                for i in range(nx):
                    NdfImage(lv.images[j, i]).save(sub / f"ndf_{j:04d}_{i:04d}.ndfi")
            manifest["levels"].append({
                "level": lv.level, "stride": lv.stride, "sigma": lv.sigma,
                "offset": lv.offset, "grid": [ny, nx],
                "stats": {k: float(v) for k, v in lv.stats.items()},
            })
        (directory / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))

    @classmethod
    def load(cls, directory) -> "NdfPyramid":
        directory = Path(directory)
        manifest = yaml.safe_load((directory / "manifest.yaml").read_text())
        if manifest.get("format") != "glintcache-pyramid":
            raise FormatError(f"{directory}: not a pyramid directory")
        params = PyramidParams(**manifest["params"])
        res = params.ndf_resolution
        levels = []
        for entry in manifest["levels"]:
            ny, nx = entry["grid"]
            images = np.empty((ny, nx, res, res), dtype=np.float32)
            sub = directory / f"level{entry['level']}"
            for j in range(ny):
                for i in range(nx):
                    images[j, i] = NdfImage.load(sub / f"ndf_{j:04d}_{i:04d}.ndfi").values
            levels.append(PyramidLevel(entry["level"], entry["stride"], entry["sigma"],
                                       entry["offset"], images, entry.get("stats", {})))
        return cls(params, tuple(manifest["map_shape"]), manifest["tileable"], levels,
                   manifest.get("margin", 0))

    def save_grid_png(self, path, level=0, max_cells=8):
        """Mosaic of a level's NDF images for visual inspection."""
        lv = self.levels[level]
        ny, nx = lv.grid_shape
        ny, nx = min(ny, max_cells), min(nx, max_cells)
        res = self.params.ndf_resolution
        mosaic = np.zeros((ny * res, nx * res))
        for j in range(ny):
            for i in range(nx):
                img = lv.images[j, i]
                mosaic[j * res:(j + 1) * res, i * res:(i + 1) * res] = img / max(img.max(), 1e-30)
        save_png(path, mosaic, exposure=1.0)


def _level_images(nmap, params, level, offset, count, boundary, workers):
    stride = params.stride(level)
    sigma = params.sigma(level)
    res = params.ndf_resolution
    images = np.zeros((count, count, res, res), dtype=np.float32)
    def work(cell):
        j, i = divmod(cell, count)
        fp = Footprint(((i + offset + 0.5) * stride, (j + offset + 0.5) * stride), sigma)
        nx, ny, w, mass = texel_samples(nmap, fp, boundary)
        if mass == 0.0:
            return 1
        images[j, i], _ = splat_image(nx, ny, w, res, params.sigma_r)
        return 0

    cells = range(count * count)
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            n_empty = sum(pool.map(work, cells))
    else:
        n_empty = sum(work(c) for c in cells)
    return images, n_empty


def build_pyramid(nmap: NormalMap, params: PyramidParams = PyramidParams(), *,
                  extended: bool = False, workers: int = 1) -> NdfPyramid:
    """Precompute NDF images for every level until convergence.

    With ``extended`` the map is treated as an isolated tile: texels outside
    it contribute nothing, footprint weights are renormalised over the
    texels inside, and each level carries ``margin`` extra cells per side
    (enough for any footprint whose truncated support touches the tile).
    """
    h, w = nmap.shape
    if h != w:
        raise ValueError("pyramid requires a square map")
    if w % params.base_stride:
        raise ValueError(f"base stride {params.base_stride} does not divide map size {w}")
    if extended:
        boundary = "clip"
        margin = math.ceil(TRUNCATION * params.base_sigma / params.base_stride)
    else:
        boundary = "wrap" if nmap.tileable else "clip"
        margin = 0

    levels = []
    level = 0
    while True:
        stride = params.stride(level)
        n = w // stride
        count = n + 2 * margin
        t0 = time.perf_counter()
        images, n_empty = _level_images(nmap, params, level, -margin, count, boundary, workers)
        lv = PyramidLevel(level, stride, params.sigma(level), -margin, images)
        lv.stats = {
            "count": count * count,
            "blank_pixel_fraction": float(np.mean(images == 0.0)),
            "empty_footprints": n_empty,
            "seconds": time.perf_counter() - t0,
        }
        levels.append(lv)
        log.info("level %d: %dx%d images, stride %d, sigma %.3f", level, count, count,
                 stride, lv.sigma)
        if level > 0:
            mse = _convergence(levels[-2], lv)
            energy = float(np.mean(images.astype(np.float64) ** 2)) or 1.0
            lv.stats["mse_to_previous"] = mse
            lv.stats["relative_mse_to_previous"] = mse / energy
            if mse / energy < params.convergence_mse:
                break
        if stride >= w or n == 1 or level + 1 >= params.max_levels:
            break
        level += 1
    return NdfPyramid(params, (h, w), nmap.tileable, levels, margin)


def _convergence(fine: PyramidLevel, coarse: PyramidLevel):
    """Mean squared difference between 2x2-averaged fine images and coarse ones."""
    total = 0.0
    count = 0
    cny, cnx = coarse.grid_shape
    fny, fnx = fine.grid_shape
    for j in range(cny):
        for i in range(cnx):
            # coarse cell index c covers fine cells 2(c+off_c)-off_f and +1
            fi = 2 * (i + coarse.offset) - fine.offset
            fj = 2 * (j + coarse.offset) - fine.offset
            if fi < 0 or fj < 0 or fi + 1 >= fnx or fj + 1 >= fny:
                continue
            avg = fine.images[fj:fj + 2, fi:fi + 2].astype(np.float64).mean(axis=(0, 1))
            total += float(np.mean((avg - coarse.images[j, i]) ** 2))
            count += 1
    if count == 0:
        raise ValueError("levels have no aligned centres")
    return total / count


def level_convergence(pyramid: NdfPyramid, level: int) -> float:
    """MSE between level ``level`` (2x2-averaged) and level ``level + 1``."""
    if not 0 <= level < pyramid.top:
        raise IndexError(f"level {level} out of range: need 0 <= level < {pyramid.top}")
    return _convergence(pyramid.levels[level], pyramid.levels[level + 1])
