"""Scene description: geometry, camera, lights and glint material.

Scenes are YAML documents::

    geometry:
      type: bent-quad        # or "plane"
      size: [2.0, 2.0]       # world extent along x and y
      bend: 0.25             # height of the parabola z = bend * (2x/W - 1)^2 (bent-quad only)
      texel_extent: 0.004    # world size of one normal-map texel
    camera:
      position: [1.0, -1.5, 1.2]
      look_at: [1.0, 1.0, 0.0]
      up: [0, 0, 1]
      fov: 40                # vertical field of view, degrees
      resolution: [64, 64]   # width, height
    lights:
      - {type: point, position: [1, 1, 2], intensity: [4, 4, 4]}
      - {type: area, corner: [0, 0, 2], edge_u: [0, 0.3, 0], edge_v: [0.3, 0, 0],
         radiance: [10, 10, 10]}
      - {type: sg-environment, file: env.txt}      # or lobes: [[ax, ay, az, lambda, r, g, b], ...]
    material:
      f0: [0.95, 0.64, 0.54]
      masking: true
      slope_rms: 0.15        # normal-map slope spread for the masking proxy

The surface spans ``x in [0, W]``, ``y in [0, H]``; texel coordinates are
``(x, y) / texel_extent`` and the shading frame's tangent follows +x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..envlight import SgEnvironment, SphericalGaussian


def _vec(v, n=3, name="vector"):
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be {n} finite numbers, got {v!r}")
    return a


@dataclass(frozen=True)
class Geometry:
    """Plane (``bend = 0``) or bent quad ``z = bend * (2x/W - 1)^2``."""

    size: tuple = (1.0, 1.0)
    bend: float = 0.0
    texel_extent: float = 1.0 / 512

    def __post_init__(self):
        if len(self.size) != 2 or min(self.size) <= 0:
            raise ValueError("geometry size must be two positive numbers")
        if not self.texel_extent > 0:
            raise ValueError("texel_extent must be positive")

    @property
    def kind(self):
        return "plane" if self.bend == 0 else "bent-quad"

    def _coeffs(self):
        W = self.size[0]
        # z = k (x - W/2)^2 with k = 4 bend / W^2
        return 4.0 * self.bend / (W * W), W / 2.0

    def height(self, x):
        k, x0 = self._coeffs()
        return k * (x - x0) ** 2

    def intersect(self, o, d):
        """Nearest positive hit distance per ray (inf on a miss)."""
        o = np.atleast_2d(o)
        d = np.atleast_2d(d)
        k, x0 = self._coeffs()
        px = o[:, 0] - x0
        if k == 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(d[:, 2]) > 1e-15, -o[:, 2] / d[:, 2], np.inf)
            cands = [t]
        else:
            # k (px + t dx)^2 - (oz + t dz) = 0
            a = k * d[:, 0] ** 2
            b = 2 * k * px * d[:, 0] - d[:, 2]
            c = k * px * px - o[:, 2]
            disc = b * b - 4 * a * c
            sq = np.sqrt(np.maximum(disc, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                lin = np.where(np.abs(b) > 1e-15, -c / b, np.inf)
                q = -0.5 * (b + np.copysign(sq, b))
                t1 = np.where(np.abs(a) > 1e-15, q / a, lin)
                t2 = np.where(np.abs(a) > 1e-15, np.where(q != 0, c / q, np.inf), np.inf)
            miss = disc < 0
            cands = [np.where(miss, np.inf, t1), np.where(miss, np.inf, t2)]
        best = np.full(len(o), np.inf)
        for t in cands:
            t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
            with np.errstate(invalid="ignore"):
                p = o + t[:, None] * d
            inside = ((p[:, 0] >= 0) & (p[:, 0] <= self.size[0])
                      & (p[:, 1] >= 0) & (p[:, 1] <= self.size[1]))
            best = np.where(inside & (t < best), t, best)
        return best

    def frame(self, p):
        """Shading frame (tangent, bitangent, normal), each (N, 3), at surface points."""
        k, x0 = self._coeffs()
        p = np.atleast_2d(p)
        s = 2 * k * (p[:, 0] - x0)  # dz/dx
        inv = 1.0 / np.sqrt(1.0 + s * s)
        zero = np.zeros_like(s)
        t = np.stack([inv, zero, s * inv], axis=1)
        b = np.stack([zero, np.ones_like(s), zero], axis=1)
        n = np.stack([-s * inv, zero, inv], axis=1)
        return t, b, n

    def texel(self, p):
        p = np.atleast_2d(p)
        return p[:, :2] / self.texel_extent


@dataclass(frozen=True)
class Camera:
    position: tuple
    look_at: tuple
    up: tuple = (0.0, 0.0, 1.0)
    fov: float = 40.0
    resolution: tuple = (64, 64)

    def __post_init__(self):
        if not 0 < self.fov < 180:
            raise ValueError("fov must lie in (0, 180) degrees")
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ValueError("resolution must be two positive integers")

    @property
    def width(self):
        return int(self.resolution[0])

    @property
    def height(self):
        return int(self.resolution[1])

    def basis(self):
        pos = _vec(self.position, name="camera position")
        fwd = _vec(self.look_at, name="look_at") - pos
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, _vec(self.up, name="up"))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("camera up vector is parallel to the view direction")
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return pos, fwd, right, up

    @property
    def pixel_angle(self):
        return 2 * math.tan(math.radians(self.fov) / 2) / self.height

    def rays(self, px, py):
        """Unit ray directions through continuous pixel coordinates (origin top-left)."""
        pos, fwd, right, up = self.basis()
        scale = math.tan(math.radians(self.fov) / 2)
        sx = (2 * np.asarray(px) / self.height - self.width / self.height) * scale
        sy = (1 - 2 * np.asarray(py) / self.height) * scale
        d = fwd + sx[:, None] * right + sy[:, None] * up
        return np.broadcast_to(pos, d.shape), d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class PointLight:
    position: tuple
    intensity: tuple = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class AreaLight:
    """Parallelogram emitter radiating on the side of ``edge_u x edge_v``."""

    corner: tuple
    edge_u: tuple
    edge_v: tuple
    radiance: tuple = (1.0, 1.0, 1.0)

    @property
    def normal(self):
        n = np.cross(self.edge_u, self.edge_v)
        return n / np.linalg.norm(n)

    @property
    def area(self):
        return float(np.linalg.norm(np.cross(self.edge_u, self.edge_v)))

    def intersect(self, o, d):
        """Hit distance per ray (inf on a miss or from behind)."""
        c = np.asarray(self.corner)
        eu = np.asarray(self.edge_u)
        ev = np.asarray(self.edge_v)
        n = np.cross(eu, ev)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - o) @ n) / denom
        p = o + t[:, None] * d - c
        a = p @ eu / (eu @ eu)
        b = p @ ev / (ev @ ev)
        hit = (denom < 0) & (t > 1e-9) & (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        return np.where(hit, t, np.inf)


@dataclass(frozen=True)
class Material:
    f0: tuple = (1.0, 1.0, 1.0)
    masking: bool = True
    slope_rms: float = 0.15


@dataclass(eq=False)
class Scene:
    geometry: Geometry
    camera: Camera
    lights: list = field(default_factory=list)
    environment: SgEnvironment | None = None
    material: Material = Material()

    @property
    def point_lights(self):
        return [l for l in self.lights if isinstance(l, PointLight)]

    @property
    def area_lights(self):
        return [l for l in self.lights if isinstance(l, AreaLight)]


def _lobes(entries):
    out = []
    for e in entries:
        v = [float(x) for x in e]
        axis = np.asarray(v[:3]) / np.linalg.norm(v[:3])
        amp = tuple(v[4:7]) if len(v) >= 7 else (v[4],) * 3
        out.append(SphericalGaussian(tuple(axis), v[3], amp))
    return out


def scene_from_dict(doc, base_dir=".") -> Scene:
    """Build and validate a scene from a parsed document."""
    if not isinstance(doc, dict):
        raise ValueError("scene must be a mapping")
    unknown = set(doc) - {"geometry", "camera", "lights", "material"}
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    g = dict(doc.get("geometry", {}))
    kind = g.pop("type", "plane")
    if kind not in ("plane", "bent-quad"):
        raise ValueError(f"unknown geometry type {kind!r}")
    bend = float(g.pop("bend", 0.25 if kind == "bent-quad" else 0.0))
    geometry = Geometry(tuple(g.pop("size", (1.0, 1.0))), bend if kind == "bent-quad" else 0.0,
                        float(g.pop("texel_extent", 1.0 / 512)))
    if g:
        raise ValueError(f"unknown geometry keys: {sorted(g)}")
    if "camera" not in doc:
        raise ValueError("scene needs a camera")
    c = dict(doc["camera"])
    camera = Camera(tuple(_vec(c["position"], name="camera position")),
                    tuple(_vec(c["look_at"], name="look_at")),
                    tuple(_vec(c.get("up", (0, 0, 1)), name="up")),
                    float(c.get("fov", 40.0)), tuple(int(v) for v in c.get("resolution", (64, 64))))
    lights = []
    env_lobes = []
    for entry in doc.get("lights", []):
        entry = dict(entry)
        kind = entry.pop("type", None)
        if kind == "point":
            lights.append(PointLight(tuple(_vec(entry["position"], name="light position")),
                                     tuple(_vec(entry.get("intensity", (1, 1, 1))))))
        elif kind == "area":
            lights.append(AreaLight(tuple(_vec(entry["corner"])), tuple(_vec(entry["edge_u"])),
                                    tuple(_vec(entry["edge_v"])),
                                    tuple(_vec(entry.get("radiance", (1, 1, 1))))))
        elif kind == "sg-environment":
            if "file" in entry:
                env_lobes += SgEnvironment.load(Path(base_dir) / entry["file"]).lobes
            env_lobes += _lobes(entry.get("lobes", []))
        else:
            raise ValueError(f"unknown light type {kind!r}")
    m = dict(doc.get("material", {}))
    material = Material(tuple(float(x) for x in m.get("f0", (1.0, 1.0, 1.0))),
                        bool(m.get("masking", True)), float(m.get("slope_rms", 0.15)))
    return Scene(geometry, camera, lights, SgEnvironment(env_lobes) if env_lobes else None, material)


def load_scene(path) -> Scene:
    path = Path(path)
    return scene_from_dict(yaml.safe_load(path.read_text()), path.parent)


def bentquad_scene(resolution=64, distance=1.0, bend=0.2, texel_extent=1.0 / 4096, lights=None,
                   environment=None, material=Material(), size=2.0, fov=30.0) -> Scene:
    """The standard test scene: a bent quad seen obliquely from above.

    ``distance`` scales the camera offset from the quad centre, so doubling
    it doubles the footprint of every pixel.  The defaults put one pixel of
    a 64 x 64 image at roughly 50 texels, so single-sample footprints fall
    between the first and second pyramid levels, and the default point
    light sits near the mirror direction of the quad centre.
    """
    centre = np.array([size / 2, size / 2, 0.0])
    offset = np.array([0.0, -0.9, 1.1]) * distance
    if lights is None:
        lights = [PointLight((size / 2, size / 2 + 0.9, 1.1), (2.0, 2.0, 2.0))]
    return Scene(Geometry((size, size), bend, texel_extent),
                 Camera(tuple(centre + offset), tuple(centre), (0.0, 0.0, 1.0), fov,
                        (resolution, resolution)),
                 list(lights), environment, material)
