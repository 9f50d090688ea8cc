"""Command line entry point: ``glintcache <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .oracle import Footprint, NdfImage, save_png
from .pyramid import NdfPyramid, PyramidParams, build_pyramid
from .store import CompressedNdf, compress, eval_ndf_batch, reconstruction_error
from .texture import KINDS, generate_exemplar, load_normal_map, save_normal_map

log = logging.getLogger("glintcache")


def _load_map(path, args):
    if path.startswith("generate:"):
        kind = path.split(":", 1)[1]
        return generate_exemplar(kind, args.resolution, args.seed)
    return load_normal_map(path, args.encoding, tileable=args.tileable,
                           texel_extent=args.texel_extent)


def cmd_exemplar(args):
    nmap = generate_exemplar(args.kind, args.resolution, args.seed)
    save_normal_map(args.out, nmap)
    print(f"wrote {args.kind} exemplar {nmap.shape} to {args.out}")


def cmd_pyramid(args):
    nmap = _load_map(args.map, args)
    params = PyramidParams(base_stride=args.stride, sigma_r=args.sigma_r)
    t0 = time.perf_counter()
    pyr = build_pyramid(nmap, params, extended=args.extended, workers=args.workers)
    pyr.save(args.out)
    print(f"{len(pyr.levels)} levels, {pyr.raw_nbytes() / 2**20:.1f} MiB raw, "
          f"{time.perf_counter() - t0:.1f} s -> {args.out}")


def cmd_compress(args):
    pyr = NdfPyramid.load(args.pyramid)
    t0 = time.perf_counter()
    store = compress(pyr, args.rank, t=args.block, seed=args.seed, workers=args.workers)
    store.save(args.out)
    ratio = store.nbytes() / pyr.raw_nbytes()
    msg = (f"rank {args.rank}: {store.nbytes() / 2**20:.2f} MiB "
           f"({100 * ratio:.2f}% of raw), blank blocks {100 * store.blank_fraction():.1f}%, "
           f"{time.perf_counter() - t0:.1f} s")
    if args.report_error:
        msg += f", relative error {reconstruction_error(store, pyr):.4f}"
    print(msg)


def _parse_footprint(text):
    try:
        u, v, s = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("footprint must be 'u,v,sigma'") from None
    return Footprint((u, v), s)


def cmd_sample_test(args):
    from .sampler import sample_half_vector

    store = CompressedNdf.load(args.store)
    fp = args.footprint
    res = store.resolution
    rng = np.random.default_rng(args.seed)
    hist = np.zeros((res, res))
    done = 0
    while done < args.samples:
        n = min(args.chunk, args.samples - done)
        rec = sample_half_vector(store, fp, rng.random((n, 2)))
        h = rec.h[rec.valid]
        ix = np.clip(((h[:, 0] + 1) * res / 2).astype(int), 0, res - 1)
        iy = np.clip(((h[:, 1] + 1) * res / 2).astype(int), 0, res - 1)
        np.add.at(hist, (iy, ix), 1.0)
        done += n
    hist *= (res / 2) ** 2 / args.samples  # counts -> density in projected measure
    c = (np.arange(res) + 0.5) * 2 / res - 1
    hx, hy = np.meshgrid(c, c)
    h = np.column_stack([hx.ravel(), hy.ravel()])
    ndf = eval_ndf_batch(store, np.repeat(np.asarray(fp.center)[None], len(h), 0),
                         np.full(len(h), fp.sigma_p), h).reshape(res, res)
    ndf[hx ** 2 + hy ** 2 >= 1] = 0.0
    rel_l1 = float(np.abs(hist - ndf).sum() / max(ndf.sum(), 1e-30))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    NdfImage(hist).save(str(out) + "_hist.ndfi")
    NdfImage(ndf).save(str(out) + "_ndf.ndfi")
    scale = 1.0 / max(ndf.max(), 1e-30)
    save_png(str(out) + "_hist.png", hist * scale, exposure=1.0)
    save_png(str(out) + "_ndf.png", ndf * scale, exposure=1.0)
    print(json.dumps({"samples": args.samples, "relative_l1": rel_l1}))


def cmd_tile_build(args):
    from .wangtiles import build_tileset

    exemplar = _load_map(args.exemplar, args)
    params = PyramidParams(base_stride=args.stride, sigma_r=args.sigma_r)
    t0 = time.perf_counter()
    tset = build_tileset(exemplar, args.tile_size, args.rank, seed=args.seed, params=params,
                         workers=args.workers)
    tset.save(args.out)
    print(f"16 tiles of {args.tile_size}^2, {tset.nbytes() / 2**20:.1f} MiB compressed, "
          f"{time.perf_counter() - t0:.1f} s -> {args.out}")


def _open_source(path, args):
    import zipfile

    from .render import StoreSource, TiledSource
    from .wangtiles import TileField, WangTileSet

    fallback = None
    if args.fallback_map:
        fallback = _load_map(args.fallback_map, args)
    if zipfile.is_zipfile(path):
        return TiledSource(TileField(args.field_seed), WangTileSet.load(path))
    return StoreSource(CompressedNdf.load(path), fallback)


def cmd_render(args):
    from .envlight import SgEnvironment
    from .render import RenderSettings, load_scene, render

    scene = load_scene(args.scene)
    if args.env_sg:
        env = SgEnvironment.load(args.env_sg)
        if scene.environment is not None:
            env = SgEnvironment(scene.environment.lobes + env.lobes)
        scene.environment = env
    source = _open_source(args.store, args)
    settings = RenderSettings(spp=args.spp, estimator=args.estimator,
                              prefilter=args.prefilter == "on", seed=args.seed,
                              workers=args.workers, max_bounces=args.bounces)
    result = render(scene, source, settings)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    result.save(args.out)
    print(f"wrote {args.out}.pfm/.png/.stats.json ({result.stats.get('seconds', 0):.1f} s)")


def build_parser():
    p = argparse.ArgumentParser(prog="glintcache", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def map_opts(q):
        q.add_argument("--encoding", default="unit-vector-image",
                       choices=["unit-vector-image", "heightfield"])
        q.add_argument("--tileable", action="store_true")
        q.add_argument("--texel-extent", type=float, default=1.0)
        q.add_argument("--resolution", type=int, default=512,
                       help="size of generated exemplars ('generate:<kind>' maps)")

    q = sub.add_parser("exemplar", help="write a procedural normal map")
    q.add_argument("--kind", choices=KINDS, default="isotropic-noise")
    q.add_argument("--resolution", type=int, default=512)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_exemplar)

    q = sub.add_parser("pyramid", help="precompute the NDF pyramid of a normal map")
    q.add_argument("--map", required=True, help="normal map file or 'generate:<kind>'")
    map_opts(q)
    q.add_argument("--stride", type=int, default=32)
    q.add_argument("--sigma-r", type=float, default=0.005)
    q.add_argument("--extended", action="store_true", help="treat the map as an isolated tile")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_pyramid)

    q = sub.add_parser("compress", help="CP-compress a pyramid into a .cndf container")
    q.add_argument("--pyramid", required=True)
    q.add_argument("--rank", type=int, default=16)
    q.add_argument("--block", type=int, default=16)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--report-error", action="store_true")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_compress)

    q = sub.add_parser("sample-test", help="histogram of importance samples vs. the NDF")
    q.add_argument("--store", required=True)
    q.add_argument("--footprint", type=_parse_footprint, required=True, metavar="U,V,SIGMA")
    q.add_argument("--samples", type=int, default=1_000_000)
    q.add_argument("--chunk", type=int, default=200_000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", default="sample_test")
    q.set_defaults(func=cmd_sample_test)

    q = sub.add_parser("tile-build", help="author and compress a 16-tile Wang set")
    q.add_argument("--exemplar", required=True, help="normal map file or 'generate:<kind>'")
    map_opts(q)
    q.add_argument("--tile-size", type=int, default=512)
    q.add_argument("--rank", type=int, default=16)
    q.add_argument("--stride", type=int, default=32)
    q.add_argument("--sigma-r", type=float, default=0.005)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_tile_build)

    q = sub.add_parser("render", help="path trace a scene with a glint material")
    q.add_argument("--scene", required=True)
    q.add_argument("--store", required=True, help=".cndf container or tile-set archive")
    q.add_argument("--spp", type=int, default=4)
    q.add_argument("--estimator", choices=["eval", "sample", "mis"], default="eval")
    q.add_argument("--prefilter", choices=["on", "off"], default="off")
    q.add_argument("--bounces", type=int, choices=[1, 2], default=1)
    q.add_argument("--env-sg", help="spherical Gaussian lobe list")
    q.add_argument("--fallback-map", help="normal map for footprints below the finest level")
    map_opts(q)
    q.add_argument("--field-seed", type=int, default=0, help="tiling seed for tile sets")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--workers", type=int, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError) as exc:
        print(f"glintcache: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
