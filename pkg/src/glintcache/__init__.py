"""Compressed, queryable glint NDFs for real-time-style path tracing.

Pipeline: a normal map (:mod:`texture`) -> brute-force footprint NDFs
(:mod:`oracle`) -> a multi-level grid of NDF images (:mod:`pyramid`) ->
CP-compressed blocks with O(1) point and range queries (:mod:`store`,
:mod:`cpd`) -> importance sampling (:mod:`sampler`), environment
prefiltering (:mod:`envlight`), implicit Wang tiling (:mod:`wangtiles`) and a
small renderer (:mod:`render`).
"""

from .errors import ChecksumError, FootprintError, FormatError, GlintCacheError
from .oracle import Footprint, IntrinsicRoughness, NdfImage, eval_pndf_image, eval_pndf_point
from .pyramid import NdfPyramid, PyramidParams, build_pyramid
from .store import AngularRange, CompressedNdf, compress, eval_ndf, eval_ndf_range
from .texture import NormalMap, generate_exemplar, load_normal_map

__version__ = "0.1.0"

__all__ = [
    "AngularRange", "ChecksumError", "CompressedNdf", "Footprint", "FootprintError",
    "FormatError", "GlintCacheError", "IntrinsicRoughness", "NdfImage", "NdfPyramid",
    "NormalMap", "PyramidParams", "build_pyramid", "compress", "eval_ndf", "eval_ndf_range",
    "eval_pndf_image", "eval_pndf_point", "generate_exemplar", "load_normal_map",
]
