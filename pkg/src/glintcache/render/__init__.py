"""Path-tracing harness around the glint NDF lookups."""

from .brdf import eval_brdf, fresnel_schlick, masking_alpha, smith_g1, smith_g2
from .footprint import amplify_indirect_footprint, compute_footprint, differential_sigma
from .renderer import (ESTIMATORS, OracleSource, RenderResult, RenderSettings, StoreSource,
                       TiledSource, read_pfm, render, tonemap, write_pfm)
from .scene import (AreaLight, Camera, Geometry, Material, PointLight, Scene, bentquad_scene,
                    load_scene, scene_from_dict)

__all__ = [
    "AreaLight", "Camera", "ESTIMATORS", "Geometry", "Material", "OracleSource", "PointLight",
    "RenderResult", "RenderSettings", "Scene", "StoreSource", "TiledSource",
    "amplify_indirect_footprint", "bentquad_scene", "compute_footprint", "differential_sigma",
    "eval_brdf", "fresnel_schlick", "load_scene", "masking_alpha", "read_pfm", "render",
    "scene_from_dict", "smith_g1", "smith_g2", "tonemap", "write_pfm",
]
