from .ply import PlyError, load_ply, save_ply
from .render import Image, Splat2D, project_gaussian, render, render_reference
from .scene import (
    Box,
    Gaussian3D,
    Plane,
    Primitive,
    SimilarityTransform,
    Sphere,
    SplatScene,
    generate_synthetic_scene,
    primitives_from_json,
)

__all__ = [
    "Box",
    "Gaussian3D",
    "Image",
    "Plane",
    "PlyError",
    "Primitive",
    "SimilarityTransform",
    "Splat2D",
    "SplatScene",
    "Sphere",
    "generate_synthetic_scene",
    "load_ply",
    "primitives_from_json",
    "project_gaussian",
    "render",
    "render_reference",
    "save_ply",
]
