"""gsdf: joint optimization of Gaussian primitives with a neural signed
distance field, plus Gaussian-constrained isosurface extraction."""

from .config import TrainConfig
from .errors import EmptyResultError, GsdfError, InvalidInputError, NumericFailureError
from .scene import (Camera, GaussianCloud, GaussianPrimitive, ImageSet, SceneBounds,
                    View, bounds_from_points, covariance_from_params)
from .sdf_field import (SdfField, normalize_coord, oneblob_encode, sdf_gradient,
                        sdf_query, sdf_to_opacity)
from .rasterizer import RenderedMaps, RenderSettings, Splat2D, render, render_backward
from .mesher import TriangleMesh, chamfer_distance, extract_mesh, marching_tetrahedra
from .trainer import TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "Camera", "EmptyResultError", "GaussianCloud", "GaussianPrimitive", "GsdfError",
    "ImageSet", "InvalidInputError", "NumericFailureError", "RenderSettings",
    "RenderedMaps", "SceneBounds", "SdfField", "Splat2D", "TrainConfig", "TrainResult",
    "TriangleMesh", "View", "bounds_from_points", "chamfer_distance",
    "covariance_from_params", "extract_mesh", "marching_tetrahedra", "normalize_coord",
    "oneblob_encode", "render", "render_backward", "sdf_gradient", "sdf_query",
    "sdf_to_opacity", "train",
]
