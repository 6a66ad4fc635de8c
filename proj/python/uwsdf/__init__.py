"""Python access to the uwsdf reconstruction core."""

from ._uwsdf import (
    EmptySurfaceError,
    NumericError,
    ShapeError,
    UwsdfError,
    ValidationError,
    acc_comp,
    composite,
    convex_hull,
    density,
    mesh_shape,
    optimize_mask,
    read_mesh,
    synthesize,
    write_mesh,
)

__all__ = [
    "EmptySurfaceError",
    "NumericError",
    "ShapeError",
    "UwsdfError",
    "ValidationError",
    "acc_comp",
    "composite",
    "convex_hull",
    "density",
    "mesh_shape",
    "optimize_mask",
    "read_mesh",
    "synthesize",
    "write_mesh",
]
