"""Lidar data augmentation with a two-knob (m, p) search space."""

from .core import (
    CYCLIST,
    PEDESTRIAN,
    VEHICLE,
    Box3D,
    ConfigurationError,
    DegenerateRayError,
    Frame,
    MissingRayIndexError,
    Point,
    Points,
    RngStream,
    derive_stream,
    point_in_box,
    points_in_box,
    spherical_coords,
)
from .policy import Banks, PolicySpec, apply_pipeline, default_policy, resolve
from .rangeview import RangeGeometry, RangeImage, assign_rays, from_points, resolve_occlusion, to_points
from .tune import align_all, align_op, search_mp

__version__ = "0.1.0"
