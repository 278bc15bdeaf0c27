"""Point cloud <-> range image conversion with carried pixel indices.

Columns are uniform azimuth bins: column ``c`` points at
``azimuth_origin + c * 2*pi/cols``. Rows follow an explicit inclination
table so non-uniform lasers are representable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NO_RAY, DegenerateRayError, MissingRayIndexError, Points, spherical_coords

EMPTY = -1.0

DEFAULT_ROWS = 64
DEFAULT_COLS = 2650
# vertical field of view of a typical 64-beam roof lidar, degrees
DEFAULT_FOV_DEG = (-17.6, 2.4)


@dataclass(frozen=True)
class RangeGeometry:
    rows: int
    cols: int
    inclinations: tuple[float, ...]
    azimuth_origin: float = 0.0

    def __post_init__(self) -> None:
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("range image needs rows > 0 and cols > 0")
        incl = tuple(float(t) for t in self.inclinations)
        if len(incl) != self.rows:
            raise ValueError(f"inclination table has {len(incl)} entries for {self.rows} rows")
        diffs = np.diff(incl)
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("inclination table must be strictly monotonic")
        object.__setattr__(self, "inclinations", incl)

    @classmethod
    def uniform(cls, rows: int = DEFAULT_ROWS, cols: int = DEFAULT_COLS, fov_deg=DEFAULT_FOV_DEG) -> "RangeGeometry":
        """Evenly spaced beams, row 0 the highest."""
        lo, hi = (math.radians(v) for v in fov_deg)
        if rows == 1:
            incl = ((lo + hi) / 2,)
        else:
            incl = tuple(np.linspace(hi, lo, rows))
        return cls(rows, cols, incl)

    @property
    def azimuth_step(self) -> float:
        return 2 * math.pi / self.cols

    def column_azimuths(self) -> np.ndarray:
        return self.azimuth_origin + np.arange(self.cols) * self.azimuth_step


@dataclass(frozen=True, eq=False)
class RangeImage:
    """rows x cols grid; empty cells hold ``EMPTY`` range and zero features."""

    geometry: RangeGeometry
    range: np.ndarray
    intensity: np.ndarray
    elongation: np.ndarray

    def __post_init__(self) -> None:
        shape = (self.geometry.rows, self.geometry.cols)
        for name in ("range", "intensity", "elongation"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        filled = self.range != EMPTY
        if np.any(self.range[filled] <= 0) or not np.all(np.isfinite(self.range)):
            raise ValueError("non-empty cells need a finite positive range")

    @classmethod
    def empty(cls, geometry: RangeGeometry) -> "RangeImage":
        shape = (geometry.rows, geometry.cols)
        return cls(geometry, np.full(shape, EMPTY), np.zeros(shape), np.zeros(shape))

    @property
    def rows(self) -> int:
        return self.geometry.rows

    @property
    def cols(self) -> int:
        return self.geometry.cols

    @property
    def filled(self) -> np.ndarray:
        return self.range != EMPTY

    def equals(self, other: "RangeImage") -> bool:
        return self.geometry == other.geometry and all(
            getattr(self, n).tobytes() == getattr(other, n).tobytes() for n in ("range", "intensity", "elongation")
        )


def _ray_units(geometry: RangeGeometry, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    theta = np.asarray(geometry.inclinations)[rows]
    phi = geometry.azimuth_origin + cols * geometry.azimuth_step
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=1)


def to_points(img: RangeImage) -> Points:
    """One point per filled cell, row-major, carrying its (row, col) index."""
    rows, cols = np.nonzero(img.filled)
    r = img.range[rows, cols]
    xyz = r[:, None] * _ray_units(img.geometry, rows, cols)
    return Points.from_arrays(
        xyz, img.intensity[rows, cols], img.elongation[rows, cols], rows, cols, range=r
    )


def _require_rays(points: Points) -> None:
    if not np.all(points.has_rays):
        missing = int(np.count_nonzero(~points.has_rays))
        raise MissingRayIndexError(f"{missing} points lack ray indices; run assign_rays first")


def occlusion_keep_mask(points: Points) -> np.ndarray:
    """Mask of points that are the closest return on their ray.

    Exact range ties keep the earliest point in sequence order.
    """
    _require_rays(points)
    n = len(points)
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    order = np.lexsort((np.arange(n), points.range, points.ray_col, points.ray_row))
    r, c = points.ray_row[order], points.ray_col[order]
    first = np.ones(n, dtype=bool)
    first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
    keep[order[first]] = True
    return keep


def resolve_occlusion(points: Points) -> Points:
    """Keep only the nearest return per ray; survivors keep their input order."""
    keep = occlusion_keep_mask(points)
    if keep.all():
        return points
    return points.take(keep)


def from_points(points: Points, geometry: RangeGeometry) -> RangeImage:
    """Scatter indexed points into a range image, nearest return winning."""
    _require_rays(points)
    rr, cc = points.ray_row, points.ray_col
    if len(points) and (rr.min() < 0 or rr.max() >= geometry.rows or cc.min() < 0 or cc.max() >= geometry.cols):
        raise ValueError("ray index outside the range image")
    if len(points) and np.any(points.range <= 0):
        raise DegenerateRayError("cannot store a zero-range return")
    kept = resolve_occlusion(points)
    shape = (geometry.rows, geometry.cols)
    rng_img = np.full(shape, EMPTY)
    inten = np.zeros(shape)
    elong = np.zeros(shape)
    rng_img[kept.ray_row, kept.ray_col] = kept.range
    inten[kept.ray_row, kept.ray_col] = kept.intensity
    elong[kept.ray_row, kept.ray_col] = kept.elongation
    return RangeImage(geometry, rng_img, inten, elong)


def nearest_rows(theta: np.ndarray, geometry: RangeGeometry) -> np.ndarray:
    """Index of the inclination closest to each theta; ties go to the lower row."""
    table = np.asarray(geometry.inclinations)
    return np.argmin(np.abs(np.asarray(theta)[:, None] - table[None, :]), axis=1)


def azimuth_bins(phi: np.ndarray, geometry: RangeGeometry) -> np.ndarray:
    """Nearest uniform azimuth bin; a point exactly between bins takes the lower one."""
    offset = np.mod(np.asarray(phi) - geometry.azimuth_origin, 2 * math.pi) / geometry.azimuth_step
    return (np.ceil(offset - 0.5).astype(np.int64)) % geometry.cols


def assign_rays(points: Points, geometry: RangeGeometry) -> Points:
    """Give every unindexed point the ray it would have been measured on."""
    todo = ~points.has_rays
    if not todo.any():
        return points
    xyz = points.xyz[todo]
    try:
        _, theta, phi = spherical_coords(xyz[:, 0], xyz[:, 1], xyz[:, 2])
    except DegenerateRayError:
        raise DegenerateRayError("cannot assign a ray to a zero-range point") from None
    rows = points.ray_row.copy()
    cols = points.ray_col.copy()
    rows[todo] = nearest_rows(np.atleast_1d(theta), geometry)
    cols[todo] = azimuth_bins(np.atleast_1d(phi), geometry)
    return points.with_rays(rows, cols)


def frame_geometry(rows: int, cols: int) -> RangeGeometry | None:
    """Geometry used for frames that only record their image shape."""
    if rows <= 0 or cols <= 0:
        return None
    if (rows, cols) == (DEFAULT_ROWS, DEFAULT_COLS):
        return _DEFAULT
    return RangeGeometry.uniform(rows, cols)


_DEFAULT = RangeGeometry.uniform()

__all__ = [
    "EMPTY",
    "NO_RAY",
    "RangeGeometry",
    "RangeImage",
    "assign_rays",
    "azimuth_bins",
    "frame_geometry",
    "from_points",
    "nearest_rows",
    "occlusion_keep_mask",
    "resolve_occlusion",
    "to_points",
]
