"""Domain types, coordinate conventions and deterministic RNG streams.

Coordinates are in the ego frame: x forward, y left, z up, meters.
Inclination (theta) is measured from the xy-plane, azimuth (phi) from +x
towards +y.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

VEHICLE = "VEHICLE"
PEDESTRIAN = "PEDESTRIAN"
CYCLIST = "CYCLIST"

NO_RAY = -1

_U64 = 1 << 64


class LidarAugmentError(Exception):
    """Base class for library errors."""


class DegenerateRayError(LidarAugmentError, ValueError):
    """A point sits at the sensor origin and has no ray direction."""


class MissingRayIndexError(LidarAugmentError, ValueError):
    """A range-view operation received points without (row, col) indices."""


class ConfigurationError(LidarAugmentError, ValueError):
    """Inputs needed by an enabled operation are missing or invalid."""


def normalize_angle(angle):
    """Wrap angles (scalar or array) into (-pi, pi]; in-range values pass through untouched."""
    a = np.asarray(angle, dtype=np.float64)
    wrapped = math.pi - np.mod(math.pi - a, 2 * math.pi)
    wrapped = np.where(wrapped <= -math.pi, math.pi, wrapped)
    wrapped = np.where((a > -math.pi) & (a <= math.pi), a, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Point:
    x: float
    y: float
    z: float
    intensity: float = 0.0
    elongation: float = 0.0
    ray_row: int | None = None
    ray_col: int | None = None

    @property
    def range(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


@dataclass(frozen=True, eq=False)
class Points:
    """Column store for an ordered point set.

    ``range`` is the measured return distance. It defaults to the norm of
    ``xyz`` and is carried unchanged by operations that do not move points,
    so range images survive a trip through point view bit-exactly.
    Missing ray indices are stored as ``NO_RAY``.
    """

    xyz: np.ndarray
    intensity: np.ndarray
    elongation: np.ndarray
    ray_row: np.ndarray
    ray_col: np.ndarray
    range: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        cols = {
            "intensity": np.array(self.intensity, dtype=np.float64).reshape(-1),
            "elongation": np.array(self.elongation, dtype=np.float64).reshape(-1),
            "ray_row": np.array(self.ray_row, dtype=np.int64).reshape(-1),
            "ray_col": np.array(self.ray_col, dtype=np.int64).reshape(-1),
        }
        if self.range is None:
            rng_ = np.sqrt(np.einsum("ij,ij->i", xyz, xyz))
        else:
            rng_ = np.array(self.range, dtype=np.float64).reshape(-1)
        cols["range"] = rng_
        for name, arr in cols.items():
            if len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} entries, expected {n}")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "xyz", _frozen(xyz))
        for name, arr in cols.items():
            object.__setattr__(self, name, _frozen(arr))

    @classmethod
    def empty(cls) -> "Points":
        return cls.from_arrays(np.zeros((0, 3)))

    @classmethod
    def from_arrays(cls, xyz, intensity=None, elongation=None, ray_row=None, ray_col=None, range=None) -> "Points":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        zeros = np.zeros(n)
        absent = np.full(n, NO_RAY, dtype=np.int64)
        return cls(
            xyz,
            zeros if intensity is None else intensity,
            zeros if elongation is None else elongation,
            absent if ray_row is None else ray_row,
            absent if ray_col is None else ray_col,
            range,
        )

    @classmethod
    def from_points(cls, pts: Iterable[Point]) -> "Points":
        pts = list(pts)
        if not pts:
            return cls.empty()
        return cls.from_arrays(
            [(p.x, p.y, p.z) for p in pts],
            [p.intensity for p in pts],
            [p.elongation for p in pts],
            [NO_RAY if p.ray_row is None else p.ray_row for p in pts],
            [NO_RAY if p.ray_col is None else p.ray_col for p in pts],
        )

    def __len__(self) -> int:
        return len(self.xyz)

    def __getitem__(self, i: int) -> Point:
        row, col = int(self.ray_row[i]), int(self.ray_col[i])
        return Point(
            *map(float, self.xyz[i]),
            float(self.intensity[i]),
            float(self.elongation[i]),
            None if row == NO_RAY else row,
            None if col == NO_RAY else col,
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def has_rays(self) -> np.ndarray:
        return (self.ray_row != NO_RAY) & (self.ray_col != NO_RAY)

    def take(self, index) -> "Points":
        """Subset by boolean mask or integer index array; values are copied bitwise."""
        return Points(
            self.xyz[index],
            self.intensity[index],
            self.elongation[index],
            self.ray_row[index],
            self.ray_col[index],
            self.range[index],
        )

    def with_xyz(self, xyz: np.ndarray, range: np.ndarray | None = None) -> "Points":
        return Points(xyz, self.intensity, self.elongation, self.ray_row, self.ray_col, range)

    def with_features(self, intensity: np.ndarray, elongation: np.ndarray) -> "Points":
        return replace(self, intensity=intensity, elongation=elongation)

    def with_rays(self, ray_row: np.ndarray, ray_col: np.ndarray) -> "Points":
        return replace(self, ray_row=ray_row, ray_col=ray_col)

    @staticmethod
    def concat(parts: Sequence["Points"]) -> "Points":
        parts = [p for p in parts if len(p)] or [Points.empty()]
        return Points(
            np.concatenate([p.xyz for p in parts]),
            np.concatenate([p.intensity for p in parts]),
            np.concatenate([p.elongation for p in parts]),
            np.concatenate([p.ray_row for p in parts]),
            np.concatenate([p.ray_col for p in parts]),
            np.concatenate([p.range for p in parts]),
        )

    def equals(self, other: "Points") -> bool:
        """Bitwise equality of the stored columns (the range cache is excluded)."""
        if len(self) != len(other):
            return False
        return all(
            getattr(self, name).tobytes() == getattr(other, name).tobytes()
            for name in ("xyz", "intensity", "elongation", "ray_row", "ray_col")
        )


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    heading: float
    class_id: str
    box_uid: int

    def __post_init__(self) -> None:
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError(f"box {self.box_uid} has non-positive size")
        if not (-math.pi < self.heading <= math.pi):
            raise ValueError(f"box {self.box_uid} heading {self.heading!r} outside (-pi, pi]")
        if not self.class_id or any(c.isspace() for c in self.class_id):
            raise ValueError(f"invalid class id {self.class_id!r}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height])

    @cached_property
    def footprint(self) -> np.ndarray:
        """(4, 2) bird's-eye-view corners, counter-clockwise (read-only, cached)."""
        corners = self.bev_corners()
        corners.flags.writeable = False
        return corners

    def bev_corners(self) -> np.ndarray:
        """(4, 2) footprint corners, counter-clockwise."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def to_local(self, xyz: np.ndarray) -> np.ndarray:
        d = np.asarray(xyz, dtype=np.float64).reshape(-1, 3) - self.center
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)

    def to_world(self, local: np.ndarray) -> np.ndarray:
        local = np.asarray(local, dtype=np.float64).reshape(-1, 3)
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.stack(
            [
                c * local[:, 0] - s * local[:, 1] + self.cx,
                s * local[:, 0] + c * local[:, 1] + self.cy,
                local[:, 2] + self.cz,
            ],
            axis=1,
        )


@dataclass(frozen=True, eq=False)
class Frame:
    """One lidar scan. ``rows``/``cols`` give the range-image shape, 0 if unknown."""

    frame_id: str
    points: Points
    boxes: tuple[Box3D, ...] = ()
    rows: int = 0
    cols: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        uids = [b.box_uid for b in self.boxes]
        if len(set(uids)) != len(uids):
            raise ValueError(f"frame {self.frame_id!r} has duplicate box uids")
        if not self.frame_id or any(c.isspace() for c in self.frame_id):
            raise ValueError(f"invalid frame id {self.frame_id!r}")

    def replace(self, **changes) -> "Frame":
        return replace(self, **changes)

    def equals(self, other: "Frame") -> bool:
        return (
            self.frame_id == other.frame_id
            and self.rows == other.rows
            and self.cols == other.cols
            and self.points.equals(other.points)
            and _boxes_bitwise(self.boxes) == _boxes_bitwise(other.boxes)
        )

    def next_box_uid(self) -> int:
        return max((b.box_uid for b in self.boxes), default=-1) + 1


def _boxes_bitwise(boxes: Sequence[Box3D]) -> list:
    return [
        (np.array([b.cx, b.cy, b.cz, b.length, b.width, b.height, b.heading]).tobytes(), b.class_id, b.box_uid)
        for b in boxes
    ]


def spherical_coords(x, y, z):
    """Return (range, inclination, azimuth); accepts scalars or arrays.

    Raises DegenerateRayError for zero-range input.
    """
    x, y, z = (np.asarray(v, dtype=np.float64) for v in (x, y, z))
    r = np.sqrt(x * x + y * y + z * z)
    if np.any(r == 0):
        raise DegenerateRayError("zero-range point has no ray direction")
    theta = np.arcsin(np.clip(z / r, -1.0, 1.0))
    phi = np.arctan2(y, x)
    # atan2 returns -pi for (-x, -0.0); keep phi in (-pi, pi]
    phi = np.where(phi == -math.pi, math.pi, phi)
    if r.ndim == 0:
        return float(r), float(theta), float(phi)
    return r, theta, phi


def cartesian_coords(r, theta, phi):
    """Inverse of :func:`spherical_coords`."""
    r, theta, phi = (np.asarray(v, dtype=np.float64) for v in (r, theta, phi))
    ct = np.cos(theta)
    out = np.stack([r * ct * np.cos(phi), r * ct * np.sin(phi), r * np.sin(theta)], axis=-1)
    return out


def points_in_box(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside ``box``; points on a face count as inside."""
    local = box.to_local(xyz)
    half = box.size / 2
    return np.all(np.abs(local) <= half, axis=1)


def point_in_box(pt: Point, box: Box3D) -> bool:
    return bool(points_in_box(np.array([[pt.x, pt.y, pt.z]]), box)[0])


def points_in_any_box(xyz: np.ndarray, boxes: Sequence[Box3D]) -> np.ndarray:
    mask = np.zeros(len(xyz), dtype=bool)
    for box in boxes:
        mask |= points_in_box(xyz, box)
    return mask


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Splittable counter-based random stream.

    A stream is identified by its seed and derivation path, so the same path
    always yields the same numbers regardless of what other streams were used.
    """

    global_seed: int
    derivation_path: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.global_seed < _U64:
            raise ValueError("global_seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "derivation_path", tuple((str(l), int(i)) for l, i in self.derivation_path))

    def derive(self, label: str, index: int = 0) -> "RngStream":
        if index < 0:
            raise ValueError("stream index must be non-negative")
        return RngStream(self.global_seed, self.derivation_path + ((label, index),))

    def seed_sequence(self) -> np.random.SeedSequence:
        key = []
        for label, index in self.derivation_path:
            key.extend((_label_key(label), index))
        return np.random.SeedSequence(self.global_seed, spawn_key=tuple(key))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(self.seed_sequence()))


def derive_stream(parent: RngStream, label: str, index: int = 0) -> RngStream:
    return parent.derive(label, index)
