"""The ten augmentation operations.

Every op is a pure function ``op(frame, <params>, rng, prob) -> Frame``.
A Bernoulli draw on the ``gate`` child of ``rng`` decides whether the op
fires; random quantities come from the ``draw`` child. When the op does not
fire, the input frame object is returned unchanged. Box ops take
per-class probabilities and counts.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (
    Box3D,
    ConfigurationError,
    Frame,
    Points,
    RngStream,
    normalize_angle,
    points_in_any_box,
    points_in_box,
    spherical_coords,
)
from .rangeview import assign_rays, frame_geometry, resolve_occlusion

MAX_PASTE_ATTEMPTS = 20


def gate(rng: RngStream, prob: float, label: str = "gate") -> bool:
    """Bernoulli(prob) decision taken from a dedicated child stream."""
    if prob <= 0:
        return False
    return bool(rng.derive(label).generator().random() < prob)


def _draw(rng: RngStream, label: str = "draw") -> np.random.Generator:
    return rng.derive(label).generator()


# -- global ops ---------------------------------------------------------------


def _rotate_z(xy: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    x, y = xy[:, 0], xy[:, 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=1)


def rotate_frame(frame: Frame, angle: float) -> Frame:
    """Rotate points and boxes about the ego z-axis by ``angle``."""
    pts = frame.points
    xyz = pts.xyz.copy()
    xyz[:, :2] = _rotate_z(xyz[:, :2], angle)
    boxes = []
    for b in frame.boxes:
        cx, cy = _rotate_z(np.array([[b.cx, b.cy]]), angle)[0]
        boxes.append(_with(b, cx=cx, cy=cy, heading=normalize_angle(b.heading + angle)))
    # rotation about the sensor keeps measured ranges
    return frame.replace(points=pts.with_xyz(xyz, pts.range), boxes=tuple(boxes))


def global_rotate(frame: Frame, max_angle: float, rng: RngStream, prob: float = 1.0) -> Frame:
    if not 0 <= max_angle <= math.pi:
        raise ValueError("max_angle must lie in [0, pi]")
    if max_angle == 0 or not gate(rng, prob):
        return frame
    angle = float(_draw(rng).uniform(-max_angle, max_angle))
    return rotate_frame(frame, angle)


def scale_frame(frame: Frame, factor: float) -> Frame:
    pts = frame.points
    boxes = tuple(
        _with(
            b,
            cx=b.cx * factor,
            cy=b.cy * factor,
            cz=b.cz * factor,
            length=b.length * factor,
            width=b.width * factor,
            height=b.height * factor,
        )
        for b in frame.boxes
    )
    return frame.replace(points=pts.with_xyz(pts.xyz * factor, pts.range * factor), boxes=boxes)


def global_scale(frame: Frame, half_width: float, rng: RngStream, prob: float = 1.0) -> Frame:
    if not 0 <= half_width < 1:
        raise ValueError("scale half-width must lie in [0, 1)")
    if half_width == 0 or not gate(rng, prob):
        return frame
    factor = float(_draw(rng).uniform(1 - half_width, 1 + half_width))
    return scale_frame(frame, factor)


def translate_frame(frame: Frame, dx: float, dy: float) -> Frame:
    pts = frame.points
    xyz = pts.xyz.copy()
    xyz[:, 0] += dx
    xyz[:, 1] += dy
    boxes = tuple(_with(b, cx=b.cx + dx, cy=b.cy + dy) for b in frame.boxes)
    return frame.replace(points=pts.with_xyz(xyz), boxes=boxes)


def global_translate(frame: Frame, stdev: float, rng: RngStream, prob: float = 1.0) -> Frame:
    if stdev < 0:
        raise ValueError("translation stdev must be non-negative")
    if stdev == 0 or not gate(rng, prob):
        return frame
    dx, dy = _draw(rng).normal(0.0, stdev, size=2)
    return translate_frame(frame, float(dx), float(dy))


def flip_frame(frame: Frame) -> Frame:
    """Mirror across the xz-plane (y -> -y, heading -> -heading)."""
    pts = frame.points
    xyz = pts.xyz.copy()
    xyz[:, 1] = -xyz[:, 1]
    boxes = tuple(_with(b, cy=-b.cy, heading=normalize_angle(-b.heading)) for b in frame.boxes)
    return frame.replace(points=pts.with_xyz(xyz, pts.range), boxes=boxes)


def global_flip(frame: Frame, rng: RngStream, prob: float = 0.5) -> Frame:
    if not 0 <= prob <= 0.5:
        raise ValueError("flip probability must lie in [0, 0.5]")
    if not gate(rng, prob):
        return frame
    return flip_frame(frame)


def global_drop(frame: Frame, drop_ratio: float, rng: RngStream, prob: float = 1.0) -> Frame:
    if not 0 <= drop_ratio <= 0.8:
        raise ValueError("drop ratio must lie in [0, 0.8]")
    if drop_ratio == 0 or not gate(rng, prob):
        return frame
    keep = _draw(rng).random(len(frame.points)) >= drop_ratio
    return frame.replace(points=frame.points.take(keep))


# -- frustum ops --------------------------------------------------------------


@dataclass(frozen=True)
class FrustumSpec:
    center_theta: float
    center_phi: float
    width_theta: float
    width_phi: float
    min_range: float

    def __post_init__(self) -> None:
        if not 0 <= self.width_theta <= math.pi:
            raise ValueError("theta width must lie in [0, pi]")
        if not 0 <= self.width_phi <= 2 * math.pi:
            raise ValueError("phi width must lie in [0, 2pi]")
        if self.min_range < 0:
            raise ValueError("min range must be non-negative")

    @property
    def is_empty(self) -> bool:
        return self.width_theta == 0 or self.width_phi == 0

    def contains(self, xyz: np.ndarray) -> np.ndarray:
        """Membership mask; zero-range points are never inside."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        mask = np.zeros(len(xyz), dtype=bool)
        if self.is_empty or len(xyz) == 0:
            return mask
        r = np.sqrt(np.einsum("ij,ij->i", xyz, xyz))
        ok = r > 0
        _, theta, phi = spherical_coords(xyz[ok, 0], xyz[ok, 1], xyz[ok, 2])
        dphi = np.mod(phi - self.center_phi + math.pi, 2 * math.pi) - math.pi
        mask[ok] = (
            (np.abs(theta - self.center_theta) <= self.width_theta / 2)
            & (np.abs(dphi) <= self.width_phi / 2)
            & (r[ok] >= self.min_range)
        )
        return mask


def sample_frustum(
    frame: Frame, width_theta: float, width_phi: float, min_range: float, gen: np.random.Generator
) -> FrustumSpec | None:
    """Random frustum: phi center uniform on the circle, theta center uniform over the frame's span."""
    xyz = frame.points.xyz
    r = np.sqrt(np.einsum("ij,ij->i", xyz, xyz))
    xyz = xyz[r > 0]
    if len(xyz) == 0:
        return None
    _, theta, _ = spherical_coords(xyz[:, 0], xyz[:, 1], xyz[:, 2])
    theta = np.atleast_1d(theta)
    center_theta = float(gen.uniform(theta.min(), theta.max()))
    center_phi = float(math.pi - gen.uniform(0.0, 2 * math.pi))
    return FrustumSpec(center_theta, center_phi, width_theta, width_phi, min_range)


def frustum_drop(
    frame: Frame,
    width_theta: float,
    width_phi: float,
    min_range: float,
    drop_ratio: float,
    rng: RngStream,
    prob: float = 1.0,
) -> Frame:
    if not 0 <= drop_ratio <= 0.8:
        raise ValueError("drop ratio must lie in [0, 0.8]")
    if width_theta == 0 or width_phi == 0 or drop_ratio == 0 or not gate(rng, prob):
        return frame
    gen = _draw(rng)
    fr = sample_frustum(frame, width_theta, width_phi, min_range, gen)
    if fr is None:
        return frame
    return drop_in_frustum(frame, fr, drop_ratio, gen)


def drop_in_frustum(frame: Frame, fr: FrustumSpec, drop_ratio: float, gen: np.random.Generator) -> Frame:
    inside = fr.contains(frame.points.xyz)
    dropped = inside & (gen.random(len(inside)) < drop_ratio)
    if not dropped.any():
        return frame
    return frame.replace(points=frame.points.take(~dropped))


def frustum_noise(
    frame: Frame,
    width_theta: float,
    width_phi: float,
    min_range: float,
    max_noise: float,
    rng: RngStream,
    prob: float = 1.0,
) -> Frame:
    if max_noise < 0:
        raise ValueError("max noise must be non-negative")
    if width_theta == 0 or width_phi == 0 or max_noise == 0 or not gate(rng, prob):
        return frame
    gen = _draw(rng)
    fr = sample_frustum(frame, width_theta, width_phi, min_range, gen)
    if fr is None:
        return frame
    return noise_in_frustum(frame, fr, max_noise, gen)


def noise_in_frustum(frame: Frame, fr: FrustumSpec, max_noise: float, gen: np.random.Generator) -> Frame:
    """Multiplicative uniform noise on intensity and elongation inside ``fr``."""
    pts = frame.points
    inside = fr.contains(pts.xyz)
    k = int(inside.sum())
    if k == 0:
        return frame
    u = gen.uniform(-max_noise, max_noise, size=(2, k))
    inten = pts.intensity.copy()
    elong = pts.elongation.copy()
    inten[inside] = np.clip(inten[inside] * (1 + u[0]), 0.0, 1.0)
    elong[inside] = np.clip(elong[inside] * (1 + u[1]), 0.0, 1.0)
    return frame.replace(points=pts.with_features(inten, elong))


# -- box ops ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ObjectExemplar:
    """A labeled object cut from a source frame; points are in box-local coordinates."""

    box: Box3D
    points: Points
    source_frame_id: str

    def world_points(self) -> Points:
        p = self.points
        return Points.from_arrays(self.box.to_world(p.xyz), p.intensity, p.elongation)


def extract_exemplars(frame: Frame, classes=None) -> list[ObjectExemplar]:
    """Cut every box (of ``classes``, if given) and its interior points out of ``frame``."""
    out = []
    for box in frame.boxes:
        if classes is not None and box.class_id not in classes:
            continue
        pts = frame.points.take(points_in_box(frame.points.xyz, box))
        local = Points.from_arrays(box.to_local(pts.xyz), pts.intensity, pts.elongation)
        out.append(ObjectExemplar(box, local, frame.frame_id))
    return out


def _per_class(value, classes) -> dict[str, float]:
    if isinstance(value, Mapping):
        return {c: value.get(c, 0) for c in classes}
    return {c: value for c in classes}


def drop_box(
    frame: Frame,
    count_per_class: Mapping[str, int],
    rng: RngStream,
    prob: float | Mapping[str, float] = 1.0,
) -> Frame:
    """Remove up to ``count`` random boxes of each class, with their points."""
    probs = _per_class(prob, count_per_class)
    removed: list[Box3D] = []
    for cls in sorted(count_per_class):
        count = int(count_per_class[cls])
        if count < 0:
            raise ValueError("box counts must be non-negative")
        candidates = [b for b in frame.boxes if b.class_id == cls]
        if count == 0 or not candidates or not gate(rng, probs[cls], f"gate:{cls}"):
            continue
        gen = _draw(rng, f"draw:{cls}")
        picks = gen.choice(len(candidates), size=min(count, len(candidates)), replace=False)
        removed.extend(candidates[i] for i in sorted(picks))
    if not removed:
        return frame
    gone = {b.box_uid for b in removed}
    inside = points_in_any_box(frame.points.xyz, removed)
    return frame.replace(
        points=frame.points.take(~inside),
        boxes=tuple(b for b in frame.boxes if b.box_uid not in gone),
    )


def _circle(corners: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bounding circles (center, radius) of (..., 4, 2) footprints."""
    centers = corners.mean(axis=-2)
    radii = np.sqrt(((corners - centers[..., None, :]) ** 2).sum(axis=-1).max(axis=-1))
    return centers, radii


def _bev_overlap(corners: np.ndarray, others: np.ndarray, circles=None) -> np.ndarray:
    """Separating-axis test of one (4, 2) footprint against (K, 4, 2); touching counts as overlap.

    ``circles`` optionally supplies precomputed bounding circles of ``others``.
    """
    overlap = np.zeros(len(others), dtype=bool)
    if len(others) == 0:
        return overlap
    # bounding circles rule out most pairs cheaply
    c0, r0 = _circle(corners)
    centers, radii = circles if circles is not None else _circle(others)
    near = np.nonzero(((centers - c0) ** 2).sum(axis=1) <= (r0 + radii) ** 2)[0]
    if len(near) == 0:
        return overlap
    b = others[near]
    # edge normals of both rectangles: (K, 4, 2)
    edges = np.concatenate([np.broadcast_to(corners[1:3] - corners[0:2], (len(near), 2, 2)), b[:, 1:3] - b[:, 0:2]], axis=1)
    axes = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
    pa = np.einsum("kxj,ij->kxi", axes, corners)
    pb = np.einsum("kxj,kij->kxi", axes, b)
    hit = ((pa.max(2) >= pb.min(2)) & (pb.max(2) >= pa.min(2))).all(axis=1)
    overlap[near] = hit
    return overlap


def bev_overlaps(box: Box3D, boxes: Sequence[Box3D]) -> bool:
    if not boxes:
        return False
    others = np.stack([b.footprint for b in boxes])
    return bool(_bev_overlap(box.footprint, others).any())


def group_bank(bank: Sequence[ObjectExemplar]) -> dict[str, list[ObjectExemplar]]:
    grouped: dict[str, list[ObjectExemplar]] = defaultdict(list)
    for ex in bank:
        grouped[ex.box.class_id].append(ex)
    return dict(grouped)


def _occlusion_pass(frame: Frame, points: Points) -> Points:
    geometry = frame_geometry(frame.rows, frame.cols)
    if geometry is None:
        return points
    return resolve_occlusion(assign_rays(points, geometry))


def paste_box(
    frame: Frame,
    bank: Sequence[ObjectExemplar],
    count_per_class: Mapping[str, int],
    rng: RngStream,
    prob: float | Mapping[str, float] = 1.0,
    resolve: bool = True,
) -> Frame:
    """Insert banked objects at their recorded pose, skipping BEV collisions.

    With a known range-image shape, pasted points get rays assigned and
    occluded returns are removed (``resolve=False`` defers that step).
    """
    grouped = group_bank(bank)
    probs = _per_class(prob, count_per_class)
    for cls in sorted(count_per_class):
        if int(count_per_class[cls]) < 0:
            raise ValueError("box counts must be non-negative")
        if count_per_class[cls] > 0 and probs[cls] > 0 and not grouped.get(cls):
            raise ConfigurationError(f"object bank has no exemplars of class {cls}")

    boxes = list(frame.boxes)
    occupied = np.stack([b.footprint for b in boxes]) if boxes else np.zeros((0, 4, 2))
    centers, radii = _circle(occupied)
    new_points: list[Points] = []
    uid = frame.next_box_uid()
    for cls in sorted(count_per_class):
        count = int(count_per_class[cls])
        if count == 0 or not gate(rng, probs[cls], f"gate:{cls}"):
            continue
        exemplars = grouped[cls]
        gen = _draw(rng, f"draw:{cls}")
        for _ in range(count):
            for _attempt in range(MAX_PASTE_ATTEMPTS):
                ex = exemplars[int(gen.integers(len(exemplars)))]
                if _bev_overlap(ex.box.footprint, occupied, (centers, radii)).any():
                    continue
                c, r = _circle(ex.box.footprint)
                occupied = np.concatenate([occupied, ex.box.footprint[None]])
                centers = np.concatenate([centers, c[None]])
                radii = np.append(radii, r)
                boxes.append(_with(ex.box, box_uid=uid))
                uid += 1
                new_points.append(ex.world_points())
                break
    if len(boxes) == len(frame.boxes):
        return frame
    points = Points.concat([frame.points, *new_points])
    if resolve:
        points = _occlusion_pass(frame, points)
    return frame.replace(points=points, boxes=tuple(boxes))


def swap_background(
    frame_a: Frame, frame_b: Frame, rng: RngStream, prob: float = 1.0, resolve: bool = True
) -> Frame:
    """Keep frame_a's objects, take everything outside frame_b's boxes as background."""
    if not gate(rng, prob):
        return frame_a
    objects = frame_a.points.take(points_in_any_box(frame_a.points.xyz, frame_a.boxes))
    background = frame_b.points.take(~points_in_any_box(frame_b.points.xyz, frame_b.boxes))
    points = Points.concat([objects, background])
    if resolve:
        points = _occlusion_pass(frame_a, points)
    return frame_a.replace(points=points)


def _with(box: Box3D, **changes) -> Box3D:
    vals = {k: getattr(box, k) for k in box.__dataclass_fields__}
    vals.update({k: float(v) if isinstance(v, (np.floating,)) else v for k, v in changes.items()})
    return Box3D(**vals)


__all__ = [
    "FrustumSpec",
    "ObjectExemplar",
    "bev_overlaps",
    "drop_box",
    "extract_exemplars",
    "flip_frame",
    "frustum_drop",
    "frustum_noise",
    "gate",
    "global_drop",
    "global_flip",
    "global_rotate",
    "global_scale",
    "global_translate",
    "paste_box",
    "points_in_box",
    "rotate_frame",
    "sample_frustum",
    "scale_frame",
    "swap_background",
    "translate_frame",
]
