"""Synthetic lidar scenes and a desk-scale proxy evaluator.

The proxy score is a test fixture for the search machinery. It has no
relationship to detector accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Mapping

import numpy as np

from .core import CYCLIST, PEDESTRIAN, VEHICLE, Box3D, Frame, Points, RngStream, points_in_any_box, points_in_box
from .ops import bev_overlaps, extract_exemplars, flip_frame
from .policy import GLOBAL_FLIP, Banks, PolicySpec, ResolvedOp, ResolvedPolicy, resolve, run_resolved
from .rangeview import DEFAULT_COLS, DEFAULT_ROWS, assign_rays, frame_geometry, resolve_occlusion

# nominal (length, width, height) in meters
CLASS_SIZES = {
    VEHICLE: (4.6, 1.9, 1.6),
    PEDESTRIAN: (0.8, 0.8, 1.75),
    CYCLIST: (1.8, 0.7, 1.7),
}

# local face normals and the axis each face spans
_FACES = [(axis, sign) for axis in range(3) for sign in (1.0, -1.0)]


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 50
    class_mix: Mapping[str, float] = field(
        default_factory=lambda: {VEHICLE: 0.6, PEDESTRIAN: 0.3, CYCLIST: 0.1}
    )
    extent: float = 60.0
    points_per_object: tuple[int, int] = (20, 80)
    background_density: float = 0.3
    ground_z: float = -1.8
    rows: int = DEFAULT_ROWS
    cols: int = DEFAULT_COLS
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_objects < 0:
            raise ValueError("n_objects must be non-negative")
        if self.n_objects and not self.class_mix:
            raise ValueError("class_mix is empty")
        if any(w < 0 for w in self.class_mix.values()) or (self.class_mix and sum(self.class_mix.values()) <= 0):
            raise ValueError("class_mix weights must be non-negative with a positive sum")
        unknown = set(self.class_mix) - set(CLASS_SIZES)
        if unknown:
            raise ValueError(f"no size prior for classes {sorted(unknown)}")
        lo, hi = self.points_per_object
        if not 1 <= lo <= hi:
            raise ValueError("points_per_object must satisfy 1 <= lo <= hi")
        if self.extent <= 10:
            raise ValueError("extent must exceed 10 m")
        if self.background_density < 0:
            raise ValueError("background_density must be non-negative")


def load_scene_config(text: str) -> SceneConfig:
    """Parse ``key = value`` lines; class_mix as ``VEHICLE:0.6,PEDESTRIAN:0.4``."""
    kinds = {f.name: f for f in fields(SceneConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep or key not in kinds:
            raise ValueError(f"line {lineno}: unknown setting {line!r}")
        if key == "class_mix":
            values[key] = {c.strip(): float(w) for c, w in (item.split(":") for item in val.split(","))}
        elif key == "points_per_object":
            lo, hi = val.split(",")
            values[key] = (int(lo), int(hi))
        elif key in ("n_objects", "rows", "cols", "seed"):
            values[key] = int(val)
        else:
            values[key] = float(val)
    return SceneConfig(**values)


def dump_scene_config(cfg: SceneConfig) -> str:
    lines = []
    for f in fields(SceneConfig):
        v = getattr(cfg, f.name)
        if f.name == "class_mix":
            v = ",".join(f"{c}:{w!r}" for c, w in v.items())
        elif f.name == "points_per_object":
            v = f"{v[0]},{v[1]}"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _place_boxes(cfg: SceneConfig, gen: np.random.Generator) -> list[Box3D]:
    classes = sorted(cfg.class_mix)
    weights = np.array([cfg.class_mix[c] for c in classes], dtype=float)
    weights /= weights.sum() if len(weights) else 1.0
    boxes: list[Box3D] = []
    attempts = 0
    while len(boxes) < cfg.n_objects:
        attempts += 1
        if attempts > 2000 * max(cfg.n_objects, 1):
            raise ValueError(f"could not place {cfg.n_objects} objects within {cfg.extent} m")
        cls = classes[int(gen.choice(len(classes), p=weights))]
        l, w, h = (s * gen.uniform(0.9, 1.1) for s in CLASS_SIZES[cls])
        r = gen.uniform(5.0, cfg.extent - 5.0)
        phi = gen.uniform(-math.pi, math.pi)
        heading = math.pi - gen.uniform(0.0, 2 * math.pi)
        box = Box3D(
            float(r * math.cos(phi)),
            float(r * math.sin(phi)),
            float(cfg.ground_z + h / 2),
            float(l),
            float(w),
            float(h),
            float(heading),
            cls,
            len(boxes),
        )
        if not bev_overlaps(box, boxes):
            boxes.append(box)
    return boxes


def _surface_points(box: Box3D, n: int, gen: np.random.Generator) -> np.ndarray:
    """Sample ``n`` points on the box faces that face the sensor at the origin."""
    half = box.size / 2
    visible, areas = [], []
    for axis, sign in _FACES:
        normal_local = np.zeros(3)
        normal_local[axis] = sign
        center_local = normal_local * half
        world_center = box.to_world(center_local[None])[0]
        world_normal = box.to_world(normal_local[None])[0] - box.center
        if np.dot(world_normal, world_center) < 0:
            others = [a for a in range(3) if a != axis]
            visible.append((axis, sign, others))
            areas.append(4 * half[others[0]] * half[others[1]])
    areas = np.array(areas) / np.sum(areas)
    face_idx = gen.choice(len(visible), size=n, p=areas)
    local = np.empty((n, 3))
    for k, (axis, sign, others) in enumerate(visible):
        sel = face_idx == k
        m = int(sel.sum())
        local[sel, axis] = sign * half[axis]
        for a in others:
            local[sel, a] = gen.uniform(-half[a], half[a], size=m)
    # pull samples slightly inside so membership survives rounding
    return box.to_world(local * 0.98)


def generate_frame(cfg: SceneConfig, rng: RngStream | None = None, frame_id: str | None = None) -> Frame:
    rng = rng or RngStream(cfg.seed)
    frame_id = frame_id or f"synth-{cfg.seed}"
    boxes = _place_boxes(cfg, rng.derive("boxes").generator())

    gen = rng.derive("objects").generator()
    parts = []
    for box in boxes:
        n = int(gen.integers(cfg.points_per_object[0], cfg.points_per_object[1] + 1))
        xyz = _surface_points(box, n, gen)
        parts.append(Points.from_arrays(xyz, gen.uniform(0, 1, n), gen.uniform(0, 1, n)))

    gen = rng.derive("ground").generator()
    n_ground = int(round(cfg.background_density * math.pi * cfg.extent**2))
    r = cfg.extent * np.sqrt(gen.uniform(0.01, 1.0, n_ground))
    phi = gen.uniform(-math.pi, math.pi, n_ground)
    xyz = np.stack([r * np.cos(phi), r * np.sin(phi), cfg.ground_z + gen.normal(0, 0.02, n_ground)], axis=1)
    ground = Points.from_arrays(xyz, gen.uniform(0, 0.3, n_ground), gen.uniform(0, 0.3, n_ground))
    # ground clutter inside an object's footprint would be mislabeled
    ground = ground.take(~points_in_any_box(ground.xyz, boxes))

    points = Points.concat([ground, *parts])
    geometry = frame_geometry(cfg.rows, cfg.cols)
    points = resolve_occlusion(assign_rays(points, geometry))
    return Frame(frame_id, points, tuple(boxes), cfg.rows, cfg.cols)


def generate_frames(cfg: SceneConfig, count: int, prefix: str = "synth") -> list[Frame]:
    root = RngStream(cfg.seed)
    return [
        generate_frame(cfg, root.derive("frame", i), f"{prefix}-{i:05d}") for i in range(count)
    ]


# -- proxy evaluator ---------------------------------------------------------------

PROXY_SCENE = SceneConfig(
    n_objects=40, extent=45.0, background_density=0.02, points_per_object=(8, 16), rows=32, cols=512
)
PROXY_FRAMES = 24


def _box_counts(frame: Frame) -> dict[int, tuple[Box3D, int]]:
    return {b.box_uid: (b, int(points_in_box(frame.points.xyz, b).sum())) for b in frame.boxes}


def _same_object(a: Box3D, b: Box3D) -> bool:
    """Same uid is not enough: a pasted box may reuse the uid of a dropped one.

    Aspect ratios survive every global op, so they tell the two apart.
    """
    return (
        a.class_id == b.class_id
        and math.isclose(a.width / a.length, b.width / b.length, rel_tol=1e-9)
        and math.isclose(a.height / a.length, b.height / b.length, rel_tol=1e-9)
    )


def augmentation_energy(before: Frame, after: Frame) -> float:
    """Unitless size of the geometric change between two versions of a frame."""
    old = {b.box_uid: b for b in before.boxes}
    shift, turn, resize = [], [], []
    for b in after.boxes:
        o = old.get(b.box_uid)
        if o is None or not _same_object(o, b):
            continue
        shift.append(math.hypot(b.cx - o.cx, b.cy - o.cy) / 5.0)
        d = (b.heading - o.heading + math.pi) % (2 * math.pi) - math.pi
        turn.append(abs(d) / (math.pi / 2))
        resize.append(abs(math.log(b.length / o.length)) * 10)
    moved = float(np.mean(shift) + np.mean(turn) + np.mean(resize)) if shift else 0.0
    n0, n1 = len(before.points), len(after.points)
    churn = abs(n1 - n0) / max(n0, 1)
    inserted = max(len(after.boxes) - len(old), 0) / max(len(old), 1)
    return moved + churn + inserted


def label_corruption(before: Frame, after: Frame) -> float:
    """Fraction of original boxes that vanished or lost more than 90% of their points."""
    if not before.boxes:
        return 0.0
    pre = _box_counts(before)
    post = _box_counts(after)
    bad = 0
    for uid, (box, n) in pre.items():
        match = post.get(uid)
        if match is None or not _same_object(box, match[0]) or (n > 0 and match[1] < 0.1 * n):
            bad += 1
    return bad / len(pre)


@lru_cache(maxsize=8)
def _proxy_data(seed: int) -> tuple[tuple[Frame, ...], Banks]:
    root = RngStream(seed)
    cfg = PROXY_SCENE
    frames = tuple(generate_frame(cfg, root.derive("scene", i), f"proxy-{i}") for i in range(PROXY_FRAMES))
    donors = tuple(generate_frame(cfg, root.derive("donor", i), f"donor-{i}") for i in range(2))
    return frames, Banks(tuple(ex for d in donors for ex in extract_exemplars(d)), donors)


def _units(resolved: ResolvedPolicy) -> tuple[tuple[str, str], ...]:
    """Every independent gate of a resolved policy as (op name, probability key)."""
    return tuple((o.name, k) for o in resolved.ops for k in o.values if k.startswith("probability"))


def _forced(resolved: ResolvedPolicy, unit: tuple[str, str]) -> ResolvedPolicy:
    """Copy of ``resolved`` where only ``unit`` fires, and always does."""
    ops = tuple(
        ResolvedOp(
            o.name,
            {k: (float((o.name, k) == unit) if k.startswith("probability") else v) for k, v in o.values.items()},
        )
        for o in resolved.ops
    )
    return ResolvedPolicy(resolved.m, resolved.p, ops)


@lru_cache(maxsize=64)
def _unit_effects(spec: PolicySpec, m: float, seed: int):
    """Energy and corruption of each gate firing alone, per proxy frame.

    Magnitudes do not depend on p, so one table serves a whole row of the grid.
    """
    root = RngStream(seed)
    frames, banks = _proxy_data(seed)
    resolved = resolve(spec, m, 0.0)
    units = _units(resolved)
    energy = np.zeros((len(frames), len(units)))
    corrupt = np.zeros_like(energy)
    for i, frame in enumerate(frames):
        for j, unit in enumerate(units):
            if unit[0] == GLOBAL_FLIP:
                # the flip gate is capped at 0.5, so it cannot be forced through the pipeline
                out = flip_frame(frame)
            else:
                out = run_resolved(frame, _forced(resolved, unit), spec, root.derive("augment", i), banks)
            energy[i, j] = augmentation_energy(frame, out)
            corrupt[i, j] = label_corruption(frame, out)
    return units, energy, corrupt


def proxy_score(spec: PolicySpec, m: float, p: float, seed: int) -> float:
    """Saturating diversity of augmented frames minus label corruption.

    Gates are integrated out rather than sampled: each op is applied alone at
    magnitude m, and its energy and corruption are weighted by its firing
    probability at p. This keeps the score smooth in p.
    """
    resolved = resolve(spec, m, p)
    weights = np.array([resolved[name].values[key] for name, key in _units(resolved)], dtype=float)
    if not weights.any():
        return 0.0
    units, energy, corrupt = _unit_effects(spec, float(m), seed)
    diversity = 1.0 - np.exp(-(energy @ weights))
    return float(diversity.mean() - corrupt.mean(axis=0) @ weights)
