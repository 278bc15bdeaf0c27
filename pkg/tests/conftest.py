import math

import numpy as np
import pytest

from lidaraugment.core import PEDESTRIAN, VEHICLE, Box3D, Frame, Points, RngStream
from lidaraugment.synth import SceneConfig, generate_frame

SMALL_SCENE = SceneConfig(n_objects=10, extent=30.0, background_density=0.08, points_per_object=(15, 40), rows=32, cols=512)


@pytest.fixture
def small_scene():
    return SMALL_SCENE


@pytest.fixture
def scene_frame():
    return generate_frame(SMALL_SCENE, RngStream(42), "scene-a")


@pytest.fixture
def partner_frame():
    return generate_frame(SMALL_SCENE, RngStream(43), "scene-b")


def make_frame(n=500, seed=0, n_boxes=4, rows=0, cols=0):
    """Random points plus a few boxes that contain some of them."""
    gen = np.random.default_rng(seed)
    boxes = []
    for i in range(n_boxes):
        boxes.append(
            Box3D(
                float(gen.uniform(-30, 30)),
                float(gen.uniform(-30, 30)),
                0.0,
                float(gen.uniform(2, 5)),
                float(gen.uniform(1, 2)),
                float(gen.uniform(1, 2)),
                float(gen.uniform(-math.pi, math.pi)),
                VEHICLE if i % 2 == 0 else PEDESTRIAN,
                i,
            )
        )
    xyz = gen.uniform(-40, 40, size=(n, 3))
    inside = [b.to_world(gen.uniform(-0.4, 0.4, size=(20, 3)) * b.size) for b in boxes]
    xyz = np.concatenate([xyz, *inside])
    m = len(xyz)
    pts = Points.from_arrays(xyz, gen.random(m), gen.random(m))
    return Frame(f"frame-{seed}", pts, tuple(boxes), rows, cols)
