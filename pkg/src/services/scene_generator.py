"""
Procedural Scene Generator
==========================

Deterministic driving-like scenes built from planes, boxes, cylinders and spheres.

World frame follows the camera convention (+z down the road, +x right, +y down),
so the ground is a plane at y = +camera_height below a camera at y = 0.
"""

import logging
from typing import List

import numpy as np

from ..exceptions import UnknownPreset
from ..models.camera_models import Pose
from ..models.scene_models import SCENE_PRESETS, Primitive, SceneSpec

logger = logging.getLogger(__name__)

GROUND_Y = 1.5

BACKGROUNDS = {
    "street": (0.55, 0.7, 0.9),
    "corridor": (0.2, 0.2, 0.25),
    "open": (0.6, 0.75, 0.95),
}


def _at(x: float, y: float, z: float) -> Pose:
    return Pose(translation=(float(x), float(y), float(z)))


def _ground(albedo=(0.35, 0.35, 0.37)) -> Primitive:
    return Primitive(shape="plane", pose=_at(0.0, GROUND_Y, 40.0), size=(80.0, 1.0, 240.0), albedo=albedo)


def _color(rng: np.random.Generator, low: float, high: float):
    return tuple(float(c) for c in rng.uniform(low, high, size=3))


def _street(rng: np.random.Generator) -> List[Primitive]:
    primitives = [_ground()]

    n_buildings = int(rng.integers(4, 13))
    for i in range(n_buildings):
        side = -1.0 if i % 2 == 0 else 1.0
        width = rng.uniform(3.0, 6.0)
        height = rng.uniform(4.0, 12.0)
        depth = rng.uniform(4.0, 10.0)
        x = side * (rng.uniform(7.5, 10.0) + width / 2.0)
        z = 6.0 + (i // 2) * 11.0 + rng.uniform(-1.5, 1.5)
        primitives.append(
            Primitive(
                shape="box",
                pose=_at(x, GROUND_Y - height / 2.0, z),
                size=(float(width), float(height), float(depth)),
                albedo=_color(rng, 0.3, 0.9),
            )
        )

    # Thin structures along the kerb
    n_poles = int(rng.integers(2, 7))
    for i in range(n_poles):
        side = -1.0 if rng.uniform() < 0.5 else 1.0
        height = rng.uniform(3.0, 5.0)
        primitives.append(
            Primitive(
                shape="cylinder",
                pose=_at(side * rng.uniform(4.8, 6.0), GROUND_Y - height / 2.0, rng.uniform(4.0, 40.0)),
                size=(float(rng.uniform(0.15, 0.25)), float(height), 1.0),
                albedo=_color(rng, 0.1, 0.4),
            )
        )
    return primitives


def _corridor(rng: np.random.Generator) -> List[Primitive]:
    primitives = [_ground((0.4, 0.38, 0.33))]
    for side in (-1.0, 1.0):
        primitives.append(
            Primitive(
                shape="box",
                pose=_at(side * 4.5, GROUND_Y - 2.0, 40.0),
                size=(0.5, 4.0, 90.0),
                albedo=_color(rng, 0.5, 0.8),
            )
        )
    for _ in range(int(rng.integers(2, 7))):
        edge = rng.uniform(0.6, 1.2)
        side = -1.0 if rng.uniform() < 0.5 else 1.0
        primitives.append(
            Primitive(
                shape="box",
                pose=_at(side * rng.uniform(2.5, 3.5), GROUND_Y - edge / 2.0, rng.uniform(5.0, 35.0)),
                size=(float(edge), float(edge), float(edge)),
                albedo=_color(rng, 0.2, 0.9),
            )
        )
    return primitives


def _open(rng: np.random.Generator) -> List[Primitive]:
    primitives = [_ground((0.3, 0.45, 0.25))]
    for _ in range(int(rng.integers(3, 9))):
        radius = rng.uniform(0.5, 2.0)
        primitives.append(
            Primitive(
                shape="sphere",
                pose=_at(rng.uniform(-8.0, 8.0), GROUND_Y - radius, rng.uniform(6.0, 30.0)),
                size=(float(radius), float(radius), float(radius)),
                albedo=_color(rng, 0.2, 0.95),
            )
        )
    return primitives


_BUILDERS = {"street": _street, "corridor": _corridor, "open": _open}


def generate_scene(seed: int, preset: str = "street") -> SceneSpec:
    """
    Generate a deterministic scene for (seed, preset).

    Args:
        seed: RNG seed
        preset: One of street, corridor, open

    Returns:
        SceneSpec

    Raises:
        UnknownPreset: if preset is not recognised
    """
    if preset not in SCENE_PRESETS:
        raise UnknownPreset(f"Unknown preset '{preset}', expected one of {list(SCENE_PRESETS)}")

    rng = np.random.default_rng(seed)
    primitives = _BUILDERS[preset](rng)
    logger.info(f"Generated '{preset}' scene (seed {seed}) with {len(primitives)} primitives")
    return SceneSpec(seed=seed, preset=preset, primitives=primitives, background_color=BACKGROUNDS[preset])
