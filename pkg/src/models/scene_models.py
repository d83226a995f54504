"""
Scene Data Models
=================

Procedural scene description and ray-traced ground-truth frames.
"""

from dataclasses import dataclass
from typing import List, Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .camera_models import CameraView, Pose

ShapeKind = Literal["plane", "box", "cylinder", "sphere"]
ScenePreset = Literal["street", "corridor", "open"]

SCENE_PRESETS: Tuple[str, ...] = ("street", "corridor", "open")


class Primitive(BaseModel):
    """
    One solid in a synthetic scene.

    Size semantics per shape:
    - plane: size[0], size[2] are full extents along local x / z, normal is local -y
    - box: full extents along local x, y, z
    - cylinder: size[0] radius, size[1] height, axis along local y
    - sphere: size[0] radius
    """

    model_config = ConfigDict(frozen=True)

    shape: ShapeKind
    pose: Pose = Field(default_factory=Pose)
    size: Tuple[float, float, float] = Field(..., description="Metres, all > 0")
    albedo: Tuple[float, float, float] = Field(..., description="Diffuse RGB in [0, 1]")

    @field_validator("size")
    @classmethod
    def validate_size(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError(f"Primitive sizes must be positive, got {v}")
        return v

    @field_validator("albedo")
    @classmethod
    def validate_albedo(cls, v):
        if any(c < 0 or c > 1 for c in v):
            raise ValueError(f"Albedo components must lie in [0, 1], got {v}")
        return v


class SceneSpec(BaseModel):
    """Deterministic procedural scene."""

    model_config = ConfigDict(frozen=True)

    seed: int
    preset: str = "street"
    primitives: List[Primitive] = Field(..., min_length=1)
    background_color: Tuple[float, float, float] = (0.55, 0.7, 0.9)

    @field_validator("background_color")
    @classmethod
    def validate_background(cls, v):
        if any(c < 0 or c > 1 for c in v):
            raise ValueError(f"Background components must lie in [0, 1], got {v}")
        return v


@dataclass(frozen=True)
class GroundTruthFrame:
    """Oracle render: image (H, W, 3) in [0, 1], depth (H, W) metres with +inf for sky."""

    image: np.ndarray
    depth: np.ndarray
    view: CameraView

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth)
