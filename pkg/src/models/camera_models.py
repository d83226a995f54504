"""
Camera Data Models
==================

Pydantic models for pinhole intrinsics, camera poses and trajectories.

Conventions: poses are camera-to-world, right-handed, camera +z forward,
+x right, +y down. Quaternions are stored (w, x, y, z).
"""

import math
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..exceptions import EmptyTrajectory


class Intrinsics(BaseModel):
    """Pinhole intrinsics in pixels."""

    model_config = ConfigDict(frozen=True)

    fx: float = Field(..., gt=0, description="Focal length along x (pixels)")
    fy: float = Field(..., gt=0, description="Focal length along y (pixels)")
    cx: float = Field(..., description="Principal point x (pixels)")
    cy: float = Field(..., description="Principal point y (pixels)")
    width: int = Field(..., gt=0, description="Image width (pixels)")
    height: int = Field(..., gt=0, description="Image height (pixels)")

    @model_validator(mode="after")
    def check_principal_point(self) -> "Intrinsics":
        """Principal point must lie strictly inside the image."""
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )
        return self

    @classmethod
    def from_fov(cls, width: int, height: int, horizontal_fov_deg: float = 90.0) -> "Intrinsics":
        """Square-pixel intrinsics centred on the image."""
        fx = 0.5 * width / math.tan(math.radians(horizontal_fov_deg) / 2.0)
        return cls(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    @property
    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


class Pose(BaseModel):
    """Camera-to-world rigid transform."""

    model_config = ConfigDict(frozen=True)

    rotation: Tuple[float, float, float, float] = Field(
        default=(1.0, 0.0, 0.0, 0.0), description="Unit quaternion (w, x, y, z)"
    )
    translation: Tuple[float, float, float] = Field(
        default=(0.0, 0.0, 0.0), description="Camera centre in world (metres)"
    )

    @field_validator("rotation")
    @classmethod
    def validate_unit_quaternion(cls, v: Tuple[float, float, float, float]):
        norm = math.sqrt(sum(c * c for c in v))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"Rotation quaternion must be unit length, got norm {norm}")
        return v

    @classmethod
    def from_unnormalized(cls, quaternion, translation) -> "Pose":
        """Build a pose, normalising the quaternion first."""
        q = np.asarray(quaternion, dtype=np.float64)
        q = q / np.linalg.norm(q)
        return cls(rotation=tuple(float(c) for c in q), translation=tuple(float(c) for c in translation))

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)


class CameraView(BaseModel):
    """Intrinsics plus pose: the unit that gets rendered."""

    model_config = ConfigDict(frozen=True)

    intrinsics: Intrinsics
    pose: Pose = Field(default_factory=Pose)
    frame: int = Field(default=0, description="Frame index along the source trajectory")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


class Trajectory(BaseModel):
    """Ordered camera views with strictly increasing frame indices."""

    model_config = ConfigDict(frozen=True)

    views: List[CameraView]

    @field_validator("views")
    @classmethod
    def validate_monotone_frames(cls, v: List[CameraView]) -> List[CameraView]:
        if not v:
            raise EmptyTrajectory("A trajectory needs at least one view")
        frames = [view.frame for view in v]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError(f"Trajectory frame indices must be strictly increasing: {frames}")
        return v

    @property
    def timestamps(self) -> List[int]:
        return [view.frame for view in self.views]

    def __len__(self) -> int:
        return len(self.views)
