"""
Training Data Models
====================

Loss breakdowns, pseudo-labels, per-round co-training reports and loss curves.
"""

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, model_validator

from .camera_models import CameraView


class LossBreakdown(BaseModel):
    """Reconstruction loss split into its weighted components."""

    model_config = ConfigDict(frozen=True)

    mse: float
    perceptual: float = Field(..., description="1 - SSIM, stand-in for a learned perceptual loss")
    depth_l1: float
    total: float
    lambda1: float = 0.05
    lambda2: float = 0.01

    @model_validator(mode="after")
    def check_decomposition(self) -> "LossBreakdown":
        expected = self.mse + self.lambda1 * self.perceptual + self.lambda2 * self.depth_l1
        if not math.isclose(self.total, expected, rel_tol=0.0, abs_tol=1e-9):
            raise ValueError(f"total {self.total} != mse + l1*perceptual + l2*depth ({expected})")
        return self

    @classmethod
    def compose(
        cls, mse: float, perceptual: float, depth_l1: float, lambda1: float, lambda2: float
    ) -> "LossBreakdown":
        total = mse + lambda1 * perceptual + lambda2 * depth_l1
        return cls(
            mse=mse, perceptual=perceptual, depth_l1=depth_l1, total=total, lambda1=lambda1, lambda2=lambda2
        )


class PseudoLabelProvenance(BaseModel):
    """Where a pseudo-label came from."""

    model_config = ConfigDict(frozen=True)

    round: int
    refine_seed: int
    source_render_hash: str
    depth_source: str = Field(default="none", description="'oracle' or 'none'")


@dataclass(frozen=True)
class PseudoLabel:
    """Refined off-trajectory render used as reconstruction supervision."""

    view: CameraView
    image: np.ndarray
    provenance: PseudoLabelProvenance
    depth: Optional[np.ndarray] = None


class RoundReport(BaseModel):
    """One co-training round, serialized as a JSON line."""

    round: int
    psnr_0m: Optional[float] = None
    psnr_1m: Optional[float] = None
    psnr_2m: Optional[float] = None
    recon_loss: Optional[LossBreakdown] = None
    gen_loss: Optional[float] = None
    refiner_hash: str = ""
    scene_hash: str = ""
    condition_hashes: List[str] = Field(default_factory=list)

    @field_serializer("recon_loss")
    def serialize_recon_loss(self, value: Optional[LossBreakdown]):
        if value is None:
            return None
        return {"mse": value.mse, "perceptual": value.perceptual, "depth": value.depth_l1, "total": value.total}

    @field_serializer("psnr_0m", "psnr_1m", "psnr_2m")
    def serialize_psnr(self, value: Optional[float]):
        if value is not None and math.isinf(value):
            return "inf"
        return value


class CurvePoint(BaseModel):
    """One logged point of a training curve."""

    step: int
    loss: float
    psnr: Optional[float] = None
    breakdown: Optional[LossBreakdown] = None
