"""
Metric Report Models
====================

PSNR / SSIM reports for the lateral-shift evaluation protocol. Infinite PSNR is
serialized as the string "inf". FID/FVD fields are reserved for values merged
from external tools and are never computed here.
"""

import math
from typing import List, Optional

from pydantic import BaseModel, Field, field_serializer


def _inf_to_str(value: Optional[float]):
    if value is not None and math.isinf(value):
        return "inf"
    return value


class FrameMetric(BaseModel):
    """Metrics of one frame."""

    idx: int
    psnr: float
    ssim: float = Field(..., ge=-1.0, le=1.0)
    depth_mae: Optional[float] = None

    @field_serializer("psnr")
    def serialize_psnr(self, value: float):
        return _inf_to_str(value)


class MeanMetric(BaseModel):
    """Aggregate over the frames of one shift."""

    psnr: float
    ssim: float = Field(..., ge=-1.0, le=1.0)
    depth_mae: Optional[float] = None
    psnr_p10: Optional[float] = None
    psnr_p50: Optional[float] = None
    psnr_p90: Optional[float] = None

    @field_serializer("psnr", "psnr_p10", "psnr_p50", "psnr_p90")
    def serialize_psnr(self, value: Optional[float]):
        return _inf_to_str(value)


class MetricReport(BaseModel):
    """Per-shift evaluation report."""

    shift_m: float
    frames: List[FrameMetric]
    mean: MeanMetric
    count: int
    fid: Optional[float] = None
    fvd: Optional[float] = None
