"""
Depth Image Warping
===================

Forward-warps a recorded frame into another viewpoint through its depth map and
packs the result as a geometry condition, so the refiner can be conditioned on
warped recordings instead of Gaussian renders.

Each source pixel with finite depth is unprojected, projected into the target
camera and rounded to the nearest pixel; collisions keep the nearest surface.
Pixels nothing lands on stay empty (black, zero depth, zero opacity).
"""

import logging
from typing import Optional, Sequence

import numpy as np
import torch

from ..models.camera_models import CameraView
from ..models.scene_models import GroundTruthFrame
from .camera_engine import DEFAULT_NEAR_CLIP, quat_to_rotmat
from .gaussian_model import DTYPE
from .rasterizer import RenderOutput

logger = logging.getLogger(__name__)


def warp_frame(frame: GroundTruthFrame, view: CameraView, near_clip: float = DEFAULT_NEAR_CLIP) -> RenderOutput:
    """
    Warp one recorded frame into `view`.

    Returns:
        RenderOutput: warped colors, target-view depth, and opacity 1 where a pixel landed
    """
    src = frame.view.intrinsics
    vv, uu = np.nonzero(np.isfinite(frame.depth) & (frame.depth > 0))
    z = frame.depth[vv, uu]
    local = np.stack([(uu - src.cx) / src.fx * z, (vv - src.cy) / src.fy * z, z], axis=1)
    world = local @ quat_to_rotmat(frame.view.pose.rotation).T + frame.view.pose.center

    k = view.intrinsics
    target = (world - view.pose.center) @ quat_to_rotmat(view.pose.rotation)
    tz = target[:, 2]
    front = tz > near_clip
    cols = np.full(tz.shape, -1, dtype=np.int64)
    rows = np.full(tz.shape, -1, dtype=np.int64)
    cols[front] = np.rint(k.fx * target[front, 0] / tz[front] + k.cx).astype(np.int64)
    rows[front] = np.rint(k.fy * target[front, 1] / tz[front] + k.cy).astype(np.int64)
    inside = front & (cols >= 0) & (cols < k.width) & (rows >= 0) & (rows < k.height)

    pix = rows[inside] * k.width + cols[inside]
    depth_in = tz[inside]
    colors = frame.image[vv[inside], uu[inside]]
    # Nearest surface per target pixel
    order = np.lexsort((depth_in, pix))
    _, first = np.unique(pix[order], return_index=True)
    keep = order[first]

    image = np.zeros((k.height * k.width, 3), dtype=np.float64)
    depth = np.zeros(k.height * k.width, dtype=np.float64)
    alpha = np.zeros(k.height * k.width, dtype=np.float64)
    image[pix[keep]] = colors[keep]
    depth[pix[keep]] = depth_in[keep]
    alpha[pix[keep]] = 1.0
    return RenderOutput(
        image=torch.from_numpy(image.reshape(k.height, k.width, 3)).to(DTYPE),
        depth=torch.from_numpy(depth.reshape(k.height, k.width)).to(DTYPE),
        alpha=torch.from_numpy(alpha.reshape(k.height, k.width)).to(DTYPE),
    )


def nearest_frame_index(
    frames: Sequence[GroundTruthFrame], view: CameraView, exclude: Optional[int] = None
) -> int:
    """
    Index of the recorded frame closest to `view`: camera-centre distance first,
    then the angle between viewing directions, then the lower index.
    """
    forward = quat_to_rotmat(view.pose.rotation)[:, 2]
    best = None
    for i, frame in enumerate(frames):
        if i == exclude:
            continue
        dist = float(np.linalg.norm(frame.view.pose.center - view.pose.center))
        cos = float(np.clip(quat_to_rotmat(frame.view.pose.rotation)[:, 2] @ forward, -1.0, 1.0))
        key = (dist, float(np.arccos(cos)), i)
        if best is None or key < best:
            best = key
    if best is None:
        raise ValueError("No recorded frame to warp from")
    return best[2]


def warp_condition(
    frames: Sequence[GroundTruthFrame], view: CameraView, exclude: Optional[int] = None
) -> RenderOutput:
    """Geometry condition at `view` built from the nearest recorded frame (other than `exclude`)."""
    index = nearest_frame_index(frames, view, exclude)
    logger.debug(f"Warping recorded frame {index} into view {view.frame}")
    return warp_frame(frames[index], view)
