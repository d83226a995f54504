"""
Reference Ray Tracer
====================

Nearest-hit Lambertian ray tracer over SceneSpec primitives. It is the ground-truth
oracle for images and exact view-space depth.

Rays are cast through integer pixel coordinates (u = column, v = row) with
view-space direction ((u - cx)/fx, (v - cy)/fy, 1), so the hit parameter t equals
the view-space depth of the hit.
"""

import logging
from typing import List, Tuple

import numpy as np

from ..exceptions import EmptyTrajectory
from ..models.camera_models import CameraView, Trajectory
from ..models.scene_models import GroundTruthFrame, Primitive, SceneSpec
from .camera_engine import quat_to_rotmat

logger = logging.getLogger(__name__)

AMBIENT = 0.25
LIGHT_DIRECTION = np.array([-0.3, -1.0, -0.4]) / np.linalg.norm([-0.3, -1.0, -0.4])
HIT_EPSILON = 1e-6


def camera_rays(view: CameraView) -> Tuple[np.ndarray, np.ndarray]:
    """World-space ray origin (3,) and directions (H*W, 3) with unit view-space z."""
    k = view.intrinsics
    v, u = np.meshgrid(np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij")
    dirs_view = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    rot = quat_to_rotmat(view.pose.rotation)
    return view.pose.center, dirs_view @ rot.T


def _safe(d: np.ndarray) -> np.ndarray:
    """Replace exact zeros so slab tests never evaluate 0 * inf."""
    return np.where(d == 0.0, 1e-300, d)


def _intersect_plane(o, d, prim: Primitive):
    dy = _safe(d[:, 1])
    t = -o[:, 1] / dy
    p = o + t[:, None] * d
    inside = (np.abs(p[:, 0]) <= prim.size[0] / 2.0) & (np.abs(p[:, 2]) <= prim.size[2] / 2.0)
    t = np.where((t > HIT_EPSILON) & inside & (d[:, 1] != 0.0), t, np.inf)
    normal = np.broadcast_to(np.array([0.0, -1.0, 0.0]), d.shape)
    return t, normal


def _intersect_sphere(o, d, prim: Primitive):
    r = prim.size[0]
    a = np.sum(d * d, axis=1)
    b = 2.0 * np.sum(o * d, axis=1)
    c = np.sum(o * o, axis=1) - r * r
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > HIT_EPSILON, t0, t1)
    t = np.where((disc >= 0) & (t > HIT_EPSILON), t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, p / r


def _intersect_box(o, d, prim: Primitive):
    half = np.asarray(prim.size) / 2.0
    inv = 1.0 / _safe(d)
    t1 = (-half - o) * inv
    t2 = (half - o) * inv
    tmin = np.max(np.minimum(t1, t2), axis=1)
    tmax = np.min(np.maximum(t1, t2), axis=1)
    t = np.where(tmin > HIT_EPSILON, tmin, tmax)
    t = np.where((tmax >= tmin) & (t > HIT_EPSILON), t, np.inf)

    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    axis = np.argmax(np.abs(p) / half, axis=1)
    normal = np.zeros_like(p)
    rows = np.arange(p.shape[0])
    normal[rows, axis] = np.sign(p[rows, axis])
    return t, normal


def _intersect_cylinder(o, d, prim: Primitive):
    r, half_h = prim.size[0], prim.size[1] / 2.0

    a = d[:, 0] ** 2 + d[:, 2] ** 2
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 2] * d[:, 2])
    c = o[:, 0] ** 2 + o[:, 2] ** 2 - r * r
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    a_safe = _safe(a)
    best = np.full(d.shape[0], np.inf)
    normal = np.zeros_like(d)
    for t_side in ((-b - sq) / (2 * a_safe), (-b + sq) / (2 * a_safe)):
        y = o[:, 1] + t_side * d[:, 1]
        ok = (disc >= 0) & (a > 0) & (t_side > HIT_EPSILON) & (np.abs(y) <= half_h) & (t_side < best)
        best = np.where(ok, t_side, best)
        px = o[:, 0] + t_side * d[:, 0]
        pz = o[:, 2] + t_side * d[:, 2]
        side_normal = np.stack([px / r, np.zeros_like(px), pz / r], axis=1)
        normal = np.where(ok[:, None], side_normal, normal)

    dy = _safe(d[:, 1])
    for cap_y in (-half_h, half_h):
        t_cap = (cap_y - o[:, 1]) / dy
        px = o[:, 0] + t_cap * d[:, 0]
        pz = o[:, 2] + t_cap * d[:, 2]
        ok = (d[:, 1] != 0.0) & (t_cap > HIT_EPSILON) & (px**2 + pz**2 <= r * r) & (t_cap < best)
        best = np.where(ok, t_cap, best)
        normal = np.where(ok[:, None], np.array([0.0, np.sign(cap_y), 0.0]), normal)
    return best, normal


_INTERSECTORS = {
    "plane": _intersect_plane,
    "sphere": _intersect_sphere,
    "box": _intersect_box,
    "cylinder": _intersect_cylinder,
}


def raytrace(scene: SceneSpec, view: CameraView) -> GroundTruthFrame:
    """
    Render the oracle image and depth of `scene` seen from `view`.

    Background pixels get scene.background_color and depth +inf.
    """
    origin, dirs = camera_rays(view)
    n_rays = dirs.shape[0]

    best_t = np.full(n_rays, np.inf)
    best_normal = np.zeros((n_rays, 3))
    best_albedo = np.zeros((n_rays, 3))

    for prim in scene.primitives:
        rot = quat_to_rotmat(prim.pose.rotation)
        o_local = np.broadcast_to((origin - prim.pose.center) @ rot, dirs.shape)
        d_local = dirs @ rot
        t, n_local = _INTERSECTORS[prim.shape](o_local, d_local, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_normal = np.where(closer[:, None], n_local @ rot.T, best_normal)
        best_albedo = np.where(closer[:, None], np.asarray(prim.albedo), best_albedo)

    hit = np.isfinite(best_t)
    # Two-sided surfaces: face the normal towards the viewer
    facing = np.sum(best_normal * dirs, axis=1) > 0
    best_normal = np.where(facing[:, None], -best_normal, best_normal)
    lambert = np.clip(best_normal @ LIGHT_DIRECTION, 0.0, 1.0)
    shaded = best_albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]

    image = np.where(hit[:, None], shaded, np.asarray(scene.background_color, dtype=np.float64))
    image = np.clip(image, 0.0, 1.0)
    depth = np.where(hit, best_t, np.inf)

    k = view.intrinsics
    return GroundTruthFrame(
        image=image.reshape(k.height, k.width, 3),
        depth=depth.reshape(k.height, k.width),
        view=view,
    )


def corrupt_depth(depth: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add Gaussian noise (metres) to finite depths, keeping them positive."""
    if sigma <= 0:
        return depth
    noisy = depth + rng.normal(0.0, sigma, size=depth.shape)
    noisy = np.maximum(noisy, HIT_EPSILON)
    return np.where(np.isfinite(depth), noisy, depth)


def render_dataset(
    scene: SceneSpec,
    traj: Trajectory,
    depth_noise_sigma: float = 0.0,
    seed: int = 0,
) -> List[GroundTruthFrame]:
    """
    Ray-trace every view of a trajectory, order preserved.

    Args:
        scene: Scene to render
        traj: Non-empty trajectory
        depth_noise_sigma: Std-dev of depth corruption emulating a monocular estimator
        seed: RNG seed for the depth corruption

    Returns:
        One GroundTruthFrame per view
    """
    if len(traj.views) == 0:
        raise EmptyTrajectory("Cannot render a dataset from an empty trajectory")

    rng = np.random.default_rng(seed)
    frames = []
    for view in traj.views:
        frame = raytrace(scene, view)
        if depth_noise_sigma > 0:
            frame = GroundTruthFrame(
                image=frame.image, depth=corrupt_depth(frame.depth, depth_noise_sigma, rng), view=view
            )
        frames.append(frame)
    logger.info(f"Rendered {len(frames)} ground-truth frames at {traj.views[0].width}x{traj.views[0].height}")
    return frames
