"""
Camera Engine
=============

Pinhole projection, pose manipulation and the lateral-shift evaluation protocol.

All functions are pure: they take immutable pydantic models and return new ones.
"""

import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from ..exceptions import BehindCamera, EmptyTrajectory
from ..models.camera_models import CameraView, Intrinsics, Pose, Trajectory

logger = logging.getLogger(__name__)

DEFAULT_SHIFTS: Tuple[float, ...] = (1.0, -1.0, 2.0, -2.0, 4.0, -4.0)
DEFAULT_STRIDE = 2
DEFAULT_NEAR_CLIP = 0.01


def quat_to_rotmat(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = (float(c) for c in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def quat_multiply(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float, float, float]:
    """Hamilton product a * b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def axis_angle_quat(axis: Sequence[float], degrees: float) -> Tuple[float, float, float, float]:
    """Unit quaternion rotating by `degrees` about `axis`."""
    axis_arr = np.asarray(axis, dtype=np.float64)
    axis_arr = axis_arr / np.linalg.norm(axis_arr)
    half = math.radians(degrees) / 2.0
    s = math.sin(half)
    return (math.cos(half), float(axis_arr[0] * s), float(axis_arr[1] * s), float(axis_arr[2] * s))


def world_to_view(point: Sequence[float], pose: Pose) -> np.ndarray:
    """Express a world point in the camera frame."""
    rot = quat_to_rotmat(pose.rotation)
    return rot.T @ (np.asarray(point, dtype=np.float64) - pose.center)


def project(
    point: Sequence[float], view: CameraView, near_clip: float = DEFAULT_NEAR_CLIP
) -> Tuple[np.ndarray, float]:
    """
    Project a world point to pixel coordinates.

    Args:
        point: World 3-vector
        view: Camera to project into
        near_clip: Minimum view-space depth (metres)

    Returns:
        (pixel (u, v), view-space depth z)

    Raises:
        BehindCamera: if z <= near_clip
    """
    x, y, z = world_to_view(point, view.pose)
    if z <= near_clip:
        raise BehindCamera(f"Point {tuple(point)} has view depth {z:.6g} <= near clip {near_clip}")
    k = view.intrinsics
    pixel = np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy], dtype=np.float64)
    return pixel, float(z)


def unproject(pixel: Sequence[float], depth: float, view: CameraView) -> np.ndarray:
    """World point seen at `pixel` with view-space depth `depth`."""
    k = view.intrinsics
    u, v = pixel
    local = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth], dtype=np.float64)
    return quat_to_rotmat(view.pose.rotation) @ local + view.pose.center


def right_axis(pose: Pose) -> np.ndarray:
    """Camera +x expressed in world coordinates."""
    return quat_to_rotmat(pose.rotation)[:, 0]


def lateral_shift(pose: Pose, tau: float) -> Pose:
    """
    Displace a pose by `tau` metres along its own right axis.

    The rotation tuple is carried over untouched.
    """
    translation = pose.center + tau * right_axis(pose)
    return pose.model_copy(update={"translation": tuple(float(c) for c in translation)})


def yaw_rotate(pose: Pose, degrees: float) -> Pose:
    """Rotate a pose about its own vertical (camera y) axis."""
    if degrees == 0.0:
        return pose
    q = quat_multiply(pose.rotation, axis_angle_quat((0.0, 1.0, 0.0), degrees))
    return Pose.from_unnormalized(q, pose.translation)


def shift_view(view: CameraView, tau: float) -> CameraView:
    return view.model_copy(update={"pose": lateral_shift(view.pose, tau)})


def build_eval_trajectories(
    base: Trajectory,
    shifts: Sequence[float] = DEFAULT_SHIFTS,
    stride: int = DEFAULT_STRIDE,
) -> List[Trajectory]:
    """
    Build one laterally shifted, subsampled trajectory per shift value.

    Args:
        base: Recorded trajectory
        shifts: Lateral offsets in metres (one output per value, same order)
        stride: Keep every stride-th view

    Returns:
        List of shifted trajectories

    Raises:
        EmptyTrajectory: if base has no views
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if len(base.views) == 0:
        raise EmptyTrajectory("Cannot build evaluation trajectories from an empty trajectory")

    sampled = base.views[::stride]
    trajectories = [Trajectory(views=[shift_view(v, float(tau)) for v in sampled]) for tau in shifts]
    logger.info(
        f"Built {len(trajectories)} evaluation trajectories of {len(sampled)} views "
        f"(stride {stride}, shifts {list(shifts)})"
    )
    return trajectories


def make_drive_trajectory(
    frames: int,
    intrinsics: Intrinsics,
    speed: float = 1.0,
    start_z: float = 0.0,
    lateral_offset: float = 0.0,
    yaw_deg: float = 0.0,
    elevation: float = 0.0,
) -> Trajectory:
    """
    Straight forward-driving trajectory along world +z.

    The world frame shares the camera axis convention, so the identity rotation
    looks down the road; the ground lies at positive y.
    """
    rotation = axis_angle_quat((0.0, 1.0, 0.0), yaw_deg) if yaw_deg else (1.0, 0.0, 0.0, 0.0)
    views = [
        CameraView(
            intrinsics=intrinsics,
            pose=Pose(rotation=rotation, translation=(lateral_offset, elevation, start_z + i * speed)),
            frame=i,
        )
        for i in range(frames)
    ]
    return Trajectory(views=views)


def make_camera_rig(
    camera_count: int,
    frames: int,
    intrinsics: Intrinsics,
    speed: float = 1.0,
    elevation: float = 0.0,
) -> List[Trajectory]:
    """
    Surround rig of independent cameras, evenly yawed around the vehicle.

    Camera 0 always looks straight down the road.
    """
    return [
        make_drive_trajectory(frames, intrinsics, speed=speed, yaw_deg=360.0 * k / camera_count, elevation=elevation)
        for k in range(camera_count)
    ]


def trajectory_to_records(traj: Trajectory) -> dict:
    """Trajectory file layout: {"views": [{fx, fy, cx, cy, width, height, qw, ..., frame}]}."""
    records = []
    for view in traj.views:
        k = view.intrinsics
        qw, qx, qy, qz = view.pose.rotation
        tx, ty, tz = view.pose.translation
        records.append(
            {
                "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height,
                "qw": qw, "qx": qx, "qy": qy, "qz": qz, "tx": tx, "ty": ty, "tz": tz,
                "frame": view.frame,
            }
        )
    return {"views": records}


def trajectory_from_records(data: dict, normalize: bool = False) -> Trajectory:
    """Inverse of trajectory_to_records."""
    views = []
    for r in data.get("views", []):
        intrinsics = Intrinsics(fx=r["fx"], fy=r["fy"], cx=r["cx"], cy=r["cy"], width=r["width"], height=r["height"])
        q = (r["qw"], r["qx"], r["qy"], r["qz"])
        t = (r["tx"], r["ty"], r["tz"])
        pose = Pose.from_unnormalized(q, t) if normalize else Pose(rotation=q, translation=t)
        views.append(CameraView(intrinsics=intrinsics, pose=pose, frame=int(r["frame"])))
    return Trajectory(views=views)
