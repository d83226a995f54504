"""
Tests for Depth Image Warping
=============================
"""

import numpy as np
import pytest

from src.models.camera_models import CameraView, Intrinsics, Pose
from src.models.scene_models import GroundTruthFrame
from src.services.camera_engine import shift_view
from src.services.image_warping import nearest_frame_index, warp_condition, warp_frame

SIZE = 32


def column_frame(depth: np.ndarray, view: CameraView) -> GroundTruthFrame:
    """Each column gets its own gray level so shifts are easy to read."""
    ramp = np.linspace(0.05, 0.95, SIZE)
    image = np.repeat(np.broadcast_to(ramp[None, :], (SIZE, SIZE))[..., None], 3, axis=2).copy()
    return GroundTruthFrame(image=image, depth=depth, view=view)


@pytest.fixture
def view() -> CameraView:
    # fx = 16 at 90 degrees
    return CameraView(intrinsics=Intrinsics.from_fov(SIZE, SIZE, 90.0), pose=Pose())


class TestWarpFrame:
    """Forward warping through depth."""

    def test_same_view_is_identity(self, view):
        """Warping a frame into its own view reproduces it where depth is finite."""
        rng = np.random.default_rng(0)
        depth = rng.uniform(2.0, 9.0, size=(SIZE, SIZE))
        depth[:5] = np.inf
        frame = GroundTruthFrame(image=rng.uniform(size=(SIZE, SIZE, 3)), depth=depth, view=view)
        image, warped_depth, alpha = warp_frame(frame, view).numpy()
        valid = np.isfinite(depth)
        np.testing.assert_allclose(image[valid], frame.image[valid])
        np.testing.assert_allclose(warped_depth[valid], depth[valid])
        np.testing.assert_array_equal(alpha, valid.astype(np.float64))
        assert np.all(image[~valid] == 0.0) and np.all(warped_depth[~valid] == 0.0)

    def test_lateral_shift_of_plane(self, view):
        """A plane at 4 m moves fx * tau / z = 4 px when the camera moves 1 m right."""
        frame = column_frame(np.full((SIZE, SIZE), 4.0), view)
        image, depth, alpha = warp_frame(frame, shift_view(view, 1.0)).numpy()
        np.testing.assert_allclose(image[:, : SIZE - 4], frame.image[:, 4:])
        np.testing.assert_allclose(depth[:, : SIZE - 4], 4.0)
        assert np.all(alpha[:, SIZE - 4 :] == 0.0)
        assert np.all(alpha[:, : SIZE - 4] == 1.0)

    def test_nearest_surface_wins(self, view):
        """Where near and far pixels collide the near one is kept."""
        depth = np.full((SIZE, SIZE), 8.0)
        depth[:, :16] = 2.0
        frame = column_frame(depth, view)
        # Near columns move 8 px right, far columns 2 px
        image, warped_depth, _ = warp_frame(frame, shift_view(view, -1.0)).numpy()
        np.testing.assert_allclose(warped_depth[:, 18:24], 2.0)
        np.testing.assert_allclose(image[:, 18:24], frame.image[:, 10:16])
        np.testing.assert_allclose(warped_depth[:, 24:], 8.0)

    def test_points_behind_target_are_dropped(self, view):
        """Nothing lands when the surface is behind the target camera."""
        frame = column_frame(np.full((SIZE, SIZE), 3.0), view)
        behind = view.model_copy(update={"pose": Pose(translation=(0.0, 0.0, 10.0))})
        _, _, alpha = warp_frame(frame, behind).numpy()
        assert np.count_nonzero(alpha) == 0


class TestNearestFrame:
    """Source frame selection."""

    @pytest.fixture
    def frames(self, view):
        views = [
            view.model_copy(update={"pose": Pose(translation=(0.0, 0.0, z)), "frame": i})
            for i, z in enumerate((0.0, 1.0, 2.0))
        ]
        return [column_frame(np.full((SIZE, SIZE), 4.0), v) for v in views]

    def test_closest_centre(self, frames, view):
        """The frame with the nearest camera centre is chosen."""
        target = view.model_copy(update={"pose": Pose(translation=(0.5, 0.0, 1.8))})
        assert nearest_frame_index(frames, target) == 2

    def test_exclude(self, frames):
        """An excluded frame is skipped even when it coincides with the target."""
        assert nearest_frame_index(frames, frames[1].view) == 1
        assert nearest_frame_index(frames, frames[1].view, exclude=1) == 0

    def test_no_candidates(self, frames):
        """A single excluded frame leaves nothing to warp from."""
        with pytest.raises(ValueError):
            nearest_frame_index(frames[:1], frames[0].view, exclude=0)

    def test_warp_condition_uses_nearest(self, frames):
        """warp_condition equals warping the chosen frame."""
        target = shift_view(frames[2].view, 0.5)
        expected = warp_frame(frames[2], target)
        assert warp_condition(frames, target).checksum() == expected.checksum()
