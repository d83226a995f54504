"""
Shared Test Fixtures
====================
"""

import pytest

from src.models.camera_models import CameraView, Intrinsics, Pose
from src.models.config_models import RefinerConfig, RunConfig
from src.models.scene_models import Primitive, SceneSpec
from src.services.camera_engine import make_camera_rig, make_drive_trajectory
from src.services.pipeline_service import PipelineService
from src.services.raytracer import render_dataset
from src.services.scene_generator import GROUND_Y, generate_scene

from tests.helpers import prepared_pipeline


@pytest.fixture
def intrinsics64() -> Intrinsics:
    return Intrinsics(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64)


@pytest.fixture
def view64(intrinsics64) -> CameraView:
    return CameraView(intrinsics=intrinsics64, pose=Pose())


@pytest.fixture
def view32() -> CameraView:
    return CameraView(intrinsics=Intrinsics.from_fov(32, 32, 90.0), pose=Pose())


@pytest.fixture
def small_spec() -> SceneSpec:
    """Ground plane, one box and one sphere in front of a camera at the origin."""
    return SceneSpec(
        seed=0,
        preset="open",
        primitives=[
            Primitive(shape="plane", pose=Pose(translation=(0.0, 1.5, 20.0)), size=(40.0, 1.0, 60.0), albedo=(0.4, 0.4, 0.4)),
            Primitive(shape="box", pose=Pose(translation=(-1.5, 0.5, 6.0)), size=(1.5, 2.0, 1.5), albedo=(0.8, 0.3, 0.2)),
            Primitive(shape="sphere", pose=Pose(translation=(1.5, 0.5, 7.0)), size=(1.0, 1.0, 1.0), albedo=(0.2, 0.5, 0.9)),
        ],
        background_color=(0.55, 0.7, 0.9),
    )


@pytest.fixture
def small_dataset(small_spec):
    """Ray-traced 32x32 frames along a short straight drive."""
    traj = make_drive_trajectory(4, Intrinsics.from_fov(32, 32, 90.0), speed=0.5)
    return traj, render_dataset(small_spec, traj)


@pytest.fixture
def tiny_refiner_cfg() -> RefinerConfig:
    return RefinerConfig(
        diffusion_steps=20,
        latent_channels=4,
        hidden_channels=8,
        encoder_channels=4,
        batch_size=2,
        train_steps=5,
        sample_steps=2,
        degrade_steps=(2,),
    )


@pytest.fixture(scope="session")
def street_dataset():
    """The default run: street preset, 12 frames at 64x64."""
    c = RunConfig()
    spec = generate_scene(c.scene_seed, c.preset)
    intrinsics = Intrinsics.from_fov(c.width, c.height, c.horizontal_fov_deg)
    traj = make_camera_rig(1, c.frames, intrinsics, c.speed, GROUND_Y - c.camera_height)[0]
    return spec, traj, render_dataset(spec, traj)


@pytest.fixture(scope="session")
def street_pipeline(tmp_path_factory) -> PipelineService:
    """Default run with a fitted scene and a trained refiner on disk."""
    return prepared_pipeline(tmp_path_factory.mktemp("street"))
