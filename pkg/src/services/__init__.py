"""Services for drivesynth"""

from .camera_engine import build_eval_trajectories, lateral_shift, project, unproject
from .scene_generator import generate_scene
from .raytracer import raytrace, render_dataset
from .gaussian_model import GaussianOptimizer, GaussianScene, apply_gradients, unproject_init
from .rasterizer import rasterize, rasterize_backward
from .diffusion_refiner import GeometryAwareDenoiser, NoiseSchedule, RefinerTrainer, refine
from .reconstruction_service import ReconstructionTrainer, fit_scene, recon_loss
from .cotraining_service import run_cotraining
from .metrics import evaluate_protocol, psnr, ssim
from .storage_service import ArtifactStore
from .pipeline_service import PipelineService

__all__ = [
    "build_eval_trajectories",
    "lateral_shift",
    "project",
    "unproject",
    "generate_scene",
    "raytrace",
    "render_dataset",
    "GaussianOptimizer",
    "GaussianScene",
    "apply_gradients",
    "unproject_init",
    "rasterize",
    "rasterize_backward",
    "GeometryAwareDenoiser",
    "NoiseSchedule",
    "RefinerTrainer",
    "refine",
    "ReconstructionTrainer",
    "fit_scene",
    "recon_loss",
    "run_cotraining",
    "evaluate_protocol",
    "psnr",
    "ssim",
    "ArtifactStore",
    "PipelineService",
]
