"""
Co-Training Service
===================

Closed-loop alternation between the Gaussian reconstruction and the diffusion
refiner, with exactly one of the two mutable at any time.

Step 1 (generation-guided reconstruction): render random off-trajectory views,
refine them with the frozen refiner and fit the scene to the resulting
pseudo-labels.

Step 2 (reconstruction-guided generation): re-render the updated, frozen scene
at the recorded viewpoints and train the refiner on those conditions against
the ground-truth frames.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..config.settings import derive_seed
from ..exceptions import EmptyTrajectory, FreezeViolation
from ..models.camera_models import CameraView, Trajectory
from ..models.config_models import CoTrainConfig, LearningRates, RefinerConfig, TileConfig
from ..models.scene_models import GroundTruthFrame, SceneSpec
from ..models.training_models import LossBreakdown, PseudoLabel, PseudoLabelProvenance, RoundReport
from .camera_engine import build_eval_trajectories, shift_view, yaw_rotate
from .diffusion_refiner import GeometryAwareDenoiser, NoiseSchedule, RefinerTrainer, refine
from .gaussian_model import GaussianScene
from .image_warping import warp_condition
from .metrics import psnr
from .rasterizer import GeometryCondition, composite_background, rasterize
from .raytracer import raytrace
from .reconstruction_service import BLACK, ReconstructionTrainer

logger = logging.getLogger(__name__)

RefineFn = Callable[[GeometryCondition, int], np.ndarray]
DepthOracle = Callable[[CameraView], np.ndarray]


def sample_offtraj_views(
    base: Trajectory, n: int, cfg: CoTrainConfig, rng: np.random.Generator
) -> List[CameraView]:
    """
    Random off-trajectory viewpoints around the recorded trajectory.

    Each view picks a uniformly random base view, shifts it by a lateral offset
    drawn from U(-lateral_range, lateral_range) and yaws it by U(-yaw_jitter, yaw_jitter) degrees.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(base.views) == 0:
        raise EmptyTrajectory("Cannot sample off-trajectory views around an empty trajectory")

    views = []
    for _ in range(n):
        src = base.views[int(rng.integers(len(base.views)))]
        offset = float(rng.uniform(-cfg.lateral_range, cfg.lateral_range))
        yaw = float(rng.uniform(-cfg.yaw_jitter, cfg.yaw_jitter))
        shifted = shift_view(src, offset)
        views.append(shifted.model_copy(update={"pose": yaw_rotate(shifted.pose, yaw)}))
    return views


def make_depth_oracle(scene_spec: SceneSpec) -> DepthOracle:
    """Exact depth at any viewpoint from the synthetic scene."""

    def oracle(view: CameraView) -> np.ndarray:
        return raytrace(scene_spec, view).depth

    return oracle


def step1_generation_guided_reconstruction(
    scene: GaussianScene,
    refiner_params: GeometryAwareDenoiser,
    base_traj: Trajectory,
    gt_frames: Sequence[GroundTruthFrame],
    cfg: CoTrainConfig = CoTrainConfig(),
    tile_cfg: TileConfig = TileConfig(),
    refiner_cfg: RefinerConfig = RefinerConfig(),
    lr_table: LearningRates = LearningRates(),
    background=BLACK,
    round_index: int = 0,
    refine_fn: Optional[RefineFn] = None,
    depth_oracle: Optional[DepthOracle] = None,
    progress: bool = False,
) -> Tuple[GaussianScene, List[PseudoLabel], LossBreakdown]:
    """
    Fit the scene to refined off-trajectory renders while the refiner stays frozen.

    Args:
        refine_fn: Replaces the refiner call (condition, seed) -> image; defaults to DDIM refinement
        depth_oracle: Depth at an arbitrary view; without it pseudo-label steps drop the depth term

    Returns:
        (updated scene, pseudo-labels, mean loss breakdown over the update steps)

    Raises:
        FreezeViolation: if the refiner weights changed during the step
    """
    seed = derive_seed(cfg.seed, f"step1-{round_index}")
    rng = np.random.default_rng(seed)
    frozen_hash = refiner_params.checksum()
    sched = NoiseSchedule(refiner_cfg.diffusion_steps)

    views = sample_offtraj_views(base_traj, cfg.step1_viewpoints_per_round, cfg, rng)
    labels: List[PseudoLabel] = []
    for i, view in enumerate(views):
        if refiner_cfg.condition == "warp":
            cond = warp_condition(gt_frames, view)
        else:
            cond = rasterize(scene, view, tile_cfg)
        refine_seed = derive_seed(seed, f"refine-{i}")
        if refine_fn is not None:
            image = np.asarray(refine_fn(cond, refine_seed), dtype=np.float64)
        else:
            image = refine(
                cond, refiner_params, sched, refiner_cfg.sample_steps, refine_seed,
                refiner_cfg.depth_guidance, refiner_cfg.opacity_guidance,
            )
        depth = depth_oracle(view) if depth_oracle is not None else None
        labels.append(
            PseudoLabel(
                view=view,
                image=np.clip(image, 0.0, 1.0),
                depth=depth,
                provenance=PseudoLabelProvenance(
                    round=round_index,
                    refine_seed=refine_seed,
                    source_render_hash=cond.checksum(),
                    depth_source="oracle" if depth is not None else "none",
                ),
            )
        )
    if depth_oracle is None:
        logger.warning("No depth oracle for off-trajectory views; pseudo-label steps skip the depth term")

    trainer = ReconstructionTrainer(
        scene, tile_cfg, lr_table, background, cfg.lambda1, cfg.lambda2, seed
    )
    breakdowns: List[LossBreakdown] = []
    for s in range(cfg.recon_steps_per_round):
        if cfg.mix_real_frames and s % 2 == 1 and gt_frames:
            frame = gt_frames[(s // 2) % len(gt_frames)]
            breakdowns.append(trainer.step(frame.view, frame.image, frame.depth))
        else:
            label = labels[(s // 2 if cfg.mix_real_frames else s) % len(labels)]
            breakdowns.append(trainer.step(label.view, label.image, label.depth))

    if refiner_params.checksum() != frozen_hash:
        raise FreezeViolation(f"Refiner weights changed during Step 1 of round {round_index}")
    return trainer.scene, labels, _mean_breakdown(breakdowns, cfg)


def step2_reconstruction_guided_generation(
    scene: GaussianScene,
    refiner_params: GeometryAwareDenoiser,
    base_traj: Trajectory,
    gt_frames: Sequence[GroundTruthFrame],
    cfg: CoTrainConfig = CoTrainConfig(),
    tile_cfg: TileConfig = TileConfig(),
    refiner_cfg: RefinerConfig = RefinerConfig(),
    trainer: Optional[RefinerTrainer] = None,
    round_index: int = 0,
) -> Tuple[GeometryAwareDenoiser, Optional[float], List[str]]:
    """
    Train the refiner on conditions re-rendered from the frozen, updated scene.

    Conditions are rendered at the recorded viewpoints of `gt_frames` (the base
    trajectory's views). With refiner_cfg.condition "warp" each recorded view is
    conditioned on its nearest other recorded frame warped into it instead.

    Returns:
        (refiner, mean training loss or None when no step ran, condition hashes)

    Raises:
        FreezeViolation: if the scene changed during the step
    """
    frozen_hash = scene.checksum()
    if refiner_cfg.condition == "warp":
        conds = [warp_condition(gt_frames, frame.view, exclude=i) for i, frame in enumerate(gt_frames)]
    else:
        conds = [rasterize(scene, frame.view, tile_cfg) for frame in gt_frames]
    hashes = [c.checksum() for c in conds]
    if cfg.gen_steps_per_round == 0:
        return refiner_params, None, hashes

    if trainer is None:
        trainer = RefinerTrainer(refiner_params, refiner_cfg, seed=derive_seed(cfg.seed, f"step2-{round_index}"))
    pairs = [(cond, frame.image) for cond, frame in zip(conds, gt_frames)]
    losses = trainer.fit(pairs, cfg.gen_steps_per_round, progress=False)

    if scene.checksum() != frozen_hash:
        raise FreezeViolation(f"Scene changed during Step 2 of round {round_index}")
    logger.debug(f"Step 2 of round {round_index} on {len(base_traj.views)} recorded views")
    return trainer.params, float(np.mean(losses)), hashes


def _mean_breakdown(items: Sequence[LossBreakdown], cfg: CoTrainConfig) -> LossBreakdown:
    return LossBreakdown.compose(
        mse=float(np.mean([b.mse for b in items])),
        perceptual=float(np.mean([b.perceptual for b in items])),
        depth_l1=float(np.mean([b.depth_l1 for b in items])),
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
    )


class ShiftReference:
    """Ray-traced reference frames at fixed lateral shifts for per-round PSNR."""

    def __init__(self, scene_spec: SceneSpec, base_traj: Trajectory, shifts: Sequence[float], stride: int):
        self.shifts = list(shifts)
        trajectories = build_eval_trajectories(base_traj, self.shifts, stride)
        self.references: Dict[float, List[GroundTruthFrame]] = {
            tau: [raytrace(scene_spec, v) for v in traj.views] for tau, traj in zip(self.shifts, trajectories)
        }

    def measure(self, scene: GaussianScene, tile_cfg: TileConfig, background) -> Dict[float, float]:
        out = {}
        for tau, frames in self.references.items():
            values = [
                psnr(composite_background(rasterize(scene, f.view, tile_cfg), background).numpy(), f.image)
                for f in frames
            ]
            out[tau] = float(np.mean(values))
        return out

    @staticmethod
    def by_magnitude(values: Dict[float, float], magnitude: float) -> Optional[float]:
        picked = [v for tau, v in values.items() if abs(abs(tau) - magnitude) < 1e-9]
        return float(np.mean(picked)) if picked else None


def run_cotraining(
    scene: GaussianScene,
    refiner_params: GeometryAwareDenoiser,
    base_traj: Trajectory,
    gt_frames: Sequence[GroundTruthFrame],
    cfg: CoTrainConfig = CoTrainConfig(),
    tile_cfg: TileConfig = TileConfig(),
    refiner_cfg: RefinerConfig = RefinerConfig(),
    lr_table: LearningRates = LearningRates(),
    background=BLACK,
    scene_spec: Optional[SceneSpec] = None,
    refine_fn: Optional[RefineFn] = None,
    label_sink: Optional[Callable[[int, List[PseudoLabel]], None]] = None,
    progress: bool = True,
) -> Tuple[GaussianScene, GeometryAwareDenoiser, List[RoundReport]]:
    """
    Alternate Step 1 and Step 2 for cfg.rounds rounds.

    mode "recon_only" runs Step 1 alone (refiner fixed), "gen_only" runs Step 2
    alone (scene fixed). When `scene_spec` is given it serves as the depth oracle
    and as the reference for per-round PSNR at the report shifts. `label_sink`
    receives each round's pseudo-labels.
    """
    if cfg.rounds == 0:
        return scene, refiner_params, []

    depth_oracle = make_depth_oracle(scene_spec) if scene_spec is not None else None
    reference = ShiftReference(scene_spec, base_traj, cfg.report_shifts, cfg.report_stride) if scene_spec else None
    refiner_trainer = RefinerTrainer(refiner_params, refiner_cfg, seed=derive_seed(cfg.seed, "step2"))

    reports: List[RoundReport] = []
    bar = tqdm(range(cfg.rounds), desc="cotrain", disable=not progress, leave=False)
    for r in bar:
        recon_breakdown: Optional[LossBreakdown] = None
        gen_loss: Optional[float] = None
        hashes: List[str] = []

        if cfg.mode in ("both", "recon_only"):
            scene, labels, recon_breakdown = step1_generation_guided_reconstruction(
                scene, refiner_params, base_traj, gt_frames, cfg, tile_cfg, refiner_cfg, lr_table,
                background, r, refine_fn, depth_oracle,
            )
            if label_sink is not None:
                label_sink(r, labels)
        if cfg.mode in ("both", "gen_only"):
            refiner_params, gen_loss, hashes = step2_reconstruction_guided_generation(
                scene, refiner_params, base_traj, gt_frames, cfg, tile_cfg, refiner_cfg, refiner_trainer, r
            )

        psnrs = reference.measure(scene, tile_cfg, background) if reference is not None else {}
        report = RoundReport(
            round=r,
            psnr_0m=ShiftReference.by_magnitude(psnrs, 0.0),
            psnr_1m=ShiftReference.by_magnitude(psnrs, 1.0),
            psnr_2m=ShiftReference.by_magnitude(psnrs, 2.0),
            recon_loss=recon_breakdown,
            gen_loss=gen_loss,
            refiner_hash=refiner_params.checksum(),
            scene_hash=scene.checksum(),
            condition_hashes=hashes,
        )
        reports.append(report)
        bar.set_postfix(psnr_2m=f"{report.psnr_2m:.2f}" if report.psnr_2m is not None else "-")
        logger.info(
            f"Round {r}: recon {recon_breakdown.total if recon_breakdown else float('nan'):.4f}, "
            f"gen {gen_loss if gen_loss is not None else float('nan'):.4f}, psnr_2m {report.psnr_2m}"
        )
    return scene, refiner_params, reports
