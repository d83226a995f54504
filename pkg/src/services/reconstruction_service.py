"""
Reconstruction Service
======================

Reconstruction loss and the gradient loop that fits a Gaussian scene to frames.

    L = L_mse + lambda1 * (1 - SSIM) + lambda2 * L_depth

Color terms compare the render composited over the scene background with the
target image. The depth term is an L1 over pixels with valid target depth and is
skipped when no target depth is supplied.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from ..exceptions import ShapeMismatch
from ..models.camera_models import CameraView
from ..models.config_models import LearningRates, ReconConfig, TileConfig
from ..models.scene_models import GroundTruthFrame
from ..models.training_models import CurvePoint, LossBreakdown
from .diffusion_refiner import TrainingPair
from .gaussian_model import DTYPE, GaussianOptimizer, GaussianScene, apply_gradients, unproject_init
from .metrics import psnr, ssim_torch
from .rasterizer import (
    PixelGradients,
    RenderOutput,
    backpropagate,
    composite_background,
    rasterize,
    render_with_graph,
)

logger = logging.getLogger(__name__)

BLACK = (0.0, 0.0, 0.0)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.detach().to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def recon_loss(
    render: RenderOutput,
    target_image,
    target_depth=None,
    cfg=ReconConfig(),
    background=BLACK,
    valid_mask=None,
) -> Tuple[LossBreakdown, PixelGradients]:
    """
    Weighted reconstruction loss and its per-pixel gradients.

    Args:
        render: Geometry condition (color over black, depth, opacity)
        target_image: (H, W, 3) target in [0, 1]
        target_depth: (H, W) target depth, +inf where invalid; None skips the depth term
        cfg: Anything carrying lambda1 and lambda2
        background: Color composited behind the render
        valid_mask: Optional extra (H, W) boolean mask for the depth term

    Returns:
        (LossBreakdown, PixelGradients with dL/dI, dL/dD, dL/dA)

    Raises:
        ShapeMismatch: if render and targets disagree in shape
    """
    h, w = render.height, render.width
    tgt = _as_tensor(target_image)
    if tuple(tgt.shape) != (h, w, 3):
        raise ShapeMismatch(f"Target image {tuple(tgt.shape)} vs render {(h, w, 3)}")

    image = render.image.detach().to(DTYPE).clone().requires_grad_(True)
    depth = render.depth.detach().to(DTYPE).clone().requires_grad_(True)
    alpha = render.alpha.detach().to(DTYPE).clone().requires_grad_(True)

    with torch.enable_grad():
        pred = composite_background(RenderOutput(image, depth, alpha), background)
        mse = torch.mean((pred - tgt) ** 2)
        perceptual = 1.0 - ssim_torch(pred, tgt)

        depth_term = torch.zeros((), dtype=DTYPE)
        if target_depth is not None:
            tdep = _as_tensor(target_depth)
            if tuple(tdep.shape) != (h, w):
                raise ShapeMismatch(f"Target depth {tuple(tdep.shape)} vs render {(h, w)}")
            mask = torch.isfinite(tdep) & (tdep > 0)
            if valid_mask is not None:
                mask = mask & torch.as_tensor(np.asarray(valid_mask), dtype=torch.bool)
            if bool(mask.any()):
                depth_term = torch.abs(depth[mask] - tdep[mask]).mean()

        total = mse + cfg.lambda1 * perceptual + cfg.lambda2 * depth_term
        g_image, g_depth, g_alpha = torch.autograd.grad(total, [image, depth, alpha], allow_unused=True)

    grads = PixelGradients(
        image=g_image if g_image is not None else torch.zeros_like(image),
        depth=g_depth if g_depth is not None else torch.zeros_like(depth),
        alpha=g_alpha if g_alpha is not None else torch.zeros_like(alpha),
    )
    breakdown = LossBreakdown.compose(
        mse=mse.item(), perceptual=perceptual.item(), depth_l1=depth_term.item(),
        lambda1=cfg.lambda1, lambda2=cfg.lambda2,
    )
    return breakdown, grads


class ReconstructionTrainer:
    """
    Gradient-based scene fitting: rasterize, recon_loss, rasterize backward, Adam step.
    """

    def __init__(
        self,
        scene: GaussianScene,
        tile_cfg: TileConfig = TileConfig(),
        lr_table: LearningRates = LearningRates(),
        background=BLACK,
        lambda1: float = 0.05,
        lambda2: float = 0.01,
        seed: int = 0,
    ):
        self.scene = scene
        self.tile_cfg = tile_cfg
        self.background = tuple(background)
        self.weights = ReconConfig(lambda1=lambda1, lambda2=lambda2)
        self.optimizer = GaussianOptimizer(scene, lr_table)
        self.rng = np.random.default_rng(seed)

    def step(self, view: CameraView, target_image, target_depth=None) -> LossBreakdown:
        leaves, render = render_with_graph(self.scene, view, self.tile_cfg)
        breakdown, pixel_grads = recon_loss(
            render.detach(), target_image, target_depth, self.weights, self.background
        )
        grads = backpropagate(leaves, render, pixel_grads)
        self.scene = apply_gradients(self.scene, grads, self.optimizer)
        return breakdown

    def train_view_psnr(self, frames: Sequence[GroundTruthFrame]) -> float:
        """Mean PSNR of background-composited renders against the given frames."""
        values = []
        for frame in frames:
            render = rasterize(self.scene, frame.view, self.tile_cfg)
            values.append(psnr(composite_background(render, self.background).numpy(), frame.image))
        return float(np.mean(values)) if values else math.inf

    def fit(
        self,
        frames: Sequence[GroundTruthFrame],
        steps: int,
        log_every: int = 50,
        use_depth: bool = True,
        progress: bool = True,
    ) -> List[CurvePoint]:
        """
        Run `steps` updates, visiting frames in seeded random order (one frame per step).

        Returns the loss curve; its last point carries the mean train-view PSNR.
        """
        curve: List[CurvePoint] = []
        if steps <= 0:
            return curve
        order: List[int] = []
        bar = tqdm(range(1, steps + 1), desc="fit", disable=not progress, leave=False)
        for step in bar:
            if not order:
                order = self.rng.permutation(len(frames)).tolist()
            frame = frames[order.pop()]
            breakdown = self.step(frame.view, frame.image, frame.depth if use_depth else None)
            bar.set_postfix(loss=f"{breakdown.total:.4f}")
            if step % log_every == 0 or step == steps:
                point = CurvePoint(step=step, loss=breakdown.total, breakdown=breakdown)
                if step == steps:
                    point = point.model_copy(update={"psnr": self.train_view_psnr(frames)})
                curve.append(point)
                logger.debug(f"fit step {step}: loss {breakdown.total:.5f}")
        return curve


def fit_scene(
    frames: Sequence[GroundTruthFrame],
    cfg: ReconConfig = ReconConfig(),
    tile_cfg: TileConfig = TileConfig(),
    background=BLACK,
    seed: int = 0,
    steps: Optional[int] = None,
    progress: bool = True,
) -> Tuple[GaussianScene, List[CurvePoint]]:
    """
    Stage-one reconstruction: unproject_init followed by `steps` (default cfg.steps) updates.

    Raises:
        NoValidPixels: if the frames hold no finite depth at the sampled pixels
    """
    scene = unproject_init(frames, cfg.init_stride)
    n_steps = cfg.steps if steps is None else steps
    trainer = ReconstructionTrainer(
        scene, tile_cfg, cfg.learning_rates, background, cfg.lambda1, cfg.lambda2, seed
    )
    curve = trainer.fit(frames, n_steps, cfg.log_every, progress=progress)
    if curve:
        logger.info(f"Fitted {len(trainer.scene)} Gaussians in {n_steps} steps, train PSNR {curve[-1].psnr:.2f} dB")
    return trainer.scene, curve


def build_degraded_pairs(
    frames: Sequence[GroundTruthFrame],
    cfg: ReconConfig = ReconConfig(),
    tile_cfg: TileConfig = TileConfig(),
    degrade_steps: Sequence[int] = (50, 200),
    background=BLACK,
    seed: int = 0,
    progress: bool = True,
) -> List[TrainingPair]:
    """
    (condition, ground truth) pairs from partially fitted scenes.

    One fit runs from the initializer; at each checkpoint step k in `degrade_steps`
    every frame is rendered (over black) and paired with its ground-truth image.
    """
    scene = unproject_init(frames, cfg.init_stride)
    trainer = ReconstructionTrainer(
        scene, tile_cfg, cfg.learning_rates, background, cfg.lambda1, cfg.lambda2, seed
    )
    pairs: List[TrainingPair] = []
    done = 0
    for k in sorted(set(degrade_steps)):
        trainer.fit(frames, k - done, max(1, k - done), progress=progress)
        done = k
        for frame in frames:
            pairs.append((rasterize(trainer.scene, frame.view, tile_cfg), frame.image))
    logger.info(f"Built {len(pairs)} degraded pairs at steps {sorted(set(degrade_steps))}")
    return pairs
