"""
Geometry-Aware Diffusion Refiner
================================

Pixel-space conditional diffusion model that refines rendered geometry
conditions into realistic images.

- Variance-preserving cosine schedule: alpha_t = cos(pi t / 2T), sigma_t = sin(pi t / 2T),
  alpha floored at ALPHA_FLOOR so the clean-image estimate exists at t = T
- Forward noising: z_t = alpha_t z_v + sigma_t eps, z_v = 2 * image - 1
- Noise prediction: eps_hat = f_theta([z_t, E_c(C_geo), t / T]) (channel concatenation)
- Training: mean squared error between eps and eps_hat
- Sampling: deterministic DDIM (eta = 0) from pure noise
"""

import hashlib
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from ..exceptions import NumericalFailure, ShapeMismatch, TimestepOutOfRange
from ..models.config_models import RefinerConfig
from .rasterizer import GeometryCondition

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 5e-4
CONDITION_CHANNELS = 5


class NoiseSchedule:
    """Variance-preserving cosine schedule over t = 0..steps."""

    def __init__(self, steps: int = 200, alpha_floor: float = ALPHA_FLOOR):
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        self.steps = steps
        angle = math.pi * torch.arange(steps + 1, dtype=torch.float64) / (2 * steps)
        alpha = torch.cos(angle)
        sigma = torch.sin(angle)
        floored = alpha < alpha_floor
        alpha = torch.where(floored, torch.full_like(alpha, alpha_floor), alpha)
        sigma = torch.where(floored, torch.sqrt(1.0 - alpha * alpha), sigma)
        self.alpha = alpha
        self.sigma = sigma

    def check(self, t) -> None:
        t_tensor = torch.as_tensor(t)
        if bool((t_tensor < 0).any()) or bool((t_tensor > self.steps).any()):
            raise TimestepOutOfRange(f"Timestep {t} outside [0, {self.steps}]")

    def coefficients(self, t, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """alpha_t, sigma_t shaped to broadcast against a (B, C, H, W) or (C, H, W) tensor."""
        self.check(t)
        t_tensor = torch.as_tensor(t, dtype=torch.long)
        a = self.alpha[t_tensor].to(like.dtype)
        s = self.sigma[t_tensor].to(like.dtype)
        if a.ndim == 1:
            shape = (-1,) + (1,) * (like.ndim - 1)
            a, s = a.reshape(shape), s.reshape(shape)
        return a, s

    def sampling_timesteps(self, sample_steps: int) -> List[int]:
        """Uniformly spaced, strictly decreasing timesteps from T to 0 (sample_steps + 1 entries)."""
        if not 1 <= sample_steps <= self.steps:
            raise ValueError(f"sample_steps must lie in [1, {self.steps}], got {sample_steps}")
        ts = np.round(np.linspace(self.steps, 0, sample_steps + 1)).astype(int)
        return [int(t) for t in ts]


class GeometryAwareDenoiser(nn.Module):
    """
    Condition encoder E_c (two 3x3 convs, 5 -> 16 -> C_c) and denoiser f_theta
    (four 3x3 convs, C_c + 3 + 1 -> 32 -> 32 -> 32 -> 3) with SiLU in between.
    """

    def __init__(self, latent_channels: int = 8, hidden_channels: int = 32, encoder_channels: int = 16):
        super().__init__()
        self.latent_channels = latent_channels
        self.condition_encoder = nn.Sequential(
            nn.Conv2d(CONDITION_CHANNELS, encoder_channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(encoder_channels, latent_channels, 3, padding=1),
        )
        self.denoiser = nn.Sequential(
            nn.Conv2d(latent_channels + 3 + 1, hidden_channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden_channels, hidden_channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden_channels, hidden_channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden_channels, 3, 3, padding=1),
        )
        # Untrained model predicts zero noise
        nn.init.zeros_(self.denoiser[-1].weight)
        nn.init.zeros_(self.denoiser[-1].bias)

    def encode(self, condition: torch.Tensor) -> torch.Tensor:
        return self.condition_encoder(condition)

    def forward(self, z_t: torch.Tensor, z_c: torch.Tensor, t_norm: torch.Tensor) -> torch.Tensor:
        t_channel = t_norm.reshape(-1, 1, 1, 1).to(z_t.dtype).expand(z_t.shape[0], 1, *z_t.shape[-2:])
        return self.denoiser(torch.cat([z_t, z_c, t_channel], dim=1))

    def architecture_hash(self) -> int:
        """u32 digest of parameter names and shapes."""
        signature = ";".join(f"{name}:{tuple(p.shape)}" for name, p in self.named_parameters())
        return int.from_bytes(hashlib.sha256(signature.encode("utf-8")).digest()[:4], "little")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.state_dict().values():
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


DenoiserParams = GeometryAwareDenoiser


def build_denoiser(cfg: RefinerConfig = RefinerConfig(), seed: int = 0) -> GeometryAwareDenoiser:
    """Deterministically initialised denoiser (global RNG state is left untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GeometryAwareDenoiser(cfg.latent_channels, cfg.hidden_channels, cfg.encoder_channels)
    return model


def condition_tensor(
    cond: GeometryCondition, depth_guidance: bool = True, opacity_guidance: bool = True
) -> torch.Tensor:
    """
    Stack a geometry condition into (5, H, W): RGB, inverse depth 1 / (1 + D), opacity.

    Disabled guidance channels are zeroed.
    """
    h, w = cond.image.shape[0], cond.image.shape[1]
    if tuple(cond.image.shape) != (h, w, 3) or tuple(cond.depth.shape) != (h, w) or tuple(cond.alpha.shape) != (h, w):
        raise ShapeMismatch(
            f"Condition shapes image {tuple(cond.image.shape)}, depth {tuple(cond.depth.shape)}, "
            f"alpha {tuple(cond.alpha.shape)} do not agree"
        )
    inv_depth = 1.0 / (1.0 + torch.clamp(cond.depth, min=0.0))
    if not depth_guidance:
        inv_depth = torch.zeros_like(inv_depth)
    alpha = cond.alpha if opacity_guidance else torch.zeros_like(cond.alpha)
    return torch.cat([cond.image.permute(2, 0, 1), inv_depth[None], alpha[None]], dim=0)


def image_to_latent(image) -> torch.Tensor:
    """(H, W, 3) image in [0, 1] -> (3, H, W) latent in [-1, 1]."""
    return torch.as_tensor(np.asarray(image), dtype=torch.float64).permute(2, 0, 1) * 2.0 - 1.0


def latent_to_image(z: torch.Tensor) -> np.ndarray:
    """(3, H, W) latent -> (H, W, 3) image clamped to [0, 1]."""
    return ((z.detach().to(torch.float64) + 1.0) / 2.0).clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy()


def encode_condition(
    cond: GeometryCondition,
    params: GeometryAwareDenoiser,
    depth_guidance: bool = True,
    opacity_guidance: bool = True,
) -> torch.Tensor:
    """Condition latent z_c = E_c(C_geo), shape (C_c, H, W)."""
    x = condition_tensor(cond, depth_guidance, opacity_guidance).to(params.dtype)
    return params.encode(x[None])[0]


def add_noise(z_v: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """
    z_t = alpha_t z_v + sigma_t eps.

    `t` may be an int or, for batched (B, C, H, W) latents, a length-B tensor.
    """
    if eps.shape != z_v.shape:
        raise ShapeMismatch(f"Noise shape {tuple(eps.shape)} != latent shape {tuple(z_v.shape)}")
    a, s = sched.coefficients(t, z_v)
    return a * z_v + s * eps


def predict_noise(
    z_t: torch.Tensor,
    z_c: torch.Tensor,
    t,
    params: GeometryAwareDenoiser,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """
    eps_hat = f_theta([z_t, z_c, t / T]); accepts (3, h, w) or (B, 3, h, w) inputs.
    """
    batched = z_t.ndim == 4
    zt = z_t if batched else z_t[None]
    zc = z_c if z_c.ndim == 4 else z_c[None]
    if zt.shape[-2:] != zc.shape[-2:] or zt.shape[0] != zc.shape[0]:
        raise ShapeMismatch(f"Noise latent {tuple(zt.shape)} and condition latent {tuple(zc.shape)} disagree")
    if zc.shape[1] != params.latent_channels:
        raise ShapeMismatch(f"Condition latent has {zc.shape[1]} channels, model expects {params.latent_channels}")
    sched.check(t)
    t_norm = torch.as_tensor(t, dtype=params.dtype).reshape(-1) / sched.steps
    if t_norm.numel() == 1:
        t_norm = t_norm.expand(zt.shape[0])
    out = params(zt.to(params.dtype), zc.to(params.dtype), t_norm)
    return out if batched else out[0]


def ddim_step(
    z_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    clip: bool = True,
) -> torch.Tensor:
    """
    Deterministic DDIM update from t to t_prev (< t).

    The clean-latent estimate is clipped to [-1, 1]; the noise estimate is then
    re-derived from the clipped value.
    """
    a_t, s_t = sched.coefficients(t, z_t)
    a_p, s_p = sched.coefficients(t_prev, z_t)
    x0 = (z_t - s_t * eps_hat) / a_t
    if clip:
        x0_clipped = x0.clamp(-1.0, 1.0)
        if float(s_t) > 0:
            eps_hat = torch.where(x0_clipped == x0, eps_hat, (z_t - a_t * x0_clipped) / s_t)
        x0 = x0_clipped
    return a_p * x0 + s_p * eps_hat


@torch.no_grad()
def refine(
    cond: GeometryCondition,
    params: GeometryAwareDenoiser,
    sched: NoiseSchedule,
    sample_steps: int = 20,
    seed: int = 0,
    depth_guidance: bool = True,
    opacity_guidance: bool = True,
) -> np.ndarray:
    """
    Refine one geometry condition into an (H, W, 3) image in [0, 1].

    Starts from seeded pure noise and walks a uniformly spaced DDIM timestep
    subsequence, conditioning on z_c at every step.
    """
    timesteps = sched.sampling_timesteps(sample_steps)
    z_c = encode_condition(cond, params, depth_guidance, opacity_guidance)
    gen = torch.Generator().manual_seed(int(seed))
    h, w = cond.image.shape[0], cond.image.shape[1]
    z = torch.randn((3, h, w), generator=gen, dtype=torch.float64).to(params.dtype)

    for t, t_prev in zip(timesteps[:-1], timesteps[1:]):
        eps_hat = predict_noise(z, z_c, t, params, sched)
        z = ddim_step(z, eps_hat, t, t_prev, sched)
    return latent_to_image(z)


def refine_many(
    conds: Sequence[GeometryCondition],
    params: GeometryAwareDenoiser,
    sched: NoiseSchedule,
    cfg: RefinerConfig,
    seeds: Sequence[int],
    video_length: int = 6,
) -> List[np.ndarray]:
    """Refine frames in groups of `video_length`; frames inside a group are independent."""
    outputs: List[np.ndarray] = []
    for start in range(0, len(conds), video_length):
        for cond, seed in zip(conds[start : start + video_length], seeds[start : start + video_length]):
            outputs.append(
                refine(cond, params, sched, cfg.sample_steps, seed, cfg.depth_guidance, cfg.opacity_guidance)
            )
    return outputs


TrainingPair = Tuple[GeometryCondition, np.ndarray]


def _stack_batch(
    batch: Sequence[TrainingPair], dtype: torch.dtype, depth_guidance: bool, opacity_guidance: bool
) -> Tuple[torch.Tensor, torch.Tensor]:
    conds = torch.stack([condition_tensor(c, depth_guidance, opacity_guidance) for c, _ in batch]).to(dtype)
    refs = torch.stack([image_to_latent(img) for _, img in batch]).to(dtype)
    if conds.shape[-2:] != refs.shape[-2:]:
        raise ShapeMismatch(f"Condition size {tuple(conds.shape[-2:])} != reference size {tuple(refs.shape[-2:])}")
    return conds, refs


def train_step(
    batch: Sequence[TrainingPair],
    params: GeometryAwareDenoiser,
    sched: NoiseSchedule,
    optimizer_state: torch.optim.Optimizer,
    generator: Optional[torch.Generator] = None,
    depth_guidance: bool = True,
    opacity_guidance: bool = True,
) -> Tuple[GeometryAwareDenoiser, float]:
    """
    One optimizer update on the noise-prediction objective.

    t ~ Uniform{1..T}, eps ~ N(0, I); loss is the per-element mean of (eps - eps_hat)^2.

    Returns:
        (params, loss) - params are updated in place and returned for chaining
    """
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    conds, z_v = _stack_batch(batch, params.dtype, depth_guidance, opacity_guidance)
    b = z_v.shape[0]
    t = torch.randint(1, sched.steps + 1, (b,), generator=generator)
    eps = torch.randn(z_v.shape, generator=generator, dtype=torch.float64).to(params.dtype)

    params.train()
    z_t = add_noise(z_v, t, eps, sched)
    z_c = params.encode(conds)
    eps_hat = params(z_t, z_c, t.to(params.dtype) / sched.steps)
    loss = F.mse_loss(eps_hat, eps)

    optimizer_state.zero_grad(set_to_none=True)
    loss.backward()
    optimizer_state.step()

    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalFailure(f"Refiner loss became {value}")
    return params, value


class RefinerTrainer:
    """Model, Adam state, schedule and a seeded generator for refiner training."""

    def __init__(self, params: GeometryAwareDenoiser, cfg: RefinerConfig = RefinerConfig(), seed: int = 0):
        self.params = params
        self.cfg = cfg
        self.schedule = NoiseSchedule(cfg.diffusion_steps)
        self.optimizer = torch.optim.Adam(params.parameters(), lr=cfg.lr, foreach=False)
        self.generator = torch.Generator().manual_seed(int(seed))

    def step(self, batch: Sequence[TrainingPair]) -> float:
        _, loss = train_step(
            batch,
            self.params,
            self.schedule,
            self.optimizer,
            self.generator,
            self.cfg.depth_guidance,
            self.cfg.opacity_guidance,
        )
        return loss

    def fit(self, pairs: Sequence[TrainingPair], steps: int, progress: bool = True) -> List[float]:
        """Run `steps` updates on random mini-batches drawn from `pairs`."""
        if steps > 0 and not pairs:
            raise ValueError("No training pairs supplied")
        losses: List[float] = []
        bar = tqdm(range(steps), desc="refiner", disable=not progress or steps == 0, leave=False)
        for _ in bar:
            idx = torch.randint(0, len(pairs), (min(self.cfg.batch_size, len(pairs)),), generator=self.generator)
            loss = self.step([pairs[int(i)] for i in idx])
            losses.append(loss)
            bar.set_postfix(loss=f"{loss:.4f}")
        if losses:
            logger.info(f"Refiner trained {steps} steps, final loss {losses[-1]:.4f}")
        return losses
