"""
Gaussian Scene Model
====================

Raw-parameter Gaussian scenes, the pixel-unprojection initializer and the Adam
update step.

Each Gaussian carries 14 raw parameters, in this order:
position (3), opacity logit (1), log scale (3), quaternion w,x,y,z (4), color logits (3).
Opacity and color go through a sigmoid, scale through exp.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Sequence

import numpy as np
import torch

from ..exceptions import NoValidPixels, NumericalFailure, ShapeMismatch
from ..models.config_models import LearningRates
from ..models.scene_models import GroundTruthFrame
from .camera_engine import quat_to_rotmat

logger = logging.getLogger(__name__)

DTYPE = torch.float64
PARAMS_PER_GAUSSIAN = 14
LOG_SCALE_MIN = math.log(1e-4)
LOG_SCALE_MAX = math.log(1e3)
COLOR_EPS = 1e-4

# field name -> (width, learning-rate group)
PARAM_LAYOUT = {
    "means": (3, "position"),
    "opacity_logits": (1, "opacity"),
    "log_scales": (3, "scale"),
    "quats": (4, "rotation"),
    "color_logits": (3, "color"),
}


@dataclass(frozen=True)
class Gaussian3D:
    """One splat in raw parameters."""

    position: Sequence[float]
    opacity_logit: float
    log_scale: Sequence[float]
    rotation: Sequence[float]
    color_logit: Sequence[float]

    @property
    def opacity(self) -> float:
        return 1.0 / (1.0 + math.exp(-self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))

    @property
    def color(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-np.asarray(self.color_logit, dtype=np.float64)))

    def raw(self) -> List[float]:
        return [
            *map(float, self.position),
            float(self.opacity_logit),
            *map(float, self.log_scale),
            *map(float, self.rotation),
            *map(float, self.color_logit),
        ]


@dataclass
class GaussianScene:
    """K Gaussians as batched raw-parameter tensors."""

    means: torch.Tensor
    opacity_logits: torch.Tensor
    log_scales: torch.Tensor
    quats: torch.Tensor
    color_logits: torch.Tensor

    def __post_init__(self):
        k = self.means.shape[0]
        if k < 1:
            raise ShapeMismatch("A Gaussian scene needs at least one Gaussian")
        for name, (width, _) in PARAM_LAYOUT.items():
            tensor = getattr(self, name)
            expected = (k,) if width == 1 else (k, width)
            if tuple(tensor.shape) != expected:
                raise ShapeMismatch(f"{name} has shape {tuple(tensor.shape)}, expected {expected}")

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.means[i].tolist(),
            opacity_logit=float(self.opacity_logits[i]),
            log_scale=self.log_scales[i].tolist(),
            rotation=self.quats[i].tolist(),
            color_logit=self.color_logits[i].tolist(),
        )

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def colors(self) -> torch.Tensor:
        return torch.sigmoid(self.color_logits)

    def tensors(self) -> Dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def raw(self) -> torch.Tensor:
        """(K, 14) raw parameter matrix in checkpoint order."""
        return torch.cat(
            [
                self.means,
                self.opacity_logits[:, None],
                self.log_scales,
                self.quats,
                self.color_logits,
            ],
            dim=1,
        )

    @classmethod
    def from_raw(cls, raw: torch.Tensor) -> "GaussianScene":
        if raw.ndim != 2 or raw.shape[1] != PARAMS_PER_GAUSSIAN:
            raise ShapeMismatch(f"Raw parameters must be (K, 14), got {tuple(raw.shape)}")
        raw = raw.to(DTYPE)
        return cls(
            means=raw[:, 0:3].clone(),
            opacity_logits=raw[:, 3].clone(),
            log_scales=raw[:, 4:7].clone(),
            quats=raw[:, 7:11].clone(),
            color_logits=raw[:, 11:14].clone(),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D]) -> "GaussianScene":
        rows = [g.raw() for g in gaussians]
        if not rows:
            raise ShapeMismatch("A Gaussian scene needs at least one Gaussian")
        return cls.from_raw(torch.tensor(rows, dtype=DTYPE))

    def clone(self) -> "GaussianScene":
        return GaussianScene(**{name: t.detach().clone() for name, t in self.tensors().items()})

    def checksum(self) -> str:
        """SHA-256 of the raw parameter bytes; identifies a scene version."""
        return hashlib.sha256(self.raw().detach().cpu().numpy().tobytes()).hexdigest()


@dataclass
class ParamGradients:
    """dLoss/d(raw parameter) for every Gaussian, laid out like GaussianScene."""

    means: torch.Tensor
    opacity_logits: torch.Tensor
    log_scales: torch.Tensor
    quats: torch.Tensor
    color_logits: torch.Tensor

    def __len__(self) -> int:
        return self.means.shape[0]

    def tensors(self) -> Dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def raw(self) -> torch.Tensor:
        return torch.cat(
            [self.means, self.opacity_logits[:, None], self.log_scales, self.quats, self.color_logits], dim=1
        )

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors().values())

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "ParamGradients":
        return cls(**{name: torch.zeros_like(t) for name, t in scene.tensors().items()})


def quat_to_rotmat_batched(quats: torch.Tensor) -> torch.Tensor:
    """(K, 4) quaternions (normalised internally) -> (K, 3, 3) rotation matrices."""
    q = quats / quats.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*quats.shape[:-1], 3, 3)


def covariance_3d(log_scales: torch.Tensor, quats: torch.Tensor) -> torch.Tensor:
    """Batched Sigma = R diag(exp(2 s)) R^T."""
    rot = quat_to_rotmat_batched(quats)
    m = rot * torch.exp(log_scales)[..., None, :]
    return m @ m.transpose(-1, -2)


def covariance(g: Gaussian3D) -> np.ndarray:
    """3x3 world-space covariance of one Gaussian."""
    log_scales = torch.tensor([list(g.log_scale)], dtype=DTYPE)
    quats = torch.tensor([list(g.rotation)], dtype=DTYPE)
    sigma = covariance_3d(log_scales, quats)[0].numpy()
    return 0.5 * (sigma + sigma.T)


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, COLOR_EPS, 1.0 - COLOR_EPS)
    return np.log(p / (1.0 - p))


def sample_grid(height: int, width: int, stride: int):
    """Row / column indices visited by the initializer (cell centres of a stride grid)."""
    offset = stride // 2
    return np.arange(offset, height, stride), np.arange(offset, width, stride)


def unproject_init(frames: Sequence[GroundTruthFrame], stride: int = 4) -> GaussianScene:
    """
    Feed-forward scene construction: one Gaussian per sampled finite-depth pixel.

    Each Gaussian sits at the unprojected pixel, takes the pixel color, starts at
    opacity 0.5 with identity rotation and an isotropic scale equal to the pixel
    footprint at its depth (depth * stride / fx).

    Args:
        frames: Posed frames with depth
        stride: Pixel sampling stride

    Returns:
        GaussianScene

    Raises:
        NoValidPixels: if no sampled pixel has finite depth
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if not frames:
        raise NoValidPixels("No frames supplied to the initializer")

    chunks = []
    for frame in frames:
        k = frame.view.intrinsics
        rows, cols = sample_grid(k.height, k.width, stride)
        vv, uu = np.meshgrid(rows, cols, indexing="ij")
        depth = frame.depth[vv, uu]
        valid = np.isfinite(depth) & (depth > 0)
        if not valid.any():
            continue
        z = depth[valid]
        u = uu[valid].astype(np.float64)
        v = vv[valid].astype(np.float64)
        local = np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=1)

        rot = quat_to_rotmat(frame.view.pose.rotation)
        world = local @ rot.T + frame.view.pose.center
        n = world.shape[0]
        raw = np.zeros((n, PARAMS_PER_GAUSSIAN), dtype=np.float64)
        raw[:, 0:3] = world
        raw[:, 3] = 0.0
        raw[:, 4:7] = np.clip(np.log(z * stride / k.fx), LOG_SCALE_MIN, LOG_SCALE_MAX)[:, None]
        raw[:, 7] = 1.0
        raw[:, 11:14] = _logit(frame.image[vv[valid], uu[valid]])
        chunks.append(raw)

    if not chunks:
        raise NoValidPixels(f"All sampled pixels of {len(frames)} frames have infinite depth")

    scene = GaussianScene.from_raw(torch.from_numpy(np.concatenate(chunks, axis=0)))
    logger.info(f"Initialized {len(scene)} Gaussians from {len(frames)} frames (stride {stride})")
    return scene


class GaussianOptimizer:
    """
    Adam state for one Gaussian scene.

    Parameters live in named torch.optim.Adam groups (position, opacity, scale,
    rotation, color) so each group has its own learning rate.
    """

    def __init__(self, scene: GaussianScene, lr_table: LearningRates = LearningRates()):
        self.params = {
            name: torch.nn.Parameter(t.detach().clone().to(DTYPE)) for name, t in scene.tensors().items()
        }
        self.lr_table = lr_table
        groups = [
            {"params": [self.params[name]], "lr": getattr(lr_table, group), "name": group}
            for name, (_, group) in PARAM_LAYOUT.items()
        ]
        self.optimizer = torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8, foreach=False)
        self.steps = 0

    def set_learning_rates(self, lr_table: LearningRates) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = getattr(lr_table, group["name"])
        self.lr_table = lr_table

    def load(self, scene: GaussianScene) -> None:
        """Point the optimizer at a scene version (keeps the moment estimates)."""
        with torch.no_grad():
            for name, t in scene.tensors().items():
                if t.shape != self.params[name].shape:
                    raise ShapeMismatch(f"{name}: scene {tuple(t.shape)} vs optimizer {tuple(self.params[name].shape)}")
                self.params[name].copy_(t)

    def snapshot(self) -> GaussianScene:
        return GaussianScene(**{name: p.detach().clone() for name, p in self.params.items()})


def apply_gradients(
    scene: GaussianScene,
    grads: ParamGradients,
    optimizer_state: GaussianOptimizer,
    lr_table: LearningRates | None = None,
) -> GaussianScene:
    """
    One Adam step (beta1 0.9, beta2 0.999, eps 1e-8) with per-group learning rates.

    Quaternions are renormalised and log scales clamped to [log 1e-4, log 1e3]
    afterwards; the input scene is not modified.

    Raises:
        ShapeMismatch: if gradient and scene cardinalities differ
        NumericalFailure: if the update produced NaN/Inf
    """
    if len(grads) != len(scene):
        raise ShapeMismatch(f"Gradients for {len(grads)} Gaussians, scene has {len(scene)}")
    if lr_table is not None and lr_table != optimizer_state.lr_table:
        optimizer_state.set_learning_rates(lr_table)

    optimizer_state.load(scene)
    for name, p in optimizer_state.params.items():
        g = getattr(grads, name)
        if g.shape != p.shape:
            raise ShapeMismatch(f"Gradient {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        p.grad = g.detach().to(DTYPE).clone()

    optimizer_state.optimizer.step()
    optimizer_state.optimizer.zero_grad(set_to_none=True)
    optimizer_state.steps += 1

    with torch.no_grad():
        q = optimizer_state.params["quats"]
        norms = q.norm(dim=1, keepdim=True)
        drifted = ((norms - 1.0).abs() > 1e-12).squeeze(1)
        if drifted.any():
            q[drifted] = q[drifted] / norms[drifted]
        optimizer_state.params["log_scales"].clamp_(LOG_SCALE_MIN, LOG_SCALE_MAX)

    updated = optimizer_state.snapshot()
    if not torch.isfinite(updated.raw()).all():
        raise NumericalFailure(f"Non-finite Gaussian parameters after step {optimizer_state.steps}")
    return updated
