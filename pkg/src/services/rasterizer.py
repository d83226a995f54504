"""
Tile-Based Gaussian Rasterizer
==============================

Projects Gaussians to screen space (EWA approximation), bins them into square
tiles and alpha-composites color, depth and opacity front to back:

    I = sum_i c_i a_i T_i,   D = sum_i z_i a_i T_i,   A = sum_i a_i T_i,
    T_i = prod_{j<i} (1 - a_j),  a_i = min(max_alpha, alpha_i exp(-1/2 d^T cov2d^-1 d))

Contributions with a_i < min_alpha are skipped. Splats are sorted once, globally,
by (view depth, source index), so results do not depend on input order or tiling.

The forward pass is written in torch; rasterize_backward differentiates the very
same graph with autograd and returns per-Gaussian raw-parameter gradients.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np
import torch

from ..exceptions import ShapeMismatch
from ..models.camera_models import CameraView
from ..models.config_models import TileConfig
from .camera_engine import quat_to_rotmat
from .gaussian_model import DTYPE, GaussianScene, ParamGradients, covariance_3d

logger = logging.getLogger(__name__)

TERMINATION_T = 1e-4


@dataclass(frozen=True)
class SplatProjection:
    """One projected Gaussian."""

    mean2d: Tuple[float, float]
    cov2d: np.ndarray
    view_depth: float
    base_opacity: float
    color: Tuple[float, float, float]
    source_index: int


@dataclass
class ProjectedSplats:
    """Batched screen-space splats, sorted front to back."""

    means2d: torch.Tensor  # (M, 2)
    cov2d: torch.Tensor  # (M, 2, 2)
    depths: torch.Tensor  # (M,)
    opacities: torch.Tensor  # (M,)
    colors: torch.Tensor  # (M, 3)
    source_index: torch.Tensor  # (M,) long

    def __len__(self) -> int:
        return self.depths.shape[0]

    def __getitem__(self, i: int) -> SplatProjection:
        return SplatProjection(
            mean2d=tuple(self.means2d[i].tolist()),
            cov2d=self.cov2d[i].detach().numpy().copy(),
            view_depth=float(self.depths[i]),
            base_opacity=float(self.opacities[i]),
            color=tuple(self.colors[i].tolist()),
            source_index=int(self.source_index[i]),
        )

    def __iter__(self) -> Iterator[SplatProjection]:
        return (self[i] for i in range(len(self)))


@dataclass
class RenderOutput:
    """Geometry condition triplet: color (H, W, 3), depth (H, W), opacity (H, W)."""

    image: torch.Tensor
    depth: torch.Tensor
    alpha: torch.Tensor

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def numpy(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            self.image.detach().cpu().numpy(),
            self.depth.detach().cpu().numpy(),
            self.alpha.detach().cpu().numpy(),
        )

    def detach(self) -> "RenderOutput":
        return RenderOutput(self.image.detach(), self.depth.detach(), self.alpha.detach())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in (self.image, self.depth, self.alpha):
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


GeometryCondition = RenderOutput


@dataclass
class PixelGradients:
    """Upstream gradients dL/dI (H, W, 3), dL/dD (H, W), dL/dA (H, W)."""

    image: torch.Tensor
    depth: torch.Tensor
    alpha: torch.Tensor


def composite_background(render: RenderOutput, background) -> torch.Tensor:
    """I_geo + (1 - A_geo) * background."""
    bg = torch.as_tensor(background, dtype=render.image.dtype)
    return render.image + (1.0 - render.alpha)[..., None] * bg


def _view_transform(view: CameraView) -> Tuple[torch.Tensor, torch.Tensor]:
    """World-to-view rotation W and camera centre."""
    rot = quat_to_rotmat(view.pose.rotation)
    return torch.from_numpy(rot.T.copy()).to(DTYPE), torch.from_numpy(view.pose.center.copy()).to(DTYPE)


def _project_tensors(
    means: torch.Tensor,
    opacity_logits: torch.Tensor,
    log_scales: torch.Tensor,
    quats: torch.Tensor,
    color_logits: torch.Tensor,
    view: CameraView,
    cfg: TileConfig,
) -> ProjectedSplats:
    """Differentiable projection of raw parameter tensors."""
    k = view.intrinsics
    w2v, center = _view_transform(view)
    p_view = (means - center) @ w2v.T
    z_all = p_view[:, 2].detach()
    keep = torch.nonzero(z_all > cfg.near_clip).squeeze(1)

    # Stable sort of kept indices (ascending source index) by depth -> ties broken by index
    order = torch.sort(z_all[keep], stable=True).indices
    idx = keep[order]

    p = p_view[idx]
    x, y, z = p.unbind(-1)
    zeros = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([k.fx / z, zeros, -k.fx * x / (z * z)], dim=-1),
            torch.stack([zeros, k.fy / z, -k.fy * y / (z * z)], dim=-1),
        ],
        dim=-2,
    )
    sigma = covariance_3d(log_scales[idx], quats[idx])
    m = jac @ w2v
    cov2d = m @ sigma @ m.transpose(-1, -2)
    cov2d = 0.5 * (cov2d + cov2d.transpose(-1, -2)) + cfg.low_pass * torch.eye(2, dtype=DTYPE)

    means2d = torch.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], dim=-1)
    return ProjectedSplats(
        means2d=means2d,
        cov2d=cov2d,
        depths=z,
        opacities=torch.sigmoid(opacity_logits[idx]),
        colors=torch.sigmoid(color_logits[idx]),
        source_index=idx,
    )


def project_splats(scene: GaussianScene, view: CameraView, cfg: TileConfig = TileConfig()) -> ProjectedSplats:
    """
    Project every Gaussian in front of the near plane to screen space.

    Returns splats sorted by ascending view depth (ties by source index); Gaussians
    at or behind near_clip are dropped.
    """
    with torch.no_grad():
        return _project_tensors(
            scene.means, scene.opacity_logits, scene.log_scales, scene.quats, scene.color_logits, view, cfg
        )


def splat_radii(splats: ProjectedSplats, cfg: TileConfig) -> torch.Tensor:
    """
    Screen-space binning radius per splat (0 for splats that can never reach min_alpha).

    Outside sqrt(lambda_max) * sqrt(2 ln(alpha / min_alpha)) every contribution falls
    below min_alpha, so binning with at least that radius never drops a pixel the
    compositor would keep.
    """
    cov = splats.cov2d.detach()
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt(torch.clamp(mid * mid - (a * c - b * b), min=0.0))
    extent = torch.full_like(mid, cfg.sigma_cutoff)
    opac = splats.opacities.detach()
    if cfg.min_alpha > 0:
        ratio = opac / cfg.min_alpha
        visible = ratio >= 1.0
        extent = torch.maximum(extent, torch.sqrt(2.0 * torch.log(torch.clamp(ratio, min=1.0))))
        extent = torch.where(visible, extent, torch.zeros_like(extent))
    return torch.sqrt(lam_max) * extent


def _tile_bins(
    splats: ProjectedSplats, height: int, width: int, cfg: TileConfig
) -> List[Tuple[int, int, int, int, torch.Tensor]]:
    """(y0, y1, x0, x1, splat indices in sorted order) for every tile."""
    ts = cfg.tile_size
    n_ty, n_tx = math.ceil(height / ts), math.ceil(width / ts)
    radii = splat_radii(splats, cfg)
    mu = splats.means2d.detach()
    live = radii > 0
    # Inclusive tile ranges touched by each splat's bounding square
    tx_min = torch.floor((mu[:, 0] - radii) / ts)
    tx_max = torch.floor((mu[:, 0] + radii) / ts)
    ty_min = torch.floor((mu[:, 1] - radii) / ts)
    ty_max = torch.floor((mu[:, 1] + radii) / ts)

    bins = []
    for ty in range(n_ty):
        row_hit = live & (ty_min <= ty) & (ty_max >= ty)
        for tx in range(n_tx):
            hit = row_hit & (tx_min <= tx) & (tx_max >= tx)
            members = torch.nonzero(hit).squeeze(1)
            y0, x0 = ty * ts, tx * ts
            bins.append((y0, min(y0 + ts, height), x0, min(x0 + ts, width), members))
    return bins


def _conics(cov2d: torch.Tensor) -> torch.Tensor:
    """Inverse 2x2 covariances as (a, b, c) of [[a, b], [b, c]]."""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


def composite_pixels(
    pixels: torch.Tensor,
    means2d: torch.Tensor,
    conics: torch.Tensor,
    opacities: torch.Tensor,
    colors: torch.Tensor,
    depths: torch.Tensor,
    cfg: TileConfig,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Front-to-back compositing of N sorted splats over P pixels.

    Returns color (P, 3), depth (P,), opacity (P,).
    """
    n_pix = pixels.shape[0]
    if means2d.shape[0] == 0:
        zero = torch.zeros(n_pix, dtype=DTYPE)
        return torch.zeros(n_pix, 3, dtype=DTYPE), zero, zero.clone()

    dx = pixels[:, None, 0] - means2d[None, :, 0]
    dy = pixels[:, None, 1] - means2d[None, :, 1]
    power = -0.5 * (conics[None, :, 0] * dx * dx + 2.0 * conics[None, :, 1] * dx * dy + conics[None, :, 2] * dy * dy)
    alpha = torch.clamp(opacities[None, :] * torch.exp(power), max=cfg.max_alpha)
    alpha = torch.where(alpha >= cfg.min_alpha, alpha, torch.zeros_like(alpha))

    ones = torch.ones(n_pix, 1, dtype=DTYPE)
    trans = torch.cumprod(torch.cat([ones, 1.0 - alpha[:, :-1]], dim=1), dim=1)
    if cfg.early_termination:
        trans = torch.where(trans >= TERMINATION_T, trans, torch.zeros_like(trans))
    weights = alpha * trans
    return weights @ colors, weights @ depths, weights.sum(dim=1)


def _render_splats(splats: ProjectedSplats, view: CameraView, cfg: TileConfig) -> RenderOutput:
    height, width = view.height, view.width
    conics = _conics(splats.cov2d)
    image = torch.zeros(height, width, 3, dtype=DTYPE)
    depth = torch.zeros(height, width, dtype=DTYPE)
    alpha = torch.zeros(height, width, dtype=DTYPE)

    for y0, y1, x0, x1, members in _tile_bins(splats, height, width, cfg):
        if members.numel() == 0:
            continue
        vv, uu = torch.meshgrid(
            torch.arange(y0, y1, dtype=DTYPE), torch.arange(x0, x1, dtype=DTYPE), indexing="ij"
        )
        pixels = torch.stack([uu.reshape(-1), vv.reshape(-1)], dim=-1)
        color, dep, acc = composite_pixels(
            pixels,
            splats.means2d[members],
            conics[members],
            splats.opacities[members],
            splats.colors[members],
            splats.depths[members],
            cfg,
        )
        image[y0:y1, x0:x1] = color.reshape(y1 - y0, x1 - x0, 3)
        depth[y0:y1, x0:x1] = dep.reshape(y1 - y0, x1 - x0)
        alpha[y0:y1, x0:x1] = acc.reshape(y1 - y0, x1 - x0)

    if cfg.normalize_depth:
        depth = torch.where(alpha > 0, depth / torch.clamp(alpha, min=1e-12), torch.zeros_like(depth))
    return RenderOutput(image=image, depth=depth, alpha=alpha)


def rasterize(scene: GaussianScene, view: CameraView, cfg: TileConfig = TileConfig()) -> RenderOutput:
    """
    Render the geometry conditions (I_geo, D_geo, A_geo) of a scene, composited over black.

    Args:
        scene: Gaussian scene
        view: Camera
        cfg: Tile configuration

    Returns:
        RenderOutput with detached tensors
    """
    with torch.no_grad():
        splats = project_splats(scene, view, cfg)
        return _render_splats(splats, view, cfg)


def rasterize_differentiable(
    leaves: Dict[str, torch.Tensor], view: CameraView, cfg: TileConfig = TileConfig()
) -> RenderOutput:
    """Render from raw-parameter tensors, keeping the autograd graph."""
    splats = _project_tensors(
        leaves["means"], leaves["opacity_logits"], leaves["log_scales"], leaves["quats"], leaves["color_logits"],
        view, cfg,
    )
    return _render_splats(splats, view, cfg)


def render_with_graph(
    scene: GaussianScene, view: CameraView, cfg: TileConfig = TileConfig()
) -> Tuple[Dict[str, torch.Tensor], RenderOutput]:
    """Fresh leaf tensors for the scene parameters and a render that keeps its graph."""
    leaves = {name: t.detach().clone().requires_grad_(True) for name, t in scene.tensors().items()}
    with torch.enable_grad():
        render = rasterize_differentiable(leaves, view, cfg)
    return leaves, render


def backpropagate(
    leaves: Dict[str, torch.Tensor], render: RenderOutput, loss_grads: PixelGradients
) -> ParamGradients:
    """Vector-Jacobian product of a graph-carrying render with per-pixel loss gradients."""
    outputs, grad_outputs = [], []
    for name in ("image", "depth", "alpha"):
        out = getattr(render, name)
        if out.requires_grad:
            outputs.append(out)
            grad_outputs.append(getattr(loss_grads, name).to(DTYPE))
    if outputs:
        grads = torch.autograd.grad(outputs, list(leaves.values()), grad_outputs, allow_unused=True)
    else:
        grads = [None] * len(leaves)

    return ParamGradients(
        **{
            name: (g if g is not None else torch.zeros_like(leaves[name])).detach()
            for name, g in zip(leaves.keys(), grads)
        }
    )


def rasterize_backward(
    scene: GaussianScene,
    view: CameraView,
    cfg: TileConfig,
    loss_grads: PixelGradients,
) -> ParamGradients:
    """
    Chain per-pixel loss gradients back to all 14 raw parameters of every Gaussian.

    Gaussians culled or skipped in the forward pass receive exactly zero gradient.

    Raises:
        ShapeMismatch: if loss_grads do not match the render size
    """
    h, w = view.height, view.width
    expected = {"image": (h, w, 3), "depth": (h, w), "alpha": (h, w)}
    for name, shape in expected.items():
        got = tuple(getattr(loss_grads, name).shape)
        if got != shape:
            raise ShapeMismatch(f"dL/d{name} has shape {got}, render is {shape}")

    leaves, render = render_with_graph(scene, view, cfg)
    return backpropagate(leaves, render, loss_grads)


def zero_pixel_gradients(height: int, width: int) -> PixelGradients:
    return PixelGradients(
        image=torch.zeros(height, width, 3, dtype=DTYPE),
        depth=torch.zeros(height, width, dtype=DTYPE),
        alpha=torch.zeros(height, width, dtype=DTYPE),
    )


def max_abs_difference(a: RenderOutput, b: RenderOutput) -> float:
    """Largest absolute difference over all three channels."""
    return max(
        float((a.image - b.image).abs().max()),
        float((a.depth - b.depth).abs().max()),
        float((a.alpha - b.alpha).abs().max()),
    )
