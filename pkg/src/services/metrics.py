"""
Image Metrics
=============

PSNR and SSIM for on/off-trajectory evaluation, plus the per-shift report builder.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and data
range 1, evaluated at valid window positions only and averaged per channel.
The torch implementation is differentiable and also backs the perceptual term
of the reconstruction loss.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..exceptions import ImageTooSmall, LengthMismatch, ShapeMismatch
from ..models.metric_models import FrameMetric, MeanMetric, MetricReport

logger = logging.getLogger(__name__)

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
DATA_RANGE = 1.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _check_pair(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"Image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) in dB; identical images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _to_luma(x: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA_WEIGHTS, dtype=x.dtype)
    return (x * w).sum(dim=-1, keepdim=True)


def ssim_torch(a: torch.Tensor, b: torch.Tensor, luma: bool = False) -> torch.Tensor:
    """
    Differentiable SSIM of two (H, W, C) tensors.

    Raises:
        ShapeMismatch: if shapes differ
        ImageTooSmall: if either side is below the window size
    """
    _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[0], a.shape[1]
    if h < WINDOW_SIZE or w < WINDOW_SIZE:
        raise ImageTooSmall(f"SSIM needs at least {WINDOW_SIZE}x{WINDOW_SIZE} pixels, got {h}x{w}")
    if luma and a.shape[-1] == 3:
        a, b = _to_luma(a), _to_luma(b)

    channels = a.shape[-1]
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    window = gaussian_window(dtype=x.dtype).expand(channels, 1, WINDOW_SIZE, WINDOW_SIZE)

    def filt(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, groups=channels)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y

    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    # mean over window positions per channel, then over channels
    return ssim_map.mean(dim=(2, 3)).mean()


def ssim(a: np.ndarray, b: np.ndarray, luma: bool = False) -> float:
    """Mean structural similarity in [-1, 1]."""
    ta = torch.as_tensor(np.asarray(a, dtype=np.float64))
    tb = torch.as_tensor(np.asarray(b, dtype=np.float64))
    with torch.no_grad():
        value = float(ssim_torch(ta, tb, luma=luma))
    return min(1.0, max(-1.0, value))


def depth_mae(pred: np.ndarray, target: np.ndarray) -> Optional[float]:
    """Mean absolute depth error over pixels with finite positive target depth."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(pred, target)
    mask = np.isfinite(target) & (target > 0)
    if not mask.any():
        return None
    return float(np.mean(np.abs(pred[mask] - target[mask])))


@dataclass(frozen=True)
class EvalFrame:
    """One frame entering evaluation, keyed by (shift, frame index)."""

    shift_m: float
    frame: int
    image: np.ndarray
    depth: Optional[np.ndarray] = None


def _percentile(values: np.ndarray, q: float) -> float:
    return float(np.percentile(values, q, method="nearest"))


def evaluate_protocol(
    method_frames: Dict[float, Sequence[EvalFrame]],
    oracle_frames: Dict[float, Sequence[EvalFrame]],
    shifts: Sequence[float],
    stride: int = 1,
    luma: bool = False,
) -> List[MetricReport]:
    """
    Build one MetricReport per shift, in the order of `shifts`.

    Both inputs map a shift to frames ordered by frame index; every stride-th
    aligned pair is scored (stride 1 when the frames already come from
    subsampled evaluation trajectories).

    Raises:
        LengthMismatch: if a shift is missing or the two sides are not aligned
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    reports: List[MetricReport] = []
    for shift in shifts:
        if shift not in method_frames or shift not in oracle_frames:
            raise LengthMismatch(f"No frames for shift {shift} m")
        method = list(method_frames[shift])[::stride]
        oracle = list(oracle_frames[shift])[::stride]
        if len(method) != len(oracle):
            raise LengthMismatch(f"Shift {shift} m: {len(method)} method frames vs {len(oracle)} oracle frames")

        rows: List[FrameMetric] = []
        for m, o in zip(method, oracle):
            if m.frame != o.frame or m.shift_m != o.shift_m or m.shift_m != shift:
                raise LengthMismatch(
                    f"Misaligned pair at shift {shift} m: method ({m.shift_m}, {m.frame}) vs oracle ({o.shift_m}, {o.frame})"
                )
            mae = depth_mae(m.depth, o.depth) if m.depth is not None and o.depth is not None else None
            rows.append(FrameMetric(idx=m.frame, psnr=psnr(m.image, o.image), ssim=ssim(m.image, o.image, luma), depth_mae=mae))

        reports.append(MetricReport(shift_m=shift, frames=rows, mean=_mean_row(rows), count=len(rows)))
        logger.debug(f"Shift {shift:+.1f} m: {len(rows)} frames, mean PSNR {reports[-1].mean.psnr:.2f} dB")
    return reports


def _mean_row(rows: Sequence[FrameMetric]) -> MeanMetric:
    if not rows:
        return MeanMetric(psnr=math.inf, ssim=1.0)
    p = np.array([r.psnr for r in rows], dtype=np.float64)
    maes = [r.depth_mae for r in rows if r.depth_mae is not None]
    return MeanMetric(
        psnr=float(np.mean(p)),
        ssim=float(np.mean([r.ssim for r in rows])),
        depth_mae=float(np.mean(maes)) if maes else None,
        psnr_p10=_percentile(p, 10),
        psnr_p50=_percentile(p, 50),
        psnr_p90=_percentile(p, 90),
    )
