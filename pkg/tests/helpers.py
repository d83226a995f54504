"""
Test Helpers
============

Random scene builders and finite-difference utilities shared by several test modules.
"""

from typing import Callable, Sequence

import numpy as np
import torch

from src.models.config_models import RunConfig
from src.services.gaussian_model import GaussianScene
from src.services.pipeline_service import PipelineService
from src.services.storage_service import ArtifactStore


def random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_raw(
    rng: np.random.Generator,
    n: int,
    z_range=(2.0, 8.0),
    xy_range=1.5,
    log_scale_range=(np.log(0.05), np.log(0.4)),
    opacity_logit_std=1.5,
) -> np.ndarray:
    """(n, 14) raw parameters of Gaussians in front of an identity camera."""
    raw = np.zeros((n, 14))
    raw[:, 0:2] = rng.uniform(-xy_range, xy_range, size=(n, 2))
    raw[:, 2] = rng.uniform(*z_range, size=n)
    raw[:, 3] = rng.normal(0.0, opacity_logit_std, size=n)
    raw[:, 4:7] = rng.uniform(*log_scale_range, size=(n, 3))
    raw[:, 7:11] = random_quats(rng, n)
    raw[:, 11:14] = rng.normal(0.0, 1.0, size=(n, 3))
    return raw


def random_scene(rng: np.random.Generator, n: int, **kwargs) -> GaussianScene:
    return GaussianScene.from_raw(torch.from_numpy(random_raw(rng, n, **kwargs)))


def fd_agreement(analytic: Sequence[float], numeric: Sequence[float], floor: float = 1e-8, rtol: float = 1e-2) -> float:
    """Fraction of entries with |grad| > floor whose relative error is within rtol."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mask = (np.abs(a) > floor) | (np.abs(n) > floor)
    if not mask.any():
        return 1.0
    rel = np.abs(a[mask] - n[mask]) / np.maximum(np.abs(a[mask]), np.abs(n[mask]))
    return float(np.mean(rel <= rtol))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, index, eps: float = 1e-6) -> float:
    plus = x.copy()
    minus = x.copy()
    plus[index] += eps
    minus[index] -= eps
    return (f(plus) - f(minus)) / (2.0 * eps)


def prepared_pipeline(workdir, config: RunConfig = RunConfig()) -> PipelineService:
    """Run scenegen, fit and refine-train in an existing `workdir` and return the service."""
    service = PipelineService(config, ArtifactStore(workdir), progress=False)
    service.scenegen()
    service.fit()
    service.refine_train()
    return service
