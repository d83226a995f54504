"""
Tests for Image Metrics
=======================
"""

import json
import math

import numpy as np
import pytest
import torch

from src.exceptions import ImageTooSmall, LengthMismatch, ShapeMismatch
from src.services.metrics import (
    K1,
    EvalFrame,
    depth_mae,
    evaluate_protocol,
    psnr,
    ssim,
    ssim_torch,
)


def random_image(seed: int, h: int = 32, w: int = 32) -> np.ndarray:
    return np.random.default_rng(seed).uniform(size=(h, w, 3))


def frames_for(shift: float, images, depths=None):
    depths = depths or [None] * len(images)
    return [EvalFrame(shift_m=shift, frame=2 * i, image=img, depth=d) for i, (img, d) in enumerate(zip(images, depths))]


class TestPsnr:
    """Peak signal-to-noise ratio."""

    def test_identical_is_infinite(self):
        """Identical images give +inf."""
        img = random_image(0)
        assert psnr(img, img) == math.inf

    def test_known_mse(self):
        """A uniform 0.1 offset is MSE 0.01, i.e. 20 dB."""
        img = np.full((8, 8, 3), 0.3)
        assert psnr(img, img + 0.1) == pytest.approx(20.0)

    def test_matches_formula_and_is_symmetric(self):
        """PSNR = 10 log10(1 / MSE) in either argument order."""
        a, b = random_image(1), random_image(2)
        expected = 10.0 * math.log10(1.0 / np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(expected)
        assert psnr(b, a) == psnr(a, b)

    def test_shape_mismatch(self):
        """Images of different shapes are rejected."""
        with pytest.raises(ShapeMismatch):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSsim:
    """Structural similarity."""

    def test_identity(self):
        """An image is perfectly similar to itself."""
        img = random_image(3)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_negative_is_dissimilar(self):
        """The photographic negative scores well below 0.5."""
        img = random_image(4)
        assert ssim(img, 1.0 - img) < 0.5

    def test_constant_images_closed_form(self):
        """Flat images reduce to the luminance term."""
        a = np.full((16, 16, 3), 0.2)
        b = np.full((16, 16, 3), 0.6)
        expected = (2 * 0.2 * 0.6 + K1**2) / (0.2**2 + 0.6**2 + K1**2)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-9)

    def test_translation_lowers_score(self):
        """Shifting a textured image lowers SSIM below 1."""
        img = random_image(5, 40, 40)
        shifted = np.roll(img, 3, axis=1)
        assert ssim(img, shifted) < 0.9

    def test_range_and_symmetry(self):
        """SSIM lies in [-1, 1] and is symmetric."""
        a, b = random_image(6), random_image(7)
        assert -1.0 <= ssim(a, b) <= 1.0
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small(self):
        """Images under the 11x11 window raise ImageTooSmall."""
        with pytest.raises(ImageTooSmall):
            ssim(np.zeros((10, 32, 3)), np.zeros((10, 32, 3)))

    def test_luma(self):
        """Luma SSIM of identical images is 1 and grey images match RGB SSIM."""
        img = random_image(8)
        assert ssim(img, img, luma=True) == pytest.approx(1.0, abs=1e-12)
        grey_a = np.repeat(random_image(9)[..., :1], 3, axis=2)
        grey_b = np.repeat(random_image(10)[..., :1], 3, axis=2)
        assert ssim(grey_a, grey_b, luma=True) == pytest.approx(ssim(grey_a, grey_b), abs=1e-9)

    def test_differentiable(self):
        """The torch version carries gradients."""
        a = torch.from_numpy(random_image(11)).requires_grad_(True)
        b = torch.from_numpy(random_image(12))
        ssim_torch(a, b).backward()
        assert a.grad is not None and torch.isfinite(a.grad).all()
        assert torch.count_nonzero(a.grad) > 0


class TestDepthMae:
    """Depth error over valid pixels."""

    def test_masks_invalid_targets(self):
        """Infinite and non-positive targets are ignored."""
        pred = np.array([[1.0, 5.0, 3.0]])
        target = np.array([[2.0, np.inf, 0.0]])
        assert depth_mae(pred, target) == pytest.approx(1.0)

    def test_no_valid_pixels(self):
        """No valid target pixels gives None."""
        assert depth_mae(np.ones((2, 2)), np.full((2, 2), np.inf)) is None


class TestEvaluateProtocol:
    """Per-shift metric reports."""

    def test_identity_reports(self):
        """Scoring the oracle against itself gives infinite PSNR and SSIM 1."""
        shifts = (1.0, -1.0, 2.0, -2.0, 4.0)
        images = [random_image(i, 16, 16) for i in range(3)]
        oracle = {s: frames_for(s, images) for s in shifts}
        reports = evaluate_protocol(oracle, oracle, shifts)
        assert [r.shift_m for r in reports] == list(shifts)
        for report in reports:
            assert report.count == 3
            assert report.mean.psnr == math.inf
            assert report.mean.ssim == pytest.approx(1.0)
            assert [f.idx for f in report.frames] == [0, 2, 4]

    def test_stride(self):
        """Every stride-th aligned pair is scored."""
        images = [random_image(i, 16, 16) for i in range(5)]
        data = {1.0: frames_for(1.0, images)}
        (report,) = evaluate_protocol(data, data, [1.0], stride=2)
        assert [f.idx for f in report.frames] == [0, 4, 8]

    def test_misaligned_frames(self):
        """Frame indices must agree pairwise."""
        images = [random_image(i, 16, 16) for i in range(2)]
        method = {1.0: frames_for(1.0, images)}
        oracle = {1.0: [EvalFrame(1.0, 0, images[0]), EvalFrame(1.0, 3, images[1])]}
        with pytest.raises(LengthMismatch):
            evaluate_protocol(method, oracle, [1.0])

    def test_length_and_missing_shift(self):
        """Different lengths or a missing shift raise LengthMismatch."""
        images = [random_image(i, 16, 16) for i in range(3)]
        method = {1.0: frames_for(1.0, images[:2])}
        oracle = {1.0: frames_for(1.0, images)}
        with pytest.raises(LengthMismatch):
            evaluate_protocol(method, oracle, [1.0])
        with pytest.raises(LengthMismatch):
            evaluate_protocol(oracle, oracle, [1.0, 2.0])

    def test_mean_and_percentiles(self):
        """Means and nearest-rank percentiles over the per-frame values."""
        base = np.full((16, 16, 3), 0.5)
        offsets = [0.1, 0.01, 0.001]
        method = {2.0: frames_for(2.0, [base + o for o in offsets], [np.full((16, 16), 2.0)] * 3)}
        oracle = {2.0: frames_for(2.0, [base] * 3, [np.full((16, 16), 1.5)] * 3)}
        (report,) = evaluate_protocol(method, oracle, [2.0])
        values = [f.psnr for f in report.frames]
        np.testing.assert_allclose(values, [20.0, 40.0, 60.0])
        assert report.mean.psnr == pytest.approx(40.0)
        assert report.mean.psnr_p10 == pytest.approx(20.0)
        assert report.mean.psnr_p50 == pytest.approx(40.0)
        assert report.mean.psnr_p90 == pytest.approx(60.0)
        assert report.mean.depth_mae == pytest.approx(0.5)

    def test_infinite_psnr_serialises_as_string(self):
        """JSON reports write infinite PSNR as "inf"."""
        images = [random_image(0, 16, 16)]
        data = {0.0: frames_for(0.0, images)}
        (report,) = evaluate_protocol(data, data, [0.0])
        payload = json.loads(report.model_dump_json())
        assert payload["mean"]["psnr"] == "inf"
        assert payload["frames"][0]["psnr"] == "inf"
