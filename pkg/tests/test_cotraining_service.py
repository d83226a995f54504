"""
Tests for Co-Training Service
=============================
"""

import copy

import numpy as np
import pytest
import torch

from src.config.settings import derive_seed
from src.exceptions import EmptyTrajectory, FreezeViolation
from src.models.camera_models import Trajectory
from src.models.config_models import CoTrainConfig
from src.services.cotraining_service import (
    ShiftReference,
    make_depth_oracle,
    run_cotraining,
    sample_offtraj_views,
    step1_generation_guided_reconstruction,
    step2_reconstruction_guided_generation,
)
from src.services.diffusion_refiner import RefinerTrainer, build_denoiser
from src.services.gaussian_model import unproject_init
from src.services.image_warping import warp_condition, warp_frame
from src.services.pipeline_service import FIT_CHECKPOINT
from src.services.rasterizer import composite_background, rasterize

FAST = CoTrainConfig(
    rounds=2,
    step1_viewpoints_per_round=2,
    lateral_range=1.0,
    yaw_jitter=3.0,
    recon_steps_per_round=2,
    gen_steps_per_round=2,
    report_shifts=(0.0, 1.0, -1.0, 2.0, -2.0),
    report_stride=2,
)


@pytest.fixture
def setup(small_dataset, tiny_refiner_cfg):
    traj, frames = small_dataset
    scene = unproject_init(frames, 4)
    refiner = build_denoiser(tiny_refiner_cfg, seed=0)
    return traj, frames, scene, refiner


class TestSampleOfftrajViews:
    """Random viewpoints around the recorded trajectory."""

    def test_count_and_extent(self, small_dataset):
        """n views, each within lateral_range of a recorded camera centre."""
        traj, _ = small_dataset
        views = sample_offtraj_views(traj, 20, FAST, np.random.default_rng(0))
        assert len(views) == 20
        centers = np.array([v.pose.center for v in traj.views])
        for view in views:
            nearest = np.min(np.linalg.norm(centers - view.pose.center, axis=1))
            assert nearest <= FAST.lateral_range + 1e-9

    def test_zero_jitter_reproduces_recorded_views(self, small_dataset):
        """With no offset or yaw every sample is a recorded view."""
        traj, _ = small_dataset
        cfg = FAST.model_copy(update={"lateral_range": 0.0, "yaw_jitter": 0.0})
        for view in sample_offtraj_views(traj, 6, cfg, np.random.default_rng(1)):
            assert view in traj.views

    def test_seeded(self, small_dataset):
        """The same generator seed gives the same views."""
        traj, _ = small_dataset
        a = sample_offtraj_views(traj, 4, FAST, np.random.default_rng(2))
        b = sample_offtraj_views(traj, 4, FAST, np.random.default_rng(2))
        assert a == b

    def test_invalid_arguments(self, small_dataset):
        """n < 1 and empty trajectories are rejected."""
        traj, _ = small_dataset
        with pytest.raises(ValueError):
            sample_offtraj_views(traj, 0, FAST, np.random.default_rng(0))
        with pytest.raises(EmptyTrajectory):
            sample_offtraj_views(Trajectory(views=[]), 1, FAST, np.random.default_rng(0))


class TestStep1:
    """Generation-guided reconstruction."""

    def test_identity_refiner_is_a_fixed_point(self, setup, tiny_refiner_cfg, small_spec):
        """If refinement returns the render itself, the scene has nothing to learn."""
        traj, frames, scene, refiner = setup
        bg = small_spec.background_color
        cfg = FAST.model_copy(update={"mix_real_frames": False})

        def identity(cond, seed):
            return composite_background(cond, bg).numpy()

        updated, labels, breakdown = step1_generation_guided_reconstruction(
            scene, refiner, traj, frames, cfg, refiner_cfg=tiny_refiner_cfg, background=bg, refine_fn=identity
        )
        assert breakdown.total < 1e-8
        assert float((updated.raw() - scene.raw()).abs().max()) < 1e-5

    def test_labels_and_provenance(self, setup, tiny_refiner_cfg, small_spec):
        """One label per sampled view, traceable to its render and seed."""
        traj, frames, scene, refiner = setup
        oracle = make_depth_oracle(small_spec)
        _, labels, _ = step1_generation_guided_reconstruction(
            scene, refiner, traj, frames, FAST, refiner_cfg=tiny_refiner_cfg, round_index=3, depth_oracle=oracle
        )
        assert len(labels) == FAST.step1_viewpoints_per_round
        seeds = {label.provenance.refine_seed for label in labels}
        assert len(seeds) == len(labels)
        for label in labels:
            assert label.provenance.round == 3
            assert label.provenance.depth_source == "oracle"
            assert label.provenance.source_render_hash == rasterize(scene, label.view).checksum()
            assert label.image.shape == (32, 32, 3)
            assert 0.0 <= label.image.min() and label.image.max() <= 1.0
            np.testing.assert_array_equal(label.depth, oracle(label.view))

    def test_refiner_stays_frozen(self, setup, tiny_refiner_cfg):
        """Step 1 never touches the refiner weights."""
        traj, frames, scene, refiner = setup
        before = refiner.checksum()
        updated, _, _ = step1_generation_guided_reconstruction(scene, refiner, traj, frames, FAST, refiner_cfg=tiny_refiner_cfg)
        assert refiner.checksum() == before
        assert updated.checksum() != scene.checksum()

    def test_mutating_refiner_raises(self, setup, tiny_refiner_cfg):
        """A refine hook that alters the refiner breaks the freeze."""
        traj, frames, scene, refiner = setup

        def tamper(cond, seed):
            with torch.no_grad():
                refiner.denoiser[0].bias.add_(1.0)
            return np.zeros(tuple(cond.image.shape))

        with pytest.raises(FreezeViolation):
            step1_generation_guided_reconstruction(scene, refiner, traj, frames, FAST, refiner_cfg=tiny_refiner_cfg, refine_fn=tamper)

    def test_deterministic(self, setup, tiny_refiner_cfg):
        """Same seed and round give the same updated scene."""
        traj, frames, scene, refiner = setup
        a, _, _ = step1_generation_guided_reconstruction(scene, refiner, traj, frames, FAST, refiner_cfg=tiny_refiner_cfg)
        b, _, _ = step1_generation_guided_reconstruction(scene, refiner, traj, frames, FAST, refiner_cfg=tiny_refiner_cfg)
        assert a.checksum() == b.checksum()

    def test_warp_condition(self, setup, tiny_refiner_cfg):
        """With the warp condition, labels come from warped recorded frames."""
        traj, frames, scene, refiner = setup
        warp_cfg = tiny_refiner_cfg.model_copy(update={"condition": "warp"})
        _, labels, _ = step1_generation_guided_reconstruction(scene, refiner, traj, frames, FAST, refiner_cfg=warp_cfg)
        for label in labels:
            assert label.provenance.source_render_hash == warp_condition(frames, label.view).checksum()


class TestStep2:
    """Reconstruction-guided generation."""

    def test_zero_steps_keeps_refiner(self, setup):
        """With no generation steps the refiner is returned unchanged."""
        traj, frames, scene, refiner = setup
        before = refiner.checksum()
        cfg = FAST.model_copy(update={"gen_steps_per_round": 0})
        out, loss, hashes = step2_reconstruction_guided_generation(scene, refiner, traj, frames, cfg)
        assert out is refiner and out.checksum() == before
        assert loss is None
        assert hashes == [rasterize(scene, f.view).checksum() for f in frames]

    def test_trains_refiner_with_scene_frozen(self, setup):
        """The refiner moves while the scene stays bit-identical."""
        traj, frames, scene, refiner = setup
        scene_before, refiner_before = scene.checksum(), refiner.checksum()
        out, loss, hashes = step2_reconstruction_guided_generation(scene, refiner, traj, frames, FAST)
        assert scene.checksum() == scene_before
        assert out.checksum() != refiner_before
        assert loss is not None and np.isfinite(loss)
        assert len(hashes) == len(frames)

    def test_uses_refiner_config(self, setup, tiny_refiner_cfg):
        """Without a trainer, Step 2 trains with the refiner's own config."""
        traj, frames, scene, refiner = setup
        reference = copy.deepcopy(refiner)
        out, loss, _ = step2_reconstruction_guided_generation(
            scene, refiner, traj, frames, FAST, refiner_cfg=tiny_refiner_cfg
        )
        trainer = RefinerTrainer(reference, tiny_refiner_cfg, seed=derive_seed(FAST.seed, "step2-0"))
        assert trainer.schedule.steps == tiny_refiner_cfg.diffusion_steps
        pairs = [(rasterize(scene, f.view), f.image) for f in frames]
        expected = trainer.fit(pairs, FAST.gen_steps_per_round, progress=False)
        assert out.checksum() == reference.checksum()
        assert loss == pytest.approx(float(np.mean(expected)))

    def test_warp_condition_excludes_own_frame(self, setup, tiny_refiner_cfg):
        """Each recorded view is conditioned on a different recorded frame warped into it."""
        traj, frames, scene, refiner = setup
        warp_cfg = tiny_refiner_cfg.model_copy(update={"condition": "warp"})
        cfg = FAST.model_copy(update={"gen_steps_per_round": 0})
        _, _, hashes = step2_reconstruction_guided_generation(scene, refiner, traj, frames, cfg, refiner_cfg=warp_cfg)
        assert hashes == [warp_condition(frames, f.view, exclude=i).checksum() for i, f in enumerate(frames)]
        assert hashes[0] != warp_frame(frames[0], frames[0].view).checksum()


class TestRunCotraining:
    """The alternating loop."""

    def test_zero_rounds(self, setup):
        """rounds = 0 returns the inputs untouched."""
        traj, frames, scene, refiner = setup
        cfg = FAST.model_copy(update={"rounds": 0})
        out_scene, out_refiner, reports = run_cotraining(scene, refiner, traj, frames, cfg, progress=False)
        assert out_scene is scene and out_refiner is refiner
        assert reports == []

    def test_reports(self, setup, tiny_refiner_cfg, small_spec):
        """One report per round with PSNR at the report shifts and both losses."""
        traj, frames, scene, refiner = setup
        sink = []
        _, _, reports = run_cotraining(
            scene, refiner, traj, frames, FAST, refiner_cfg=tiny_refiner_cfg,
            background=small_spec.background_color, scene_spec=small_spec,
            label_sink=lambda r, labels: sink.append((r, len(labels))), progress=False,
        )
        assert [r.round for r in reports] == [0, 1]
        assert sink == [(0, 2), (1, 2)]
        for report in reports:
            assert report.psnr_0m is not None and report.psnr_1m is not None and report.psnr_2m is not None
            assert report.recon_loss is not None and report.gen_loss is not None
            assert len(report.condition_hashes) == len(frames)
        assert reports[0].scene_hash != reports[1].scene_hash
        line = reports[0].model_dump(mode="json")
        assert set(line["recon_loss"]) == {"mse", "perceptual", "depth", "total"}

    def test_deterministic(self, small_dataset, tiny_refiner_cfg):
        """Two runs with the same seeds produce identical hashes."""
        traj, frames = small_dataset
        runs = []
        for _ in range(2):
            _, _, reports = run_cotraining(
                unproject_init(frames, 4), build_denoiser(tiny_refiner_cfg, seed=0), traj, frames, FAST,
                refiner_cfg=tiny_refiner_cfg, progress=False,
            )
            runs.append([(r.scene_hash, r.refiner_hash) for r in reports])
        assert runs[0] == runs[1]

    def test_recon_only_freezes_refiner(self, setup, tiny_refiner_cfg):
        """recon_only never trains the refiner."""
        traj, frames, scene, refiner = setup
        before = refiner.checksum()
        cfg = FAST.model_copy(update={"mode": "recon_only"})
        _, out_refiner, reports = run_cotraining(scene, refiner, traj, frames, cfg, refiner_cfg=tiny_refiner_cfg, progress=False)
        assert out_refiner.checksum() == before
        assert all(r.gen_loss is None and r.refiner_hash == before for r in reports)

    def test_gen_only_freezes_scene(self, setup, tiny_refiner_cfg):
        """gen_only never updates the scene."""
        traj, frames, scene, refiner = setup
        cfg = FAST.model_copy(update={"mode": "gen_only"})
        out_scene, _, reports = run_cotraining(scene, refiner, traj, frames, cfg, refiner_cfg=tiny_refiner_cfg, progress=False)
        assert out_scene.checksum() == scene.checksum()
        assert all(r.recon_loss is None and r.scene_hash == scene.checksum() for r in reports)


class TestStreetRound:
    """One reconstruction round on the default street run."""

    @pytest.mark.slow
    def test_step1_does_not_regress(self, street_pipeline):
        """PSNR at 2 m drops by at most 0.1 dB and on-trajectory PSNR moves by at most 0.3 dB."""
        c = street_pipeline.config
        spec, trajectories, frames = street_pipeline.load_dataset()
        scene = street_pipeline.store.read_scene(FIT_CHECKPOINT)
        refiner = street_pipeline.load_refiner()
        cfg = c.cotrain.model_copy(update={"rounds": 1, "mode": "recon_only"})
        reference = ShiftReference(spec, trajectories[0], cfg.report_shifts, cfg.report_stride)
        before = reference.measure(scene, c.tile, spec.background_color)

        _, _, reports = run_cotraining(
            scene, refiner, trajectories[0], frames, cfg, c.tile, c.refiner, c.recon.learning_rates,
            spec.background_color, spec, progress=False,
        )
        after = reports[0]
        assert after.psnr_2m >= ShiftReference.by_magnitude(before, 2.0) - 0.1
        assert abs(after.psnr_0m - ShiftReference.by_magnitude(before, 0.0)) <= 0.3
