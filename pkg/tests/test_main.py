"""
Tests for the Command Line Entry Point
======================================

End-to-end runs of every stage on a tiny configuration.
"""

import pytest
import torch

from src.config.settings import load_run_config
from src.main import EXIT_BAD_ARGS, EXIT_IO, EXIT_OK, main
from src.services.gaussian_model import unproject_init
from src.services.pipeline_service import FIT_CHECKPOINT, PipelineService
from src.services.storage_service import ArtifactStore, decode_scene, encode_scene

TINY = [
    "width=16",
    "height=16",
    "frames=3",
    "recon.init_stride=4",
    "recon.steps=2",
    "refiner.diffusion_steps=10",
    "refiner.latent_channels=2",
    "refiner.hidden_channels=4",
    "refiner.encoder_channels=2",
    "refiner.batch_size=2",
    "refiner.train_steps=1",
    "refiner.sample_steps=1",
    "refiner.degrade_steps=[1]",
    "cotrain.step1_viewpoints_per_round=1",
    "cotrain.recon_steps_per_round=1",
    "cotrain.gen_steps_per_round=1",
    "cotrain.report_shifts=[0.0, 1.0]",
]


def cli(workdir, *args) -> int:
    flags = ["--workdir", str(workdir), "--no-progress", "--log-level", "WARNING"]
    for item in TINY:
        flags += ["--set", item]
    return main([*flags, *args])


@pytest.fixture
def dataset_dir(tmp_path):
    assert cli(tmp_path, "scenegen", "--preset", "open", "--seed", "3") == EXIT_OK
    return tmp_path


class TestScenegen:
    """Dataset generation."""

    def test_writes_dataset(self, dataset_dir):
        """Scene, trajectory, frames, depth and a verifiable manifest."""
        store = ArtifactStore(dataset_dir)
        doc = store.verify_manifest("manifest.json")
        assert doc["meta"]["frames"] == 3
        for rel in ("scene.json", "trajectory.json", "frames/cam0_0002.ppm", "depth/cam0_0002.fgdp"):
            assert store.exists(rel)
        assert len(store.read_json("trajectory.json")["views"]) == 3

    def test_rerun_is_identical(self, dataset_dir):
        """Re-running with the same arguments reproduces the manifest byte for byte."""
        first = (dataset_dir / "manifest.json").read_bytes()
        assert cli(dataset_dir, "scenegen", "--preset", "open", "--seed", "3") == EXIT_OK
        assert (dataset_dir / "manifest.json").read_bytes() == first

    def test_camera_rig(self, tmp_path):
        """Several cameras get their own trajectory files."""
        assert cli(tmp_path, "scenegen", "--preset", "corridor", "--cameras", "2") == EXIT_OK
        assert (tmp_path / "trajectory_cam1.json").exists()
        assert (tmp_path / "frames" / "cam1_0000.ppm").exists()

    def test_missing_workdir(self, tmp_path):
        """A missing working directory is an I/O failure."""
        assert cli(tmp_path / "absent", "scenegen") == EXIT_IO

    def test_unknown_preset(self, tmp_path):
        """Unknown presets are bad arguments."""
        assert cli(tmp_path, "scenegen", "--preset", "forest") == EXIT_BAD_ARGS


class TestArguments:
    """Argument and configuration errors."""

    def test_no_command(self, tmp_path):
        """A subcommand is required."""
        assert main(["--workdir", str(tmp_path)]) == EXIT_BAD_ARGS

    def test_unknown_command(self, tmp_path):
        """Unknown subcommands are rejected."""
        assert main(["--workdir", str(tmp_path), "train-everything"]) == EXIT_BAD_ARGS

    def test_invalid_resolution(self, tmp_path):
        """Resolutions that are not tile multiples are rejected."""
        assert cli(tmp_path, "--set", "width=40", "scenegen") == EXIT_BAD_ARGS

    def test_malformed_override(self, tmp_path):
        """--set needs key=value."""
        assert cli(tmp_path, "--set", "width", "scenegen") == EXIT_BAD_ARGS


class TestPipeline:
    """Stages composed through the working directory."""

    def test_fit_without_dataset(self, tmp_path):
        """Fitting an empty workdir fails on the missing manifest."""
        assert cli(tmp_path, "fit") == EXIT_IO

    def test_fit_detects_corrupt_dataset(self, dataset_dir):
        """A tampered frame fails manifest verification."""
        (dataset_dir / "frames" / "cam0_0001.ppm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
        assert cli(dataset_dir, "fit") == EXIT_IO

    def test_report_without_reports(self, dataset_dir):
        """Nothing to report is an I/O failure."""
        assert cli(dataset_dir, "report") == EXIT_IO

    def test_zero_step_fit(self, dataset_dir):
        """--steps 0 writes the initializer as the checkpoint."""
        assert cli(dataset_dir, "fit", "--steps", "0") == EXIT_OK
        store = ArtifactStore(dataset_dir)
        service = PipelineService(load_run_config(overrides=TINY), store, progress=False)
        _, _, frames = service.load_dataset()
        # FGGS stores float32
        expected = decode_scene(encode_scene(unproject_init(frames, 4)))
        loaded = store.read_scene(FIT_CHECKPOINT)
        assert torch.equal(loaded.means, expected.means)
        assert torch.equal(loaded.color_logits, expected.color_logits)
        assert store.exists("fit_manifest.json")

    def test_full_run(self, dataset_dir, capsys):
        """fit, refine-train, eval, cotrain, eval and report all succeed."""
        assert cli(dataset_dir, "fit") == EXIT_OK
        assert cli(dataset_dir, "refine-train") == EXIT_OK
        assert cli(dataset_dir, "eval", "--shifts", "1", "-1", "--steps", "1", "--stage", "fit") == EXIT_OK
        assert cli(dataset_dir, "cotrain", "--rounds", "1", "--dump") == EXIT_OK
        assert cli(dataset_dir, "eval", "--shifts", "0", "--dump") == EXIT_OK
        assert cli(dataset_dir, "report") == EXIT_OK

        store = ArtifactStore(dataset_dir)
        raw = store.read_json("reports/eval_fit_raw.json")
        assert [r["shift_m"] for r in raw] == [1.0, -1.0]
        assert store.exists("reports/eval_fit_refined.json")
        assert store.exists("reports/eval_cotrain_raw.json")
        assert len(store.read_jsonl("reports/rounds.jsonl")) == 1
        assert store.exists("pseudo_labels/round00_000.ppm")
        assert store.exists("eval_frames/cotrain/geometry/shift+0.0_0000_depth.fgdp")
        summary = store.read_json("summary.json")
        assert set(summary["eval"]) == {"fit_raw", "fit_refined", "cotrain_raw", "cotrain_refined"}
        assert "shift_m" in capsys.readouterr().out

    def test_warp_condition_run(self, dataset_dir):
        """The refiner can be trained and used on warped recorded frames."""
        warp = ("--set", "refiner.condition=warp")
        assert cli(dataset_dir, *warp, "fit") == EXIT_OK
        assert cli(dataset_dir, *warp, "refine-train") == EXIT_OK
        assert cli(dataset_dir, *warp, "cotrain", "--rounds", "1") == EXIT_OK
        assert cli(dataset_dir, *warp, "eval", "--shifts", "1") == EXIT_OK
        store = ArtifactStore(dataset_dir)
        assert store.read_json("refine_manifest.json")["meta"]["pairs"] == 3
        assert store.exists("reports/eval_cotrain_refined.json")

    def test_reruns_are_byte_identical(self, tmp_path):
        """Two workdirs driven with the same commands hold identical reports and manifests."""
        outputs = []
        for name in ("a", "b"):
            workdir = tmp_path / name
            workdir.mkdir()
            assert cli(workdir, "scenegen", "--seed", "5") == EXIT_OK
            assert cli(workdir, "fit") == EXIT_OK
            assert cli(workdir, "refine-train") == EXIT_OK
            assert cli(workdir, "cotrain", "--rounds", "1") == EXIT_OK
            assert cli(workdir, "eval", "--shifts", "1", "-1") == EXIT_OK
            files = sorted(
                p.relative_to(workdir).as_posix() for p in workdir.rglob("*") if p.suffix in (".json", ".jsonl")
            )
            outputs.append({rel: (workdir / rel).read_bytes() for rel in files})
        assert list(outputs[0]) == list(outputs[1])
        assert "reports/eval_cotrain_refined.json" in outputs[0]
        for rel, data in outputs[0].items():
            assert data == outputs[1][rel], rel
