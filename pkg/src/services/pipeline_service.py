"""
Pipeline Service - Main Orchestrator
====================================

Runs the stages of a synthesis experiment against one working directory:
1. scenegen: procedural scene, trajectories, ray-traced frames, dataset manifest
2. fit: stage-one Gaussian reconstruction on the recorded trajectory
3. refine_train: stage-one refiner training on degraded renders
4. cotrain: closed-loop co-training rounds
5. evaluate: lateral-shift protocol for raw and refined renders
6. report: merge reports into a summary table

Stages communicate through files only.
"""

import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

from ..config.settings import derive_seed
from ..exceptions import IoError
from ..models.camera_models import Intrinsics, Trajectory
from ..models.config_models import RunConfig
from ..models.metric_models import MetricReport
from ..models.scene_models import GroundTruthFrame, SceneSpec
from ..models.training_models import PseudoLabel, RoundReport
from .camera_engine import build_eval_trajectories, make_camera_rig, trajectory_from_records, trajectory_to_records
from .cotraining_service import run_cotraining
from .diffusion_refiner import GeometryAwareDenoiser, NoiseSchedule, RefinerTrainer, build_denoiser, refine_many
from .image_warping import warp_condition
from .metrics import EvalFrame, evaluate_protocol
from .rasterizer import RenderOutput, composite_background, rasterize
from .raytracer import raytrace, render_dataset
from .reconstruction_service import build_degraded_pairs, fit_scene
from .scene_generator import GROUND_Y, generate_scene
from .storage_service import ArtifactStore

logger = logging.getLogger(__name__)

DATASET_MANIFEST = "manifest.json"
SCENE_FILE = "scene.json"
FIT_CHECKPOINT = "checkpoints/scene_fit.fggs"
COTRAIN_CHECKPOINT = "checkpoints/scene_cotrain.fggs"
REFINER_CHECKPOINT = "checkpoints/refiner.fgdn"
COTRAIN_REFINER_CHECKPOINT = "checkpoints/refiner_cotrain.fgdn"
ROUNDS_FILE = "reports/rounds.jsonl"
SUMMARY_FILE = "summary.json"


def trajectory_file(camera: int) -> str:
    return "trajectory.json" if camera == 0 else f"trajectory_cam{camera}.json"


def frame_stem(camera: int, index: int) -> str:
    return f"cam{camera}_{index:04d}"


class PipelineService:
    """
    Stage runner bound to one RunConfig and one ArtifactStore.
    """

    def __init__(self, config: RunConfig, store: ArtifactStore, progress: bool = True):
        self.config = config
        self.store = store
        self.progress = progress
        logger.info(f"Pipeline ready in {store.root} (preset {config.preset}, seed {config.seed})")

    # Shared loading

    def intrinsics(self) -> Intrinsics:
        c = self.config
        return Intrinsics.from_fov(c.width, c.height, c.horizontal_fov_deg)

    def seed_for(self, stage: str) -> int:
        return derive_seed(self.config.seed, stage)

    def load_scene_spec(self) -> SceneSpec:
        return SceneSpec.model_validate(self.store.read_json(SCENE_FILE))

    def load_trajectory(self, camera: int = 0) -> Trajectory:
        return trajectory_from_records(self.store.read_json(trajectory_file(camera)))

    def load_dataset(self) -> Tuple[SceneSpec, List[Trajectory], List[GroundTruthFrame]]:
        """Verify the dataset manifest and load scene, trajectories and frames of every camera."""
        doc = self.store.verify_manifest(DATASET_MANIFEST)
        cameras = int(doc.get("meta", {}).get("camera_count", 1))
        spec = self.load_scene_spec()
        trajectories = [self.load_trajectory(k) for k in range(cameras)]
        frames: List[GroundTruthFrame] = []
        for k, traj in enumerate(trajectories):
            for i, view in enumerate(traj.views):
                stem = frame_stem(k, i)
                frames.append(
                    GroundTruthFrame(
                        image=self.store.read_ppm(f"frames/{stem}.ppm"),
                        depth=self.store.read_depth(f"depth/{stem}.fgdp"),
                        view=view,
                    )
                )
        return spec, trajectories, frames

    def load_refiner(self, rel: str = REFINER_CHECKPOINT) -> GeometryAwareDenoiser:
        model = build_denoiser(self.config.refiner, self.seed_for("refine-train"))
        return self.store.read_refiner(rel, model)

    # Stages

    def scenegen(self) -> Dict[str, Any]:
        """Generate (or load) the scene and ray-trace the recorded trajectories."""
        c = self.config
        if c.scene_file:
            spec = SceneSpec.model_validate(ArtifactStore(".").read_json(c.scene_file))
        else:
            spec = generate_scene(c.scene_seed, c.preset)
        rig = make_camera_rig(c.camera_count, c.frames, self.intrinsics(), c.speed, GROUND_Y - c.camera_height)

        self.store.write_json(SCENE_FILE, spec)
        depth_seed = self.seed_for("depth-noise")
        for k, traj in enumerate(rig):
            self.store.write_json(trajectory_file(k), trajectory_to_records(traj))
            frames = render_dataset(spec, traj, c.depth_noise_sigma, depth_seed + k)
            for i, frame in enumerate(frames):
                self.store.write_ppm(f"frames/{frame_stem(k, i)}.ppm", frame.image)
                self.store.write_depth(f"depth/{frame_stem(k, i)}.fgdp", frame.depth)

        meta = {
            "preset": c.preset,
            "scene_seed": c.scene_seed,
            "frames": c.frames,
            "camera_count": c.camera_count,
            "primitives": len(spec.primitives),
            "seeds": {"depth-noise": depth_seed},
        }
        self.store.write_manifest(DATASET_MANIFEST, meta)
        logger.info(f"Scene with {len(spec.primitives)} primitives, {c.frames * c.camera_count} frames written")
        return meta

    def fit(self, steps: Optional[int] = None) -> Dict[str, Any]:
        """Initialise from the dataset and optimise; writes the scene checkpoint and loss curve."""
        spec, _, frames = self.load_dataset()
        seed = self.seed_for("fit")
        scene, curve = fit_scene(
            frames, self.config.recon, self.config.tile, spec.background_color, seed, steps, self.progress
        )
        self.store.write_scene(FIT_CHECKPOINT, scene)
        self.store.write_json("curves/fit_curve.json", curve)
        meta = {"seeds": {"fit": seed}, "gaussians": len(scene), "steps": steps if steps is not None else self.config.recon.steps}
        self.store.write_manifest("fit_manifest.json", meta)
        return meta

    def refine_train(self, steps: Optional[int] = None) -> Dict[str, Any]:
        """Build degraded-render (or warped-frame) pairs and train the refiner from scratch."""
        c = self.config
        spec, _, frames = self.load_dataset()
        seed = self.seed_for("refine-train")
        if c.refiner.condition == "warp":
            pairs = [(warp_condition(frames, f.view, exclude=i), f.image) for i, f in enumerate(frames)]
        else:
            pairs = build_degraded_pairs(
                frames, c.recon, c.tile, c.refiner.degrade_steps, spec.background_color, seed, self.progress
            )
        if c.refiner.condition == "render" and self.store.exists(FIT_CHECKPOINT):
            fitted = self.store.read_scene(FIT_CHECKPOINT)
            pairs.extend((rasterize(fitted, f.view, c.tile), f.image) for f in frames)

        model = build_denoiser(c.refiner, seed)
        trainer = RefinerTrainer(model, c.refiner, seed)
        n_steps = c.refiner.train_steps if steps is None else steps
        losses = trainer.fit(pairs, n_steps, self.progress)

        self.store.write_refiner(REFINER_CHECKPOINT, model)
        self.store.write_json("curves/refiner_curve.json", [{"step": i + 1, "loss": v} for i, v in enumerate(losses)])
        meta = {"seeds": {"refine-train": seed}, "pairs": len(pairs), "steps": n_steps}
        self.store.write_manifest("refine_manifest.json", meta)
        return meta

    def cotrain(self, rounds: Optional[int] = None, dump_labels: bool = False) -> List[RoundReport]:
        """Co-train the fitted scene and the trained refiner."""
        c = self.config
        spec, trajectories, frames = self.load_dataset()
        scene = self.store.read_scene(FIT_CHECKPOINT)
        refiner = self.load_refiner(REFINER_CHECKPOINT)
        seed = self.seed_for("cotrain")
        update: Dict[str, Any] = {"seed": seed}
        if rounds is not None:
            update["rounds"] = rounds
        cfg = c.cotrain.model_copy(update=update)

        sink = self._dump_labels if dump_labels else None
        scene, refiner, reports = run_cotraining(
            scene, refiner, trajectories[0], frames, cfg, c.tile, c.refiner, c.recon.learning_rates,
            spec.background_color, spec, label_sink=sink, progress=self.progress,
        )
        self.store.write_scene(COTRAIN_CHECKPOINT, scene)
        self.store.write_refiner(COTRAIN_REFINER_CHECKPOINT, refiner)
        self.store.write_jsonl(ROUNDS_FILE, reports)
        self.store.write_manifest("cotrain_manifest.json", {"seeds": {"cotrain": seed}, "rounds": cfg.rounds, "mode": cfg.mode})
        return reports

    def _dump_labels(self, round_index: int, labels: Sequence[PseudoLabel]) -> None:
        for i, label in enumerate(labels):
            stem = f"pseudo_labels/round{round_index:02d}_{i:03d}"
            self.store.write_ppm(f"{stem}.ppm", label.image)
            self.store.write_json(
                f"{stem}.json",
                {"provenance": label.provenance, "view": trajectory_to_records(Trajectory(views=[label.view]))["views"][0]},
            )

    def evaluate(
        self,
        shifts: Optional[Sequence[float]] = None,
        stage: Optional[str] = None,
        dump_frames: bool = False,
    ) -> Dict[str, List[MetricReport]]:
        """
        Lateral-shift evaluation of raw renders and, when a refiner exists, refined renders.

        `stage` picks the checkpoints: "cotrain" or "fit" (default: cotrain when present).
        """
        c = self.config
        spec, trajectories, frames = self.load_dataset()
        stage = stage or ("cotrain" if self.store.exists(COTRAIN_CHECKPOINT) else "fit")
        scene_rel, refiner_rel = (
            (COTRAIN_CHECKPOINT, COTRAIN_REFINER_CHECKPOINT) if stage == "cotrain" else (FIT_CHECKPOINT, REFINER_CHECKPOINT)
        )
        if not self.store.exists(scene_rel):
            raise IoError(f"No scene checkpoint {self.store.path(scene_rel)} for stage '{stage}'")
        scene = self.store.read_scene(scene_rel)
        refiner = self.load_refiner(refiner_rel) if self.store.exists(refiner_rel) else None

        shifts = list(c.eval.shifts if shifts is None else shifts)
        eval_trajs = build_eval_trajectories(trajectories[0], shifts, c.eval.stride)
        seed = self.seed_for("eval")
        sched = NoiseSchedule(c.refiner.diffusion_steps)

        raw: Dict[float, List[EvalFrame]] = {}
        refined: Dict[float, List[EvalFrame]] = {}
        oracle: Dict[float, List[EvalFrame]] = {}
        for tau, traj in zip(shifts, eval_trajs):
            conds = [rasterize(scene, v, c.tile) for v in traj.views]
            truth = [raytrace(spec, v) for v in traj.views]
            oracle[tau] = [EvalFrame(tau, v.frame, t.image, t.depth) for v, t in zip(traj.views, truth)]
            raw[tau] = [
                EvalFrame(tau, v.frame, composite_background(r, spec.background_color).numpy(), r.depth.numpy())
                for v, r in zip(traj.views, conds)
            ]
            if refiner is not None:
                seeds = [derive_seed(seed, f"{tau}-{v.frame}") for v in traj.views]
                sources = (
                    [warp_condition(frames, v) for v in traj.views] if c.refiner.condition == "warp" else conds
                )
                images = refine_many(sources, refiner, sched, c.refiner, seeds, c.video_length)
                refined[tau] = [EvalFrame(tau, v.frame, img) for v, img in zip(traj.views, images)]
            if dump_frames:
                self._dump_eval_frames(stage, tau, raw[tau], refined.get(tau, []), conds)

        reports = {"raw": evaluate_protocol(raw, oracle, shifts, 1, c.eval.luma_ssim)}
        if refiner is not None:
            reports["refined"] = evaluate_protocol(refined, oracle, shifts, 1, c.eval.luma_ssim)
        for kind, rows in reports.items():
            self.store.write_json(f"reports/eval_{stage}_{kind}.json", rows)
            for r in rows:
                logger.info(f"[{stage}/{kind}] shift {r.shift_m:+.1f} m: PSNR {r.mean.psnr:.2f} dB, SSIM {r.mean.ssim:.4f}")
        self.store.write_manifest(f"eval_{stage}_manifest.json", {"seeds": {"eval": seed}, "shifts": shifts})
        return reports

    def _dump_eval_frames(
        self,
        stage: str,
        tau: float,
        raw: Sequence[EvalFrame],
        refined: Sequence[EvalFrame],
        conds: Sequence[RenderOutput],
    ) -> None:
        for kind, frames in (("raw", raw), ("refined", refined)):
            for f in frames:
                self.store.write_ppm(f"eval_frames/{stage}/{kind}/shift{tau:+.1f}_{f.frame:04d}.ppm", f.image)
        # Geometry depth and opacity use the FGDP grid; zero opacity reads back as inf
        for f, cond in zip(raw, conds):
            stem = f"eval_frames/{stage}/geometry/shift{tau:+.1f}_{f.frame:04d}"
            _, depth, alpha = cond.numpy()
            self.store.write_depth(f"{stem}_depth.fgdp", depth)
            self.store.write_depth(f"{stem}_alpha.fgdp", alpha)

    def report(self) -> Dict[str, Any]:
        """Merge evaluation and round reports into summary.json; returns the summary."""
        summary: Dict[str, Any] = {"eval": {}, "rounds": []}
        reports_dir = self.store.path("reports")
        if reports_dir.is_dir():
            for path in sorted(reports_dir.glob("eval_*.json")):
                summary["eval"][path.stem[len("eval_") :]] = self.store.read_json(f"reports/{path.name}")
        if self.store.exists(ROUNDS_FILE):
            summary["rounds"] = self.store.read_jsonl(ROUNDS_FILE)
        if not summary["eval"] and not summary["rounds"]:
            raise IoError(f"No reports found under {reports_dir}")
        self.store.write_json(SUMMARY_FILE, summary)
        return summary


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if value == "inf" or (isinstance(value, float) and math.isinf(value)):
        return "inf"
    return f"{float(value):.3f}"


def format_summary_table(summary: Dict[str, Any]) -> str:
    """Fixed-width text table of a summary produced by PipelineService.report()."""
    lines = [f"{'run':<20} {'shift_m':>8} {'psnr':>9} {'ssim':>7} {'p10':>9} {'p90':>9}"]
    for name, rows in summary.get("eval", {}).items():
        for r in rows:
            m = r["mean"]
            lines.append(
                f"{name:<20} {r['shift_m']:>8.1f} {_fmt(m['psnr']):>9} {_fmt(m['ssim']):>7} "
                f"{_fmt(m.get('psnr_p10')):>9} {_fmt(m.get('psnr_p90')):>9}"
            )
    if summary.get("rounds"):
        lines.append("")
        lines.append(f"{'round':<6} {'psnr_0m':>9} {'psnr_1m':>9} {'psnr_2m':>9} {'recon':>9} {'gen':>9}")
        for r in summary["rounds"]:
            recon = (r.get("recon_loss") or {}).get("total")
            lines.append(
                f"{r['round']:<6} {_fmt(r.get('psnr_0m')):>9} {_fmt(r.get('psnr_1m')):>9} "
                f"{_fmt(r.get('psnr_2m')):>9} {_fmt(recon):>9} {_fmt(r.get('gen_loss')):>9}"
            )
    return "\n".join(lines)
