"""
Configuration Models
====================

Per-module configuration and the aggregate RunConfig. Defaults are desk-scale
values; full-size runs (768x432, six-frame groups) are plain configuration.
"""

from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class TileConfig(BaseModel):
    """Rasterizer settings."""

    model_config = ConfigDict(frozen=True)

    tile_size: int = Field(default=16, description="Tile edge in pixels (8, 16 or 32)")
    sigma_cutoff: float = Field(default=3.0, gt=0, description="Footprint radius in standard deviations")
    near_clip: float = Field(default=0.01, gt=0, description="Near plane (metres)")
    low_pass: float = Field(default=0.3, ge=0, description="Screen-space covariance floor (px^2)")
    max_alpha: float = Field(default=0.99, gt=0, le=1)
    min_alpha: float = Field(default=1.0 / 255.0, ge=0, description="Contributions below are skipped")
    normalize_depth: bool = Field(default=False, description="Divide composited depth by A_geo")
    early_termination: bool = Field(default=False, description="Stop at T < 1e-4 (inference only)")

    @field_validator("tile_size")
    @classmethod
    def validate_tile_size(cls, v: int) -> int:
        if v not in (8, 16, 32):
            raise ValueError(f"tile_size must be one of 8, 16, 32, got {v}")
        return v


class LearningRates(BaseModel):
    """Per-parameter-group Adam learning rates for Gaussian scenes."""

    model_config = ConfigDict(frozen=True)

    position: float = 1.6e-3
    opacity: float = 5e-2
    scale: float = 5e-3
    rotation: float = 1e-3
    color: float = 2.5e-2


class ReconConfig(BaseModel):
    """Stage-one reconstruction (fit) and the reconstruction loss weights."""

    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=1000, ge=0)
    init_stride: int = Field(default=4, ge=1, description="Pixel stride of the unprojection initializer")
    lambda1: float = Field(default=0.05, ge=0, description="Perceptual (1 - SSIM) weight")
    lambda2: float = Field(default=0.01, ge=0, description="Depth L1 weight")
    learning_rates: LearningRates = Field(default_factory=LearningRates)
    log_every: int = Field(default=50, ge=1)


class RefinerConfig(BaseModel):
    """Diffusion refiner architecture, schedule, training and sampling."""

    model_config = ConfigDict(frozen=True)

    diffusion_steps: int = Field(default=200, ge=1, description="T_d")
    latent_channels: int = Field(default=8, ge=1, description="C_c")
    hidden_channels: int = Field(default=32, ge=1)
    encoder_channels: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=4, ge=1)
    train_steps: int = Field(default=500, ge=0)
    sample_steps: int = Field(default=20, ge=1)
    degrade_steps: Tuple[int, ...] = Field(default=(50, 200), description="Fit steps used to make degraded renders")
    depth_guidance: bool = True
    opacity_guidance: bool = True
    condition: Literal["render", "warp"] = Field(
        default="render", description="Gaussian render, or the nearest recorded frame warped through its depth"
    )

    @model_validator(mode="after")
    def check_sample_steps(self) -> "RefinerConfig":
        if self.sample_steps > self.diffusion_steps:
            raise ValueError(f"sample_steps {self.sample_steps} exceeds diffusion_steps {self.diffusion_steps}")
        return self


class CoTrainConfig(BaseModel):
    """Closed-loop co-training."""

    model_config = ConfigDict(frozen=True)

    rounds: int = Field(default=3, ge=0)
    step1_viewpoints_per_round: int = Field(default=4, ge=1)
    lateral_range: float = Field(default=4.0, ge=0, description="Uniform lateral offset bound (metres)")
    yaw_jitter: float = Field(default=5.0, ge=0, description="Uniform yaw jitter bound (degrees)")
    lambda1: float = Field(default=0.05, ge=0)
    lambda2: float = Field(default=0.01, ge=0)
    recon_steps_per_round: int = Field(default=50, ge=1)
    gen_steps_per_round: int = Field(default=50, ge=0)
    mode: Literal["both", "recon_only", "gen_only"] = "both"
    mix_real_frames: bool = Field(default=True, description="Interleave recorded-view steps in Step 1")
    report_shifts: Tuple[float, ...] = (0.0, 1.0, -1.0, 2.0, -2.0)
    report_stride: int = Field(default=2, ge=1)
    seed: int = 0


class EvalConfig(BaseModel):
    """Lateral-shift evaluation protocol."""

    model_config = ConfigDict(frozen=True)

    shifts: Tuple[float, ...] = (1.0, -1.0, 2.0, -2.0, 4.0, -4.0)
    stride: int = Field(default=2, ge=1)
    luma_ssim: bool = False


class RunConfig(BaseModel):
    """Everything one pipeline command needs besides paths."""

    model_config = ConfigDict(frozen=True)

    preset: str = "street"
    scene_seed: int = 7
    seed: int = 0
    width: int = Field(default=64, gt=0)
    height: int = Field(default=64, gt=0)
    frames: int = Field(default=12, ge=1)
    camera_count: int = Field(default=1, ge=1)
    video_length: int = Field(default=6, ge=1, description="Frames per refiner inference group")
    horizontal_fov_deg: float = Field(default=90.0, gt=0, lt=180)
    speed: float = Field(default=1.0, description="Metres travelled per frame")
    camera_height: float = Field(default=1.5, gt=0)
    depth_noise_sigma: float = Field(default=0.0, ge=0)
    tile: TileConfig = Field(default_factory=TileConfig)
    recon: ReconConfig = Field(default_factory=ReconConfig)
    refiner: RefinerConfig = Field(default_factory=RefinerConfig)
    cotrain: CoTrainConfig = Field(default_factory=CoTrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    scene_file: Optional[str] = None

    @model_validator(mode="after")
    def check_resolution(self) -> "RunConfig":
        """Resolution must be a multiple of the tile size."""
        ts = self.tile.tile_size
        if self.width % ts or self.height % ts:
            raise ValueError(f"Resolution {self.width}x{self.height} is not a multiple of tile_size {ts}")
        return self
