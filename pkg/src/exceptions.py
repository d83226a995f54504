"""
Domain Exceptions
=================

Every error raised on purpose by drivesynth derives from DriveSynthError so the
command-line entry point can map it to an exit code.
"""


class DriveSynthError(Exception):
    """Base class for all drivesynth errors."""


class BehindCamera(DriveSynthError):
    """A point lies at or behind the near clipping plane."""


class EmptyTrajectory(DriveSynthError):
    """A trajectory without views was supplied where views are required."""


class UnknownPreset(DriveSynthError):
    """Scene preset name is not recognised."""


class NoValidPixels(DriveSynthError):
    """Every sampled pixel has infinite depth; nothing to initialise from."""


class ShapeMismatch(DriveSynthError, ValueError):
    """Array or tensor shapes disagree."""


class TimestepOutOfRange(DriveSynthError, ValueError):
    """Diffusion timestep outside [0, T_d]."""


class LengthMismatch(DriveSynthError, ValueError):
    """Frame lists are not aligned by (shift, frame index)."""


class ImageTooSmall(DriveSynthError, ValueError):
    """Image is smaller than the SSIM window."""


class IoError(DriveSynthError, OSError):
    """Reading or writing an artifact failed."""


class NumericalFailure(DriveSynthError):
    """NaN or Inf detected in parameters or losses."""


class FreezeViolation(DriveSynthError):
    """A model that must stay frozen changed during a co-training step."""
