"""Joint jammer mitigation, channel estimation and data detection for SIMO uplinks."""

from .channel import JammerKind, JammerSpec, SystemDims, synthesize_block
from .fixed import FxProfile, run_maed_fx
from .reference import StepSchedule, run_maed

__all__ = [
    "FxProfile",
    "JammerKind",
    "JammerSpec",
    "StepSchedule",
    "SystemDims",
    "run_maed",
    "run_maed_fx",
    "synthesize_block",
]
