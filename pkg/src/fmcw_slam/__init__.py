"""Keyframe-based SLAM for 360-degree FMCW scanning radar."""

from .se2 import Pose2

__all__ = ["Pose2"]
__version__ = "0.1.0"
