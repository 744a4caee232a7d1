"""Visual-inertial odometry with statistical landmark-uncertainty learning."""

__version__ = "0.1.0"

from .geometry import PinholeCamera, Pose, Rotation3  # noqa: F401
