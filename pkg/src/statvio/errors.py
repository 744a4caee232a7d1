"""Exception hierarchy shared across the estimation pipeline.

Grouping every failure mode under :class:`StatvioError` lets the CLI map
errors onto its documented exit codes in one place.
"""


class StatvioError(Exception):
    """Base class for all errors raised by this package."""


# -- geometry ---------------------------------------------------------------

class BehindCamera(StatvioError):
    """Point depth is at or below the camera's minimum; drop the observation."""


class AngleNearPi(StatvioError):
    """Rotation angle is within the cut-locus guard band around pi."""


# -- imu --------------------------------------------------------------------

class EmptyStream(StatvioError):
    """Fewer than two IMU samples were supplied to preintegration."""


class NonMonotonicTime(StatvioError):
    """IMU timestamps are not strictly increasing."""


# -- solver -----------------------------------------------------------------

class SingularNormalEquations(StatvioError):
    """Normal equations are rank deficient; the problem needs gauge fixing."""


class NumericalFailure(StatvioError):
    """Linear algebra produced non-finite values during a solve."""


# -- uncertainty ------------------------------------------------------------

class DegenerateBaseline(StatvioError):
    """Two-view geometry is too weak to derive a triangulation covariance."""


# -- estimator --------------------------------------------------------------

class InsufficientLandmarks(StatvioError):
    """Too few mapped landmarks are visible for a PnP solve."""


# -- datasets & configuration -----------------------------------------------

class DatasetFormatError(StatvioError):
    """A dataset file is missing, malformed, or inconsistent."""


class ConfigError(StatvioError):
    """A configuration file or value is invalid."""


# -- evaluation -------------------------------------------------------------

class NoAssociation(StatvioError):
    """No estimated pose could be matched to a ground-truth timestamp."""


class TooFewPoses(StatvioError):
    """Fewer than two associated pose pairs; relative errors are undefined."""


class MismatchedDatasets(StatvioError):
    """Reports being compared were produced from different datasets."""
