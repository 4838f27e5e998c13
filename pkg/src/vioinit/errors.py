"""Exception taxonomy shared across the package.

Every failure a pipeline stage can raise is a subclass of :class:`VioInitError`
so callers can catch one base type; the benchmark runner maps subclasses to
per-stage failure labels instead of aborting a sweep.
"""

from __future__ import annotations


class VioInitError(Exception):
    """Base class for all errors raised by this package."""


# --- geometry ---------------------------------------------------------------


class NonPositiveDepth(VioInitError):
    """A point to be projected has z <= 0 in the camera frame."""


class InsufficientPoses(VioInitError):
    """Trajectory alignment needs at least two poses per side."""


# --- IMU --------------------------------------------------------------------


class EmptyWindow(VioInitError):
    """An IMU operation received no samples."""


class NonMonotoneTimestamps(VioInitError):
    """Timestamps are not strictly increasing."""


class BiasDeltaTooLarge(VioInitError):
    """First-order re-biasing requested beyond its validity radius."""


class WindowTooShort(VioInitError):
    """Static initialization needs at least 0.5 s of samples."""


# --- initialization pipeline -------------------------------------------------


class InsufficientCommonTracks(VioInitError):
    """No keyframe pair shares enough tracks for two-view geometry."""


class TooFewCorrespondences(VioInitError):
    """RANSAC needs at least two rotation-compensated correspondences."""


class NoConsensus(VioInitError):
    """RANSAC found no model reaching the minimum inlier ratio."""


class TooFewLandmarks(VioInitError):
    """Two-view reconstruction triangulated fewer landmarks than required."""


class InsufficientObservations(VioInitError):
    """Single-frame resection needs at least four landmark observations."""


class Diverged(VioInitError):
    """Optimizer failed to decrease the cost within its iteration budget."""


class RankDeficient(VioInitError):
    """Normal equations are singular because no gauge freedom was fixed."""


class NonPositiveScale(VioInitError):
    """Visual-inertial alignment produced scale <= 0."""


class IllConditioned(VioInitError):
    """Alignment system condition number exceeds the configured bound."""


# --- matching ---------------------------------------------------------------


class ProjectionOutOfImage(VioInitError):
    """A landmark projects outside the image; match falls back to 2D search."""


class FlowLost(VioInitError):
    """Flow reported invalid and no descriptor match rescued the track."""


# --- data io ----------------------------------------------------------------


class MissingFile(VioInitError):
    """An expected dataset file is absent."""


class MalformedRow(VioInitError):
    """A CSV row failed to parse; carries the offending row index."""

    def __init__(self, message: str, row_index: int | None = None):
        super().__init__(message)
        self.row_index = row_index


class UnknownFrameTimestamp(VioInitError):
    """A track references a frame timestamp absent from the sequence."""


# --- metrics ----------------------------------------------------------------


class LengthMismatch(VioInitError):
    """Metric inputs have different lengths."""


class NonUnitVector(VioInitError):
    """Gravity-direction metric received a vector off unit norm by > 1e-6."""


class ZeroBaseline(VioInitError):
    """Epipolar-error construction requires a nonzero baseline."""
