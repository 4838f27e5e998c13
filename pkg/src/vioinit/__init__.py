"""Visual-inertial initialization from short keyframe fragments.

Estimates metric scale, per-keyframe velocities, gravity direction, and
gyroscope bias from a handful of keyframes plus raw IMU samples, via a
gyro-aided structure-from-motion stage, a linear visual-inertial alignment,
and a disparity-weighted joint refinement.
"""

__version__ = "0.1.0"
