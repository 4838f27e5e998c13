"""Loosely coupled visual-inertial alignment.

Solves the linear system relating up-to-scale camera motion to accelerometer
preintegrals: unknowns are per-keyframe body-frame velocities, the gravity
vector in the first camera frame, and the metric scale. Gravity is then
refined on its 2-dof tangent space with the magnitude pinned to nominal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .errors import IllConditioned, LengthMismatch, NonPositiveScale
from .geometry import Pose, tangent_basis
from .imu import GRAVITY_MAGNITUDE, BiasState, Preintegration, rebias
from .sfm import SfmEstimate


@dataclass(frozen=True)
class InitState:
    """Initial visual-inertial state estimate for a fragment.

    Attributes:
        velocities: (K, 3) body-frame velocity per keyframe, m/s.
        scale: Metric scale factor applied to SfM positions, > 0.
        gravity_c0: Gravity reaction vector in the first camera frame, m/s^2.
        gyro_bias: Gyroscope bias estimate, rad/s.
        accel_bias: Accelerometer bias estimate, m/s^2 (zero unless a later
            refinement stage estimates it).
    """

    velocities: np.ndarray
    scale: float
    gravity_c0: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        vel = np.asarray(self.velocities, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "velocities", vel)
        object.__setattr__(
            self, "gravity_c0", np.asarray(self.gravity_c0, dtype=float).reshape(3)
        )
        object.__setattr__(
            self, "gyro_bias", np.asarray(self.gyro_bias, dtype=float).reshape(3)
        )
        object.__setattr__(
            self, "accel_bias", np.asarray(self.accel_bias, dtype=float).reshape(3)
        )
        if not self.scale > 0:
            raise NonPositiveScale(f"scale must be positive, got {self.scale}")


def _rebiased(preintegrations, gyro_bias: np.ndarray) -> list[Preintegration]:
    target = BiasState(gyro_bias=gyro_bias, accel_bias=np.zeros(3))
    out = []
    for pre in preintegrations:
        same = np.allclose(
            pre.linearization_bias.gyro_bias, target.gyro_bias
        ) and np.allclose(pre.linearization_bias.accel_bias, target.accel_bias)
        out.append(pre if same else rebias(pre, target))
    return out


def va_align(
    sfm: SfmEstimate,
    preintegrations,
    extrinsic: Pose,
    config: PipelineConfig | None = None,
) -> InitState:
    """Recovers velocities, gravity, and metric scale from SfM + accelerometer.

    Stacks, for every consecutive keyframe pair, the position and velocity
    preintegral constraints expressed in the earlier body frame, and solves
    the resulting linear least-squares problem. Gravity is subsequently
    re-solved ``config.gravity_refine_passes`` times on the tangent space of
    its current direction with the magnitude constrained to 9.81 m/s^2.

    Preintegrations are first-order corrected to ``sfm.gyro_bias`` when they
    were integrated at a different linearization point.

    Args:
        sfm: Up-to-scale structure-from-motion estimate; every keyframe must
            have a camera pose (first pose identity).
        preintegrations: One ``Preintegration`` per consecutive keyframe pair.
        extrinsic: Camera-to-body transform.
        config: Thresholds; defaults to ``PipelineConfig()``.

    Returns:
        ``InitState`` with body-frame velocities, positive scale, and a
        gravity vector of magnitude 9.81 in the first camera frame.

    Raises:
        LengthMismatch: Preintegration count is not ``len(poses) - 1``.
        IllConditioned: System condition number exceeds the configured bound
            (e.g. translation-free motion leaves scale unobservable).
        NonPositiveScale: Recovered scale is not positive.
    """
    config = config or PipelineConfig()
    poses = sfm.camera_poses
    if any(p is None for p in poses):
        raise ValueError("alignment requires a camera pose at every keyframe")
    n_frames = len(poses)
    if len(preintegrations) != n_frames - 1:
        raise LengthMismatch(
            f"expected {n_frames - 1} preintegrations, got {len(preintegrations)}"
        )
    pres = _rebiased(preintegrations, sfm.gyro_bias)

    rot_cb = extrinsic.rotation.to_matrix().T
    p_bc = extrinsic.position
    # Body orientations in the first-camera frame; positions stay in camera
    # (SfM) units and enter only through the scale column.
    rot_body = [p.rotation.to_matrix() @ rot_cb for p in poses]
    positions = [p.position for p in poses]

    g_col = 3 * n_frames
    s_col = g_col + 3
    mat = np.zeros((6 * (n_frames - 1), s_col + 1))
    rhs = np.zeros(mat.shape[0])
    for k, pre in enumerate(pres):
        dt = pre.dt_total
        rot_k_t = rot_body[k].T
        rel = rot_k_t @ rot_body[k + 1]
        row = 6 * k
        # Position constraint:
        #   alpha = s R_k^T dp - dt v_k + dt^2/2 R_k^T g - (R_k^T R_{k+1} - I) p_bc
        mat[row : row + 3, 3 * k : 3 * k + 3] = -dt * np.eye(3)
        mat[row : row + 3, g_col:s_col] = 0.5 * dt * dt * rot_k_t
        mat[row : row + 3, s_col] = rot_k_t @ (positions[k + 1] - positions[k])
        rhs[row : row + 3] = pre.alpha + rel @ p_bc - p_bc
        # Velocity constraint: beta = R_k^T R_{k+1} v_{k+1} - v_k + dt R_k^T g
        row += 3
        mat[row : row + 3, 3 * k : 3 * k + 3] = -np.eye(3)
        mat[row : row + 3, 3 * (k + 1) : 3 * (k + 1) + 3] = rel
        mat[row : row + 3, g_col:s_col] = dt * rot_k_t
        rhs[row : row + 3] = pre.beta
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > config.align_max_condition:
        raise IllConditioned(f"alignment system condition number {cond:.3g}")

    x, *_ = np.linalg.lstsq(mat, rhs, rcond=None)
    velocities = x[:g_col].reshape(n_frames, 3)
    gravity = x[g_col:s_col]
    scale = x[s_col]
    if not scale > 0:
        raise NonPositiveScale(f"alignment produced scale {scale:.3g}")
    if np.linalg.norm(gravity) < 1e-3:
        raise IllConditioned("gravity direction unobservable")

    # Re-solve with |g| pinned to nominal: g = 9.81 d + B w, w in the tangent
    # plane of the current direction d.
    for _ in range(config.gravity_refine_passes):
        direction = gravity / np.linalg.norm(gravity)
        basis = tangent_basis(direction)
        mat_ref = np.concatenate(
            [mat[:, :g_col], mat[:, g_col:s_col] @ basis, mat[:, s_col:]], axis=1
        )
        rhs_ref = rhs - mat[:, g_col:s_col] @ (GRAVITY_MAGNITUDE * direction)
        y, *_ = np.linalg.lstsq(mat_ref, rhs_ref, rcond=None)
        velocities = y[:g_col].reshape(n_frames, 3)
        gravity = GRAVITY_MAGNITUDE * direction + basis @ y[g_col : g_col + 2]
        gravity *= GRAVITY_MAGNITUDE / np.linalg.norm(gravity)
        scale = y[-1]
    if not scale > 0:
        raise NonPositiveScale(f"gravity refinement produced scale {scale:.3g}")

    return InitState(
        velocities=velocities,
        scale=float(scale),
        gravity_c0=gravity,
        gyro_bias=sfm.gyro_bias,
    )
