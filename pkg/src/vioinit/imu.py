"""IMU types, preintegration, re-biasing, residuals, and static handling.

Gravity convention: the world gravity vector is the specific-force reaction
``g_w = (0, 0, +9.81)``; an accelerometer at rest with identity attitude reads
``+9.81`` on z. World-frame kinematics are ``p_ddot = R (a_meas - b_a) - g_w``.

Preintegration error state is ordered ``(d_alpha, d_beta, d_theta, d_ba,
d_bg)`` (15 components); ``jacobian_wrt_biases`` columns are ``(b_a, b_g)``.
Noise densities are the estimator's assumed continuous-time densities and are
discretized per sample interval.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BiasDeltaTooLarge, EmptyWindow, NonMonotoneTimestamps, WindowTooShort
from .geometry import (
    Pose,
    UnitQuaternion,
    quat_conj,
    quat_mul,
    quat_to_rotmat,
    rotvec_to_quat,
    skew,
    so3_right_jacobian,
)

GRAVITY_MAGNITUDE = 9.81


@dataclass(frozen=True)
class ImuSample:
    """One gyroscope + accelerometer reading."""

    timestamp: float  # seconds
    gyro: np.ndarray  # rad/s, body frame
    accel: np.ndarray  # m/s^2, body frame (specific force)

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


def samples_to_arrays(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack a sample list into (timestamps (N,), gyro (N, 3), accel (N, 3))."""
    t = np.array([s.timestamp for s in samples])
    w = np.array([s.gyro for s in samples])
    a = np.array([s.accel for s in samples])
    return t, w, a


@dataclass(frozen=True)
class BiasState:
    """Slowly varying additive sensor biases."""

    gyro_bias: np.ndarray  # rad/s
    accel_bias: np.ndarray  # m/s^2

    def __post_init__(self):
        bg = np.asarray(self.gyro_bias, dtype=float).reshape(3)
        ba = np.asarray(self.accel_bias, dtype=float).reshape(3)
        object.__setattr__(self, "gyro_bias", bg)
        object.__setattr__(self, "accel_bias", ba)
        if np.abs(bg).max() >= 1.0 or np.abs(ba).max() >= 1.0:
            warnings.warn("bias magnitude exceeds 1 SI unit; likely a unit error", stacklevel=2)

    @classmethod
    def zero(cls) -> "BiasState":
        return cls(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time sensor noise densities (EuRoC-calibrated defaults)."""

    gyro_noise_density: float = 1.6968e-4  # rad/s/sqrt(Hz)
    accel_noise_density: float = 2.0e-3  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.9393e-5  # rad/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3  # m/s^3/sqrt(Hz)


@dataclass(frozen=True)
class GravityVector:
    """Gravity reaction vector (direction and magnitude, m/s^2)."""

    vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=float).reshape(3))

    @classmethod
    def world_default(cls) -> "GravityVector":
        return cls(np.array([0.0, 0.0, GRAVITY_MAGNITUDE]))

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.vector))

    @property
    def direction(self) -> np.ndarray:
        return self.vector / self.magnitude


@dataclass(frozen=True)
class NavState:
    """Body pose (body-to-world), world-frame velocity, and biases."""

    pose: Pose
    velocity: np.ndarray
    bias: BiasState

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))


@dataclass(frozen=True)
class Preintegration:
    """Relative motion integral between two frames, bias-linearized.

    ``alpha`` (position), ``beta`` (velocity) and ``gamma`` (rotation) are the
    integrals of the bias-corrected measurements expressed in the frame of the
    first sample. ``covariance`` is the 15x15 error covariance over
    ``(d_alpha, d_beta, d_theta, d_ba, d_bg)``; ``jacobian_wrt_biases`` maps a
    bias change ``(db_a, db_g)`` (columns in that order) to the first-order
    change of the 15 error-state components.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: UnitQuaternion
    covariance: np.ndarray
    jacobian_wrt_biases: np.ndarray
    dt_total: float
    linearization_bias: BiasState
    noise: NoiseParams
    samples: tuple | None = None

    # Convenience views used by solvers.
    @property
    def d_alpha_d_ba(self) -> np.ndarray:
        return self.jacobian_wrt_biases[0:3, 0:3]

    @property
    def d_alpha_d_bg(self) -> np.ndarray:
        return self.jacobian_wrt_biases[0:3, 3:6]

    @property
    def d_beta_d_ba(self) -> np.ndarray:
        return self.jacobian_wrt_biases[3:6, 0:3]

    @property
    def d_beta_d_bg(self) -> np.ndarray:
        return self.jacobian_wrt_biases[3:6, 3:6]

    @property
    def d_theta_d_bg(self) -> np.ndarray:
        return self.jacobian_wrt_biases[6:9, 3:6]


def _check_window(t: np.ndarray):
    if t.size < 2:
        raise EmptyWindow("preintegration needs at least two samples")
    if np.any(np.diff(t) <= 0):
        raise NonMonotoneTimestamps("sample timestamps must be strictly increasing")


def preintegrate(
    samples,
    bias: BiasState,
    noise: NoiseParams | None = None,
    keep_samples: bool = True,
) -> Preintegration:
    """Integrate IMU samples between two frames at a fixed bias estimate.

    Midpoint rule for alpha/beta (average of consecutive rotated specific
    forces), per-interval exponential for gamma, with first-order error-state
    covariance propagation and accumulated bias Jacobians.

    Args:
        samples: ImuSample list, >= 2, strictly increasing timestamps, covering
            the frame interval.
        bias: linearization point subtracted from the measurements.
        noise: assumed sensor noise densities (EuRoC defaults when omitted).
        keep_samples: retain the samples so ``rebias`` can fall back to full
            re-integration for large bias deltas.

    Raises:
        EmptyWindow: fewer than two samples.
        NonMonotoneTimestamps: non-increasing timestamps.
    """
    noise = noise or NoiseParams()
    t, w, a = samples_to_arrays(samples)
    _check_window(t)

    w = w - bias.gyro_bias
    a = a - bias.accel_bias
    dts = np.diff(t)

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = np.array([1.0, 0.0, 0.0, 0.0])
    cov = np.zeros((15, 15))
    jac = np.eye(15)  # full error-state transition, accumulated

    sig_g2 = noise.gyro_noise_density**2
    sig_a2 = noise.accel_noise_density**2
    sig_wa2 = noise.accel_walk**2
    sig_wg2 = noise.gyro_walk**2

    r_k = quat_to_rotmat(gamma)
    for k in range(len(dts)):
        dt = float(dts[k])
        w_mid = 0.5 * (w[k] + w[k + 1])
        gamma_next = quat_mul(gamma, rotvec_to_quat(w_mid * dt))
        gamma_next /= np.linalg.norm(gamma_next)
        r_k1 = quat_to_rotmat(gamma_next)

        a_k = r_k @ a[k]
        a_k1 = r_k1 @ a[k + 1]
        a_mid = 0.5 * (a_k + a_k1)

        alpha = alpha + beta * dt + 0.5 * a_mid * dt * dt
        beta = beta + a_mid * dt

        # Error-state transition for (d_alpha, d_beta, d_theta, d_ba, d_bg).
        phi = w_mid * dt
        r_inc_t = quat_to_rotmat(rotvec_to_quat(phi)).T
        jr = so3_right_jacobian(phi)
        sk_k = r_k @ skew(a[k])
        sk_k1 = r_k1 @ skew(a[k + 1])
        m = 0.5 * (sk_k + sk_k1 @ r_inc_t)  # d(a_mid)/d(d_theta_k), negated
        n = 0.5 * dt * (sk_k1 @ jr)  # d(a_mid)/d(d_bg)
        s = 0.5 * (r_k + r_k1)  # -d(a_mid)/d(d_ba)

        f = np.eye(15)
        f[0:3, 3:6] = np.eye(3) * dt
        f[0:3, 6:9] = -0.5 * dt * dt * m
        f[0:3, 9:12] = -0.5 * dt * dt * s
        f[0:3, 12:15] = 0.5 * dt * dt * n
        f[3:6, 6:9] = -dt * m
        f[3:6, 9:12] = -dt * s
        f[3:6, 12:15] = dt * n
        f[6:9, 6:9] = r_inc_t
        f[6:9, 12:15] = -jr * dt

        # Noise input (n_g_k, n_g_k1, n_a_k, n_a_k1, n_walk_a, n_walk_g).
        g = np.zeros((15, 18))
        half_jr_dt = 0.5 * jr * dt
        g[6:9, 0:3] = half_jr_dt
        g[6:9, 3:6] = half_jr_dt
        g[3:6, 0:3] = -0.5 * n
        g[3:6, 3:6] = -0.5 * n
        g[3:6, 6:9] = 0.5 * dt * r_k
        g[3:6, 9:12] = 0.5 * dt * r_k1
        g[0:3, 0:6] = 0.5 * dt * g[3:6, 0:6]
        g[0:3, 6:12] = 0.5 * dt * g[3:6, 6:12]
        g[9:12, 12:15] = np.eye(3)
        g[12:15, 15:18] = np.eye(3)

        # Discrete noise: white densities become variance/dt, walks variance*dt.
        # The factor 2 on white terms compensates the boundary-sample sharing
        # between consecutive intervals (each sample's noise enters two
        # midpoint averages), keeping the accumulated variance at sigma^2 * T.
        q_diag = np.concatenate(
            [
                np.full(6, 2.0 * sig_g2 / dt),
                np.full(6, 2.0 * sig_a2 / dt),
                np.full(3, sig_wa2 * dt),
                np.full(3, sig_wg2 * dt),
            ]
        )
        cov = f @ cov @ f.T + (g * q_diag) @ g.T
        cov = 0.5 * (cov + cov.T)
        jac = f @ jac

        gamma = gamma_next
        r_k = r_k1

    return Preintegration(
        alpha=alpha,
        beta=beta,
        gamma=UnitQuaternion.from_wxyz(gamma),
        covariance=cov,
        jacobian_wrt_biases=jac[:, 9:15],
        dt_total=float(t[-1] - t[0]),
        linearization_bias=bias,
        noise=noise,
        samples=tuple(samples) if keep_samples else None,
    )


def rebias(pre: Preintegration, new_bias: BiasState, max_delta: float = 0.1) -> Preintegration:
    """First-order correction of a preintegration to a new bias estimate.

    Falls back to full re-integration when any bias component moves more than
    ``max_delta`` from the linearization point and the samples were retained.

    Raises:
        BiasDeltaTooLarge: delta beyond ``max_delta`` with no retained samples.
    """
    d_ba = new_bias.accel_bias - pre.linearization_bias.accel_bias
    d_bg = new_bias.gyro_bias - pre.linearization_bias.gyro_bias
    if max(np.abs(d_ba).max(), np.abs(d_bg).max()) > max_delta:
        if pre.samples is None:
            raise BiasDeltaTooLarge(
                "bias delta exceeds first-order validity and samples were not retained"
            )
        return preintegrate(pre.samples, new_bias, pre.noise, keep_samples=True)

    alpha = pre.alpha + pre.d_alpha_d_ba @ d_ba + pre.d_alpha_d_bg @ d_bg
    beta = pre.beta + pre.d_beta_d_ba @ d_ba + pre.d_beta_d_bg @ d_bg
    gamma = UnitQuaternion.from_wxyz(
        quat_mul(pre.gamma.wxyz, rotvec_to_quat(pre.d_theta_d_bg @ d_bg))
    )
    return Preintegration(
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        covariance=pre.covariance,
        jacobian_wrt_biases=pre.jacobian_wrt_biases,
        dt_total=pre.dt_total,
        linearization_bias=new_bias,
        noise=pre.noise,
        samples=pre.samples,
    )


def _quat_error_vec(q_e: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Canonicalize a quaternion error and return (2*xyz, w, xyz)."""
    if q_e[0] < 0:
        q_e = -q_e
    return 2.0 * q_e[1:], float(q_e[0]), q_e[1:]


def imu_residual(
    pre: Preintegration,
    state_k: NavState,
    state_k1: NavState,
    gravity: GravityVector,
) -> np.ndarray:
    """15-vector IMU residual between two states.

    Blocks: position, velocity, rotation (2 * vector part of the quaternion
    error ``q_k^-1 (x) q_k1 (x) gamma^-1``), accel-bias difference, gyro-bias
    difference. The preintegration is first-order corrected to ``state_k``'s
    bias before evaluation.
    """
    r, _ = imu_residual_jacobians(pre, state_k, state_k1, gravity, with_jacobians=False)
    return r


def imu_residual_jacobians(
    pre: Preintegration,
    state_k: NavState,
    state_k1: NavState,
    gravity: GravityVector,
    with_jacobians: bool = True,
):
    """IMU residual and its analytic Jacobian.

    Returns:
        ``(r, J)`` with ``r`` the 15-vector residual and ``J`` the (15, 30)
        Jacobian over right-perturbations of
        ``(dp_k, dtheta_k, dv_k, dba_k, dbg_k, dp_k1, dtheta_k1, dv_k1,
        dba_k1, dbg_k1)``; ``J`` is None when ``with_jacobians`` is False.
    """
    d_ba = state_k.bias.accel_bias - pre.linearization_bias.accel_bias
    d_bg = state_k.bias.gyro_bias - pre.linearization_bias.gyro_bias
    alpha = pre.alpha + pre.d_alpha_d_ba @ d_ba + pre.d_alpha_d_bg @ d_bg
    beta = pre.beta + pre.d_beta_d_ba @ d_ba + pre.d_beta_d_bg @ d_bg
    gamma = quat_mul(pre.gamma.wxyz, rotvec_to_quat(pre.d_theta_d_bg @ d_bg))
    gamma /= np.linalg.norm(gamma)

    dt = pre.dt_total
    g = gravity.vector
    q_k = state_k.pose.rotation.wxyz
    q_k1 = state_k1.pose.rotation.wxyz
    rot_k_t = state_k.pose.rotation.to_matrix().T
    dp = state_k1.pose.position - state_k.pose.position - state_k.velocity * dt + 0.5 * g * dt * dt
    dv = state_k1.velocity - state_k.velocity + g * dt

    q_e = quat_mul(quat_mul(quat_conj(q_k), q_k1), quat_conj(gamma))
    r_theta, w_e, v_e = _quat_error_vec(q_e)

    r = np.concatenate(
        [
            rot_k_t @ dp - alpha,
            rot_k_t @ dv - beta,
            r_theta,
            state_k1.bias.accel_bias - state_k.bias.accel_bias,
            state_k1.bias.gyro_bias - state_k.bias.gyro_bias,
        ]
    )
    if not with_jacobians:
        return r, None

    jac = np.zeros((15, 30))
    eye = np.eye(3)
    rot_gamma = quat_to_rotmat(gamma)
    e_right = w_e * eye + skew(v_e)  # d(2*xyz)/d(eps) for q_e (x) Exp(eps)
    e_left = -w_e * eye + skew(v_e)  # d(2*xyz)/d(delta) for Exp(-delta) (x) q_e

    # state_k blocks
    jac[0:3, 0:3] = -rot_k_t
    jac[0:3, 3:6] = skew(rot_k_t @ dp)
    jac[0:3, 6:9] = -rot_k_t * dt
    jac[0:3, 9:12] = -pre.d_alpha_d_ba
    jac[0:3, 12:15] = -pre.d_alpha_d_bg
    jac[3:6, 3:6] = skew(rot_k_t @ dv)
    jac[3:6, 6:9] = -rot_k_t
    jac[3:6, 9:12] = -pre.d_beta_d_ba
    jac[3:6, 12:15] = -pre.d_beta_d_bg
    jac[6:9, 3:6] = e_left
    jac[6:9, 12:15] = -e_right @ rot_gamma @ pre.d_theta_d_bg
    jac[9:12, 9:12] = -eye
    jac[12:15, 12:15] = -eye

    # state_k1 blocks
    jac[0:3, 15:18] = rot_k_t
    jac[3:6, 21:24] = rot_k_t
    jac[6:9, 18:21] = e_right @ rot_gamma
    jac[9:12, 24:27] = eye
    jac[12:15, 27:30] = eye
    return r, jac


def propagate_state(state: NavState, pre: Preintegration, gravity: GravityVector) -> NavState:
    """Propagate a state through a preintegrated interval (discrete model).

    The result is exactly consistent with ``imu_residual`` (zero residual
    between ``state`` and the returned state). The preintegration is
    first-order corrected to ``state``'s bias.
    """
    corr = rebias(pre, state.bias, max_delta=np.inf)
    dt = pre.dt_total
    g = gravity.vector
    rot_k = state.pose.rotation
    position = state.pose.position + state.velocity * dt - 0.5 * g * dt * dt + rot_k.rotate(corr.alpha)
    velocity = state.velocity - g * dt + rot_k.rotate(corr.beta)
    return NavState(
        pose=Pose(rot_k * corr.gamma, position), velocity=velocity, bias=state.bias
    )


def gyro_rotation_prior(
    samples,
    gyro_bias: np.ndarray,
    extrinsic_rotation: UnitQuaternion | None = None,
) -> UnitQuaternion:
    """Relative rotation over a window from gyro integration alone.

    Args:
        samples: ImuSample list spanning the frame interval.
        gyro_bias: bias subtracted before integration.
        extrinsic_rotation: camera-to-body rotation; when given, the prior is
            expressed between camera frames (``q_cb_inv (x) gamma (x) q_cb``
            with ``q_cb = extrinsic_rotation``).

    Raises:
        EmptyWindow: fewer than two samples.
    """
    t, w, _ = samples_to_arrays(samples)
    _check_window(t)
    w = w - np.asarray(gyro_bias, dtype=float)
    gamma = np.array([1.0, 0.0, 0.0, 0.0])
    dts = np.diff(t)
    w_mid = 0.5 * (w[:-1] + w[1:]) * dts[:, None]
    for k in range(len(dts)):
        gamma = quat_mul(gamma, rotvec_to_quat(w_mid[k]))
        gamma /= np.linalg.norm(gamma)
    q = UnitQuaternion.from_wxyz(gamma)
    if extrinsic_rotation is not None:
        q = extrinsic_rotation.inverse() * q * extrinsic_rotation
    return q


@dataclass(frozen=True)
class StaticThresholds:
    """Decision thresholds for the static/motion dispatch."""

    displacement_px: float = 0.5  # mean feature displacement across the window
    accel_std: float = 0.2  # m/s^2
    gyro_std: float = 0.02  # rad/s
    min_window: float = 0.5  # s, static_init requirement


def detect_static(tracks, samples, thresholds: StaticThresholds | None = None) -> bool:
    """True when both image motion and IMU excitation are below thresholds.

    ``tracks`` may be None/empty, in which case the displacement test is
    vacuously satisfied and the IMU criteria alone decide.

    Raises:
        EmptyWindow: no IMU samples.
    """
    thresholds = thresholds or StaticThresholds()
    if not samples:
        raise EmptyWindow("static detection needs IMU samples")
    _, w, a = samples_to_arrays(samples)
    accel_std = float(np.linalg.norm(a.std(axis=0)))
    gyro_std = float(np.linalg.norm(w.std(axis=0)))
    if accel_std >= thresholds.accel_std or gyro_std >= thresholds.gyro_std:
        return False
    if tracks:
        disps = []
        for track in tracks:
            frames = track.frames()
            if len(frames) >= 2:
                disps.append(
                    float(np.linalg.norm(track.pixel(frames[-1]) - track.pixel(frames[0])))
                )
        if disps and float(np.mean(disps)) >= thresholds.displacement_px:
            return False
    return True


@dataclass(frozen=True)
class StaticInit:
    """Output of static initialization: gravity in body frame plus biases."""

    gravity_body: np.ndarray
    bias: BiasState


def static_init(samples, gravity_magnitude: float = GRAVITY_MAGNITUDE) -> StaticInit:
    """Initialize gravity direction and biases from a stationary window.

    Gravity direction is the normalized mean specific force scaled to the
    nominal magnitude; gyro bias is the mean rate; accel bias is the mean
    specific force minus gravity.

    Raises:
        WindowTooShort: window spans less than 0.5 s.
    """
    t, w, a = samples_to_arrays(samples)
    _check_window(t)
    if t[-1] - t[0] < StaticThresholds().min_window:
        raise WindowTooShort("static initialization needs at least 0.5 s of samples")
    mean_a = a.mean(axis=0)
    gravity_body = mean_a / np.linalg.norm(mean_a) * gravity_magnitude
    return StaticInit(
        gravity_body=gravity_body,
        bias=BiasState(gyro_bias=w.mean(axis=0), accel_bias=mean_a - gravity_body),
    )


def attitude_from_gravity(gravity_body: np.ndarray) -> UnitQuaternion:
    """Roll/pitch attitude (yaw-free body-to-world) aligning gravity to world z."""
    g = np.asarray(gravity_body, dtype=float)
    g = g / np.linalg.norm(g)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(g, z)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        if g[2] > 0:
            return UnitQuaternion.identity()
        return UnitQuaternion.from_rotvec(np.array([np.pi, 0.0, 0.0]))
    angle = float(np.arctan2(n, g @ z))
    return UnitQuaternion.from_rotvec(axis / n * angle)
