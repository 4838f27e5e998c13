"""Residual blocks shared by the geometric and inertial solvers.

All Jacobians use right perturbations matching the IMU residual convention:
positions perturb additively in the world frame, rotations multiply on the
right by ``Exp(delta)`` in the local frame, and pose blocks order columns as
``(dp, dtheta)``. Reprojection residuals are in normalized image coordinates;
callers scale by ``focal / pixel_sigma`` to whiten.
"""

from __future__ import annotations

import numpy as np

from .errors import NonPositiveDepth
from .geometry import Pose, UnitQuaternion, quat_conj, quat_mul, quat_to_rotmat, skew

_MIN_DEPTH = 1e-6


def projection_jacobian(p_cam: np.ndarray) -> np.ndarray:
    """(2, 3) Jacobian of the pinhole projection (x/z, y/z) at ``p_cam``."""
    x, y, z = p_cam
    return np.array([[1.0 / z, 0.0, -x / (z * z)], [0.0, 1.0 / z, -y / (z * z)]])


def _camera_point(pose: Pose, point_world: np.ndarray, extrinsic: Pose | None):
    """Landmark in the camera frame plus body-frame intermediates.

    Returns ``(p_cam, rot_wx_t, y)`` where ``rot_wx_t`` maps world vectors
    into the perturbed frame (body when ``extrinsic`` is given, else camera)
    and ``y`` is the landmark in that frame.
    """
    rot_wx_t = pose.rotation.to_matrix().T
    y = rot_wx_t @ (point_world - pose.position)
    if extrinsic is None:
        return y, rot_wx_t, y
    p_cam = extrinsic.rotation.to_matrix().T @ (y - extrinsic.position)
    return p_cam, rot_wx_t, y


def point_reprojection_residual(
    pose: Pose,
    point_world: np.ndarray,
    observation: np.ndarray,
    extrinsic: Pose | None = None,
    with_jacobians: bool = True,
):
    """Reprojection residual of a fixed world point, normalized coordinates.

    Args:
        pose: camera-to-world pose, or body-to-world when ``extrinsic`` is
            given (``extrinsic`` = camera-to-body).
        point_world: (3,) landmark.
        observation: (2,) normalized image observation.
        with_jacobians: also return the (2, 6) Jacobian over ``(dp, dtheta)``.

    Raises:
        NonPositiveDepth: landmark at or behind the camera plane.
    """
    p_cam, rot_wx_t, y = _camera_point(pose, np.asarray(point_world, dtype=float), extrinsic)
    if p_cam[2] <= _MIN_DEPTH:
        raise NonPositiveDepth(f"landmark depth {p_cam[2]:.3g} in observing camera")
    r = p_cam[:2] / p_cam[2] - np.asarray(observation, dtype=float)
    if not with_jacobians:
        return r, None
    d_pi = projection_jacobian(p_cam)
    rot_cx = np.eye(3) if extrinsic is None else extrinsic.rotation.to_matrix().T
    jac = np.empty((2, 6))
    jac[:, 0:3] = d_pi @ rot_cx @ (-rot_wx_t)
    jac[:, 3:6] = d_pi @ rot_cx @ skew(y)
    return r, jac


def inverse_depth_residual(
    anchor: Pose,
    observer: Pose,
    ray: np.ndarray,
    inv_depth: float,
    observation: np.ndarray,
    extrinsic: Pose | None = None,
    with_jacobians: bool = True,
):
    """Reprojection residual of an anchored inverse-depth landmark.

    The landmark lives at ``ray / inv_depth`` in the anchor camera frame;
    ``ray`` is the anchor's normalized observation lifted to z = 1. Poses are
    camera-to-world, or body-to-world when ``extrinsic`` (camera-to-body) is
    given.

    Returns:
        ``(r, jac)`` with ``r`` the (2,) normalized-coordinate residual and
        ``jac`` a dict with keys ``anchor`` (2, 6), ``observer`` (2, 6) — both
        over ``(dp, dtheta)`` — and ``inv_depth`` (2,); ``jac`` is None when
        ``with_jacobians`` is False.

    Raises:
        NonPositiveDepth: non-positive inverse depth, or the landmark falls
            at or behind the observer's camera plane.
    """
    if inv_depth <= 0.0:
        raise NonPositiveDepth(f"inverse depth {inv_depth:.3g} must be positive")
    ray = np.asarray(ray, dtype=float)
    p_anchor_cam = ray / inv_depth
    if extrinsic is None:
        u = p_anchor_cam
    else:
        u = extrinsic.rotation.rotate(p_anchor_cam) + extrinsic.position
    rot_a = anchor.rotation.to_matrix()
    point_world = rot_a @ u + anchor.position

    p_cam, rot_wx_t, y = _camera_point(observer, point_world, extrinsic)
    if p_cam[2] <= _MIN_DEPTH:
        raise NonPositiveDepth(f"landmark depth {p_cam[2]:.3g} in observing camera")
    r = p_cam[:2] / p_cam[2] - np.asarray(observation, dtype=float)
    if not with_jacobians:
        return r, None

    d_pi = projection_jacobian(p_cam)
    rot_cx = np.eye(3) if extrinsic is None else extrinsic.rotation.to_matrix().T
    d_cam_d_world = rot_cx @ rot_wx_t  # world vector -> observer camera
    jac_anchor = np.empty((2, 6))
    jac_anchor[:, 0:3] = d_pi @ d_cam_d_world
    jac_anchor[:, 3:6] = d_pi @ d_cam_d_world @ rot_a @ (-skew(u))
    jac_observer = np.empty((2, 6))
    jac_observer[:, 0:3] = d_pi @ d_cam_d_world @ (-np.eye(3))
    jac_observer[:, 3:6] = d_pi @ rot_cx @ skew(y)
    d_world_d_rho = rot_a @ (np.eye(3) if extrinsic is None else extrinsic.rotation.to_matrix()) @ ray * (
        -1.0 / (inv_depth * inv_depth)
    )
    jac_rho = d_pi @ d_cam_d_world @ d_world_d_rho
    return r, {"anchor": jac_anchor, "observer": jac_observer, "inv_depth": jac_rho}


def _skew_batch(v: np.ndarray) -> np.ndarray:
    """(N, 3, 3) cross-product matrices for (N, 3) vectors."""
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _projection_jacobian_batch(p_cam: np.ndarray) -> np.ndarray:
    """(N, 2, 3) pinhole projection Jacobians for (N, 3) camera points."""
    iz = 1.0 / p_cam[:, 2]
    d_pi = np.zeros((len(p_cam), 2, 3))
    d_pi[:, 0, 0] = iz
    d_pi[:, 1, 1] = iz
    d_pi[:, 0, 2] = -p_cam[:, 0] * iz * iz
    d_pi[:, 1, 2] = -p_cam[:, 1] * iz * iz
    return d_pi


def point_reprojection_residuals(
    pose: Pose,
    points_world: np.ndarray,
    observations: np.ndarray,
    extrinsic: Pose | None = None,
    with_jacobians: bool = True,
):
    """Vectorized :func:`point_reprojection_residual` for one observing pose.

    Args:
        pose: camera-to-world pose (body-to-world with ``extrinsic``).
        points_world: (N, 3) landmarks.
        observations: (N, 2) normalized observations.

    Returns:
        ``(r, jac)`` with ``r`` (N, 2) and ``jac`` (N, 2, 6) over
        ``(dp, dtheta)``; ``jac`` is None when ``with_jacobians`` is False.

    Raises:
        NonPositiveDepth: any landmark at or behind the camera plane.
    """
    points_world = np.asarray(points_world, dtype=float)
    observations = np.asarray(observations, dtype=float)
    rot = pose.rotation.to_matrix()
    y = (points_world - pose.position) @ rot  # row-wise rot^T @ (x - p)
    if extrinsic is None:
        rot_cx = None
        p_cam = y
    else:
        rot_cx = extrinsic.rotation.to_matrix().T
        p_cam = (y - extrinsic.position) @ rot_cx.T
    z = p_cam[:, 2]
    if np.any(z <= _MIN_DEPTH):
        raise NonPositiveDepth(f"landmark depth {float(z.min()):.3g} in observing camera")
    r = p_cam[:, :2] / z[:, None] - observations
    if not with_jacobians:
        return r, None
    d_pi = _projection_jacobian_batch(p_cam)
    d_pi_cx = d_pi if rot_cx is None else d_pi @ rot_cx
    jac = np.empty((len(r), 2, 6))
    jac[:, :, 0:3] = -(d_pi_cx @ rot.T)
    jac[:, :, 3:6] = d_pi_cx @ _skew_batch(y)
    return r, jac


def inverse_depth_residuals(
    anchor_rot: np.ndarray,
    anchor_pos: np.ndarray,
    observer_rot: np.ndarray,
    observer_pos: np.ndarray,
    rays: np.ndarray,
    inv_depths: np.ndarray,
    observations: np.ndarray,
    extrinsic: Pose | None = None,
    with_jacobians: bool = True,
):
    """Vectorized :func:`inverse_depth_residual` over N observation rows.

    Args:
        anchor_rot, anchor_pos: (N, 3, 3) rotations and (N, 3) positions of
            the per-row anchor poses (camera-to-world, or body-to-world when
            ``extrinsic`` is given).
        observer_rot, observer_pos: same for the observing poses.
        rays: (N, 3) anchor observations lifted to z = 1.
        inv_depths: (N,) inverse depths along the rays.
        observations: (N, 2) normalized observations in the observing frames.

    Returns:
        ``(r, jac)`` with ``r`` (N, 2) and ``jac`` a dict of ``anchor``
        (N, 2, 6), ``observer`` (N, 2, 6), and ``inv_depth`` (N, 2); ``jac``
        is None when ``with_jacobians`` is False.

    Raises:
        NonPositiveDepth: any non-positive inverse depth, or any landmark at
            or behind its observing camera plane.
    """
    inv_depths = np.asarray(inv_depths, dtype=float)
    if np.any(inv_depths <= 0.0):
        raise NonPositiveDepth(
            f"inverse depth {float(inv_depths.min()):.3g} must be positive"
        )
    p_anchor_cam = rays / inv_depths[:, None]
    if extrinsic is None:
        rot_bc = None
        u = p_anchor_cam
    else:
        rot_bc = extrinsic.rotation.to_matrix()
        u = p_anchor_cam @ rot_bc.T + extrinsic.position
    point_world = np.einsum("nij,nj->ni", anchor_rot, u) + anchor_pos
    y = np.einsum("nji,nj->ni", observer_rot, point_world - observer_pos)
    p_cam = y if rot_bc is None else (y - extrinsic.position) @ rot_bc
    z = p_cam[:, 2]
    if np.any(z <= _MIN_DEPTH):
        raise NonPositiveDepth(f"landmark depth {float(z.min()):.3g} in observing camera")
    r = p_cam[:, :2] / z[:, None] - observations
    if not with_jacobians:
        return r, None

    d_pi = _projection_jacobian_batch(p_cam)
    if rot_bc is None:
        d_cam_d_world = np.swapaxes(observer_rot, 1, 2)
        d_pi_cx = d_pi
    else:
        d_cam_d_world = np.einsum("ij,nkj->nik", rot_bc.T, observer_rot)
        d_pi_cx = d_pi @ rot_bc.T
    a = d_pi @ d_cam_d_world  # d residual / d world point, per row
    jac_anchor = np.empty((len(r), 2, 6))
    jac_anchor[:, :, 0:3] = a
    jac_anchor[:, :, 3:6] = -np.einsum("nij,njk->nik", a @ anchor_rot, _skew_batch(u))
    jac_observer = np.empty((len(r), 2, 6))
    jac_observer[:, :, 0:3] = -a
    jac_observer[:, :, 3:6] = d_pi_cx @ _skew_batch(y)
    ray_cam = rays if rot_bc is None else rays @ rot_bc.T
    d_world_d_rho = np.einsum("nij,nj->ni", anchor_rot, ray_cam) * (
        -1.0 / (inv_depths * inv_depths)
    )[:, None]
    jac_rho = np.einsum("nij,nj->ni", a, d_world_d_rho)
    return r, {"anchor": jac_anchor, "observer": jac_observer, "inv_depth": jac_rho}


def rotation_prior_residual(
    q_i: UnitQuaternion,
    q_j: UnitQuaternion,
    prior: UnitQuaternion,
    d_theta_d_bg: np.ndarray | None = None,
    delta_bg: np.ndarray | None = None,
    with_jacobians: bool = True,
):
    """Relative-rotation residual against a gyro-integrated prior.

    The residual is ``2 * vec(q_i^-1 (x) q_j (x) prior'^-1)`` with the prior
    first-order corrected for a gyro-bias change: ``prior' = prior (x)
    Exp(d_theta_d_bg @ delta_bg)``. Pass ``d_theta_d_bg`` already mapped into
    the prior's frame (conjugate by the camera-to-body rotation for
    camera-frame priors).

    Returns:
        ``(r, jac)`` with ``jac`` a dict of (3, 3) blocks ``theta_i``,
        ``theta_j``, and (when ``d_theta_d_bg`` is given) ``bg``.
    """
    corrected = prior.wxyz
    if d_theta_d_bg is not None and delta_bg is not None:
        corrected = quat_mul(corrected, UnitQuaternion.from_rotvec(d_theta_d_bg @ delta_bg).wxyz)
        corrected /= np.linalg.norm(corrected)
    q_e = quat_mul(quat_mul(quat_conj(q_i.wxyz), q_j.wxyz), quat_conj(corrected))
    if q_e[0] < 0:
        q_e = -q_e
    r = 2.0 * q_e[1:]
    if not with_jacobians:
        return r, None
    w_e, v_e = float(q_e[0]), q_e[1:]
    e_right = w_e * np.eye(3) + skew(v_e)
    e_left = -w_e * np.eye(3) + skew(v_e)
    rot_prior = quat_to_rotmat(corrected)
    jac = {"theta_i": e_left, "theta_j": e_right @ rot_prior}
    if d_theta_d_bg is not None:
        jac["bg"] = -e_right @ rot_prior @ d_theta_d_bg
    return r, jac


def sqrt_information(covariance: np.ndarray) -> np.ndarray:
    """Lower-triangular ``S`` with ``S.T @ S = covariance^-1``.

    Whitens residual blocks: ``S @ r`` has unit covariance. Symmetrizes the
    input to shed accumulation asymmetry before factorizing.
    """
    cov = 0.5 * (covariance + covariance.T)
    lower = np.linalg.cholesky(cov)
    # cov = L L^T, so cov^-1 = L^-T L^-1 and S = L^-1 is the factor.
    return np.linalg.solve(lower, np.eye(lower.shape[0]))
