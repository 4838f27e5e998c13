"""Accuracy metrics: trajectory RMSE, scale error, gravity error, epipolar error.

Conventions: trajectories are lists of :class:`~vioinit.geometry.Pose`
(body/camera-to-world); gravity inputs are unit direction vectors; matches are
pixel correspondences ``[u_i, v_i, u_j, v_j]`` between two views with known
camera-to-world poses.
"""

from __future__ import annotations

import numpy as np

from .errors import LengthMismatch, NonPositiveScale, NonUnitVector, ZeroBaseline
from .geometry import PinholeCamera, Pose, align_trajectories, skew

__all__ = ["ate", "scale_error", "gravity_error", "epipolar_error"]

_UNIT_TOL = 1e-6


def ate(estimate: list[Pose], reference: list[Pose], alignment: str = "similarity") -> float:
    """Absolute trajectory error: position RMSE after trajectory alignment.

    Args:
        estimate: Estimated poses, one per frame.
        reference: Ground-truth poses, same length and frame order.
        alignment: ``"similarity"`` (Sim(3), default), ``"yaw_and_position"``,
            or ``"none"`` to compare the trajectories as given.

    Returns:
        sqrt(mean ||p_i - p̂_i||²) in the reference trajectory's length unit
        (meters for metric ground truth).

    Raises:
        LengthMismatch: if the trajectories differ in length or are empty.
        InsufficientPoses: if alignment is requested with fewer than two poses.
    """
    if len(estimate) != len(reference) or not reference:
        raise LengthMismatch(
            f"trajectory lengths differ or are empty: {len(estimate)} vs {len(reference)}"
        )
    if alignment != "none":
        estimate = align_trajectories(estimate, reference, mode=alignment).aligned
    diff = np.array([e.position - r.position for e, r in zip(estimate, reference)])
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))


def scale_error(scales) -> float:
    """Mean normalized scale error over fragments, in percent.

    Each estimated scale is first folded onto (0, 1] via ``ŝ′ = ŝ if ŝ ≤ 1
    else 1/ŝ`` so that over- and under-estimation by the same factor score
    identically, then the mean of ``|ŝ′ − 1|`` is reported as a percentage.

    Args:
        scales: Scalar or iterable of per-fragment scale estimates (estimated
            length / true length).

    Returns:
        Mean |ŝ′ − 1| · 100.

    Raises:
        NonPositiveScale: if any scale is zero, negative, or non-finite.
    """
    s = np.atleast_1d(np.asarray(scales, dtype=float))
    if s.size == 0:
        raise NonPositiveScale("no scales provided")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise NonPositiveScale("scales must be finite and positive")
    folded = np.where(s <= 1.0, s, 1.0 / s)
    return float(np.mean(np.abs(folded - 1.0)) * 100.0)


def gravity_error(estimated, reference) -> float:
    """RMS angular error between estimated and true gravity directions.

    Args:
        estimated: Unit direction vector (3,) or per-frame stack (N, 3).
        reference: True unit directions, same shape.

    Returns:
        sqrt(mean over frames of arccos(g·ĝ)²) in degrees. The angle is
        evaluated as arctan2(|g×ĝ|, g·ĝ) — the well-conditioned form of
        arccos(g·ĝ) — so identical inputs give exactly zero and dot products
        a few ulp outside [−1, 1] stay finite.

    Raises:
        LengthMismatch: if the stacks differ in shape or are empty.
        NonUnitVector: if any input norm is more than 1e-6 from one.
    """
    est = np.atleast_2d(np.asarray(estimated, dtype=float))
    ref = np.atleast_2d(np.asarray(reference, dtype=float))
    if est.shape != ref.shape or est.size == 0 or est.shape[1] != 3:
        raise LengthMismatch(f"direction stacks differ in shape: {est.shape} vs {ref.shape}")
    for name, arr in (("estimated", est), ("reference", ref)):
        norms = np.linalg.norm(arr, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise NonUnitVector(f"{name} directions must be unit vectors")
    sin = np.linalg.norm(np.cross(est, ref), axis=1)
    cos = np.sum(est * ref, axis=1)
    degrees = np.degrees(np.arctan2(sin, cos))
    return float(np.sqrt(np.mean(degrees**2)))


def epipolar_error(
    matches,
    pose_i: Pose,
    pose_j: Pose,
    camera: PinholeCamera,
    raw_product: bool = False,
) -> np.ndarray:
    """Per-match epipolar consistency of pixel correspondences.

    The fundamental matrix is composed from the intrinsics and the relative
    pose ``T_ij = T_i⁻¹ ∘ T_j`` (frame-j-to-frame-i), with the baseline
    normalized to unit length so the result does not depend on the trajectory
    scale.

    Args:
        matches: (N, 4) array-like of pixel correspondences
            ``[u_i, v_i, u_j, v_j]``.
        pose_i: Camera-to-world pose of the first view.
        pose_j: Camera-to-world pose of the second view.
        camera: Shared pinhole intrinsics.
        raw_product: if True, return the algebraic product |p_iᵀ F p_j|
            instead of the default first-order (Sampson) distance in pixels.

    Returns:
        (N,) array of non-negative per-match values.

    Raises:
        ZeroBaseline: if the two camera centers coincide (epipolar geometry
            degenerates to pure rotation).
    """
    pts = np.asarray(matches, dtype=float).reshape(-1, 4)
    relative = pose_i.inverse().compose(pose_j)
    baseline = np.linalg.norm(relative.position)
    if baseline < 1e-12:
        raise ZeroBaseline("relative translation is zero; no epipolar constraint")
    essential = skew(relative.position / baseline) @ relative.rotation.to_matrix()
    k_inv = np.linalg.inv(camera.matrix)
    fundamental = k_inv.T @ essential @ k_inv
    if pts.size == 0:
        return np.zeros(0)
    ones = np.ones((len(pts), 1))
    p_i = np.concatenate([pts[:, 0:2], ones], axis=1)
    p_j = np.concatenate([pts[:, 2:4], ones], axis=1)
    f_pj = p_j @ fundamental.T  # F p_j per row
    ft_pi = p_i @ fundamental  # Fᵀ p_i per row
    product = np.abs(np.sum(p_i * f_pj, axis=1))
    if raw_product:
        return product
    gradient = np.sqrt(f_pj[:, 0] ** 2 + f_pj[:, 1] ** 2 + ft_pi[:, 0] ** 2 + ft_pi[:, 1] ** 2)
    return product / np.maximum(gradient, 1e-30)
