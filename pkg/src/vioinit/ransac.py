"""Robust two-view translation estimation with a known-rotation prior.

Conventions: correspondences are normalized image coordinates in frames i and
j; the prior rotation maps frame-j vectors into frame i (``x_i ~ R x_j`` for a
point at infinity). The recovered translation is the unit-norm position of
camera j expressed in frame i, so the epipolar constraint reads
``t . ((R x_j) x x_i) = 0`` (essential matrix ``E = [t]x R`` with
``x_i^T E x_j = 0``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RansacConfig
from .errors import NoConsensus, TooFewCorrespondences
from .geometry import Pose, UnitQuaternion, skew, triangulate


@dataclass
class TwoPointResult:
    translation: np.ndarray  # unit vector, camera j position in frame i
    inliers: np.ndarray  # boolean mask
    iterations: int
    sampson_px: np.ndarray  # per-correspondence epipolar distance, pixels
    mean_excitation: float  # mean |(R x_j) x x_i| over inliers (parallax signal)


def _homogeneous(obs: np.ndarray) -> np.ndarray:
    return np.concatenate([obs, np.ones((len(obs), 1))], axis=1)


def _sampson_px(essential: np.ndarray, xi: np.ndarray, xj: np.ndarray, focal_px: float) -> np.ndarray:
    """First-order epipolar (Sampson) distance in pixels, batched."""
    exj = xj @ essential.T  # E x_j per row
    etxi = xi @ essential  # E^T x_i per row
    num = np.abs(np.sum(xi * exj, axis=1))
    den = np.sqrt(exj[:, 0] ** 2 + exj[:, 1] ** 2 + etxi[:, 0] ** 2 + etxi[:, 1] ** 2)
    return focal_px * num / np.maximum(den, 1e-30)


def _cheirality_sign(t: np.ndarray, rot: UnitQuaternion, obs_i, obs_j, inliers) -> float:
    """Majority depth vote deciding the translation sign."""
    pose_i = Pose.identity()
    idx = np.flatnonzero(inliers)[:20]
    votes = 0
    for k in idx:
        for sign in (1.0, -1.0):
            res = triangulate(pose_i, Pose(rot, sign * t), obs_i[k], obs_j[k], min_angle_deg=0.0)
            if res.depth_i > 0 and res.depth_j > 0:
                votes += int(sign)
                break
    return -1.0 if votes < 0 else 1.0


def two_point_ransac(
    obs_i: np.ndarray,
    obs_j: np.ndarray,
    rotation_prior: UnitQuaternion,
    focal_px: float,
    config: RansacConfig | None = None,
    rng: np.random.Generator | None = None,
) -> TwoPointResult:
    """Estimate the translation direction given the relative rotation.

    With the rotation known, the epipolar constraint is linear in ``t``; a
    minimal sample of two correspondences yields ``t = n_1 x n_2`` with
    ``n_k = (R x_j) x x_i``. Inliers are scored by Sampson distance, the best
    model is re-fit on its inliers by least squares (smallest singular
    vector), and the sign is resolved by a cheirality vote.

    Args:
        obs_i, obs_j: (N, 2) normalized coordinates in the two frames.
        rotation_prior: rotation mapping frame-j vectors into frame i.
        focal_px: focal length used to express thresholds in pixels.
        config: RANSAC parameters.
        rng: source of randomness (fixed seed -> deterministic output).

    Raises:
        TooFewCorrespondences: fewer than 2 matches.
        NoConsensus: inlier ratio below minimum, or translation unobservable
            (near-pure rotation).
    """
    config = config or RansacConfig()
    rng = rng or np.random.default_rng(0)
    obs_i = np.asarray(obs_i, dtype=float)
    obs_j = np.asarray(obs_j, dtype=float)
    n = len(obs_i)
    if n < 2 or len(obs_j) != n:
        raise TooFewCorrespondences("two-point RANSAC needs at least 2 matched observations")

    rot = rotation_prior.to_matrix()
    xi = _homogeneous(obs_i)
    xj = _homogeneous(obs_j)
    rot_xj = xj @ rot.T
    # Unit-ray cross products carry the parallax signal.
    xi_u = xi / np.linalg.norm(xi, axis=1, keepdims=True)
    rxj_u = rot_xj / np.linalg.norm(rot_xj, axis=1, keepdims=True)
    normals = np.cross(rxj_u, xi_u)
    excitation = np.linalg.norm(normals, axis=1)

    threshold = config.inlier_threshold_px
    best_inliers = None
    best_count = -1
    max_iters = config.max_iterations
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        k1, k2 = rng.choice(n, size=2, replace=False)
        t = np.cross(normals[k1], normals[k2])
        norm = np.linalg.norm(t)
        if norm < 1e-12:
            continue
        t /= norm
        essential = skew(t) @ rot
        d = _sampson_px(essential, xi, xj, focal_px)
        inliers = d < threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            ratio = count / n
            if ratio > 0:
                denom = np.log(max(1.0 - ratio**2, 1e-12))
                if denom < 0:
                    # Keep a floor: noisy minimal samples give imprecise
                    # models, so the textbook trial count is optimistic.
                    needed = max(20, int(np.ceil(np.log(max(1.0 - config.confidence, 1e-12)) / denom)))

    if best_inliers is None or best_count < 2:
        raise NoConsensus("no translation hypothesis gathered any support")

    # Least-squares refinement iterated with re-scoring until the consensus
    # set stabilizes.
    t = None
    final_d = None
    for _ in range(10):
        a = normals[best_inliers]
        _, _, vt = np.linalg.svd(a, full_matrices=True)
        t = vt[-1]
        essential = skew(t) @ rot
        d = _sampson_px(essential, xi, xj, focal_px)
        new_inliers = d < threshold
        final_d = d
        if new_inliers.sum() < 2:
            break
        unchanged = bool(np.array_equal(new_inliers, best_inliers))
        best_inliers = new_inliers
        if unchanged:
            break

    ratio = best_inliers.sum() / n
    if ratio < config.min_inlier_ratio:
        raise NoConsensus(f"inlier ratio {ratio:.2f} below minimum {config.min_inlier_ratio}")
    mean_exc = float(excitation[best_inliers].mean())
    if mean_exc < config.degeneracy_threshold:
        raise NoConsensus("translation unobservable: window is near-pure rotation")

    t *= _cheirality_sign(t, rotation_prior, obs_i, obs_j, best_inliers)
    return TwoPointResult(
        translation=t,
        inliers=best_inliers,
        iterations=it,
        sampson_px=final_d,
        mean_excitation=mean_exc,
    )


def five_point_relative_pose(
    obs_i: np.ndarray,
    obs_j: np.ndarray,
    focal_px: float,
    threshold_px: float = 1.5,
) -> tuple[UnitQuaternion, np.ndarray, np.ndarray]:
    """Pure-visual relative pose (ablation baseline, no rotation prior).

    Returns ``(rotation, unit translation, inlier mask)`` in the same
    conventions as ``two_point_ransac`` (frame-j-to-frame-i rotation, camera j
    position in frame i).

    Raises:
        TooFewCorrespondences: fewer than 5 matches.
        NoConsensus: solver found no valid essential matrix.
    """
    import cv2

    obs_i = np.asarray(obs_i, dtype=float)
    obs_j = np.asarray(obs_j, dtype=float)
    if len(obs_i) < 5:
        raise TooFewCorrespondences("five-point solver needs at least 5 matches")
    # cv2 maps points1 -> points2 via X2 = R X1 + t; choosing points1 = frame j
    # makes (R, t) the frame-j-to-frame-i transform we need.
    pts1 = obs_j.reshape(-1, 1, 2)
    pts2 = obs_i.reshape(-1, 1, 2)
    essential, mask = cv2.findEssentialMat(
        pts1,
        pts2,
        cameraMatrix=np.eye(3),
        method=cv2.RANSAC,
        prob=0.999,
        threshold=threshold_px / focal_px,
    )
    if essential is None or essential.shape != (3, 3):
        raise NoConsensus("five-point solver failed to produce an essential matrix")
    _, rot, t, mask = cv2.recoverPose(essential, pts1, pts2, cameraMatrix=np.eye(3), mask=mask)
    inliers = mask.ravel().astype(bool)
    if inliers.sum() < 5:
        raise NoConsensus("five-point solver found too few cheirality-consistent inliers")
    t = t.ravel()
    t = t / np.linalg.norm(t)
    return UnitQuaternion.from_matrix(rot), t, inliers


def fundamental_ransac(
    px_i: np.ndarray,
    px_j: np.ndarray,
    threshold_px: float = 1.5,
    rng: np.random.Generator | None = None,
    max_iterations: int = 200,
) -> np.ndarray:
    """Inlier mask from a normalized 8-point fundamental-matrix RANSAC.

    Operates on pixel coordinates; used for match outlier rejection when no
    rotation prior is available.
    """
    rng = rng or np.random.default_rng(0)
    px_i = np.asarray(px_i, dtype=float)
    px_j = np.asarray(px_j, dtype=float)
    n = len(px_i)
    if n < 8:
        raise TooFewCorrespondences("fundamental RANSAC needs at least 8 matches")

    def normalize(pts):
        mean = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.linalg.norm(pts - mean, axis=1).mean(), 1e-12)
        t = np.array([[scale, 0, -scale * mean[0]], [0, scale, -scale * mean[1]], [0, 0, 1]])
        return (pts - mean) * scale, t

    def eight_point(idx):
        a_pts, ta = normalize(px_i[idx])
        b_pts, tb = normalize(px_j[idx])
        a = np.zeros((len(idx), 9))
        x1, y1 = b_pts[:, 0], b_pts[:, 1]
        x2, y2 = a_pts[:, 0], a_pts[:, 1]
        a[:, 0] = x2 * x1
        a[:, 1] = x2 * y1
        a[:, 2] = x2
        a[:, 3] = y2 * x1
        a[:, 4] = y2 * y1
        a[:, 5] = y2
        a[:, 6] = x1
        a[:, 7] = y1
        a[:, 8] = 1.0
        # full_matrices: a minimal 8x9 system keeps its null vector only in
        # the full V.
        _, _, vt = np.linalg.svd(a, full_matrices=True)
        f = vt[-1].reshape(3, 3)
        u, s, vft = np.linalg.svd(f)
        f = u @ np.diag([s[0], s[1], 0.0]) @ vft  # enforce rank 2
        return ta.T @ f @ tb

    hi = _homogeneous(px_i)
    hj = _homogeneous(px_j)

    def sampson(f):
        fxj = hj @ f.T
        ftxi = hi @ f
        num = np.abs(np.sum(hi * fxj, axis=1))
        den = np.sqrt(fxj[:, 0] ** 2 + fxj[:, 1] ** 2 + ftxi[:, 0] ** 2 + ftxi[:, 1] ** 2)
        return num / np.maximum(den, 1e-30)

    best = None
    best_count = -1
    for _ in range(max_iterations):
        idx = rng.choice(n, size=8, replace=False)
        try:
            f = eight_point(idx)
        except np.linalg.LinAlgError:
            continue
        inl = sampson(f) < threshold_px
        if inl.sum() > best_count:
            best_count = int(inl.sum())
            best = inl
    if best is None or best_count < 8:
        raise NoConsensus("fundamental RANSAC found no consensus")
    f = eight_point(np.flatnonzero(best))
    final = sampson(f) < threshold_px
    return final if final.sum() >= 8 else best
