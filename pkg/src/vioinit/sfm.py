"""Gyro-tight structure from motion over a keyframe fragment.

Builds an up-to-scale reconstruction in the first camera frame: keyframe-pair
selection by rotation-compensated parallax, two-view bootstrap from the
rotation-prior RANSAC, per-frame resection under a gyro attitude prior, and a
bundle adjustment that couples reprojection with the gyro rotation priors
while estimating the gyro bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import PipelineConfig
from .errors import (
    Diverged,
    InsufficientCommonTracks,
    InsufficientObservations,
    NonPositiveDepth,
    RankDeficient,
    TooFewLandmarks,
)
from .factors import (
    inverse_depth_residuals,
    point_reprojection_residuals,
    rotation_prior_residual,
    sqrt_information,
)
from .geometry import Landmark, PinholeCamera, Pose, UnitQuaternion, triangulate
from .imu import Preintegration
from .optim import huber_cost, huber_weights, levenberg_marquardt, separable_lm
from .ransac import five_point_relative_pose, two_point_ransac
from .tracks import FeatureTrack, common_tracks

# Covariance floor keeping rotation-prior whitening finite on noise-free data.
_ROT_COV_FLOOR = 1e-12


@dataclass(frozen=True)
class RotationPrior:
    """Gyro-integrated relative rotation between consecutive keyframes.

    ``rotation`` maps later-frame camera vectors into the earlier frame;
    ``d_theta_d_bg`` is the sensitivity of the prior's rotation vector to a
    gyro-bias change, already conjugated into the camera frame; ``sqrt_info``
    whitens the 3-vector residual.
    """

    rotation: UnitQuaternion
    d_theta_d_bg: np.ndarray
    sqrt_info: np.ndarray
    linearization_bias: np.ndarray


def camera_rotation_prior(pre: Preintegration, extrinsic: Pose) -> RotationPrior:
    """Express a body-frame preintegrated rotation between camera frames."""
    rot_bc = extrinsic.rotation
    rotation = rot_bc.inverse() * pre.gamma * rot_bc
    mat_cb = rot_bc.to_matrix().T
    d_theta_d_bg = mat_cb @ pre.d_theta_d_bg
    cov = mat_cb @ pre.covariance[6:9, 6:9] @ mat_cb.T + _ROT_COV_FLOOR * np.eye(3)
    return RotationPrior(
        rotation=rotation,
        d_theta_d_bg=d_theta_d_bg,
        sqrt_info=sqrt_information(cov),
        linearization_bias=pre.linearization_bias.gyro_bias.copy(),
    )


@dataclass
class SfmEstimate:
    """Up-to-scale reconstruction in the frame of the first camera.

    ``camera_poses`` are camera-to-world; entries are None until the frame is
    resected. ``landmarks`` maps track id to an anchored inverse-depth
    landmark; ``inliers`` maps track id to the keyframe indices whose
    observations survived outlier rejection.
    """

    camera_poses: list[Pose | None]
    landmarks: dict[int, Landmark]
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    inliers: dict[int, set[int]] = field(default_factory=dict)
    diagnostics: object = field(default=None, repr=False)  # LmResult of the last refinement

    def landmark_position(self, track_id: int) -> np.ndarray:
        lm = self.landmarks[track_id]
        return lm.position_in_world(self.camera_poses[lm.anchor_frame])


def _pixel_displacement(camera: PinholeCamera, obs_i, obs_j, rotation) -> float:
    """Mean pixel displacement after removing the relative rotation."""
    if rotation is not None:
        warped = np.append(obs_j, np.ones((len(obs_j), 1)), axis=1) @ rotation.to_matrix().T
        obs_j = warped[:, :2] / warped[:, 2:3]
    d = (obs_i - obs_j) * np.array([camera.fx, camera.fy])
    return float(np.linalg.norm(d, axis=1).mean())


def select_keyframe_pair(
    tracks: list[FeatureTrack],
    keyframes,
    camera: PinholeCamera,
    rotations: list[UnitQuaternion] | None = None,
    min_common: int = 8,
) -> tuple[int, int, float]:
    """Keyframe pair with the largest rotation-compensated parallax.

    Args:
        tracks: fragment tracks, observations keyed by keyframe index.
        keyframes: keyframe timestamps (only the count is used).
        camera: intrinsics converting normalized displacement to pixels.
        rotations: per-keyframe camera attitudes (gyro-chained); when given,
            displacement is measured after removing the relative rotation.
        min_common: minimum shared tracks for a pair to qualify.

    Returns:
        ``(i, j, parallax_px)`` maximizing the mean displacement.

    Raises:
        InsufficientCommonTracks: no pair shares ``min_common`` tracks.
    """
    n = len(keyframes)
    best = None
    for i in range(n):
        for j in range(i + 1, n):
            shared = common_tracks(tracks, i, j)
            if len(shared) < min_common:
                continue
            obs_i = np.array([t.normalized(i) for t in shared])
            obs_j = np.array([t.normalized(j) for t in shared])
            rel = None
            if rotations is not None:
                rel = rotations[i].inverse() * rotations[j]
            parallax = _pixel_displacement(camera, obs_i, obs_j, rel)
            if best is None or parallax > best[2]:
                best = (i, j, parallax)
    if best is None:
        raise InsufficientCommonTracks(
            f"no keyframe pair shares {min_common} tracks"
        )
    return best


def two_view_reconstruct(
    fragment,
    pair: tuple[int, int],
    rotation_prior: UnitQuaternion,
    config: PipelineConfig | None = None,
    rng: np.random.Generator | None = None,
) -> SfmEstimate:
    """Bootstrap poses and structure from one keyframe pair.

    The earlier frame anchors the reconstruction; the later frame takes the
    gyro rotation and the RANSAC unit translation (arbitrary global scale).
    Inlier correspondences are triangulated; landmarks failing the ray-angle
    or cheirality checks are dropped.

    Raises:
        TooFewCorrespondences, NoConsensus: propagated from the solver.
        TooFewLandmarks: fewer triangulated landmarks than configured.
    """
    config = config or PipelineConfig()
    i, j = pair
    shared = common_tracks(fragment.tracks, i, j)
    obs_i = np.array([t.normalized(i) for t in shared])
    obs_j = np.array([t.normalized(j) for t in shared])

    if config.use_two_point:
        result = two_point_ransac(
            obs_i, obs_j, rotation_prior, fragment.camera.fx, config.ransac, rng
        )
        rotation, translation, mask = rotation_prior, result.translation, result.inliers
    else:
        rotation, translation, mask = five_point_relative_pose(
            obs_i, obs_j, fragment.camera.fx, config.ransac.inlier_threshold_px
        )

    pose_i = Pose.identity()
    pose_j = Pose(rotation, translation)
    landmarks: dict[int, Landmark] = {}
    inliers: dict[int, set[int]] = {}
    for k, track in enumerate(shared):
        if not mask[k]:
            continue
        tri = triangulate(
            pose_i, pose_j, obs_i[k], obs_j[k], config.triangulation_min_angle_deg
        )
        if not tri.ok:
            continue
        landmarks[track.track_id] = Landmark(
            anchor_frame=i, anchor_observation=obs_i[k], inverse_depth=1.0 / tri.depth_i
        )
        inliers[track.track_id] = {i, j}

    if len(landmarks) < config.min_landmarks:
        raise TooFewLandmarks(
            f"{len(landmarks)} landmarks triangulated, need {config.min_landmarks}"
        )
    poses: list[Pose | None] = [None] * len(fragment.keyframes)
    poses[i], poses[j] = pose_i, pose_j
    return SfmEstimate(camera_poses=poses, landmarks=landmarks, inliers=inliers)


def vg_pnp(
    observations: np.ndarray,
    landmarks: np.ndarray,
    prior_rotation: UnitQuaternion,
    neighbor_position: np.ndarray,
    focal_px: float,
    config: PipelineConfig | None = None,
    prior_sqrt_info: np.ndarray | None = None,
) -> Pose:
    """Resect one camera under a gyro attitude prior.

    Minimizes whitened reprojection plus an attitude-prior residual by damped
    least squares, starting from the neighbor's position and the gyro-chained
    rotation (``prior_rotation`` = neighbor rotation composed with the
    preintegrated rotation toward this frame).

    Args:
        observations: (N, 2) normalized observations in this frame.
        landmarks: (N, 3) corresponding world points (fixed).
        prior_rotation: predicted camera-to-world rotation.
        neighbor_position: position of the initialized neighbor (start point).
        focal_px: converts normalized residuals to pixels for weighting.
        prior_sqrt_info: (3, 3) whitening of the attitude residual; defaults
            to an isotropic 0.01 rad standard deviation.

    Raises:
        InsufficientObservations: fewer than the configured minimum.
        Diverged: optimizer made no progress.
    """
    config = config or PipelineConfig()
    observations = np.asarray(observations, dtype=float)
    landmarks = np.asarray(landmarks, dtype=float)
    if len(observations) < config.min_pnp_observations:
        raise InsufficientObservations(
            f"{len(observations)} observations, need {config.min_pnp_observations}"
        )
    if prior_sqrt_info is None:
        prior_sqrt_info = np.eye(3) / 0.01
    visual_scale = focal_px / config.pixel_noise_px

    def residuals(pose: Pose, with_jac: bool):
        r_pts, jac_pts = point_reprojection_residuals(
            pose, landmarks, observations, None, with_jac
        )
        r_rot, jac_rot = rotation_prior_residual(
            prior_rotation, pose.rotation, UnitQuaternion.identity(), with_jacobians=with_jac
        )
        r = np.concatenate([visual_scale * r_pts.reshape(-1), prior_sqrt_info @ r_rot])
        if not with_jac:
            return r, None
        jac = np.zeros((len(r), 6))
        jac[:-3] = visual_scale * jac_pts.reshape(-1, 6)
        jac[-3:, 3:6] = prior_sqrt_info @ jac_rot["theta_j"]
        return r, jac

    def cost_fn(pose):
        try:
            r, _ = residuals(pose, False)
        except NonPositiveDepth:
            return np.inf
        return float(r @ r)

    def linearize_fn(pose):
        return residuals(pose, True)

    def retract_fn(pose, dx):
        return Pose(
            pose.rotation * UnitQuaternion.from_rotvec(dx[3:6]), pose.position + dx[0:3]
        )

    result = levenberg_marquardt(
        Pose(prior_rotation, np.asarray(neighbor_position, dtype=float)),
        cost_fn,
        linearize_fn,
        retract_fn,
        config.lm,
    )
    if not result.converged:
        raise Diverged("resection made no progress within its iteration budget")
    return result.x


@dataclass
class _BaState:
    poses: list[Pose]
    bias: np.ndarray
    inv_depths: np.ndarray


def _ba_observations(estimate: SfmEstimate, tracks: list[FeatureTrack]):
    """(track_id, anchor, frame, obs) rows for every non-anchor observation."""
    by_id = {t.track_id: t for t in tracks}
    rows = []
    order = list(estimate.landmarks)
    for m, track_id in enumerate(order):
        lm = estimate.landmarks[track_id]
        track = by_id[track_id]
        for frame in track.frames():
            if frame == lm.anchor_frame or estimate.camera_poses[frame] is None:
                continue
            rows.append((m, lm.anchor_frame, frame, track.normalized(frame)))
    return order, rows


def vg_ba(
    estimate: SfmEstimate,
    priors: list[RotationPrior],
    camera: PinholeCamera,
    tracks: list[FeatureTrack],
    config: PipelineConfig | None = None,
    fix_first: bool = True,
) -> SfmEstimate:
    """Bundle adjustment coupling reprojection with gyro rotation priors.

    Jointly refines all resected camera poses, anchored inverse depths, and
    the gyro bias (started at zero). Rotation priors between consecutive
    keyframes are first-order corrected as the bias estimate moves. Visual
    residuals take a Huber loss; accepted steps strictly decrease the robust
    objective.

    Args:
        estimate: initial reconstruction (every keyframe resected).
        priors: one RotationPrior per consecutive keyframe pair.
        camera: intrinsics for pixel-unit weighting.
        tracks: fragment tracks supplying the observations.
        fix_first: hold the first camera pose fixed (gauge). When False the
            normal equations are checked for the expected 6-DoF deficiency.

    Raises:
        RankDeficient: ``fix_first`` is False and the system is singular.
        Diverged: optimizer made no progress.
    """
    config = config or PipelineConfig()
    poses = [p for p in estimate.camera_poses]
    if any(p is None for p in poses):
        raise ValueError("vg_ba requires every keyframe pose to be resected")
    n_frames = len(poses)
    first_free = 1 if fix_first else 0
    n_dense = 6 * (n_frames - first_free) + 3
    order, obs_rows = _ba_observations(estimate, tracks)
    n_landmarks = len(order)
    visual_scale = camera.fx / config.pixel_noise_px
    delta_px = config.huber_delta_px

    def pose_col(frame: int) -> int:
        return 6 * (frame - first_free)

    bias_col = 6 * (n_frames - first_free)
    n_obs = len(obs_rows)
    lm_idx = np.array([m for m, _, _, _ in obs_rows], dtype=int)
    anchor_idx = np.array([a for _, a, _, _ in obs_rows], dtype=int)
    frame_idx = np.array([f for _, _, f, _ in obs_rows], dtype=int)
    obs_arr = np.array([o for _, _, _, o in obs_rows], dtype=float).reshape(-1, 2)
    rays_per_lm = np.array(
        [
            [lm.anchor_observation[0], lm.anchor_observation[1], 1.0]
            for lm in (estimate.landmarks[t] for t in order)
        ]
    ).reshape(-1, 3)

    def build(state: _BaState, with_jac: bool):
        n_rows = 2 * n_obs + 3 * len(priors)
        r = np.zeros(n_rows)
        j_d = np.zeros((n_rows, n_dense)) if with_jac else None
        j_lv = np.zeros(n_rows)
        j_li = np.full(n_rows, -1, dtype=int)
        rot_all = np.stack([p.rotation.to_matrix() for p in state.poses])
        pos_all = np.stack([p.position for p in state.poses])
        res, jac = inverse_depth_residuals(
            rot_all[anchor_idx],
            pos_all[anchor_idx],
            rot_all[frame_idx],
            pos_all[frame_idx],
            rays_per_lm[lm_idx],
            state.inv_depths[lm_idx],
            obs_arr,
            None,
            with_jac,
        )
        robust_norms = np.linalg.norm(res, axis=1) * camera.fx
        w = huber_weights(robust_norms, delta_px) * visual_scale
        r[: 2 * n_obs] = (w[:, None] * res).reshape(-1)
        j_li[: 2 * n_obs] = np.repeat(lm_idx, 2)
        if with_jac:
            j_lv[: 2 * n_obs] = (w[:, None] * jac["inv_depth"]).reshape(-1)
            rows2 = np.arange(2 * n_obs).reshape(-1, 2)
            cols6 = np.arange(6)
            for idx, key in ((anchor_idx, "anchor"), (frame_idx, "observer")):
                free = idx >= first_free
                if not np.any(free):
                    continue
                blk = w[free, None, None] * jac[key][free]
                cols = (6 * (idx[free] - first_free))[:, None] + cols6
                j_d[rows2[free][:, :, None], cols[:, None, :]] = blk
        row = 2 * n_obs
        for k, prior in enumerate(priors):
            delta_bg = state.bias - prior.linearization_bias
            res, jac = rotation_prior_residual(
                state.poses[k].rotation,
                state.poses[k + 1].rotation,
                prior.rotation,
                prior.d_theta_d_bg,
                delta_bg,
                with_jacobians=with_jac,
            )
            r[row : row + 3] = prior.sqrt_info @ res
            if with_jac:
                if k >= first_free:
                    c = pose_col(k)
                    j_d[row : row + 3, c + 3 : c + 6] = prior.sqrt_info @ jac["theta_i"]
                c = pose_col(k + 1)
                j_d[row : row + 3, c + 3 : c + 6] = prior.sqrt_info @ jac["theta_j"]
                j_d[row : row + 3, bias_col : bias_col + 3] = prior.sqrt_info @ jac["bg"]
            row += 3
        return r, j_d, j_lv, j_li, robust_norms

    def cost_fn(state):
        try:
            r, _, _, _, norms = build(state, False)
        except NonPositiveDepth:
            return np.inf
        rot_rows = r[2 * len(obs_rows) :]
        return huber_cost(norms, delta_px) / config.pixel_noise_px**2 + float(
            rot_rows @ rot_rows
        )

    def linearize_fn(state):
        r, j_d, j_lv, j_li, _ = build(state, True)
        return r, j_d, j_lv, j_li

    def retract_fn(state, d_dense, d_lm):
        new_poses = list(state.poses)
        for f in range(first_free, n_frames):
            c = pose_col(f)
            new_poses[f] = Pose(
                state.poses[f].rotation * UnitQuaternion.from_rotvec(d_dense[c + 3 : c + 6]),
                state.poses[f].position + d_dense[c : c + 3],
            )
        return _BaState(
            poses=new_poses,
            bias=state.bias + d_dense[bias_col : bias_col + 3],
            inv_depths=state.inv_depths + d_lm,
        )

    x0 = _BaState(
        poses=poses,
        bias=estimate.gyro_bias.copy(),
        inv_depths=np.array([estimate.landmarks[t].inverse_depth for t in order]),
    )
    if not fix_first:
        _check_gauge(x0, linearize_fn, n_landmarks)
    result = separable_lm(
        x0, cost_fn, linearize_fn, retract_fn, n_dense, n_landmarks, config.lm
    )
    if not result.converged:
        raise Diverged("bundle adjustment made no progress")

    final: _BaState = result.x
    landmarks = {}
    inliers = {}
    by_id = {t.track_id: t for t in tracks}
    for m, track_id in enumerate(order):
        lm = replace(estimate.landmarks[track_id], inverse_depth=float(final.inv_depths[m]))
        if lm.inverse_depth <= 0:
            continue
        point = lm.position_in_world(final.poses[lm.anchor_frame])
        depths = [
            float(final.poses[f].inverse().transform(point)[2])
            for f in by_id[track_id].frames()
            if final.poses[f] is not None
        ]
        if min(depths) <= 0:
            continue
        landmarks[track_id] = lm
        inliers[track_id] = estimate.inliers.get(track_id, set())
    return SfmEstimate(
        camera_poses=final.poses,
        landmarks=landmarks,
        gyro_bias=final.bias,
        inliers=inliers,
        diagnostics=result,
    )


def _check_gauge(x0, linearize_fn, n_landmarks: int):
    """Raise RankDeficient when the (undamped) reduced system is singular."""
    _, j_d, j_lv, j_li = linearize_fn(x0)
    mask = j_li >= 0
    idx = j_li[mask]
    vals = j_lv[mask]
    h_dd = j_d.T @ j_d
    h_ll = np.bincount(idx, weights=vals * vals, minlength=n_landmarks)
    h_ld = np.zeros((n_landmarks, j_d.shape[1]))
    np.add.at(h_ld, idx, j_d[mask] * vals[:, None])
    schur = h_dd - h_ld.T @ (h_ld / np.maximum(h_ll, 1e-300)[:, None])
    eig = np.linalg.eigvalsh(schur)
    if eig[0] < 1e-9 * max(eig[-1], 1.0):
        raise RankDeficient(
            "normal equations are singular; fix the first pose to set the gauge"
        )
