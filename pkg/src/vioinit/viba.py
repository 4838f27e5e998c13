"""Tightly coupled visual-inertial refinement of an aligned fragment.

Runs joint damped least squares over metric body poses, world-frame
velocities, shared IMU biases, and anchored inverse depths, with the visual
block scaled by a parallax-dependent weight. The world frame is gravity
aligned; the first-frame position and yaw are held fixed as the unobservable
gauge freedoms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .alignment import InitState
from .config import PipelineConfig
from .errors import Diverged, LengthMismatch, NonPositiveDepth
from .factors import inverse_depth_residuals, sqrt_information
from .geometry import PinholeCamera, Pose, UnitQuaternion, tangent_basis
from .imu import (
    BiasState,
    GravityVector,
    NavState,
    attitude_from_gravity,
    imu_residual_jacobians,
)
from .optim import huber_cost, huber_weights, separable_lm
from .sfm import SfmEstimate, _ba_observations

_WORLD_Z = np.array([0.0, 0.0, 1.0])


def parallax_weight(parallax_px: float, config: PipelineConfig | None = None) -> float:
    """Sigmoid-like weight balancing the visual block against the IMU block.

    Low-parallax fragments carry weak geometric scale information, so their
    reprojection term is amplified relative to the IMU term:
    ``w = w_max / (1 + exp(P - P_min)) + w_min``.

    Args:
        parallax_px: Mean rotation-compensated parallax of the chosen
            keyframe pair, pixels; must be non-negative.
        config: Supplies ``weight_max``, ``weight_min``,
            ``weight_parallax_min_px``.

    Returns:
        Weight in ``(w_min, w_max + w_min]``.
    """
    config = config or PipelineConfig()
    if parallax_px < 0:
        raise ValueError(f"parallax must be non-negative, got {parallax_px}")
    z = min(parallax_px - config.weight_parallax_min_px, 700.0)
    return config.weight_max / (1.0 + math.exp(z)) + config.weight_min


class ViBaResult(NamedTuple):
    """Metric, gravity-aligned keyframe poses plus the refined init state."""

    metric_poses: list[Pose]
    init: InitState
    diagnostics: object = None


@dataclass
class _ViState:
    poses: list[Pose]  # body-to-world, metric
    velocities: np.ndarray  # (K, 3) world frame
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    inv_depths: np.ndarray


def seed_metric_state(sfm, init, extrinsic) -> tuple[list[Pose], np.ndarray]:
    """Lift a c0-frame SfM into the metric gravity-aligned world frame.

    The first camera frame is rotated so the aligned gravity points along
    world +z (yaw-free), camera positions are scaled to metric, and poses are
    converted to body frame through the extrinsic.

    Args:
        sfm: reconstruction with every camera pose populated.
        init: alignment output supplying scale, gravity, and body velocities.
        extrinsic: camera-to-body pose.

    Returns:
        ``(poses, velocities)``: metric body-to-world poses per keyframe and
        (K, 3) world-frame velocities.
    """
    rot_w_c0 = attitude_from_gravity(init.gravity_c0)
    world_from_c0 = Pose(rot_w_c0, np.zeros(3))
    body_from_cam = extrinsic.inverse()
    poses = []
    for cam in sfm.camera_poses:
        cam_scaled = Pose(cam.rotation, cam.position * init.scale)
        poses.append(world_from_c0.compose(cam_scaled).compose(body_from_cam))
    velocities = np.stack(
        [
            pose.rotation.to_matrix() @ v_body
            for pose, v_body in zip(poses, init.velocities)
        ]
    )
    return poses, velocities


def _path_length(positions) -> float:
    pts = np.asarray(positions)
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


@dataclass
class _ViProblem:
    """Assembled refinement problem over a fragment.

    Dense layout: ``[dtheta_0 (2, yaw-free), (dp, dtheta) per later frame,
    velocities, (ba), bg]``; inverse depths form the separable block.
    """

    x0: _ViState
    sfm: SfmEstimate
    order: list
    obs_rows: list
    preintegrations: list
    whiteners: list
    camera: PinholeCamera
    extrinsic: Pose
    config: PipelineConfig
    weight: float
    n_frames: int

    def __post_init__(self):
        self.gravity = GravityVector.world_default()
        self.est_ba = self.config.estimate_accel_bias
        self.vel0 = 2 + 6 * (self.n_frames - 1)
        self.ba_col = self.vel0 + 3 * self.n_frames
        self.bg_col = self.ba_col + 3 if self.est_ba else self.ba_col
        self.n_dense = self.bg_col + 3
        self.n_landmarks = len(self.order)
        self._lm_idx = np.array([m for m, _, _, _ in self.obs_rows], dtype=int)
        self._anchor_idx = np.array([a for _, a, _, _ in self.obs_rows], dtype=int)
        self._frame_idx = np.array([f for _, _, f, _ in self.obs_rows], dtype=int)
        self._obs = np.array([o for _, _, _, o in self.obs_rows], dtype=float).reshape(-1, 2)
        self._rays = np.array(
            [
                [lm.anchor_observation[0], lm.anchor_observation[1], 1.0]
                for lm in (self.sfm.landmarks[t] for t in self.order)
            ]
        ).reshape(-1, 3)[self._lm_idx]

    def _pose_cols(self, frame: int) -> tuple[int | None, int, int]:
        """(position col, rotation col, rotation width) for a frame."""
        if frame == 0:
            return None, 0, 2
        c = 2 + 6 * (frame - 1)
        return c, c + 3, 3

    def _first_rot_basis(self, state) -> np.ndarray:
        # Yaw (rotation about world z) is the right-perturbation direction
        # R_0^T z; the free directions span its orthogonal complement.
        return tangent_basis(state.poses[0].rotation.to_matrix().T @ _WORLD_Z)

    def _scatter_rotation(self, j_d, row, frame, block, basis):
        _, r_col, width = self._pose_cols(frame)
        if width == 2:
            j_d[row : row + block.shape[0], r_col : r_col + 2] = block @ basis
        else:
            j_d[row : row + block.shape[0], r_col : r_col + 3] = block

    def build(self, state: _ViState, with_jac: bool):
        config = self.config
        visual_scale = self.camera.fx / config.pixel_noise_px
        sqrt_weight = math.sqrt(self.weight)
        delta_px = config.huber_delta_px
        n_rows = (
            2 * len(self.obs_rows)
            + 9 * len(self.preintegrations)
            + (3 if self.est_ba else 0)
        )
        r = np.zeros(n_rows)
        j_d = np.zeros((n_rows, self.n_dense)) if with_jac else None
        j_lv = np.zeros(n_rows)
        j_li = np.full(n_rows, -1, dtype=int)
        basis = self._first_rot_basis(state) if with_jac else None
        bias = BiasState(gyro_bias=state.gyro_bias, accel_bias=state.accel_bias)
        n_obs = len(self.obs_rows)
        rot_all = np.stack([p.rotation.to_matrix() for p in state.poses])
        pos_all = np.stack([p.position for p in state.poses])
        res, jac = inverse_depth_residuals(
            rot_all[self._anchor_idx],
            pos_all[self._anchor_idx],
            rot_all[self._frame_idx],
            pos_all[self._frame_idx],
            self._rays,
            state.inv_depths[self._lm_idx],
            self._obs,
            self.extrinsic,
            with_jac,
        )
        robust_norms = np.linalg.norm(res, axis=1) * self.camera.fx
        w = huber_weights(robust_norms, delta_px) * (visual_scale * sqrt_weight)
        r[: 2 * n_obs] = (w[:, None] * res).reshape(-1)
        j_li[: 2 * n_obs] = np.repeat(self._lm_idx, 2)
        if with_jac:
            j_lv[: 2 * n_obs] = (w[:, None] * jac["inv_depth"]).reshape(-1)
            rows2 = np.arange(2 * n_obs).reshape(-1, 2)
            cols6 = np.arange(6)
            for idx, key in ((self._anchor_idx, "anchor"), (self._frame_idx, "observer")):
                blk = w[:, None, None] * jac[key]
                first = idx == 0
                if np.any(first):
                    # Frame 0: position fixed, rotation reduced to the two
                    # yaw-free directions.
                    j_d[rows2[first][:, :, None], cols6[None, None, :2]] = (
                        blk[first][:, :, 3:6] @ basis
                    )
                later = ~first
                if np.any(later):
                    cols = (2 + 6 * (idx[later] - 1))[:, None] + cols6
                    j_d[rows2[later][:, :, None], cols[:, None, :]] = blk[later]
        row = 2 * n_obs
        for k, pre in enumerate(self.preintegrations):
            s_k = NavState(state.poses[k], state.velocities[k], bias)
            s_k1 = NavState(state.poses[k + 1], state.velocities[k + 1], bias)
            res, jac = imu_residual_jacobians(pre, s_k, s_k1, self.gravity, with_jac)
            white = self.whiteners[k]
            r[row : row + 9] = white @ res[0:9]
            if with_jac:
                blk = white @ jac[0:9, :]
                for f, off in ((k, 0), (k + 1, 15)):
                    p_col, _, _ = self._pose_cols(f)
                    if p_col is not None:
                        j_d[row : row + 9, p_col : p_col + 3] = blk[:, off : off + 3]
                    self._scatter_rotation(
                        j_d, row, f, blk[:, off + 3 : off + 6], basis
                    )
                    v_col = self.vel0 + 3 * f
                    j_d[row : row + 9, v_col : v_col + 3] = blk[:, off + 6 : off + 9]
                if self.est_ba:
                    j_d[row : row + 9, self.ba_col : self.ba_col + 3] = blk[:, 9:12]
                j_d[row : row + 9, self.bg_col : self.bg_col + 3] = blk[:, 12:15]
            row += 9
        if self.est_ba:
            # Zero-mean prior: the accel bias is weakly observable over a
            # fragment and would otherwise trade against global tilt.
            inv_sigma = 1.0 / config.accel_bias_prior_sigma
            r[row : row + 3] = inv_sigma * state.accel_bias
            if with_jac:
                j_d[row : row + 3, self.ba_col : self.ba_col + 3] = inv_sigma * np.eye(
                    3
                )
            row += 3
        return r, j_d, j_lv, j_li, robust_norms

    def cost(self, state) -> float:
        try:
            r, _, _, _, norms = self.build(state, False)
        except NonPositiveDepth:
            return np.inf
        rest = r[2 * len(self.obs_rows) :]  # whitened IMU rows + bias prior
        visual = (
            self.weight
            * huber_cost(norms, self.config.huber_delta_px)
            / self.config.pixel_noise_px**2
        )
        return visual + float(rest @ rest)

    def linearize(self, state):
        r, j_d, j_lv, j_li, _ = self.build(state, True)
        return r, j_d, j_lv, j_li

    def retract(self, state, d_dense, d_lm) -> _ViState:
        basis = self._first_rot_basis(state)
        new_poses = [
            Pose(
                state.poses[0].rotation
                * UnitQuaternion.from_rotvec(basis @ d_dense[0:2]),
                state.poses[0].position,
            )
        ]
        for f in range(1, self.n_frames):
            c = 2 + 6 * (f - 1)
            new_poses.append(
                Pose(
                    state.poses[f].rotation
                    * UnitQuaternion.from_rotvec(d_dense[c + 3 : c + 6]),
                    state.poses[f].position + d_dense[c : c + 3],
                )
            )
        d_ba = d_dense[self.ba_col : self.ba_col + 3] if self.est_ba else 0.0
        return _ViState(
            poses=new_poses,
            velocities=state.velocities
            + d_dense[self.vel0 : self.vel0 + 3 * self.n_frames].reshape(
                self.n_frames, 3
            ),
            accel_bias=state.accel_bias + d_ba,
            gyro_bias=state.gyro_bias + d_dense[self.bg_col : self.bg_col + 3],
            inv_depths=state.inv_depths + d_lm,
        )


def _assemble(
    sfm, init, preintegrations, parallax_px, camera, tracks, extrinsic, config
) -> _ViProblem:
    if any(p is None for p in sfm.camera_poses):
        raise ValueError("vi_ba requires a camera pose at every keyframe")
    n_frames = len(sfm.camera_poses)
    if len(preintegrations) != n_frames - 1:
        raise LengthMismatch(
            f"expected {n_frames - 1} preintegrations, got {len(preintegrations)}"
        )
    poses0, velocities0 = seed_metric_state(sfm, init, extrinsic)
    order, obs_rows = _ba_observations(sfm, tracks)
    x0 = _ViState(
        poses=poses0,
        velocities=velocities0,
        accel_bias=init.accel_bias.copy(),
        gyro_bias=init.gyro_bias.copy(),
        inv_depths=np.array(
            [sfm.landmarks[t].inverse_depth / init.scale for t in order]
        ),
    )
    weight = parallax_weight(parallax_px, config) if config.use_parallax_weight else 1.0
    return _ViProblem(
        x0=x0,
        sfm=sfm,
        order=order,
        obs_rows=obs_rows,
        preintegrations=list(preintegrations),
        whiteners=[sqrt_information(p.covariance[0:9, 0:9]) for p in preintegrations],
        camera=camera,
        extrinsic=extrinsic,
        config=config,
        weight=weight,
        n_frames=n_frames,
    )


def vi_ba(
    sfm: SfmEstimate,
    init: InitState,
    preintegrations,
    parallax_px: float,
    camera: PinholeCamera,
    tracks,
    extrinsic: Pose,
    config: PipelineConfig | None = None,
) -> ViBaResult:
    """Joint refinement of poses, velocities, biases, and structure.

    States are seeded from the alignment output: SfM positions scaled to
    meters and rotated so gravity points along world z, velocities rotated to
    the world frame, and inverse depths rescaled. The total objective is
    ``w(P) * C_visual + C_imu`` with ``C_visual`` Huber-robust reprojection
    and ``C_imu`` the whitened 9-dof preintegration residuals with biases
    shared across the fragment; a zero-mean prior keeps the weakly observable
    accel bias from trading against global tilt. The first-frame position and
    yaw are fixed; accepted steps strictly decrease the objective.

    Args:
        sfm: Reconstruction with a camera pose per keyframe (first identity).
        init: Alignment output used for seeding.
        preintegrations: One per consecutive keyframe pair, integrated with
            the noise model that should whiten the IMU block.
        parallax_px: Pair-selection parallax P feeding ``parallax_weight``.
        camera: Intrinsics for pixel-unit weighting.
        tracks: Fragment tracks supplying the observations.
        extrinsic: Camera-to-body transform.
        config: Thresholds and the ``estimate_accel_bias`` /
            ``use_parallax_weight`` switches.

    Returns:
        ``ViBaResult`` with metric gravity-aligned body poses, the refined
        ``InitState`` (velocities back in body frame, gravity re-expressed in
        the refined first camera frame), and solver diagnostics.

    Raises:
        LengthMismatch: Preintegration count is not ``len(poses) - 1``.
        Diverged: Optimizer made no progress.
    """
    config = config or PipelineConfig()
    problem = _assemble(
        sfm, init, preintegrations, parallax_px, camera, tracks, extrinsic, config
    )
    seed_cam_length = _path_length([p.position for p in sfm.camera_poses]) * init.scale
    result = separable_lm(
        problem.x0,
        problem.cost,
        problem.linearize,
        problem.retract,
        problem.n_dense,
        problem.n_landmarks,
        config.lm,
    )
    if not result.converged:
        raise Diverged("visual-inertial refinement made no progress")

    final: _ViState = result.x
    final_length = _path_length([p.compose(extrinsic).position for p in final.poses])
    scale = init.scale
    if seed_cam_length > 1e-12:
        scale = init.scale * final_length / seed_cam_length
    rot_c0 = final.poses[0].compose(extrinsic).rotation.to_matrix()
    refined = InitState(
        velocities=np.stack(
            [
                pose.rotation.to_matrix().T @ v
                for pose, v in zip(final.poses, final.velocities)
            ]
        ),
        scale=scale,
        gravity_c0=rot_c0.T @ GravityVector.world_default().vector,
        gyro_bias=final.gyro_bias,
        accel_bias=final.accel_bias,
    )
    return ViBaResult(metric_poses=final.poses, init=refined, diagnostics=result)
