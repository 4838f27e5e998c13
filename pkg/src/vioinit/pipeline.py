"""Per-fragment initialization: static dispatch plus the motion pipeline.

The motion path bootstraps structure from the widest-parallax keyframe pair,
resects the remaining frames under gyro attitude priors, refines poses and
structure jointly with the gyro, aligns the result against the accelerometer
preintegrals for scale/gravity/velocities, and finally polishes all states in
a joint metric refinement. Stationary fragments skip all of that: attitude and
biases come straight from the averaged IMU window. Stage failures are recorded
in the returned report rather than raised.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .alignment import InitState, va_align
from .config import PipelineConfig
from .errors import VioInitError
from .geometry import Landmark, Pose, UnitQuaternion, triangulate
from .imu import (
    BiasState,
    attitude_from_gravity,
    detect_static,
    preintegrate,
    rebias,
    static_init,
)
from .sfm import (
    SfmEstimate,
    camera_rotation_prior,
    select_keyframe_pair,
    two_view_reconstruct,
    vg_ba,
    vg_pnp,
)
from .tracks import Fragment
from .viba import seed_metric_state, vi_ba

__all__ = ["Stage", "InitReport", "initialize_fragment"]


class Stage(enum.Enum):
    """Pipeline stages used as failure labels in reports and result CSVs."""

    TWO_VIEW = "TwoView"
    PNP = "PnP"
    VG_BA = "VGBA"
    ALIGN = "Align"
    VI_BA = "VIBA"


@dataclass(frozen=True)
class InitReport:
    """Outcome of initializing one fragment.

    Attributes:
        success: the pipeline ran to completion without error.
        failure_stage: stage that raised; None on success and for the rare
            stationary-window failure, which precedes every motion stage.
        metric_poses: body-to-world keyframe poses in a gravity-aligned metric
            world (gravity reaction along +z); None until alignment succeeds.
        init: estimated velocities/scale/gravity/biases; None on failure.
        parallax_px: rotation-compensated parallax of the selected keyframe
            pair (0 on the stationary path).
        static: the fragment was initialized by the stationary path.
        diagnostics: per-stage wall times (``stage_ms``), solver results, and
            the error message on failure.
    """

    success: bool
    failure_stage: Stage | None = None
    metric_poses: list[Pose] | None = None
    init: InitState | None = None
    parallax_px: float = 0.0
    static: bool = False
    diagnostics: dict = field(default_factory=dict)


def _initialize_static(fragment: Fragment, diagnostics: dict) -> InitReport:
    """Attitude and biases from the averaged stationary window, zero motion.

    Monocular scale is unobservable without translation, so the reported
    scale is the unit placeholder; all keyframes share one gravity-aligned
    pose at the origin.
    """
    result = static_init(fragment.imu)
    rotation = attitude_from_gravity(result.gravity_body)
    n = len(fragment.keyframes)
    rot_cb = fragment.extrinsic.rotation.to_matrix().T
    init = InitState(
        velocities=np.zeros((n, 3)),
        scale=1.0,
        gravity_c0=rot_cb @ result.gravity_body,
        gyro_bias=result.bias.gyro_bias,
        accel_bias=result.bias.accel_bias,
    )
    return InitReport(
        success=True,
        metric_poses=[Pose(rotation, np.zeros(3)) for _ in range(n)],
        init=init,
        static=True,
        diagnostics=diagnostics,
    )


def _pnp_correspondences(fragment: Fragment, estimate: SfmEstimate, poses, frame):
    """Normalized observations of ``frame`` paired with landmark world points."""
    obs, points = [], []
    by_id = {track.track_id: track for track in fragment.tracks}
    for track_id, lm in estimate.landmarks.items():
        track = by_id[track_id]
        if frame not in track.observations:
            continue
        obs.append(track.normalized(frame))
        points.append(lm.position_in_world(poses[lm.anchor_frame]))
    return np.asarray(obs, dtype=float).reshape(-1, 2), np.asarray(points, dtype=float).reshape(-1, 3)


def _resect_remaining(fragment, estimate, attitudes, pair, config) -> list[Pose]:
    """Resect every uninitialized frame from its nearest initialized neighbor.

    Frames are processed outward from the bootstrap pair; each takes the
    neighbor's position as the starting point and the neighbor's rotation
    composed with the gyro-chained relative rotation as the attitude prior.
    """
    poses = list(estimate.camera_poses)
    n = len(poses)
    remaining = sorted(
        (k for k in range(n) if poses[k] is None),
        key=lambda k: min(abs(k - pair[0]), abs(k - pair[1])),
    )
    for k in remaining:
        neighbor = min(
            (f for f in range(n) if poses[f] is not None), key=lambda f: abs(f - k)
        )
        prior_rotation = poses[neighbor].rotation * (
            attitudes[neighbor].inverse() * attitudes[k]
        )
        obs, points = _pnp_correspondences(fragment, estimate, poses, k)
        poses[k] = vg_pnp(
            obs, points, prior_rotation, poses[neighbor].position,
            fragment.camera.fx, config,
        )
    return poses


def _re_anchor(poses: list[Pose]) -> list[Pose]:
    """Express all camera poses in the first camera's frame (gauge convention)."""
    base = poses[0].inverse()
    return [base.compose(p) for p in poses]


def _triangulate_remaining(fragment, estimate, poses, config):
    """Triangulate tracks the bootstrap pair did not cover.

    Anchored inverse-depth landmarks are invariant to the global frame, so
    this runs safely after re-anchoring. Rays too parallel (or behind either
    camera) are skipped.
    """
    landmarks = dict(estimate.landmarks)
    inliers = {k: set(v) for k, v in estimate.inliers.items()}
    for track in fragment.tracks:
        if track.track_id in landmarks:
            continue
        frames = track.frames()
        if len(frames) < 2:
            continue
        i, j = frames[0], frames[-1]
        tri = triangulate(
            poses[i], poses[j], track.normalized(i), track.normalized(j),
            config.triangulation_min_angle_deg,
        )
        if not tri.ok:
            continue
        landmarks[track.track_id] = Landmark(
            anchor_frame=i,
            anchor_observation=track.normalized(i),
            inverse_depth=1.0 / tri.depth_i,
        )
        inliers[track.track_id] = {i, j}
    return landmarks, inliers


def initialize_fragment(
    fragment: Fragment,
    config: PipelineConfig | None = None,
    rng: np.random.Generator | None = None,
) -> InitReport:
    """Initialize one fragment end to end, capturing failures in the report.

    Dispatches between the stationary and motion paths. The motion path runs
    keyframe-pair selection, two-view bootstrap, per-frame resection, bundle
    adjustment with gyro rotation priors, linear visual-inertial alignment,
    and the joint metric refinement; config flags can skip the two bundle
    stages or swap the two-view solver for ablations. Wall time per stage is
    recorded under ``diagnostics["stage_ms"]``.

    Args:
        fragment: keyframed tracks plus covering IMU samples.
        config: pipeline thresholds and ablation flags.
        rng: drives RANSAC sampling; fixed seeds give deterministic reports.

    Returns:
        InitReport; ``success`` is completion without error, with no accuracy
        gate. Errors never propagate out of this function.
    """
    config = config or PipelineConfig()
    diagnostics: dict = {}
    timings: dict[str, float] = {}
    diagnostics["stage_ms"] = timings

    try:
        if detect_static(fragment.tracks, fragment.imu, config.static):
            return _initialize_static(fragment, diagnostics)
    except VioInitError as err:
        diagnostics["error"] = str(err)
        return InitReport(success=False, diagnostics=diagnostics)

    # Preprocess: zero-bias preintegrals per consecutive keyframe pair and
    # gyro-chained camera attitudes for rotation compensation and priors.
    pres = [
        preintegrate(fragment.imu_between(k, k + 1), BiasState.zero(), config.noise)
        for k in range(len(fragment.keyframes) - 1)
    ]
    priors = [camera_rotation_prior(pre, fragment.extrinsic) for pre in pres]
    attitudes = [UnitQuaternion.identity()]
    for prior in priors:
        attitudes.append(attitudes[-1] * prior.rotation)

    parallax_px = 0.0
    stage = Stage.TWO_VIEW
    started = time.perf_counter()

    def finish_stage(next_stage: Stage | None):
        nonlocal stage, started
        now = time.perf_counter()
        timings[stage.value] = timings.get(stage.value, 0.0) + 1e3 * (now - started)
        stage, started = next_stage, now

    try:
        pair_i, pair_j, parallax_px = select_keyframe_pair(
            fragment.tracks,
            fragment.keyframes,
            fragment.camera,
            rotations=attitudes,
            min_common=config.min_pair_tracks,
        )
        relative = attitudes[pair_i].inverse() * attitudes[pair_j]
        estimate = two_view_reconstruct(
            fragment, (pair_i, pair_j), relative, config, rng
        )
        diagnostics["pair"] = (pair_i, pair_j)
        diagnostics["two_view_landmarks"] = len(estimate.landmarks)
        finish_stage(Stage.PNP)

        poses = _resect_remaining(fragment, estimate, attitudes, (pair_i, pair_j), config)
        poses = _re_anchor(poses)
        landmarks, inliers = _triangulate_remaining(fragment, estimate, poses, config)
        estimate = SfmEstimate(camera_poses=poses, landmarks=landmarks, inliers=inliers)
        finish_stage(Stage.VG_BA)

        if config.use_vg_ba:
            estimate = vg_ba(estimate, priors, fragment.camera, fragment.tracks, config)
            diagnostics["vg_ba"] = estimate.diagnostics
        if np.linalg.norm(estimate.gyro_bias) > 0:
            pres = [rebias(p, BiasState(estimate.gyro_bias, np.zeros(3))) for p in pres]
        finish_stage(Stage.ALIGN)

        init = va_align(estimate, pres, fragment.extrinsic, config)
        finish_stage(Stage.VI_BA)

        if config.use_vi_ba:
            result = vi_ba(
                estimate, init, pres, parallax_px,
                fragment.camera, fragment.tracks, fragment.extrinsic, config,
            )
            metric_poses, init = result.metric_poses, result.init
            diagnostics["vi_ba"] = result.diagnostics
        else:
            metric_poses, _ = seed_metric_state(estimate, init, fragment.extrinsic)
        finish_stage(None)
    except VioInitError as err:
        timings[stage.value] = (
            timings.get(stage.value, 0.0) + 1e3 * (time.perf_counter() - started)
        )
        diagnostics["error"] = str(err)
        return InitReport(
            success=False,
            failure_stage=stage,
            parallax_px=parallax_px,
            diagnostics=diagnostics,
        )

    return InitReport(
        success=True,
        metric_poses=metric_poses,
        init=init,
        parallax_px=parallax_px,
        diagnostics=diagnostics,
    )
