"""Synthetic scenes, trajectories, sensors, and front-ends with exact truth.

Everything here is an oracle: trajectories are twice-differentiable analytic
curves, IMU measurements invert the sensor model exactly at zero noise, and
the simulated front-end reproduces the two canonical failure modes of real
pixel processing — accumulating flow drift and intermittent descriptor
failure — with seed-exact determinism.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .config import KEYFRAME_INTERVALS, KEYFRAME_SPACING, SimConfig
from .geometry import PinholeCamera, Pose, UnitQuaternion, so3_right_jacobian
from .imu import GRAVITY_MAGNITUDE, BiasState, GravityVector, ImuSample, NavState
from .matching import FrameFeatures, FrontEnd
from .tracks import Fragment, FragmentTruth, FeatureTrack


def _ns_grid(t0: float, t1: float, rate: float) -> np.ndarray:
    """Timestamps on an integer-nanosecond grid covering [t0, t1]."""
    step_ns = round(1e9 / rate)
    start_ns = round(t0 * 1e9)
    n = int(np.floor((t1 - t0) * rate + 1e-9)) + 1
    return (start_ns + step_ns * np.arange(n)) * 1e-9


class Trajectory:
    """Analytic rigid-body motion; subclasses supply exact derivatives."""

    duration: float

    def pose(self, t: float) -> Pose:
        """Body-to-world pose at time t."""
        raise NotImplementedError

    def velocity(self, t: float) -> np.ndarray:
        """World-frame linear velocity."""
        raise NotImplementedError

    def acceleration(self, t: float) -> np.ndarray:
        """World-frame linear acceleration (gravity not included)."""
        raise NotImplementedError

    def angular_velocity_body(self, t: float) -> np.ndarray:
        """Body-frame angular rate."""
        raise NotImplementedError


class StaticTrajectory(Trajectory):
    def __init__(self, duration: float, pose: Pose | None = None):
        self.duration = duration
        self._pose = pose or Pose.identity()

    def pose(self, t):
        return self._pose

    def velocity(self, t):
        return np.zeros(3)

    def acceleration(self, t):
        return np.zeros(3)

    def angular_velocity_body(self, t):
        return np.zeros(3)


class _RotvecMixin:
    """Derives pose/angular rate from an analytic rotation-vector channel.

    With R(t) = Exp(r(t)), the body rate is w = J_r(r) rdot.
    """

    def _rotvec(self, t) -> np.ndarray:
        raise NotImplementedError

    def _rotvec_rate(self, t) -> np.ndarray:
        raise NotImplementedError

    def _position(self, t) -> np.ndarray:
        raise NotImplementedError

    def pose(self, t):
        return Pose(UnitQuaternion.from_rotvec(self._rotvec(t)), self._position(t))

    def angular_velocity_body(self, t):
        return so3_right_jacobian(self._rotvec(t)) @ self._rotvec_rate(t)


class SinusoidTrajectory(_RotvecMixin, Trajectory):
    """Independent per-axis sinusoids in position and attitude."""

    def __init__(
        self,
        duration: float,
        amplitude=(0.4, 0.3, 0.2),
        frequency=(0.9, 1.1, 1.3),
        rot_amplitude=(0.15, 0.12, 0.2),
        rot_frequency=(0.7, 0.8, 0.6),
        phase=(0.0, 1.0, 2.0),
    ):
        self.duration = duration
        self.amp = np.asarray(amplitude, dtype=float)
        self.freq = np.asarray(frequency, dtype=float)
        self.ramp = np.asarray(rot_amplitude, dtype=float)
        self.rfreq = np.asarray(rot_frequency, dtype=float)
        self.phase = np.asarray(phase, dtype=float)

    def _position(self, t):
        return self.amp * np.sin(2 * np.pi * self.freq * t + self.phase)

    def velocity(self, t):
        w = 2 * np.pi * self.freq
        return self.amp * w * np.cos(w * t + self.phase)

    def acceleration(self, t):
        w = 2 * np.pi * self.freq
        return -self.amp * w * w * np.sin(w * t + self.phase)

    def _rotvec(self, t):
        return self.ramp * np.sin(2 * np.pi * self.rfreq * t + self.phase)

    def _rotvec_rate(self, t):
        w = 2 * np.pi * self.rfreq
        return self.ramp * w * np.cos(w * t + self.phase)


class CircleTrajectory(Trajectory):
    """Constant-rate circle with the body yawing along the tangent."""

    def __init__(self, duration: float, radius: float = 2.0, angular_rate: float = 1.0, height: float = 0.0):
        self.duration = duration
        self.radius = radius
        self.rate = angular_rate
        self.height = height

    def pose(self, t):
        a = self.rate * t
        p = np.array([self.radius * np.cos(a), self.radius * np.sin(a), self.height])
        yaw = a + np.pi / 2.0  # tangent direction
        return Pose(UnitQuaternion.from_rotvec(np.array([0.0, 0.0, yaw])), p)

    def velocity(self, t):
        a = self.rate * t
        s = self.radius * self.rate
        return np.array([-s * np.sin(a), s * np.cos(a), 0.0])

    def acceleration(self, t):
        a = self.rate * t
        c = self.radius * self.rate * self.rate
        return np.array([-c * np.cos(a), -c * np.sin(a), 0.0])

    def angular_velocity_body(self, t):
        return np.array([0.0, 0.0, self.rate])


class SplineTrajectory(_RotvecMixin, Trajectory):
    """Natural cubic splines through random knots (C2-smooth, band-limited)."""

    def __init__(
        self,
        duration: float,
        rng: np.random.Generator,
        knot_spacing: float = 0.25,
        pos_scale: float = 0.12,
        rot_scale: float = 0.15,
    ):
        self.duration = duration
        n_knots = max(4, int(np.ceil(duration / knot_spacing)) + 1)
        knots = np.linspace(0.0, duration, n_knots)
        pos = rng.uniform(-pos_scale, pos_scale, size=(n_knots, 3))
        rot = rng.uniform(-rot_scale, rot_scale, size=(n_knots, 3))
        self._pos = CubicSpline(knots, pos, bc_type="natural")
        self._rot = CubicSpline(knots, rot, bc_type="natural")

    def _position(self, t):
        return self._pos(t)

    def velocity(self, t):
        return self._pos(t, 1)

    def acceleration(self, t):
        return self._pos(t, 2)

    def _rotvec(self, t):
        return self._rot(t)

    def _rotvec_rate(self, t):
        return self._rot(t, 1)


def make_trajectory(kind: str, duration: float, rng: np.random.Generator | None = None, **kwargs) -> Trajectory:
    """Trajectory factory over {static, sinusoid, circle, random_spline}."""
    if kind == "static":
        return StaticTrajectory(duration, **kwargs)
    if kind == "sinusoid":
        return SinusoidTrajectory(duration, **kwargs)
    if kind == "circle":
        return CircleTrajectory(duration, **kwargs)
    if kind == "random_spline":
        return SplineTrajectory(duration, rng or np.random.default_rng(0), **kwargs)
    raise ValueError(f"unknown trajectory kind {kind!r}")


@dataclass
class NoiseConfig:
    """Sensor corruption: noise densities, constant biases, pixel noise."""

    gyro_noise_std: float = 0.0  # rad/s/sqrt(Hz)
    accel_noise_std: float = 0.0  # m/s^2/sqrt(Hz)
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pixel_noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float).reshape(3)
        self.accel_bias = np.asarray(self.accel_bias, dtype=float).reshape(3)
        for name in ("gyro_noise_std", "accel_noise_std", "pixel_noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def bias_state(self) -> BiasState:
        return BiasState(gyro_bias=self.gyro_bias, accel_bias=self.accel_bias)


def default_camera() -> PinholeCamera:
    return PinholeCamera(fx=460.0, fy=460.0, cx=320.0, cy=240.0, width=640, height=480)


def default_extrinsic() -> Pose:
    """Mild camera-to-body offset; nontrivial so frame bugs cannot hide."""
    return Pose(
        UnitQuaternion.from_rotvec(np.array([0.02, -0.01, 0.03])),
        np.array([0.05, -0.02, 0.03]),
    )


@dataclass
class SimScene:
    """World model: landmarks, calibration, and the motion that observes them."""

    landmarks: np.ndarray  # (N, 3) world points
    camera: PinholeCamera
    extrinsic: Pose  # camera-to-body
    trajectory: Trajectory

    def camera_pose(self, t: float) -> Pose:
        """Camera-to-world pose at time t."""
        return self.trajectory.pose(t).compose(self.extrinsic)


def make_scene(
    trajectory: Trajectory,
    rng: np.random.Generator,
    camera: PinholeCamera | None = None,
    extrinsic: Pose | None = None,
    n_landmarks: int = 200,
    depth_range=(2.0, 10.0),
) -> SimScene:
    """Scatter landmarks in a frustum-shaped box ahead of the mean camera axis."""
    camera = camera or default_camera()
    extrinsic = extrinsic or default_extrinsic()
    times = np.linspace(0.0, trajectory.duration, 20)
    centers = []
    axes = []
    for t in times:
        pose_c = trajectory.pose(t).compose(extrinsic)
        centers.append(pose_c.position)
        axes.append(pose_c.rotation.to_matrix()[:, 2])
    center = np.mean(centers, axis=0)
    axis = np.mean(axes, axis=0)
    axis /= np.linalg.norm(axis)
    # Orthonormal image-plane directions for lateral scatter.
    mean_rot = trajectory.pose(times[len(times) // 2]).compose(extrinsic).rotation.to_matrix()
    x_dir, y_dir = mean_rot[:, 0], mean_rot[:, 1]

    depth = rng.uniform(depth_range[0], depth_range[1], size=n_landmarks)
    half_x = 0.85 * camera.cx / camera.fx  # stay inside the frustum with margin
    half_y = 0.85 * camera.cy / camera.fy
    u = rng.uniform(-half_x, half_x, size=n_landmarks)
    v = rng.uniform(-half_y, half_y, size=n_landmarks)
    pts = center[None, :] + depth[:, None] * axis[None, :]
    pts = pts + (u * depth)[:, None] * x_dir[None, :] + (v * depth)[:, None] * y_dir[None, :]
    return SimScene(landmarks=pts, camera=camera, extrinsic=extrinsic, trajectory=trajectory)


def synth_imu(
    scene: SimScene,
    noise: NoiseConfig | None = None,
    rate: float = 200.0,
    t0: float = 0.0,
    t1: float | None = None,
) -> tuple[list[ImuSample], list[NavState]]:
    """Synthesize IMU measurements and the exact states at sample times.

    At zero noise the measurements invert the sensor model exactly:
    accel = R_wb^T (a_world + g_world) + b_a with g_world = (0, 0, 9.81).
    """
    noise = noise or NoiseConfig()
    traj = scene.trajectory
    t1 = traj.duration if t1 is None else t1
    times = _ns_grid(t0, t1, rate)
    dt = 1.0 / rate
    rng = np.random.default_rng([noise.seed, 11])
    gyro_sample_std = noise.gyro_noise_std / np.sqrt(dt)
    accel_sample_std = noise.accel_noise_std / np.sqrt(dt)
    gravity = GravityVector.world_default().vector
    bias = noise.bias_state()

    samples = []
    states = []
    for t in times:
        pose = traj.pose(t)
        r_wb = pose.rotation.to_matrix()
        w_true = traj.angular_velocity_body(t)
        a_true = r_wb.T @ (traj.acceleration(t) + gravity)
        w_meas = w_true + noise.gyro_bias + gyro_sample_std * rng.standard_normal(3)
        a_meas = a_true + noise.accel_bias + accel_sample_std * rng.standard_normal(3)
        samples.append(ImuSample(timestamp=float(t), gyro=w_meas, accel=a_meas))
        states.append(NavState(pose=pose, velocity=traj.velocity(t), bias=bias))
    return samples, states


def synth_observations(
    scene: SimScene,
    keyframe_times,
    pixel_noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    min_observations: int = 2,
) -> list[FeatureTrack]:
    """Project landmarks into keyframes; one track per sufficiently seen landmark.

    Visibility is positive depth plus in-image projection. Track ids equal
    landmark indices so tests can look up ground truth directly.
    """
    rng = rng or np.random.default_rng(0)
    camera = scene.camera
    cam_poses = [scene.camera_pose(t).inverse() for t in keyframe_times]
    tracks = []
    for lm_id, point in enumerate(scene.landmarks):
        track = FeatureTrack(track_id=lm_id)
        for k, world_to_cam in enumerate(cam_poses):
            local = world_to_cam.transform(point)
            if local[2] <= 0:
                continue
            proj = camera.project(local)
            if not camera.contains(proj):
                continue
            px = proj + pixel_noise_std * rng.standard_normal(2)
            track.add_observation(k, px, camera.back_project(px))
        if track.length() >= min_observations:
            tracks.append(track)
    return tracks


def make_fragment(
    sim: SimConfig,
    keyframe_count: int = 4,
    rng: np.random.Generator | None = None,
    sequence: str = "sim",
    index: int = 0,
    trajectory: Trajectory | None = None,
    spline_pos_scale: float = 0.12,
    spline_rot_scale: float = 0.15,
) -> Fragment:
    """One synthetic fragment: keyframes at 0.1 s spacing inside one interval."""
    rng = rng or np.random.default_rng(0)
    interval = KEYFRAME_INTERVALS.get(keyframe_count, keyframe_count * KEYFRAME_SPACING)
    if trajectory is None:
        if sim.trajectory == "random_spline":
            trajectory = SplineTrajectory(
                interval, rng, pos_scale=spline_pos_scale, rot_scale=spline_rot_scale
            )
        else:
            trajectory = make_trajectory(sim.trajectory, interval, rng)
    scene = make_scene(
        trajectory,
        rng,
        n_landmarks=sim.n_landmarks,
        depth_range=(sim.depth_min, sim.depth_max),
    )

    def _random_bias(magnitude: float) -> np.ndarray:
        if magnitude == 0.0:
            return np.zeros(3)
        direction = rng.standard_normal(3)
        return magnitude * direction / np.linalg.norm(direction)

    noise = NoiseConfig(
        gyro_noise_std=sim.gyro_noise_std,
        accel_noise_std=sim.accel_noise_std,
        gyro_bias=_random_bias(sim.gyro_bias),
        accel_bias=_random_bias(sim.accel_bias),
        pixel_noise_std=sim.pixel_noise_std,
        seed=int(rng.integers(0, 2**31 - 1)),
    )
    kf_times = _ns_grid(0.0, (keyframe_count - 1) * KEYFRAME_SPACING, 1.0 / KEYFRAME_SPACING)
    samples, _ = synth_imu(scene, noise, rate=sim.imu_rate, t0=0.0, t1=interval)
    obs_rng = np.random.default_rng([noise.seed, 23])
    tracks = synth_observations(scene, kf_times, sim.pixel_noise_std, obs_rng)
    truth = FragmentTruth(
        poses=[trajectory.pose(t) for t in kf_times],
        velocities=np.array([trajectory.velocity(t) for t in kf_times]),
        gravity_world=GravityVector.world_default().vector,
        gyro_bias=noise.gyro_bias,
        accel_bias=noise.accel_bias,
    )
    return Fragment(
        keyframes=list(kf_times),
        tracks=tracks,
        imu=samples,
        camera=scene.camera,
        extrinsic=scene.extrinsic,
        truth=truth,
        sequence=sequence,
        index=index,
    )


class SimulatedFrontEnd(FrontEnd):
    """Deterministic pixel front-end with injected drift and descriptor faults.

    ``flow`` follows scene points but accumulates a per-point drift bias each
    frame (queries are associated to the landmark they were spawned from, so
    offsets compound until a descriptor match snaps the track back).
    ``detect_and_describe`` returns true projections with optional pixel noise
    and per-landmark stable descriptors that are replaced by random bits with
    probability ``descriptor_fail_prob``.
    """

    def __init__(
        self,
        scene: SimScene,
        frame_times,
        flow_drift_px: float = 0.0,
        descriptor_fail_prob: float = 0.0,
        pixel_noise_std: float = 0.0,
        flow_noise_px: float = 0.0,
        seed: int = 0,
        max_features: int = 150,
        assoc_radius_px: float = 3.0,
    ):
        self.scene = scene
        self.frame_times = np.asarray(frame_times, dtype=float)
        self.flow_drift_px = flow_drift_px
        self.descriptor_fail_prob = descriptor_fail_prob
        self.pixel_noise_std = pixel_noise_std
        self.flow_noise_px = flow_noise_px
        self.seed = seed
        self.max_features = max_features
        self.assoc_radius_px = assoc_radius_px
        n = len(scene.landmarks)
        self._bank = np.random.default_rng([seed, 999983]).integers(0, 256, size=(n, 32), dtype=np.uint8)
        directions = np.random.default_rng([seed, 777]).standard_normal((n, 2))
        self._drift_dir = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        self._proj_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        # (frame, quantized pixel) -> (landmark id, accumulated offset)
        self._registry: dict[tuple, tuple[int, np.ndarray]] = {}

    def _projections(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        """True landmark projections and visibility mask for a frame (cached)."""
        if frame not in self._proj_cache:
            cam = self.scene.camera
            world_to_cam = self.scene.camera_pose(self.frame_times[frame]).inverse()
            local = world_to_cam.transform(self.scene.landmarks)
            vis = local[:, 2] > 0
            proj = np.zeros((len(local), 2))
            if np.any(vis):
                proj[vis] = cam.project(local[vis])
                vis = vis & np.array([cam.contains(p) for p in proj])
            self._proj_cache[frame] = (proj, vis)
        return self._proj_cache[frame]

    @staticmethod
    def _key(frame: int, point: np.ndarray) -> tuple:
        return (frame, round(float(point[0]), 4), round(float(point[1]), 4))

    def landmark_ids(self, frame: int) -> np.ndarray:
        """Landmark indices aligned with detect_and_describe keypoint order."""
        proj, vis = self._projections(frame)
        return np.flatnonzero(vis)[: self.max_features]

    def detect_and_describe(self, cur: int) -> FrameFeatures:
        proj, vis = self._projections(cur)
        ids = np.flatnonzero(vis)[: self.max_features]
        rng_noise = np.random.default_rng([self.seed, cur, 2])
        kps = proj[ids] + self.pixel_noise_std * rng_noise.standard_normal((len(ids), 2))
        desc = self._bank[ids].copy()
        if self.descriptor_fail_prob > 0:
            rng_fail = np.random.default_rng([self.seed, cur, 1])
            failed = rng_fail.random(len(ids)) < self.descriptor_fail_prob
            if np.any(failed):
                desc[failed] = rng_fail.integers(0, 256, size=(int(failed.sum()), 32), dtype=np.uint8)
        return FrameFeatures(frame_id=cur, keypoints=kps, descriptors=desc)

    def flow(self, prev_frame: int, cur_frame: int, points: np.ndarray):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        proj_prev, vis_prev = self._projections(prev_frame)
        proj_cur, vis_cur = self._projections(cur_frame)
        rng = np.random.default_rng([self.seed, cur_frame, 3])
        cam = self.scene.camera
        predictions = np.zeros_like(points)
        valid = np.zeros(len(points), dtype=bool)
        visible_ids = np.flatnonzero(vis_prev)
        for k, pt in enumerate(points):
            entry = self._registry.get(self._key(prev_frame, pt))
            if entry is None:
                # First sight of this pixel: adopt the nearest true projection.
                if visible_ids.size == 0:
                    continue
                d = np.linalg.norm(proj_prev[visible_ids] - pt, axis=1)
                j = int(np.argmin(d))
                if d[j] > self.assoc_radius_px:
                    continue
                lm = int(visible_ids[j])
                offset = pt - proj_prev[lm]
            else:
                lm, offset = entry
            if not vis_cur[lm]:
                continue
            offset = offset + self.flow_drift_px * self._drift_dir[lm]
            if self.flow_noise_px > 0:
                offset = offset + self.flow_noise_px * rng.standard_normal(2)
            pred = proj_cur[lm] + offset
            if not cam.contains(pred):
                continue
            predictions[k] = pred
            valid[k] = True
            self._registry[self._key(cur_frame, pred)] = (lm, offset)
        return predictions, valid


def synth_frontends(
    scene: SimScene,
    frame_times,
    flow_drift: float = 0.0,
    descriptor_fail_prob: float = 0.0,
    seed: int = 0,
    **kwargs,
) -> SimulatedFrontEnd:
    """Front-end factory mirroring the drift/failure knobs by name."""
    return SimulatedFrontEnd(
        scene,
        frame_times,
        flow_drift_px=flow_drift,
        descriptor_fail_prob=descriptor_fail_prob,
        seed=seed,
        **kwargs,
    )


def synth_sequence(sim: SimConfig, rng: np.random.Generator | None = None, seed: int = 0):
    """Full synthetic Sequence (IMU + ground truth + camera timestamps).

    Returns a data-io Sequence so simulator output can be dumped in the
    on-disk dataset layout and round-tripped by the loader.
    """
    from .dataio import CalibrationBundle, GroundTruthState, Sequence  # deferred: data-io imports nothing from here

    rng = rng or np.random.default_rng(seed)
    trajectory = make_trajectory(sim.trajectory, sim.duration, rng)
    scene = make_scene(trajectory, rng, n_landmarks=sim.n_landmarks, depth_range=(sim.depth_min, sim.depth_max))
    noise = NoiseConfig(
        gyro_noise_std=sim.gyro_noise_std,
        accel_noise_std=sim.accel_noise_std,
        pixel_noise_std=sim.pixel_noise_std,
        seed=seed,
    )
    samples, states = synth_imu(scene, noise, rate=sim.imu_rate)
    cam_times = _ns_grid(0.0, sim.duration, sim.cam_rate)
    truth = [
        GroundTruthState(
            timestamp=s.timestamp,
            position=st.pose.position,
            attitude=st.pose.rotation,
            velocity=st.velocity,
            gyro_bias=st.bias.gyro_bias,
            accel_bias=st.bias.accel_bias,
        )
        for s, st in zip(samples, states)
    ]
    calib = CalibrationBundle(
        camera=scene.camera,
        extrinsic=scene.extrinsic,
        gyro_noise_density=noise.gyro_noise_std,
        accel_noise_density=noise.accel_noise_std,
        gyro_walk=0.0,
        accel_walk=0.0,
        imu_rate=sim.imu_rate,
    )
    return Sequence(
        name="sim",
        imu=samples,
        ground_truth=truth,
        camera_timestamps=list(cam_times),
        calibration=calib,
        scene=scene,
    )
