"""Feature tracks and keyframe fragments shared across modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Landmark, PinholeCamera, Pose
from .imu import BiasState, ImuSample


@dataclass
class TrackObservation:
    """One observation of a track: pixel and normalized image coordinates."""

    pixel: np.ndarray
    normalized: np.ndarray

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)
        self.normalized = np.asarray(self.normalized, dtype=float).reshape(2)


@dataclass
class FeatureTrack:
    """A feature observed across frames, optionally carrying a landmark.

    Observation frame ids are strictly increasing; a dropped track is frozen
    and never receives further observations.
    """

    track_id: int
    observations: dict[int, TrackObservation] = field(default_factory=dict)
    descriptor: np.ndarray | None = None  # latest 256-bit descriptor, (32,) uint8
    triangulated: bool = False
    landmark: Landmark | None = None
    dropped: bool = False

    def add_observation(self, frame_id: int, pixel, normalized):
        if self.dropped:
            raise ValueError(f"track {self.track_id} is dropped and frozen")
        if self.observations and frame_id <= max(self.observations):
            raise ValueError("observation frame ids must be strictly increasing")
        self.observations[frame_id] = TrackObservation(pixel, normalized)

    def frames(self) -> list[int]:
        return list(self.observations.keys())

    def pixel(self, frame_id: int) -> np.ndarray:
        return self.observations[frame_id].pixel

    def normalized(self, frame_id: int) -> np.ndarray:
        return self.observations[frame_id].normalized

    def last_frame(self) -> int:
        return max(self.observations)

    def length(self) -> int:
        return len(self.observations)


def common_tracks(tracks: list[FeatureTrack], frame_i: int, frame_j: int) -> list[FeatureTrack]:
    """Tracks observed in both frames."""
    return [t for t in tracks if frame_i in t.observations and frame_j in t.observations]


@dataclass
class FragmentTruth:
    """Per-keyframe ground truth carried by simulated/dataset fragments."""

    poses: list[Pose]  # body-to-world at each keyframe
    velocities: np.ndarray  # (K, 3) world frame
    gravity_world: np.ndarray  # (3,) reaction vector, nominally (0, 0, 9.81)
    gyro_bias: np.ndarray
    accel_bias: np.ndarray

    def __post_init__(self):
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 3)
        self.gravity_world = np.asarray(self.gravity_world, dtype=float).reshape(3)
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float).reshape(3)
        self.accel_bias = np.asarray(self.accel_bias, dtype=float).reshape(3)


@dataclass
class Fragment:
    """A short keyframe window with tracks and covering IMU samples.

    Track observations are keyed by keyframe index (0..len(keyframes)-1).
    ``extrinsic`` maps camera to IMU/body coordinates: x_b = R x_c + p.
    """

    keyframes: list[float]  # timestamps, uniform spacing
    tracks: list[FeatureTrack]
    imu: list[ImuSample]
    camera: PinholeCamera
    extrinsic: Pose
    truth: FragmentTruth | None = None
    sequence: str = ""
    index: int = 0

    def __post_init__(self):
        if len(self.keyframes) < 4:
            raise ValueError("a fragment needs at least 4 keyframes")
        for track in self.tracks:
            if track.length() < 2:
                raise ValueError(f"track {track.track_id} observed in fewer than 2 keyframes")
        if self.imu:
            t0, t1 = self.imu[0].timestamp, self.imu[-1].timestamp
            if t0 > self.keyframes[0] + 1e-9 or t1 < self.keyframes[-1] - 1e-9:
                raise ValueError("IMU samples must cover the keyframe span")

    def imu_between(self, i: int, j: int) -> list[ImuSample]:
        """Samples covering exactly [keyframe i, keyframe j].

        Boundary samples are linearly interpolated when no raw sample falls on
        a keyframe time, so the integrated interval matches the frame interval.
        """
        t0, t1 = self.keyframes[i], self.keyframes[j]
        return slice_samples(self.imu, t0, t1)


def _interp_sample(a: ImuSample, b: ImuSample, t: float) -> ImuSample:
    u = (t - a.timestamp) / (b.timestamp - a.timestamp)
    return ImuSample(t, a.gyro + u * (b.gyro - a.gyro), a.accel + u * (b.accel - a.accel))


def slice_samples(samples: list[ImuSample], t0: float, t1: float) -> list[ImuSample]:
    """Samples spanning exactly [t0, t1], interpolating the boundaries."""
    times = np.array([s.timestamp for s in samples])
    inner = [s for s, t in zip(samples, times) if t0 + 1e-9 < t < t1 - 1e-9]
    lo = int(np.searchsorted(times, t0 + 1e-9)) - 1
    hi = int(np.searchsorted(times, t1 - 1e-9))
    out = []
    if abs(times[max(lo, 0)] - t0) < 1e-9 or lo < 0:
        out.append(samples[max(lo, 0)])
    else:
        out.append(_interp_sample(samples[lo], samples[lo + 1], t0))
    out.extend(inner)
    if hi < len(samples) and abs(times[hi] - t1) < 1e-9:
        out.append(samples[hi])
    elif hi < len(samples):
        out.append(_interp_sample(samples[hi - 1], samples[hi], t1))
    else:
        out.append(samples[-1])
    return out
