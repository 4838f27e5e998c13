"""Dataset ingestion: ASL-layout sequences, track CSVs, fragment splitting.

Sequences live in the nested ``mav0/`` directory layout with
nanosecond-timestamp CSVs (``imu0/data.csv``, ``cam0/data.csv``,
``state_groundtruth_estimate0/data.csv``) and per-sensor ``sensor.yaml``
calibration files. Feature tracks are not part of the format; they come from
the simulator front ends or from precomputed track CSVs with the schema
``track_id,frame_timestamp_ns,u_px,v_px`` (undistorted pixels).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .config import BenchmarkConfig
from .errors import (
    MalformedRow,
    MissingFile,
    NonMonotoneTimestamps,
    UnknownFrameTimestamp,
)
from .geometry import PinholeCamera, Pose, UnitQuaternion
from .imu import GravityVector, ImuSample
from .tracks import FeatureTrack, Fragment, FragmentTruth, slice_samples

__all__ = [
    "CalibrationBundle",
    "GroundTruthState",
    "Sequence",
    "load_euroc",
    "load_tracks",
    "split_fragments",
    "write_euroc",
]

# Keyframe times must hit a camera timestamp within this tolerance.
_ASSOCIATION_TOL_S = 0.005


@dataclass(frozen=True)
class GroundTruthState:
    """One ground-truth sample: body pose, velocity, and biases at a time."""

    timestamp: float
    position: np.ndarray
    attitude: UnitQuaternion  # body-to-world
    velocity: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray


@dataclass(frozen=True)
class CalibrationBundle:
    """Camera intrinsics, camera-to-body extrinsic, and IMU noise model."""

    camera: PinholeCamera
    extrinsic: Pose
    gyro_noise_density: float
    accel_noise_density: float
    gyro_walk: float
    accel_walk: float
    imu_rate: float


@dataclass
class Sequence:
    """A loaded (or synthesized) sequence: sensor streams plus calibration."""

    name: str
    imu: list[ImuSample]
    ground_truth: list[GroundTruthState]
    camera_timestamps: list[float]
    calibration: CalibrationBundle
    scene: object = None  # simulator scene when synthesized, else None


def _require(path: Path) -> Path:
    if not path.is_file():
        raise MissingFile(str(path))
    return path


def _data_rows(path: Path, n_cols: int):
    """Yield ``(line_number, fields)`` for CSV data rows, checking the width."""
    with open(_require(path), newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            fields = [c.strip() for c in row]
            if len(fields) != n_cols:
                raise MalformedRow(
                    f"{path.name} line {line_no}: expected {n_cols} columns, "
                    f"got {len(fields)}",
                    row_index=line_no,
                )
            yield line_no, fields


def _parse_floats(fields, path: Path, line_no: int) -> list[float]:
    try:
        return [float(c) for c in fields]
    except ValueError:
        raise MalformedRow(
            f"{path.name} line {line_no}: non-numeric field", row_index=line_no
        ) from None


def _parse_ns(field: str, path: Path, line_no: int) -> float:
    try:
        return int(field) * 1e-9
    except ValueError:
        raise MalformedRow(
            f"{path.name} line {line_no}: bad nanosecond timestamp {field!r}",
            row_index=line_no,
        ) from None


def _check_sorted(times, path: Path):
    t = np.asarray(times)
    if len(t) > 1 and np.any(np.diff(t) <= 0):
        raise NonMonotoneTimestamps(f"{path} timestamps are not strictly increasing")


def _load_yaml(path: Path) -> dict:
    with open(_require(path)) as fh:
        return yaml.safe_load(fh)


def _pose_from_flat(data: list[float]) -> Pose:
    m = np.asarray(data, dtype=float).reshape(4, 4)
    return Pose(UnitQuaternion.from_matrix(m[:3, :3]), m[:3, 3])


def load_euroc(directory) -> Sequence:
    """Load an ASL-layout sequence directory.

    Reads IMU samples, camera timestamps, and ground-truth states from
    ``mav0/``, converting nanosecond timestamps to seconds, and assembles the
    calibration from the camera and IMU ``sensor.yaml`` files (the camera's
    ``T_BS`` is the camera-to-body extrinsic).

    Raises:
        MissingFile: a required CSV or sensor file is absent.
        MalformedRow: a CSV row fails to parse (row index reported).
        NonMonotoneTimestamps: a stream is not strictly time-sorted.
    """
    root = Path(directory)
    mav = root / "mav0"

    imu_csv = mav / "imu0" / "data.csv"
    samples = []
    for line_no, fields in _data_rows(imu_csv, 7):
        t = _parse_ns(fields[0], imu_csv, line_no)
        vals = _parse_floats(fields[1:], imu_csv, line_no)
        samples.append(ImuSample(t, np.array(vals[0:3]), np.array(vals[3:6])))
    _check_sorted([s.timestamp for s in samples], imu_csv)

    cam_csv = mav / "cam0" / "data.csv"
    camera_timestamps = [
        _parse_ns(fields[0], cam_csv, line_no)
        for line_no, fields in _data_rows(cam_csv, 2)
    ]
    _check_sorted(camera_timestamps, cam_csv)

    gt_csv = mav / "state_groundtruth_estimate0" / "data.csv"
    ground_truth = []
    for line_no, fields in _data_rows(gt_csv, 17):
        t = _parse_ns(fields[0], gt_csv, line_no)
        v = _parse_floats(fields[1:], gt_csv, line_no)
        ground_truth.append(
            GroundTruthState(
                timestamp=t,
                position=np.array(v[0:3]),
                attitude=UnitQuaternion.from_wxyz(v[3:7]),
                velocity=np.array(v[7:10]),
                gyro_bias=np.array(v[10:13]),
                accel_bias=np.array(v[13:16]),
            )
        )
    _check_sorted([s.timestamp for s in ground_truth], gt_csv)

    cam_meta = _load_yaml(mav / "cam0" / "sensor.yaml")
    fx, fy, cx, cy = (float(v) for v in cam_meta["intrinsics"])
    width, height = (int(v) for v in cam_meta["resolution"])
    imu_meta = _load_yaml(mav / "imu0" / "sensor.yaml")
    calibration = CalibrationBundle(
        camera=PinholeCamera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height),
        extrinsic=_pose_from_flat(cam_meta["T_BS"]["data"]),
        gyro_noise_density=float(imu_meta["gyroscope_noise_density"]),
        accel_noise_density=float(imu_meta["accelerometer_noise_density"]),
        gyro_walk=float(imu_meta["gyroscope_random_walk"]),
        accel_walk=float(imu_meta["accelerometer_random_walk"]),
        imu_rate=float(imu_meta["rate_hz"]),
    )
    return Sequence(
        name=root.name,
        imu=samples,
        ground_truth=ground_truth,
        camera_timestamps=camera_timestamps,
        calibration=calibration,
    )


def _s_to_ns(t: float) -> int:
    return int(round(t * 1e9))


def write_euroc(sequence: Sequence, directory) -> Path:
    """Dump a sequence in the directory layout :func:`load_euroc` reads.

    Timestamps are written as integer nanoseconds and floats with full
    ``repr`` precision, so loading a dump reproduces the samples bit-exactly.

    Returns:
        The sequence root directory.
    """
    root = Path(directory)
    mav = root / "mav0"
    for sub in ("imu0", "cam0", "state_groundtruth_estimate0"):
        (mav / sub).mkdir(parents=True, exist_ok=True)
    calib = sequence.calibration

    with open(mav / "imu0" / "data.csv", "w") as fh:
        fh.write(
            "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],"
            "w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],"
            "a_RS_S_z [m s^-2]\n"
        )
        for s in sequence.imu:
            vals = ",".join(repr(float(v)) for v in (*s.gyro, *s.accel))
            fh.write(f"{_s_to_ns(s.timestamp)},{vals}\n")

    with open(mav / "cam0" / "data.csv", "w") as fh:
        fh.write("#timestamp [ns],filename\n")
        for t in sequence.camera_timestamps:
            ns = _s_to_ns(t)
            fh.write(f"{ns},{ns}.png\n")

    with open(mav / "state_groundtruth_estimate0" / "data.csv", "w") as fh:
        fh.write("#timestamp,p,q,v,b_w,b_a\n")
        for st in sequence.ground_truth:
            vals = ",".join(
                repr(float(v))
                for v in (
                    *st.position,
                    *st.attitude.wxyz,
                    *st.velocity,
                    *st.gyro_bias,
                    *st.accel_bias,
                )
            )
            fh.write(f"{_s_to_ns(st.timestamp)},{vals}\n")

    cam = calib.camera
    t_bs = np.eye(4)
    t_bs[:3, :3] = calib.extrinsic.rotation.to_matrix()
    t_bs[:3, 3] = calib.extrinsic.position
    with open(mav / "cam0" / "sensor.yaml", "w") as fh:
        yaml.safe_dump(
            {
                "sensor_type": "camera",
                "camera_model": "pinhole",
                "intrinsics": [cam.fx, cam.fy, cam.cx, cam.cy],
                "resolution": [cam.width, cam.height],
                "distortion_model": "radial-tangential",
                "distortion_coefficients": [0.0, 0.0, 0.0, 0.0],
                "T_BS": {"rows": 4, "cols": 4, "data": t_bs.reshape(-1).tolist()},
            },
            fh,
        )
    with open(mav / "imu0" / "sensor.yaml", "w") as fh:
        yaml.safe_dump(
            {
                "sensor_type": "imu",
                "rate_hz": calib.imu_rate,
                "gyroscope_noise_density": calib.gyro_noise_density,
                "gyroscope_random_walk": calib.gyro_walk,
                "accelerometer_noise_density": calib.accel_noise_density,
                "accelerometer_random_walk": calib.accel_walk,
            },
            fh,
        )
    return root


def load_tracks(path, sequence: Sequence) -> list[FeatureTrack]:
    """Load precomputed feature tracks for a sequence.

    The CSV schema is ``track_id,frame_timestamp_ns,u_px,v_px`` with pixels
    already undistorted; normalized coordinates come from the sequence
    calibration. Observation frame ids are indices into the sequence's camera
    timestamps, and rows may arrive in any order.

    Raises:
        MalformedRow: unparsable row or duplicate (track, frame) pair.
        UnknownFrameTimestamp: a row's timestamp is not a camera timestamp.
    """
    path = Path(path)
    cam = sequence.calibration.camera
    frame_of = {_s_to_ns(t): i for i, t in enumerate(sequence.camera_timestamps)}
    rows_by_track: dict[int, dict[int, tuple[float, float]]] = {}
    for line_no, fields in _data_rows(path, 4):
        try:
            track_id = int(fields[0])
            ns = int(fields[1])
        except ValueError:
            raise MalformedRow(
                f"{path.name} line {line_no}: bad id or timestamp", row_index=line_no
            ) from None
        u, v = _parse_floats(fields[2:], path, line_no)
        frame = frame_of.get(ns)
        if frame is None:
            raise UnknownFrameTimestamp(
                f"{path.name} line {line_no}: timestamp {ns} ns is not a "
                "camera frame"
            )
        per_track = rows_by_track.setdefault(track_id, {})
        if frame in per_track:
            raise MalformedRow(
                f"{path.name} line {line_no}: duplicate observation of track "
                f"{track_id} in frame {frame}",
                row_index=line_no,
            )
        per_track[frame] = (u, v)

    tracks = []
    for track_id in sorted(rows_by_track):
        track = FeatureTrack(track_id=track_id)
        for frame in sorted(rows_by_track[track_id]):
            u, v = rows_by_track[track_id][frame]
            normalized = ((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy)
            track.add_observation(frame, (u, v), normalized)
        tracks.append(track)
    return tracks


def write_tracks(tracks: list[FeatureTrack], sequence: Sequence, path) -> Path:
    """Dump feature tracks in the CSV schema :func:`load_tracks` reads.

    Pixels are written with full ``repr`` precision and frame indices become
    the sequence's camera timestamps in nanoseconds, so a load/write cycle is
    bit-exact given the same calibration.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("#track_id,frame_timestamp_ns,u_px,v_px\n")
        for track in tracks:
            for frame in track.frames():
                ns = _s_to_ns(sequence.camera_timestamps[frame])
                u, v = track.pixel(frame)
                fh.write(f"{track.track_id},{ns},{float(u)!r},{float(v)!r}\n")
    return path


def _interp_truth(states: list[GroundTruthState], times: np.ndarray, t: float):
    """Pose/velocity/biases at ``t``: linear for vectors, geodesic for attitude."""
    i = int(np.searchsorted(times, t))
    if i <= 0:
        return states[0]
    if i >= len(states):
        return states[-1]
    a, b = states[i - 1], states[i]
    u = (t - a.timestamp) / (b.timestamp - a.timestamp)
    delta = (a.attitude.inverse() * b.attitude).to_rotvec()
    return GroundTruthState(
        timestamp=t,
        position=(1 - u) * a.position + u * b.position,
        attitude=a.attitude * UnitQuaternion.from_rotvec(u * delta),
        velocity=(1 - u) * a.velocity + u * b.velocity,
        gyro_bias=(1 - u) * a.gyro_bias + u * b.gyro_bias,
        accel_bias=(1 - u) * a.accel_bias + u * b.accel_bias,
    )


def split_fragments(
    sequence: Sequence,
    tracks: list[FeatureTrack] | None,
    config: BenchmarkConfig,
) -> list[Fragment]:
    """Tile a sequence into disjoint fragments per the benchmark protocol.

    Fragments start at the first camera timestamp and advance by
    ``config.interval_s``; each carries ``keyframe_count`` keyframes at
    ``keyframe_spacing_s`` spacing from the start of its interval, the IMU
    samples covering the interval, per-keyframe interpolated ground truth, and
    the sequence tracks re-keyed to keyframe indices. A tile is skipped (the
    tiling continues) when a keyframe has no camera timestamp within 5 ms or
    the IMU/ground truth do not cover it; the short tail of the sequence is
    dropped.

    Args:
        tracks: sequence feature tracks keyed by camera frame index, or None
            when only fragment geometry is needed (e.g. counting).
    """
    count = config.keyframe_count
    spacing = config.keyframe_spacing_s
    interval = config.interval_s
    if count < 4:
        raise ValueError("a fragment needs at least 4 keyframes")
    if count * spacing > interval:
        raise ValueError(
            f"{count} keyframes at {spacing} s spacing exceed the "
            f"{interval} s fragment interval"
        )
    cam_ts = np.asarray(sequence.camera_timestamps, dtype=float)
    if len(cam_ts) == 0 or not sequence.imu:
        return []
    imu_first = sequence.imu[0].timestamp
    imu_last = sequence.imu[-1].timestamp
    gt = sequence.ground_truth
    gt_times = np.array([s.timestamp for s in gt]) if gt else None
    gravity = GravityVector.world_default().vector

    fragments: list[Fragment] = []
    start = float(cam_ts[0])
    tile = 0
    while start + (tile + 1) * interval <= float(cam_ts[-1]) + 1e-9:
        t0 = start + tile * interval
        tile += 1
        kf_idx = []
        for k in range(count):
            target = t0 + k * spacing
            i = int(np.argmin(np.abs(cam_ts - target)))
            if abs(float(cam_ts[i]) - target) > _ASSOCIATION_TOL_S:
                kf_idx = None
                break
            kf_idx.append(i)
        if kf_idx is None or len(set(kf_idx)) != count:
            continue
        kf_times = [float(cam_ts[i]) for i in kf_idx]
        imu_end = min(t0 + interval, imu_last)
        if kf_times[0] < imu_first or kf_times[-1] > imu_last:
            continue
        if gt is not None and gt_times is not None and len(gt):
            if kf_times[0] < gt_times[0] or kf_times[-1] > gt_times[-1]:
                continue
            at = [_interp_truth(gt, gt_times, t) for t in kf_times]
            truth = FragmentTruth(
                poses=[Pose(s.attitude, s.position) for s in at],
                velocities=np.stack([s.velocity for s in at]),
                gravity_world=gravity,
                gyro_bias=at[0].gyro_bias,
                accel_bias=at[0].accel_bias,
            )
        else:
            truth = None
        frag_tracks = []
        for track in tracks or []:
            cut = FeatureTrack(track_id=track.track_id)
            for j, ci in enumerate(kf_idx):
                if ci in track.observations:
                    cut.add_observation(j, track.pixel(ci), track.normalized(ci))
            if cut.length() >= 2:
                frag_tracks.append(cut)
        fragments.append(
            Fragment(
                keyframes=kf_times,
                tracks=frag_tracks,
                imu=slice_samples(sequence.imu, kf_times[0], imu_end),
                camera=sequence.calibration.camera,
                extrinsic=sequence.calibration.extrinsic,
                truth=truth,
                sequence=sequence.name,
                index=len(fragments),
            )
        )
    return fragments
