"""Hybrid feature-track fusion over pluggable flow/descriptor front-ends.

Per frame, tracks are matched in three stages: (1) triangulated tracks are
projected with the IMU-propagated pose prior and matched by descriptor inside
a search window; (2) remaining tracks get a flow-predicted location and a
descriptor match around it; (3) when the descriptor fails but flow is valid,
the flow location itself becomes the match (descriptor retained). Outliers
are removed by epipolar RANSAC and new tracks are spawned from unmatched
detections whenever the live count drops below the minimum.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .config import MatchingConfig
from .errors import (
    FlowLost,
    NoConsensus,
    ProjectionOutOfImage,
    TooFewCorrespondences,
)
from .geometry import PinholeCamera, Pose, UnitQuaternion
from .ransac import fundamental_ransac, two_point_ransac
from .tracks import FeatureTrack

PROJECTION_3D = "Projection3D"
DESCRIPTOR_2D = "DescriptorWith2DPrior"
FLOW_FALLBACK = "FlowFallback"


@dataclass
class FrameFeatures:
    """Detected keypoints and their 256-bit binary descriptors."""

    frame_id: int
    keypoints: np.ndarray  # (K, 2) pixels
    descriptors: np.ndarray  # (K, 32) uint8

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(-1, 32)
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoints and descriptors must be aligned")


class FrontEnd(ABC):
    """Pixel-processing interface; implementations must be seed-deterministic."""

    @abstractmethod
    def flow(self, prev_frame: int, cur_frame: int, points: np.ndarray):
        """Predict point locations in the current frame.

        Returns:
            (predicted (N, 2), valid (N,) bool).
        """

    @abstractmethod
    def detect_and_describe(self, cur_frame: int) -> FrameFeatures:
        """Detect up to max_features keypoints with descriptors."""


@dataclass
class MatchOutcome:
    matched_by: str  # PROJECTION_3D | DESCRIPTOR_2D | FLOW_FALLBACK
    location: np.ndarray  # pixels


@dataclass
class MatchSet:
    """Per-track outcomes for one frame: matched entries or dropped ids."""

    frame_id: int
    outcomes: dict = field(default_factory=dict)  # track_id -> MatchOutcome
    dropped: list = field(default_factory=list)  # track ids dropped this frame
    new_track_ids: list = field(default_factory=list)
    too_few_matches: bool = False  # RANSAC skipped, everything retained
    ransac_removed: int = 0


class TrackTable:
    """Mutable track state threaded through sequential hyb_match calls."""

    def __init__(self, camera: PinholeCamera):
        self.camera = camera
        self.tracks: list[FeatureTrack] = []
        self.next_id = 0
        self.last_frame: int | None = None
        self.last_pose: Pose | None = None  # camera-to-world at last_frame

    def live(self) -> list[FeatureTrack]:
        return [t for t in self.tracks if not t.dropped]

    def spawn(self, frame_id: int, pixel: np.ndarray, descriptor: np.ndarray) -> FeatureTrack:
        track = FeatureTrack(track_id=self.next_id, descriptor=descriptor.copy())
        track.add_observation(frame_id, pixel, self.camera.back_project(pixel))
        self.next_id += 1
        self.tracks.append(track)
        return track


def hamming_distance(descriptor: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Hamming distances between one (32,) descriptor and (M, 32) candidates."""
    x = np.bitwise_xor(candidates, descriptor[None, :])
    return np.unpackbits(x, axis=1).sum(axis=1)


# Binary descriptors are 256-bit; random ones land near 128. A true match must
# beat this absolute bound even when the ratio test is vacuous (one candidate).
MAX_HAMMING = 80


def knn_descriptor_match(
    descriptor: np.ndarray,
    features: FrameFeatures,
    center: np.ndarray,
    radius: float,
    ratio: float,
) -> int | None:
    """Best descriptor match within a circular window, ratio-tested.

    Returns the keypoint index or None when no acceptable match exists.
    """
    if descriptor is None or len(features.keypoints) == 0:
        return None
    d2 = np.sum((features.keypoints - center) ** 2, axis=1)
    in_window = np.flatnonzero(d2 <= radius * radius)
    if in_window.size == 0:
        return None
    dists = hamming_distance(descriptor, features.descriptors[in_window])
    order = np.argsort(dists, kind="stable")
    best = int(order[0])
    if dists[best] > MAX_HAMMING:
        return None
    if order.size >= 2:
        second = int(order[1])
        if dists[best] >= ratio * dists[second]:
            return None
    return int(in_window[best])


def match_with_3d_projection(
    track: FeatureTrack,
    point_world: np.ndarray,
    pose_prior: Pose,
    features: FrameFeatures,
    camera: PinholeCamera,
    config: MatchingConfig,
) -> int | None:
    """Match a triangulated track by projecting its landmark into the frame.

    Returns the matched keypoint index, or None when the descriptor search
    fails (caller falls through to the 2D-prior stage).

    Raises:
        ProjectionOutOfImage: landmark projects behind the camera or outside
            the image bounds (also routed to the 2D stage by the caller).
    """
    local = pose_prior.inverse().transform(point_world)
    if local[2] <= 0:
        raise ProjectionOutOfImage("landmark behind the camera under the pose prior")
    proj = camera.project(local)
    if not camera.contains(proj):
        raise ProjectionOutOfImage("landmark projects outside the image")
    return knn_descriptor_match(track.descriptor, features, proj, config.search_radius_px, config.ratio)


def match_with_2d_prior(
    track: FeatureTrack,
    prediction: np.ndarray,
    flow_valid: bool,
    features: FrameFeatures,
    config: MatchingConfig,
) -> tuple[np.ndarray, int | None, str]:
    """Match around a flow-predicted location, falling back to the flow itself.

    Returns:
        (location, keypoint index or None, stage label).

    Raises:
        FlowLost: flow invalid and the descriptor search found nothing.
    """
    prev_px = track.pixel(track.last_frame())
    center = prediction if flow_valid else prev_px
    idx = knn_descriptor_match(track.descriptor, features, center, config.search_radius_px, config.ratio)
    if idx is not None:
        return features.keypoints[idx], idx, DESCRIPTOR_2D
    if flow_valid:
        return np.asarray(prediction, dtype=float), None, FLOW_FALLBACK
    raise FlowLost(f"track {track.track_id}: flow invalid and no descriptor match")


def ransac_outlier_reject(
    prev_px: np.ndarray,
    cur_px: np.ndarray,
    config: MatchingConfig,
    rng: np.random.Generator,
    camera: PinholeCamera | None = None,
    rotation_prior: UnitQuaternion | None = None,
) -> tuple[np.ndarray, bool]:
    """Epipolar-consistency inlier mask over matched locations.

    Uses a fundamental-matrix model with >= 8 matches; with fewer (or on
    model failure) and a known relative rotation, falls back to the
    rotation-prior two-point model. Returns ``(mask, too_few)`` where
    ``too_few`` means no model was applicable and everything was retained.
    """
    n = len(prev_px)
    if n >= config.min_matches_for_fundamental:
        try:
            return fundamental_ransac(prev_px, cur_px, config.ransac_threshold_px, rng), False
        except (TooFewCorrespondences, NoConsensus):
            pass
    if rotation_prior is not None and camera is not None and n >= 2:
        try:
            res = two_point_ransac(
                camera.back_project(prev_px),
                camera.back_project(cur_px),
                rotation_prior,
                focal_px=camera.fx,
                rng=rng,
            )
            return res.inliers, False
        except (TooFewCorrespondences, NoConsensus):
            pass
    return np.ones(n, dtype=bool), True


def hyb_match(
    table: TrackTable,
    cur: int,
    pose_prior: Pose | None,
    landmarks: dict | None,
    frontend: FrontEnd,
    config: MatchingConfig | None = None,
    rng: np.random.Generator | None = None,
    mode: str = "hybrid",
) -> MatchSet:
    """Advance the track table by one frame with staged match fusion.

    Args:
        table: mutable track state (updated in place).
        cur: current frame id (must exceed the last processed id).
        pose_prior: IMU-propagated camera-to-world pose for the current frame
            (enables the 3D projection stage; may be None).
        landmarks: track_id -> world point for triangulated tracks.
        frontend: pixel front-end supplying flow and detections.
        config: matching thresholds.
        rng: randomness for RANSAC (fixed seed -> deterministic output).
        mode: "hybrid", "descriptor_only" (global descriptor matching, no
            flow), or "flow_only" (flow positions only) — baselines for trend
            comparisons.

    Returns:
        MatchSet describing per-track outcomes, drops, and spawned tracks.
    """
    config = config or MatchingConfig()
    rng = rng or np.random.default_rng(0)
    landmarks = landmarks or {}
    features = frontend.detect_and_describe(cur)
    if len(features.keypoints) > config.max_features:
        features = FrameFeatures(
            features.frame_id,
            features.keypoints[: config.max_features],
            features.descriptors[: config.max_features],
        )
    out = MatchSet(frame_id=cur)
    camera = table.camera

    live = table.live()
    prev = table.last_frame
    consumed: set[int] = set()  # keypoint indices already claimed
    matches: list[tuple[FeatureTrack, np.ndarray, str, int | None]] = []
    pending_2d: list[FeatureTrack] = []

    if mode == "hybrid":
        for track in live:
            point = landmarks.get(track.track_id)
            if track.triangulated and point is not None and pose_prior is not None:
                try:
                    idx = match_with_3d_projection(track, point, pose_prior, features, camera, config)
                except ProjectionOutOfImage:
                    idx = None
                if idx is not None and idx not in consumed:
                    consumed.add(idx)
                    matches.append((track, features.keypoints[idx], PROJECTION_3D, idx))
                    continue
            pending_2d.append(track)
    else:
        pending_2d = list(live)

    # 2D stage needs a previous observation for the flow query.
    flow_tracks = [t for t in pending_2d if prev is not None and prev in t.observations]
    for track in pending_2d:
        if track not in flow_tracks:
            out.dropped.append(track.track_id)
            track.dropped = True

    if flow_tracks:
        prev_pts = np.array([t.pixel(prev) for t in flow_tracks])
        if mode == "descriptor_only":
            predictions = prev_pts
            valid = np.zeros(len(flow_tracks), dtype=bool)
        else:
            predictions, valid = frontend.flow(prev, cur, prev_pts)
        for k, track in enumerate(flow_tracks):
            if mode == "flow_only":
                if valid[k] and camera.contains(predictions[k]):
                    matches.append((track, np.asarray(predictions[k], dtype=float), FLOW_FALLBACK, None))
                else:
                    out.dropped.append(track.track_id)
                    track.dropped = True
                continue
            if mode == "descriptor_only":
                idx = knn_descriptor_match(
                    track.descriptor, features, prev_pts[k], radius=1e9, ratio=config.ratio
                )
                if idx is not None and idx not in consumed:
                    consumed.add(idx)
                    matches.append((track, features.keypoints[idx], DESCRIPTOR_2D, idx))
                else:
                    out.dropped.append(track.track_id)
                    track.dropped = True
                continue
            try:
                loc, idx, how = match_with_2d_prior(track, predictions[k], bool(valid[k]), features, config)
            except FlowLost:
                out.dropped.append(track.track_id)
                track.dropped = True
                continue
            if idx is not None:
                if idx in consumed:
                    # Keypoint already claimed; keep the flow location if valid.
                    if valid[k]:
                        matches.append((track, np.asarray(predictions[k], dtype=float), FLOW_FALLBACK, None))
                    else:
                        out.dropped.append(track.track_id)
                        track.dropped = True
                    continue
                consumed.add(idx)
            if how == FLOW_FALLBACK and not camera.contains(loc):
                out.dropped.append(track.track_id)
                track.dropped = True
                continue
            matches.append((track, loc, how, idx))

    # Epipolar outlier rejection over tracks with a previous observation.
    with_prev = [m for m in matches if prev is not None and prev in m[0].observations]
    if len(with_prev) >= 2:
        prev_arr = np.array([m[0].pixel(prev) for m in with_prev])
        cur_arr = np.array([m[1] for m in with_prev])
        keep, too_few = ransac_outlier_reject(prev_arr, cur_arr, config, rng, camera)
        out.too_few_matches = too_few
        if not too_few:
            rejected = {id(m[0]) for m, ok in zip(with_prev, keep) if not ok}
            out.ransac_removed = len(rejected)
            kept_matches = []
            for m in matches:
                if id(m[0]) in rejected:
                    out.dropped.append(m[0].track_id)
                    m[0].dropped = True
                else:
                    kept_matches.append(m)
            matches = kept_matches

    for track, loc, how, idx in matches:
        track.add_observation(cur, loc, camera.back_project(loc))
        if idx is not None:
            track.descriptor = features.descriptors[idx].copy()
        out.outcomes[track.track_id] = MatchOutcome(matched_by=how, location=np.asarray(loc, dtype=float))

    # Spawn replacements from unclaimed detections, keeping separation.
    live_count = len(matches)
    if live_count < config.min_tracks:
        occupied = [m[1] for m in matches]
        for idx in range(len(features.keypoints)):
            if live_count >= config.min_tracks:
                break
            if idx in consumed:
                continue
            kp = features.keypoints[idx]
            if occupied and np.min(np.linalg.norm(np.array(occupied) - kp, axis=1)) < config.min_separation_px:
                continue
            track = table.spawn(cur, kp, features.descriptors[idx])
            out.new_track_ids.append(track.track_id)
            occupied.append(kp)
            live_count += 1

    table.last_frame = cur
    table.last_pose = pose_prior
    return out
