"""Configuration dataclasses and YAML round-trip, keyed by module."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .imu import NoiseParams, StaticThresholds

# Fragment interval presets per keyframe count (seconds).
KEYFRAME_INTERVALS = {4: 0.6, 5: 0.8, 10: 1.2}
KEYFRAME_SPACING = 0.1


@dataclass
class LmConfig:
    """Levenberg-Marquardt schedule shared by all solvers."""

    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_iterations: int = 30
    cost_tolerance: float = 1e-8  # relative cost change for termination


@dataclass
class RansacConfig:
    max_iterations: int = 100
    confidence: float = 0.99  # adaptive early-exit confidence
    inlier_threshold_px: float = 1.5
    min_inlier_ratio: float = 0.5
    degeneracy_threshold: float = 1e-6  # mean |R x_j x x_i| below this = no translation signal


@dataclass
class PipelineConfig:
    """Thresholds and ablation switches for fragment initialization."""

    min_pair_tracks: int = 8
    min_landmarks: int = 15
    min_pnp_observations: int = 4
    triangulation_min_angle_deg: float = 1.0
    huber_delta_px: float = 1.5
    pixel_noise_px: float = 1.0
    weight_max: float = math.exp(4.0)  # disparity weight numerator
    weight_min: float = 1.0
    weight_parallax_min_px: float = 20.0
    align_max_condition: float = 1e8
    gravity_refine_passes: int = 2
    estimate_accel_bias: bool = True
    # Zero-mean prior keeping the weakly observable accel bias from trading
    # against global tilt on short fragments (typical MEMS bias magnitude).
    accel_bias_prior_sigma: float = 0.1
    use_two_point: bool = True  # False switches to the 5-point ablation solver
    use_vg_ba: bool = True
    use_vi_ba: bool = True
    use_parallax_weight: bool = True
    lm: LmConfig = field(default_factory=LmConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    static: StaticThresholds = field(default_factory=StaticThresholds)
    noise: NoiseParams = field(default_factory=NoiseParams)


@dataclass
class MatchingConfig:
    max_features: int = 150
    min_tracks: int = 150  # spawn new tracks below this count
    search_radius_px: float = 10.0
    ratio: float = 0.7  # descriptor ratio test
    min_separation_px: float = 20.0  # new tracks keep this distance from live ones
    ransac_threshold_px: float = 1.5
    min_matches_for_fundamental: int = 8


@dataclass
class SimConfig:
    """Synthetic-benchmark scene parameters."""

    trajectory: str = "random_spline"
    duration: float = 60.0
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    n_landmarks: int = 200
    depth_min: float = 2.0
    depth_max: float = 10.0
    fragments: int = 50
    gyro_noise_std: float = 0.0  # injected measurement noise (densities)
    accel_noise_std: float = 0.0
    pixel_noise_std: float = 0.0
    gyro_bias: float = 0.0  # per-axis constant bias magnitude
    accel_bias: float = 0.0


@dataclass
class BenchmarkConfig:
    """Everything a benchmark sweep needs, keyed by module."""

    dataset_dir: str | None = None  # None = simulator mode
    sequences: list[str] = field(default_factory=list)  # empty = all subdirs
    track_dir: str | None = None  # precomputed track CSVs for dataset mode
    interval_s: float = 0.6
    keyframe_spacing_s: float = KEYFRAME_SPACING
    keyframe_count: int = 4
    seed: int = 0
    jobs: int = 1
    out_dir: str = "results"
    ate_alignment: str = "similarity"
    epipolar_raw_product: bool = False
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.keyframe_count < 4:
            raise ValueError("keyframe_count must be >= 4")
        if self.keyframe_count * self.keyframe_spacing_s > self.interval_s + 1e-9:
            raise ValueError("keyframe_count * keyframe_spacing_s must fit inside interval_s")

    def with_keyframes(self, kf: int) -> "BenchmarkConfig":
        """Preset interval for a keyframe count (4 -> 0.6 s, 5 -> 0.8 s, 10 -> 1.2 s)."""
        if kf not in KEYFRAME_INTERVALS:
            raise ValueError(f"keyframe presets exist for {sorted(KEYFRAME_INTERVALS)}, got {kf}")
        out = _from_dict_typed(BenchmarkConfig, _to_dict(self))
        out.keyframe_count = kf
        out.interval_s = KEYFRAME_INTERVALS[kf]
        out.validate()
        return out


def _to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_dict(v) for v in obj]
    return obj


# String annotations (from __future__ import annotations) hide the real types,
# so map nested dataclass fields explicitly for parsing.
_NESTED = {
    "lm": LmConfig,
    "ransac": RansacConfig,
    "static": StaticThresholds,
    "noise": NoiseParams,
    "pipeline": PipelineConfig,
    "matching": MatchingConfig,
    "sim": SimConfig,
}


def _from_dict_typed(cls, data: dict):
    kwargs = {}
    fields = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _from_dict_typed(_NESTED[key], value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(path) -> BenchmarkConfig:
    """Load a benchmark configuration from YAML.

    Raises:
        ValueError: unknown keys or invariant violations.
        FileNotFoundError: missing file.
    """
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError("config root must be a mapping")
    return _from_dict_typed(BenchmarkConfig, data)


def save_config(config: BenchmarkConfig, path):
    Path(path).write_text(yaml.safe_dump(_to_dict(config), sort_keys=False))
