"""Tests for the velocity/gravity/scale alignment solve."""

import numpy as np
import pytest

from vioinit.alignment import InitState, va_align
from vioinit.config import PipelineConfig, SimConfig
from vioinit.errors import IllConditioned, LengthMismatch, NonPositiveScale
from vioinit.geometry import Pose
from vioinit.imu import BiasState, NoiseParams, preintegrate
from vioinit.sfm import SfmEstimate
from vioinit.simulate import SinusoidTrajectory, make_fragment


def _fragment(seed=0, keyframe_count=4, trajectory=None, **sim_kwargs):
    sim = SimConfig(**sim_kwargs)
    return make_fragment(
        sim, keyframe_count=keyframe_count, rng=np.random.default_rng(seed), trajectory=trajectory
    )


def _preintegrations(frag, bias=None):
    bias = BiasState.zero() if bias is None else bias
    return [
        preintegrate(frag.imu_between(k, k + 1), bias)
        for k in range(len(frag.keyframes) - 1)
    ]


def _truth_sfm(frag, scale=1.0, gyro_bias=None):
    # Ground-truth camera poses re-anchored to the first camera, with
    # positions divided by the scale the solver is expected to recover.
    cam0 = frag.truth.poses[0].compose(frag.extrinsic)
    world_to_c0 = cam0.inverse()
    cams = [world_to_c0.compose(p.compose(frag.extrinsic)) for p in frag.truth.poses]
    scaled = [Pose(c.rotation, c.position / scale) for c in cams]
    return SfmEstimate(
        camera_poses=scaled,
        landmarks={},
        gyro_bias=np.zeros(3) if gyro_bias is None else gyro_bias,
    )


def _true_gravity_c0(frag):
    cam0 = frag.truth.poses[0].compose(frag.extrinsic)
    return cam0.rotation.to_matrix().T @ frag.truth.gravity_world


def _true_body_velocities(frag):
    return np.stack(
        [
            pose.rotation.to_matrix().T @ vel
            for pose, vel in zip(frag.truth.poses, frag.truth.velocities)
        ]
    )


def _angle_deg(a, b):
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


class TestVaAlign:
    def test_recovers_known_scale_and_gravity(self):
        frag = _fragment(seed=0)
        init = va_align(_truth_sfm(frag, scale=2.5), _preintegrations(frag), frag.extrinsic)
        assert abs(init.scale - 2.5) / 2.5 < 1e-3
        assert _angle_deg(init.gravity_c0, _true_gravity_c0(frag)) < 0.01

    def test_recovers_initial_velocity(self):
        frag = _fragment(seed=1)
        init = va_align(_truth_sfm(frag), _preintegrations(frag), frag.extrinsic)
        truth = _true_body_velocities(frag)
        err = np.linalg.norm(init.velocities[0] - truth[0])
        assert err <= 0.01 * np.linalg.norm(truth[0])

    def test_gravity_magnitude_pinned(self):
        frag = _fragment(seed=2)
        init = va_align(_truth_sfm(frag), _preintegrations(frag), frag.extrinsic)
        assert abs(np.linalg.norm(init.gravity_c0) - 9.81) < 1e-12
        assert 9.0 <= np.linalg.norm(init.gravity_c0) <= 10.5

    def test_input_scale_homogeneity(self):
        frag = _fragment(seed=3)
        pres = _preintegrations(frag)
        a = va_align(_truth_sfm(frag, scale=1.0), pres, frag.extrinsic)
        b = va_align(_truth_sfm(frag, scale=5.0), pres, frag.extrinsic)
        assert abs(b.scale / a.scale - 5.0) < 1e-6
        np.testing.assert_allclose(b.gravity_c0, a.gravity_c0, atol=1e-9)
        np.testing.assert_allclose(b.velocities, a.velocities, atol=1e-9)

    def test_translation_free_fragment_unobservable(self):
        static = SinusoidTrajectory(
            0.6, amplitude=(0.0, 0.0, 0.0), rot_amplitude=(0.0, 0.0, 0.0)
        )
        frag = _fragment(seed=4, trajectory=static)
        with pytest.raises((IllConditioned, NonPositiveScale)):
            va_align(_truth_sfm(frag), _preintegrations(frag), frag.extrinsic)

    def test_condition_threshold_configurable(self):
        frag = _fragment(seed=5)
        config = PipelineConfig(align_max_condition=10.0)
        with pytest.raises(IllConditioned):
            va_align(_truth_sfm(frag), _preintegrations(frag), frag.extrinsic, config)

    def test_preintegration_count_mismatch(self):
        frag = _fragment(seed=6)
        with pytest.raises(LengthMismatch):
            va_align(_truth_sfm(frag), _preintegrations(frag)[:-1], frag.extrinsic)

    def test_rebiases_preintegrations_to_estimate(self):
        # Preintegrations were integrated at zero bias; va_align must apply the
        # first-order correction toward the SfM gyro-bias estimate.
        frag = _fragment(seed=7, gyro_bias=0.02)
        sfm = _truth_sfm(frag, scale=1.0, gyro_bias=frag.truth.gyro_bias)
        init = va_align(sfm, _preintegrations(frag), frag.extrinsic)
        assert abs(init.scale - 1.0) < 5e-3
        assert _angle_deg(init.gravity_c0, _true_gravity_c0(frag)) < 0.2

    def test_refinement_tightens_noisy_gravity(self):
        frag = _fragment(seed=8, accel_noise_std=NoiseParams().accel_noise_density * 20)
        truth = _true_gravity_c0(frag)
        raw = va_align(
            _truth_sfm(frag),
            _preintegrations(frag),
            frag.extrinsic,
            PipelineConfig(gravity_refine_passes=0),
        )
        refined = va_align(_truth_sfm(frag), _preintegrations(frag), frag.extrinsic)
        assert abs(np.linalg.norm(raw.gravity_c0) - 9.81) > 1e-6
        assert _angle_deg(refined.gravity_c0, truth) <= _angle_deg(raw.gravity_c0, truth) + 1e-9

    def test_velocity_shape_matches_keyframes(self):
        frag = _fragment(seed=9, keyframe_count=5)
        init = va_align(_truth_sfm(frag), _preintegrations(frag), frag.extrinsic)
        assert init.velocities.shape == (5, 3)
        np.testing.assert_allclose(init.accel_bias, 0.0)


class TestInitState:
    def test_rejects_non_positive_scale(self):
        with pytest.raises(NonPositiveScale):
            InitState(
                velocities=np.zeros((4, 3)),
                scale=0.0,
                gravity_c0=np.array([0.0, 0.0, 9.81]),
                gyro_bias=np.zeros(3),
            )

    def test_coerces_shapes(self):
        state = InitState(
            velocities=[[1, 2, 3]],
            scale=2.0,
            gravity_c0=[0, 0, 9.81],
            gyro_bias=[0, 0, 0],
        )
        assert state.velocities.shape == (1, 3)
        assert state.gravity_c0.dtype == float
