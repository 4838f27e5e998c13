"""Tests for rotation/pose/camera primitives and trajectory alignment."""

import math

import numpy as np
import pytest

from vioinit.errors import InsufficientPoses, NonPositiveDepth
from vioinit.geometry import (
    AlignmentResult,
    Landmark,
    PinholeCamera,
    Pose,
    UnitQuaternion,
    align_trajectories,
    quat_from_rotvec,
    skew,
    so3_exp,
    so3_right_jacobian,
    tangent_basis,
    triangulate,
    umeyama,
)


def taylor_rotation_matrix(theta, terms=20):
    """Independent oracle: matrix exponential of [theta]x by Taylor series."""
    a = skew(np.asarray(theta, dtype=float))
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ a / k
        out = out + term
    return out


def random_rotvec(rng, max_angle=math.pi * 0.99):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0, max_angle)


class TestQuatFromRotvec:
    def test_zero_is_identity(self):
        q = quat_from_rotvec(np.zeros(3))
        assert np.allclose(q.wxyz, [1, 0, 0, 0])

    def test_quarter_turn_about_z(self):
        q = quat_from_rotvec([0, 0, math.pi / 2])
        assert np.allclose(q.wxyz, [math.cos(math.pi / 4), 0, 0, math.sin(math.pi / 4)], atol=1e-15)

    def test_matches_taylor_series_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            theta = random_rotvec(rng, max_angle=0.5)
            q = quat_from_rotvec(theta)
            assert np.abs(q.to_matrix() - taylor_rotation_matrix(theta)).max() < 1e-12

    def test_large_and_tiny_angles(self):
        rng = np.random.default_rng(1)
        for scale in (1e-12, 1e-9, 1e-6, 1.0, 3.0):
            theta = random_rotvec(rng, max_angle=1.0) * scale / 1.0
            q = quat_from_rotvec(theta)
            assert np.abs(q.to_matrix() - taylor_rotation_matrix(theta)).max() < 1e-11
            assert abs(np.linalg.norm(q.wxyz) - 1) < 1e-9


class TestUnitQuaternion:
    def test_norm_and_canonical_sign(self):
        q = UnitQuaternion(-2.0, 0.0, 2.0, 0.0)
        assert abs(np.linalg.norm(q.wxyz) - 1) < 1e-12
        assert q.w >= 0

    def test_composition_associative(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b, c = (UnitQuaternion.from_rotvec(random_rotvec(rng)) for _ in range(3))
            lhs = ((a * b) * c).wxyz
            rhs = (a * (b * c)).wxyz
            assert np.abs(lhs - rhs).max() < 1e-12

    def test_inverse_gives_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            q = UnitQuaternion.from_rotvec(random_rotvec(rng))
            assert (q * q.inverse()).angle_to(UnitQuaternion.identity()) < 1e-12

    def test_rotate_matches_matrix(self):
        rng = np.random.default_rng(4)
        q = UnitQuaternion.from_rotvec(random_rotvec(rng))
        v = rng.normal(size=(7, 3))
        assert np.allclose(q.rotate(v), v @ q.to_matrix().T)

    def test_matrix_round_trip_all_branches(self):
        # Rotations near 180 deg about each axis exercise every Shepperd branch.
        rng = np.random.default_rng(5)
        vecs = [random_rotvec(rng) for _ in range(50)]
        vecs += [np.array(a) * (math.pi - 1e-3) for a in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
        for theta in vecs:
            q = UnitQuaternion.from_rotvec(theta)
            q2 = UnitQuaternion.from_matrix(q.to_matrix())
            assert q.angle_to(q2) < 1e-9

    def test_rotvec_round_trip(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            theta = random_rotvec(rng)
            back = UnitQuaternion.from_rotvec(theta).to_rotvec()
            assert np.abs(back - theta).max() < 1e-9


def test_right_jacobian_first_order():
    rng = np.random.default_rng(7)
    for _ in range(20):
        r = random_rotvec(rng, max_angle=2.0)
        d = rng.normal(size=3) * 1e-6
        lhs = so3_exp(r + d)
        rhs = so3_exp(r) @ so3_exp(so3_right_jacobian(r) @ d)
        assert np.abs(lhs - rhs).max() < 1e-10


class TestPose:
    def test_compose_inverse_identity(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            p = Pose(UnitQuaternion.from_rotvec(random_rotvec(rng)), rng.normal(size=3))
            ident = p.compose(p.inverse())
            assert ident.rotation.angle_to(UnitQuaternion.identity()) < 1e-9
            assert np.abs(ident.position).max() < 1e-9

    def test_transform_matches_compose(self):
        rng = np.random.default_rng(9)
        a = Pose(UnitQuaternion.from_rotvec(random_rotvec(rng)), rng.normal(size=3))
        b = Pose(UnitQuaternion.from_rotvec(random_rotvec(rng)), rng.normal(size=3))
        x = rng.normal(size=3)
        assert np.allclose(a.compose(b).transform(x), a.transform(b.transform(x)))


class TestPinholeCamera:
    def test_axis_point(self):
        cam = PinholeCamera(fx=1, fy=1, cx=0, cy=0, width=10, height=10)
        assert np.allclose(cam.project(np.array([0.0, 0.0, 1.0])), [0, 0])

    def test_hand_arithmetic(self):
        cam = PinholeCamera(fx=460, fy=460, cx=320, cy=240, width=752, height=480)
        assert np.allclose(cam.project(np.array([1.0, 2.0, 2.0])), [550, 700])

    def test_round_trip(self):
        cam = PinholeCamera(fx=460, fy=455, cx=320, cy=240, width=752, height=480)
        rng = np.random.default_rng(10)
        pts = rng.uniform([-2, -2, 0.5], [2, 2, 10], size=(1000, 3))
        norm = cam.back_project(cam.project(pts))
        rays = np.concatenate([norm, np.ones((1000, 1))], axis=1)
        assert np.abs(rays * pts[:, 2:] - pts).max() < 1e-12

    def test_nonpositive_depth(self):
        cam = PinholeCamera(fx=1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(NonPositiveDepth):
            cam.project(np.array([0.0, 0.0, -1.0]))
        with pytest.raises(NonPositiveDepth):
            cam.project(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]))

    def test_invariant_validation(self):
        with pytest.raises(ValueError):
            PinholeCamera(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
        with pytest.raises(ValueError):
            PinholeCamera(fx=1, fy=1, cx=20, cy=0, width=10, height=10)

    def test_contains(self):
        cam = PinholeCamera(fx=1, fy=1, cx=5, cy=5, width=11, height=11)
        mask = cam.contains(np.array([[0, 0], [10, 10], [-1, 5], [5, 11]]))
        assert mask.tolist() == [True, True, False, False]


class TestTriangulate:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.pose_i = Pose.identity()
        self.pose_j = Pose(UnitQuaternion.from_rotvec([0.0, 0.05, 0.0]), np.array([0.5, 0.0, 0.0]))
        self.rng = rng

    def obs(self, pose, point):
        local = pose.inverse().transform(point)
        return local[:2] / local[2]

    def test_noise_free_recovery(self):
        for _ in range(100):
            point = self.rng.uniform([-1, -1, 2], [1, 1, 8])
            res = triangulate(self.pose_i, self.pose_j, self.obs(self.pose_i, point), self.obs(self.pose_j, point))
            assert res.ok
            assert np.abs(res.point - point).max() < 1e-9

    def test_zero_baseline_flagged(self):
        res = triangulate(self.pose_i, self.pose_i, np.array([0.1, 0.0]), np.array([0.1, 0.0]))
        assert not res.ok

    def test_small_angle_flagged(self):
        far = np.array([0.0, 0.0, 1e5])
        res = triangulate(self.pose_i, self.pose_j, self.obs(self.pose_i, far), self.obs(self.pose_j, far))
        assert not res.ok and res.angle_deg < 1.0

    def test_cheirality_flagged(self):
        # Correspondence constructed from a point behind camera i.
        point = np.array([0.2, 0.1, -3.0])
        local_i = self.pose_i.inverse().transform(point)
        local_j = self.pose_j.inverse().transform(point)
        res = triangulate(
            self.pose_i, self.pose_j, local_i[:2] / local_i[2], local_j[:2] / local_j[2]
        )
        assert not res.ok


class TestLandmark:
    def test_world_point(self):
        anchor = Pose(UnitQuaternion.from_rotvec([0, 0, 0.3]), np.array([1.0, -2.0, 0.5]))
        lm = Landmark(anchor_frame=0, anchor_observation=[0.2, -0.1], inverse_depth=0.25)
        expect = anchor.transform(np.array([0.2, -0.1, 1.0]) * 4.0)
        assert np.allclose(lm.position_in_world(anchor), expect)


def random_trajectory(rng, n=12):
    poses = []
    for k in range(n):
        poses.append(
            Pose(UnitQuaternion.from_rotvec(random_rotvec(rng, 1.5)), rng.normal(scale=2.0, size=3))
        )
    return poses


class TestAlignTrajectories:
    def test_identity_case(self):
        rng = np.random.default_rng(12)
        traj = random_trajectory(rng)
        res = align_trajectories(traj, traj)
        assert abs(res.scale - 1.0) < 1e-12
        assert np.abs(res.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(res.translation).max() < 1e-12

    def test_reference_scaled_by_two(self):
        rng = np.random.default_rng(13)
        traj = random_trajectory(rng)
        ref = [Pose(p.rotation, 2.0 * p.position) for p in traj]
        res = align_trajectories(traj, ref)
        assert abs(res.scale - 0.5) < 1e-12
        err = max(np.linalg.norm(a.position - r.position) for a, r in zip(res.aligned, ref))
        assert err < 1e-9

    def test_random_similarity_recovered(self):
        rng = np.random.default_rng(14)
        est = random_trajectory(rng)
        s = rng.uniform(0.2, 5.0)
        rot = UnitQuaternion.from_rotvec(random_rotvec(rng))
        t = rng.normal(size=3)
        ref = [Pose(rot * p.rotation, s * rot.rotate(p.position) + t) for p in est]
        res = align_trajectories(est, ref)
        assert abs(res.scale - 1.0 / s) < 1e-9
        err = max(np.linalg.norm(a.position - r.position) for a, r in zip(res.aligned, ref))
        assert err < 1e-9

    def test_yaw_and_position_mode(self):
        rng = np.random.default_rng(15)
        ref = random_trajectory(rng)
        yaw = UnitQuaternion.from_rotvec([0, 0, -0.7])
        t = np.array([3.0, -1.0, 2.0])
        est = [Pose(yaw * p.rotation, yaw.rotate(p.position) + t) for p in ref]
        res = align_trajectories(est, ref, mode="yaw_and_position")
        assert res.scale == 1.0
        err = max(np.linalg.norm(a.position - r.position) for a, r in zip(res.aligned, ref))
        assert err < 1e-9

    def test_insufficient_poses(self):
        p = Pose.identity()
        with pytest.raises(InsufficientPoses):
            align_trajectories([p], [p])
        with pytest.raises(InsufficientPoses):
            align_trajectories([p, p], [p, p, p])

    def test_umeyama_reflection_guard(self):
        # Nearly planar sets must still return a proper rotation.
        rng = np.random.default_rng(16)
        src = rng.normal(size=(20, 3))
        src[:, 2] *= 1e-9
        rot = UnitQuaternion.from_rotvec(random_rotvec(rng)).to_matrix()
        dst = src @ rot.T
        s, r, t = umeyama(src, dst)
        assert np.linalg.det(r) > 0.99
        assert np.abs(src @ r.T * s + t - dst).max() < 1e-6


def test_tangent_basis_orthonormal():
    rng = np.random.default_rng(17)
    for _ in range(20):
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        b = tangent_basis(v)
        assert np.abs(b.T @ v).max() < 1e-12
        assert np.abs(b.T @ b - np.eye(2)).max() < 1e-12
