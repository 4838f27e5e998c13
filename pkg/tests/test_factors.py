"""Numeric-differentiation checks for the shared residual blocks."""

import numpy as np
import pytest

from vioinit.errors import NonPositiveDepth
from vioinit.factors import (
    inverse_depth_residual,
    inverse_depth_residuals,
    point_reprojection_residual,
    point_reprojection_residuals,
    rotation_prior_residual,
    sqrt_information,
)
from vioinit.geometry import Pose, UnitQuaternion

EPS = 1e-6


def _retract(pose: Pose, dx: np.ndarray) -> Pose:
    # (dp, dtheta): world-additive position, right-multiplied local rotation.
    return Pose(pose.rotation * UnitQuaternion.from_rotvec(dx[3:6]), pose.position + dx[0:3])


def _numeric_pose_jacobian(fn, pose: Pose) -> np.ndarray:
    cols = []
    for k in range(6):
        dx = np.zeros(6)
        dx[k] = EPS
        hi = fn(_retract(pose, dx))
        dx[k] = -EPS
        lo = fn(_retract(pose, dx))
        cols.append((hi - lo) / (2 * EPS))
    return np.column_stack(cols)


def _random_setup(rng, extrinsic=None):
    anchor = Pose(
        UnitQuaternion.from_rotvec(rng.normal(scale=0.4, size=3)), rng.normal(scale=1.0, size=3)
    )
    # Keep the observer looking roughly where the anchor looks so the
    # landmark stays in front of both cameras.
    observer = Pose(
        anchor.rotation * UnitQuaternion.from_rotvec(rng.normal(scale=0.1, size=3)),
        anchor.position + rng.normal(scale=0.4, size=3),
    )
    frame = anchor if extrinsic is None else anchor.compose(extrinsic)
    point = frame.transform(np.array([0.3, -0.2, 4.0]) + rng.normal(scale=0.3, size=3))
    return anchor, observer, point


def _extrinsic():
    return Pose(UnitQuaternion.from_rotvec(np.array([0.02, -0.01, 0.03])), np.array([0.05, -0.02, 0.03]))


def _camera_point(pose, point, extrinsic):
    cam = pose if extrinsic is None else pose.compose(extrinsic)
    return cam.inverse().transform(point)


class TestPointReprojection:
    @pytest.mark.parametrize("use_extrinsic", [False, True])
    def test_zero_at_true_projection(self, use_extrinsic):
        rng = np.random.default_rng(0)
        ext = _extrinsic() if use_extrinsic else None
        pose, _, point = _random_setup(rng, ext)
        p_cam = _camera_point(pose, point, ext)
        obs = p_cam[:2] / p_cam[2]
        r, _ = point_reprojection_residual(pose, point, obs, ext, with_jacobians=False)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    @pytest.mark.parametrize("use_extrinsic", [False, True])
    def test_jacobian_matches_numeric(self, use_extrinsic):
        rng = np.random.default_rng(1)
        ext = _extrinsic() if use_extrinsic else None
        for _ in range(5):
            pose, _, point = _random_setup(rng, ext)
            obs = rng.normal(scale=0.1, size=2)
            _, jac = point_reprojection_residual(pose, point, obs, ext)
            num = _numeric_pose_jacobian(
                lambda p: point_reprojection_residual(p, point, obs, ext, with_jacobians=False)[0], pose
            )
            np.testing.assert_allclose(jac, num, atol=1e-6)

    def test_behind_camera_raises(self):
        pose = Pose.identity()
        with pytest.raises(NonPositiveDepth):
            point_reprojection_residual(pose, np.array([0.0, 0.0, -1.0]), np.zeros(2))


class TestInverseDepthResidual:
    @pytest.mark.parametrize("use_extrinsic", [False, True])
    def test_zero_at_true_geometry(self, use_extrinsic):
        rng = np.random.default_rng(2)
        ext = _extrinsic() if use_extrinsic else None
        anchor, observer, point = _random_setup(rng, ext)
        p_a = _camera_point(anchor, point, ext)
        ray = np.array([p_a[0] / p_a[2], p_a[1] / p_a[2], 1.0])
        rho = 1.0 / p_a[2]
        p_o = _camera_point(observer, point, ext)
        obs = p_o[:2] / p_o[2]
        r, _ = inverse_depth_residual(anchor, observer, ray, rho, obs, ext, with_jacobians=False)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    @pytest.mark.parametrize("use_extrinsic", [False, True])
    def test_jacobians_match_numeric(self, use_extrinsic):
        rng = np.random.default_rng(3)
        ext = _extrinsic() if use_extrinsic else None
        for _ in range(5):
            anchor, observer, point = _random_setup(rng, ext)
            p_a = _camera_point(anchor, point, ext)
            ray = np.array([p_a[0] / p_a[2], p_a[1] / p_a[2], 1.0])
            rho = 1.0 / p_a[2]
            obs = rng.normal(scale=0.1, size=2)
            _, jac = inverse_depth_residual(anchor, observer, ray, rho, obs, ext)

            num_anchor = _numeric_pose_jacobian(
                lambda p: inverse_depth_residual(p, observer, ray, rho, obs, ext, with_jacobians=False)[0],
                anchor,
            )
            num_observer = _numeric_pose_jacobian(
                lambda p: inverse_depth_residual(anchor, p, ray, rho, obs, ext, with_jacobians=False)[0],
                observer,
            )
            hi = inverse_depth_residual(anchor, observer, ray, rho + EPS, obs, ext, with_jacobians=False)[0]
            lo = inverse_depth_residual(anchor, observer, ray, rho - EPS, obs, ext, with_jacobians=False)[0]
            num_rho = (hi - lo) / (2 * EPS)
            np.testing.assert_allclose(jac["anchor"], num_anchor, atol=1e-6)
            np.testing.assert_allclose(jac["observer"], num_observer, atol=1e-6)
            np.testing.assert_allclose(jac["inv_depth"], num_rho, atol=1e-6)

    def test_rejects_nonpositive_inverse_depth(self):
        anchor, observer = Pose.identity(), Pose(UnitQuaternion.identity(), np.array([0.2, 0.0, 0.0]))
        with pytest.raises(NonPositiveDepth):
            inverse_depth_residual(anchor, observer, np.array([0.0, 0.0, 1.0]), -0.5, np.zeros(2))

    def test_rejects_point_behind_observer(self):
        anchor = Pose.identity()
        observer = Pose(UnitQuaternion.identity(), np.array([0.0, 0.0, 10.0]))  # past the landmark
        with pytest.raises(NonPositiveDepth):
            inverse_depth_residual(anchor, observer, np.array([0.0, 0.0, 1.0]), 0.25, np.zeros(2))


class TestRotationPrior:
    def test_zero_when_consistent(self):
        rng = np.random.default_rng(4)
        q_i = UnitQuaternion.from_rotvec(rng.normal(scale=0.5, size=3))
        prior = UnitQuaternion.from_rotvec(rng.normal(scale=0.3, size=3))
        q_j = q_i * prior
        r, _ = rotation_prior_residual(q_i, q_j, prior, with_jacobians=False)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_small_angle_equals_rotvec(self):
        q_i = UnitQuaternion.identity()
        delta = np.array([1e-4, -2e-4, 3e-4])
        q_j = UnitQuaternion.from_rotvec(delta)
        r, _ = rotation_prior_residual(q_i, q_j, UnitQuaternion.identity(), with_jacobians=False)
        np.testing.assert_allclose(r, delta, rtol=1e-6)

    def test_jacobians_match_numeric(self):
        # Evaluated at the bias linearization point, where the first-order
        # prior correction is exact (away from it the bg block carries BCH
        # curvature by design, as in the preintegration rebias).
        rng = np.random.default_rng(5)
        jbg = rng.normal(scale=0.2, size=(3, 3))
        for _ in range(5):
            q_i = UnitQuaternion.from_rotvec(rng.normal(scale=0.6, size=3))
            q_j = UnitQuaternion.from_rotvec(rng.normal(scale=0.6, size=3))
            prior = (q_i.inverse() * q_j) * UnitQuaternion.from_rotvec(rng.normal(scale=0.05, size=3))
            dbg = np.zeros(3)
            _, jac = rotation_prior_residual(q_i, q_j, prior, jbg, dbg)

            def value(qi=q_i, qj=q_j, b=dbg):
                return rotation_prior_residual(qi, qj, prior, jbg, b, with_jacobians=False)[0]

            for name, num in (
                ("theta_i", _numeric_rotvec_jac(lambda d: value(qi=q_i * UnitQuaternion.from_rotvec(d)))),
                ("theta_j", _numeric_rotvec_jac(lambda d: value(qj=q_j * UnitQuaternion.from_rotvec(d)))),
                ("bg", _numeric_rotvec_jac(lambda d: value(b=dbg + d))),
            ):
                np.testing.assert_allclose(jac[name], num, atol=1e-6, err_msg=name)

    def test_bias_block_absent_without_jacobian_map(self):
        q = UnitQuaternion.identity()
        _, jac = rotation_prior_residual(q, q, q)
        assert set(jac) == {"theta_i", "theta_j"}


def _numeric_rotvec_jac(fn):
    cols = []
    for k in range(3):
        d = np.zeros(3)
        d[k] = EPS
        hi = fn(d.copy())
        d[k] = -EPS
        lo = fn(d.copy())
        cols.append((hi - lo) / (2 * EPS))
    return np.column_stack(cols)


class TestSqrtInformation:
    def test_whitens_covariance(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(9, 9))
        cov = a @ a.T + 9 * np.eye(9)
        s = sqrt_information(cov)
        np.testing.assert_allclose(s.T @ s @ cov, np.eye(9), atol=1e-10)
        np.testing.assert_allclose(s @ cov @ s.T, np.eye(9), atol=1e-10)

    def test_lower_triangular(self):
        cov = np.diag([4.0, 9.0, 16.0])
        s = sqrt_information(cov)
        np.testing.assert_allclose(s, np.diag([0.5, 1.0 / 3.0, 0.25]), atol=1e-12)


class TestBatchedResiduals:
    """The vectorized evaluators must match the scalar ones exactly."""

    @pytest.mark.parametrize("use_extrinsic", [False, True])
    def test_point_reprojection_batch_matches_scalar(self, use_extrinsic):
        rng = np.random.default_rng(11)
        extrinsic = _extrinsic() if use_extrinsic else None
        pose = Pose(
            UnitQuaternion.from_rotvec(rng.normal(scale=0.4, size=3)),
            rng.normal(scale=1.0, size=3),
        )
        frame = pose if extrinsic is None else pose.compose(extrinsic)
        points = np.stack(
            [
                frame.transform(np.array([0.3, -0.2, 4.0]) + rng.normal(scale=0.5, size=3))
                for _ in range(25)
            ]
        )
        obs = rng.normal(scale=0.2, size=(25, 2))
        r_b, jac_b = point_reprojection_residuals(pose, points, obs, extrinsic)
        for n in range(len(points)):
            r_s, jac_s = point_reprojection_residual(pose, points[n], obs[n], extrinsic)
            np.testing.assert_allclose(r_b[n], r_s, rtol=0, atol=1e-14)
            np.testing.assert_allclose(jac_b[n], jac_s, rtol=0, atol=1e-14)

    def test_point_reprojection_batch_depth_error(self):
        pose = Pose.identity()
        points = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -1.0]])
        with pytest.raises(NonPositiveDepth):
            point_reprojection_residuals(pose, points, np.zeros((2, 2)))

    @pytest.mark.parametrize("use_extrinsic", [False, True])
    def test_inverse_depth_batch_matches_scalar(self, use_extrinsic):
        rng = np.random.default_rng(13)
        extrinsic = _extrinsic() if use_extrinsic else None
        rows = []
        for _ in range(30):
            anchor, observer, point = _random_setup(rng, extrinsic)
            p_anchor = _camera_point(anchor, point, extrinsic)
            ray = np.array([p_anchor[0] / p_anchor[2], p_anchor[1] / p_anchor[2], 1.0])
            obs = rng.normal(scale=0.2, size=2)
            rows.append((anchor, observer, ray, 1.0 / p_anchor[2], obs))
        anchor_rot = np.stack([a.rotation.to_matrix() for a, *_ in rows])
        anchor_pos = np.stack([a.position for a, *_ in rows])
        obs_rot = np.stack([o.rotation.to_matrix() for _, o, *_ in rows])
        obs_pos = np.stack([o.position for _, o, *_ in rows])
        rays = np.stack([r[2] for r in rows])
        rhos = np.array([r[3] for r in rows])
        obs = np.stack([r[4] for r in rows])
        r_b, jac_b = inverse_depth_residuals(
            anchor_rot, anchor_pos, obs_rot, obs_pos, rays, rhos, obs, extrinsic
        )
        for n, (a, o, ray, rho, ob) in enumerate(rows):
            r_s, jac_s = inverse_depth_residual(a, o, ray, rho, ob, extrinsic)
            np.testing.assert_allclose(r_b[n], r_s, rtol=0, atol=1e-14)
            for key, want in (
                ("anchor", jac_s["anchor"]),
                ("observer", jac_s["observer"]),
                ("inv_depth", jac_s["inv_depth"]),
            ):
                np.testing.assert_allclose(jac_b[key][n], want, rtol=0, atol=1e-13)

    def test_inverse_depth_batch_rejects_nonpositive_depth(self):
        rng = np.random.default_rng(5)
        anchor, observer, point = _random_setup(rng)
        rot = anchor.rotation.to_matrix()[None]
        pos = anchor.position[None]
        ray = np.array([[0.1, 0.0, 1.0]])
        with pytest.raises(NonPositiveDepth):
            inverse_depth_residuals(
                rot, pos, rot, pos, ray, np.array([-0.5]), np.zeros((1, 2))
            )

    def test_batch_no_jacobian_path(self):
        rng = np.random.default_rng(7)
        anchor, observer, point = _random_setup(rng)
        p_anchor = _camera_point(anchor, point, None)
        ray = np.array([[p_anchor[0] / p_anchor[2], p_anchor[1] / p_anchor[2], 1.0]])
        r, jac = inverse_depth_residuals(
            anchor.rotation.to_matrix()[None],
            anchor.position[None],
            observer.rotation.to_matrix()[None],
            observer.position[None],
            ray,
            np.array([1.0 / p_anchor[2]]),
            np.zeros((1, 2)),
            with_jacobians=False,
        )
        assert jac is None and r.shape == (1, 2)
