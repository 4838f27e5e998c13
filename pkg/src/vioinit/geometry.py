"""Rotation, pose, camera, and trajectory-alignment primitives.

Conventions used across the package:

* Quaternions are Hamilton, stored ``[w, x, y, z]``, canonicalized to
  ``w >= 0`` (double cover).
* ``Pose`` maps body/camera coordinates to world: ``x_w = R x_b + p``.
* Pixel coordinates are ``(u, v)``; normalized image coordinates ``(x, y)``
  are ray coordinates with ``z = 1``.
* Rotation perturbations are right (body-frame): ``R <- R Exp(dtheta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientPoses, NonPositiveDepth

_EPS = 1e-12


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix [v]x such that skew(a) @ b = a x b.

    Supports batched input ``(..., 3) -> (..., 3, 3)``.
    """
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


# --- raw-array quaternion kernels (used by the optimizers for speed) ---------


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of wxyz quaternion arrays, broadcasting over (..., 4)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=float, copy=True)
    out[..., 1:] = -out[..., 1:]
    return out


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit wxyz quaternion, batched (..., 4) -> (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (yy + zz)
    m[..., 0, 1] = 2 * (xy - wz)
    m[..., 0, 2] = 2 * (xz + wy)
    m[..., 1, 0] = 2 * (xy + wz)
    m[..., 1, 1] = 1 - 2 * (xx + zz)
    m[..., 1, 2] = 2 * (yz - wx)
    m[..., 2, 0] = 2 * (xz - wy)
    m[..., 2, 1] = 2 * (yz + wx)
    m[..., 2, 2] = 1 - 2 * (xx + yy)
    return m


def rotvec_to_quat(r: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector(s) (..., 3) -> wxyz quaternion(s)."""
    r = np.asarray(r, dtype=float)
    angle = np.linalg.norm(r, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a via series near zero to stay smooth
    small = angle < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    q = np.concatenate([np.cos(half), k * r], axis=-1)
    return q


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Log map: unit wxyz quaternion(s) -> rotation vector(s), |r| <= pi."""
    q = np.asarray(q, dtype=float)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    q = q * sign
    vn = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    w = np.clip(q[..., :1], -1.0, 1.0)
    angle = 2.0 * np.arctan2(vn, w)
    small = vn < 1e-9
    scale = np.where(small, 2.0, angle / np.where(small, 1.0, vn))
    return scale * q[..., 1:]


def so3_exp(r: np.ndarray) -> np.ndarray:
    """SO(3) exponential map, rotation vector(s) -> rotation matrice(s)."""
    return quat_to_rotmat(rotvec_to_quat(r))


def so3_right_jacobian(r: np.ndarray) -> np.ndarray:
    """Right Jacobian J_r of SO(3): Exp(r + dr) ~= Exp(r) Exp(J_r dr)."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    s = skew(r)
    s2 = s @ s
    t2 = theta * theta
    small = theta < 1e-6
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 0.5 - t2 / 24.0, (1 - np.cos(theta)) / np.where(small, 1.0, t2))
        b = np.where(
            small, 1.0 / 6.0 - t2 / 120.0, (theta - np.sin(theta)) / np.where(small, 1.0, t2 * theta)
        )
    eye = np.broadcast_to(np.eye(3), s.shape)
    return eye - a[..., None, None] * s + b[..., None, None] * s2


class UnitQuaternion:
    """Unit Hamilton quaternion with ``w >= 0`` canonical form."""

    __slots__ = ("_q",)

    def __init__(self, w: float, x: float, y: float, z: float):
        q = np.array([w, x, y, z], dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < _EPS:
            raise ValueError("quaternion norm must be finite and nonzero")
        q /= n
        if q[0] < 0:
            q = -q
        self._q = q

    # -- constructors ---------------------------------------------------

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_wxyz(cls, q: np.ndarray) -> "UnitQuaternion":
        q = np.asarray(q, dtype=float)
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def from_rotvec(cls, theta: np.ndarray) -> "UnitQuaternion":
        return cls.from_wxyz(rotvec_to_quat(np.asarray(theta, dtype=float)))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "UnitQuaternion":
        """Quaternion of a rotation matrix (Shepperd's method)."""
        m = np.asarray(m, dtype=float)
        tr = np.trace(m)
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        return cls(w, x, y, z)

    # -- accessors --------------------------------------------------------

    @property
    def w(self) -> float:
        return float(self._q[0])

    @property
    def x(self) -> float:
        return float(self._q[1])

    @property
    def y(self) -> float:
        return float(self._q[2])

    @property
    def z(self) -> float:
        return float(self._q[3])

    @property
    def wxyz(self) -> np.ndarray:
        return self._q.copy()

    # -- algebra ----------------------------------------------------------

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return UnitQuaternion.from_wxyz(quat_mul(self._q, other._q))

    def inverse(self) -> "UnitQuaternion":
        return UnitQuaternion.from_wxyz(quat_conj(self._q))

    def rotate(self, v: np.ndarray) -> np.ndarray:
        """Rotate vector(s) (..., 3) by this quaternion."""
        return np.asarray(v, dtype=float) @ self.to_matrix().T

    def to_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self._q)

    def to_rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self._q)

    def angle_to(self, other: "UnitQuaternion") -> float:
        """Geodesic distance in radians."""
        return float(np.linalg.norm((self.inverse() * other).to_rotvec()))

    def __repr__(self) -> str:
        return "UnitQuaternion(w={:.6f}, x={:.6f}, y={:.6f}, z={:.6f})".format(*self._q)


def quat_from_rotvec(theta: np.ndarray) -> UnitQuaternion:
    """Exponential map from a rotation vector (radians) to a unit quaternion.

    Args:
        theta: 3-vector whose norm is the rotation angle and direction the axis.

    Returns:
        Unit quaternion rotating by ``|theta|`` about ``theta / |theta|``.
    """
    return UnitQuaternion.from_rotvec(theta)


@dataclass(frozen=True)
class Pose:
    """Rigid transform body->world: ``x_w = rotation * x_b + position``."""

    rotation: UnitQuaternion
    position: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        object.__setattr__(self, "position", p)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(UnitQuaternion.identity(), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply ``other`` first, then ``self``."""
        return Pose(self.rotation * other.rotation, self.rotation.rotate(other.position) + self.position)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.rotate(self.position))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map point(s) (..., 3) from body to world coordinates."""
        return self.rotation.rotate(points) + self.position

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.to_matrix()
        m[:3, 3] = self.position
        return m


@dataclass(frozen=True)
class PinholeCamera:
    """Undistorted pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside image bounds")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project camera-frame point(s) (..., 3) to pixels (..., 2).

        Raises:
            NonPositiveDepth: if any point has z <= 0.
        """
        points = np.asarray(points, dtype=float)
        z = points[..., 2]
        if np.any(z <= 0):
            raise NonPositiveDepth("cannot project point(s) with z <= 0")
        u = self.fx * points[..., 0] / z + self.cx
        v = self.fy * points[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def back_project(self, pixels: np.ndarray) -> np.ndarray:
        """Pixel(s) (..., 2) -> normalized image coordinates (..., 2) on z = 1."""
        pixels = np.asarray(pixels, dtype=float)
        x = (pixels[..., 0] - self.cx) / self.fx
        y = (pixels[..., 1] - self.cy) / self.fy
        return np.stack([x, y], axis=-1)

    def contains(self, pixels: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of pixel(s) inside the image bounds."""
        pixels = np.asarray(pixels, dtype=float)
        u, v = pixels[..., 0], pixels[..., 1]
        return (u >= margin) & (u <= self.width - 1 - margin) & (v >= margin) & (v <= self.height - 1 - margin)


@dataclass
class Landmark:
    """Inverse-depth landmark anchored to its first observing keyframe."""

    anchor_frame: int
    anchor_observation: np.ndarray  # normalized (x, y) in the anchor camera
    inverse_depth: float

    def __post_init__(self):
        self.anchor_observation = np.asarray(self.anchor_observation, dtype=float).reshape(2)

    def position_in_world(self, anchor_pose: Pose) -> np.ndarray:
        """World point implied by the anchor camera pose and inverse depth."""
        ray = np.array([self.anchor_observation[0], self.anchor_observation[1], 1.0])
        return anchor_pose.transform(ray / self.inverse_depth)


@dataclass(frozen=True)
class TriangulationResult:
    point: np.ndarray  # world frame
    ok: bool  # False when rays are too parallel or cheirality fails
    angle_deg: float
    depth_i: float
    depth_j: float


def triangulate(
    pose_i: Pose,
    pose_j: Pose,
    obs_i: np.ndarray,
    obs_j: np.ndarray,
    min_angle_deg: float = 1.0,
) -> TriangulationResult:
    """Midpoint triangulation of one point from two normalized observations.

    Args:
        pose_i, pose_j: camera-to-world poses of the two views.
        obs_i, obs_j: normalized image coordinates (x, y) in each view.
        min_angle_deg: rays subtending less than this are flagged degenerate.

    Returns:
        TriangulationResult; ``ok`` is False (never an exception) when the ray
        angle is below threshold or either cheirality check fails.
    """
    d_i = pose_i.rotation.rotate(np.array([obs_i[0], obs_i[1], 1.0]))
    d_j = pose_j.rotation.rotate(np.array([obs_j[0], obs_j[1], 1.0]))
    d_i = d_i / np.linalg.norm(d_i)
    d_j = d_j / np.linalg.norm(d_j)
    o_i, o_j = pose_i.position, pose_j.position

    b = float(d_i @ d_j)
    a = o_j - o_i
    den = 1.0 - b * b
    angle = math.degrees(math.acos(min(1.0, max(-1.0, b))))
    if den < 1e-12:
        return TriangulationResult(0.5 * (o_i + o_j), False, angle, 0.0, 0.0)
    a1, a2 = float(a @ d_i), float(a @ d_j)
    s = (a1 - b * a2) / den
    t = (b * a1 - a2) / den
    point = 0.5 * (o_i + s * d_i + o_j + t * d_j)

    z_i = float(pose_i.inverse().transform(point)[2])
    z_j = float(pose_j.inverse().transform(point)[2])
    ok = angle >= min_angle_deg and z_i > 0 and z_j > 0
    return TriangulationResult(point, ok, angle, z_i, z_j)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Closed-form least-squares similarity fit ``dst ~= s R src + t``.

    Args:
        src, dst: matched point sets, shape (N, 3), N >= 2.
        with_scale: solve for scale; otherwise fixed at 1.

    Returns:
        Tuple ``(s, R, t)``.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    sc, dc = src - mu_s, dst - mu_d
    var_s = float((sc * sc).sum() / len(src))
    cov = dc.T @ sc / len(src)
    u, d, vt = np.linalg.svd(cov)
    sgn = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2, 2] = -1.0
    rot = u @ sgn @ vt
    if with_scale and var_s > 1e-30:
        s = float(np.trace(np.diag(d) @ sgn) / var_s)
    else:
        s = 1.0
    t = mu_d - s * rot @ mu_s
    return s, rot, t


@dataclass(frozen=True)
class AlignmentResult:
    aligned: list  # list[Pose], estimate mapped onto the reference
    scale: float  # scale of the estimate relative to the reference
    rotation: np.ndarray  # 3x3 applied to the estimate
    translation: np.ndarray


def align_trajectories(
    estimate: list,
    reference: list,
    mode: str = "similarity",
) -> AlignmentResult:
    """Align an estimated trajectory onto a reference one.

    Args:
        estimate, reference: equal-length lists of ``Pose`` with matched
            timestamps.
        mode: ``"similarity"`` (7-DoF, scale recovered) or
            ``"yaw_and_position"`` (rotation about world z + translation, unit
            scale) for gravity-aligned estimates.

    Returns:
        AlignmentResult with the transformed estimate and the recovered scale
        of the estimate relative to the reference (an estimate that is twice
        too large yields scale 2; the reference being twice the estimate
        yields 0.5).

    Raises:
        InsufficientPoses: fewer than two poses on either side, or length
            mismatch.
    """
    if len(estimate) < 2 or len(reference) < 2 or len(estimate) != len(reference):
        raise InsufficientPoses("alignment needs two equal-length trajectories of >= 2 poses")
    est_p = np.array([p.position for p in estimate])
    ref_p = np.array([p.position for p in reference])

    if mode == "similarity":
        s_fit, rot, t = umeyama(est_p, ref_p, with_scale=True)
        if s_fit <= 0:
            s_fit = 1.0
        scale = 1.0 / s_fit
    elif mode == "yaw_and_position":
        # 2D Procrustes about the world z axis at unit scale.
        mu_e, mu_r = est_p.mean(axis=0), ref_p.mean(axis=0)
        ec, rc = est_p - mu_e, ref_p - mu_r
        num = float(np.sum(ec[:, 0] * rc[:, 1] - ec[:, 1] * rc[:, 0]))
        den = float(np.sum(ec[:, 0] * rc[:, 0] + ec[:, 1] * rc[:, 1]))
        yaw = math.atan2(num, den) if (abs(num) > 0 or abs(den) > 0) else 0.0
        rot = so3_exp(np.array([0.0, 0.0, yaw]))
        s_fit = 1.0
        t = mu_r - rot @ mu_e
        scale = 1.0
    else:
        raise ValueError(f"unknown alignment mode: {mode!r}")

    q_align = UnitQuaternion.from_matrix(rot)
    aligned = [
        Pose(q_align * p.rotation, s_fit * (rot @ p.position) + t) for p in estimate
    ]
    return AlignmentResult(aligned=aligned, scale=scale, rotation=rot, translation=t)


def tangent_basis(v: np.ndarray) -> np.ndarray:
    """Two orthonormal vectors spanning the plane orthogonal to unit vector v.

    Returns a (3, 2) matrix ``B`` with ``B.T @ v = 0`` and ``B.T @ B = I``.
    """
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    ref = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(v, ref)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(v, b1)
    return np.stack([b1, b2], axis=-1)
