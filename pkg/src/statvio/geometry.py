"""SO(3)/SE(3) primitives, the pinhole camera model, and analytic Jacobians.

Conventions used throughout the package:

* ``Rotation3`` stores an orthonormal 3x3 matrix; tangent vectors are
  axis-angle (radians).
* ``Pose`` is the rigid transform ``p_a = R * p_b + t`` for a pose "a from b";
  its 6-vector tangent is ``[rho, phi]`` (translation part first).
* Jacobians of pose-dependent quantities are taken with respect to a
  right-multiplied (body-frame) tangent perturbation ``T * exp(delta)``.
* Camera frame: x right, y down, z along the optical axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, BehindCamera

# Below this angle (radians) closed forms are replaced by series expansions.
SMALL_ANGLE = 1e-8


def so3_hat(phi: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(a) @ b == cross(a, b)."""
    x, y, z = phi
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


class Rotation3:
    """Element of SO(3), stored as a 3x3 orthonormal matrix."""

    __slots__ = ("matrix",)

    def __init__(self, matrix: np.ndarray):
        self.matrix = np.asarray(matrix, dtype=float)

    @staticmethod
    def identity() -> "Rotation3":
        return Rotation3(np.eye(3))

    @staticmethod
    def from_quaternion(q_wxyz: np.ndarray) -> "Rotation3":
        """Unit quaternion (w, x, y, z) to rotation matrix."""
        w, x, y, z = np.asarray(q_wxyz, dtype=float)
        n = math.sqrt(w * w + x * x + y * y + z * z)
        w, x, y, z = w / n, x / n, y / n, z / n
        return Rotation3(np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]))

    def as_quaternion(self) -> np.ndarray:
        """Rotation matrix to unit quaternion (w, x, y, z), w >= 0."""
        m = self.matrix
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0.0:
            s = math.sqrt(tr + 1.0) * 2.0
            q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                          (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                          (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
        elif m[1, 1] >= m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                          0.25 * s, (m[1, 2] + m[2, 1]) / s])
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                          (m[1, 2] + m[2, 1]) / s, 0.25 * s])
        if q[0] < 0.0:
            q = -q
        return q / np.linalg.norm(q)

    def compose(self, other: "Rotation3") -> "Rotation3":
        return Rotation3(self.matrix @ other.matrix)

    def inverse(self) -> "Rotation3":
        return Rotation3(self.matrix.T)

    def act(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(v, dtype=float)

    def __matmul__(self, other: "Rotation3") -> "Rotation3":
        return self.compose(other)

    def __repr__(self) -> str:
        return f"Rotation3({self.matrix.tolist()})"


def so3_exp(phi: np.ndarray) -> Rotation3:
    """Exponential map: axis-angle vector to rotation (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = so3_hat(phi)
    if theta < SMALL_ANGLE:
        # second-order series, exact to O(theta^3)
        return Rotation3(np.eye(3) + k + 0.5 * (k @ k))
    s, c = math.sin(theta), math.cos(theta)
    return Rotation3(np.eye(3) + (s / theta) * k + ((1.0 - c) / theta**2) * (k @ k))


def so3_log(rot: Rotation3) -> np.ndarray:
    """Inverse of :func:`so3_exp` for angles below pi - 1e-6.

    Raises:
        AngleNearPi: the rotation is too close to the cut locus for the
            axis to be recovered reliably; the caller must reject or perturb.
    """
    m = rot.matrix
    cos_theta = min(1.0, max(-1.0, 0.5 * (np.trace(m) - 1.0)))
    theta = math.acos(cos_theta)
    if theta > math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} is within 1e-6 of pi")
    w = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if theta < SMALL_ANGLE:
        return w
    return (theta / math.sin(theta)) * w


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian V(phi) coupling translation to rotation in se3_exp."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = so3_hat(phi)
    t2 = theta * theta
    if theta < 1e-4:
        # 1-cos(theta) cancels catastrophically well above the exp/log cutoff
        return np.eye(3) + (0.5 - t2 / 24.0) * k + (1.0 / 6.0 - t2 / 120.0) * (k @ k)
    return (np.eye(3)
            + ((1.0 - math.cos(theta)) / t2) * k
            + ((theta - math.sin(theta)) / (t2 * theta)) * (k @ k))


def so3_left_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    k = so3_hat(phi)
    t2 = theta * theta
    if theta < 1e-4:
        return np.eye(3) - 0.5 * k + (1.0 / 12.0 + t2 / 720.0) * (k @ k)
    coeff = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / t2
    return np.eye(3) - 0.5 * k + coeff * (k @ k)


def so3_right_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian; maps residual change to tangent change."""
    # J_r(phi) = J_l(-phi), hence the transposed relation below.
    return so3_left_jacobian_inverse(phi).T


@dataclass
class Pose:
    """Element of SE(3): rotation plus translation in meters."""

    rotation: Rotation3 = field(default_factory=Rotation3.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def inverse(self) -> "Pose":
        rt = self.rotation.inverse()
        return Pose(rt, -rt.act(self.translation))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation.compose(other.rotation),
                    self.rotation.act(other.translation) + self.translation)

    def act(self, p: np.ndarray) -> np.ndarray:
        return self.rotation.act(p) + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def copy(self) -> "Pose":
        return Pose(Rotation3(self.rotation.matrix.copy()), self.translation.copy())

    def __repr__(self) -> str:
        return f"Pose(t={self.translation.tolist()})"


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of [rho, phi]; translation uses the left Jacobian."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of :func:`se3_exp` (same angle restriction as so3_log)."""
    phi = so3_log(pose.rotation)
    rho = so3_left_jacobian_inverse(phi) @ pose.translation
    return np.concatenate([rho, phi])


def se3_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def se3_inverse(t: Pose) -> Pose:
    return t.inverse()


def se3_act(t: Pose, p: np.ndarray) -> np.ndarray:
    return t.act(p)


@dataclass
class PinholeCamera:
    """Pinhole intrinsics plus the body-to-camera extrinsic transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_cb: Pose = field(default_factory=Pose.identity)
    z_min: float = 1e-3

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def normalized(self, uv: np.ndarray) -> np.ndarray:
        """Pixel coordinates to normalized image coordinates."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx,
                         (uv[..., 1] - self.cy) / self.fy], axis=-1)


def project(cam: PinholeCamera, p_cam: np.ndarray) -> np.ndarray:
    """Pinhole projection of a camera-frame point to pixels.

    Raises:
        BehindCamera: depth is at or below ``cam.z_min``.
    """
    x, y, z = np.asarray(p_cam, dtype=float)
    if z <= cam.z_min:
        raise BehindCamera(f"depth {z:.6g} <= z_min {cam.z_min:.6g}")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def projection_jacobian(cam: PinholeCamera, p_cam: np.ndarray) -> np.ndarray:
    """2x3 Jacobian of the projection with respect to the camera-frame point."""
    x, y, z = np.asarray(p_cam, dtype=float)
    if z <= cam.z_min:
        raise BehindCamera(f"depth {z:.6g} <= z_min {cam.z_min:.6g}")
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def reprojection_residual_and_jacobians(
    cam: PinholeCamera,
    T_wb: Pose,
    p_world: np.ndarray,
    z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual z - pi(T_cb * T_bw * p_world) and its analytic Jacobians.

    Returns:
        (residual 2-vector, d(residual)/d(pose tangent) 2x6,
        d(residual)/d(p_world) 2x3). The pose Jacobian is with respect to a
        right-multiplied tangent perturbation of ``T_wb``.
    """
    r_wb = T_wb.rotation.matrix
    p_body = r_wb.T @ (np.asarray(p_world, dtype=float) - T_wb.translation)
    r_cb = cam.T_cb.rotation.matrix
    p_cam = r_cb @ p_body + cam.T_cb.translation
    residual = np.asarray(z, dtype=float) - project(cam, p_cam)
    j_pi = projection_jacobian(cam, p_cam)
    a = j_pi @ r_cb
    # p_body shifts by -d_rho + hat(p_body) d_phi under T_wb * exp(delta)
    j_pose = np.hstack([a, -a @ so3_hat(p_body)])
    j_point = -a @ r_wb.T
    return residual, j_pose, j_point


# -- batched helpers ----------------------------------------------------------
# Used by the solver, simulator, and uncertainty propagation; these mirror the
# scalar operations above but run over stacked arrays.

def transform_points(rot: np.ndarray, t: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply R @ p + t over stacked rotations/translations/points."""
    return np.einsum("...ij,...j->...i", rot, pts) + t


def project_points(cam: PinholeCamera, p_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched projection; returns (uv [N,2], valid depth mask [N])."""
    p_cam = np.asarray(p_cam, dtype=float)
    zc = p_cam[..., 2]
    valid = zc > cam.z_min
    safe_z = np.where(valid, zc, 1.0)
    uv = np.stack([cam.fx * p_cam[..., 0] / safe_z + cam.cx,
                   cam.fy * p_cam[..., 1] / safe_z + cam.cy], axis=-1)
    return uv, valid


def projection_jacobians(cam: PinholeCamera, p_cam: np.ndarray) -> np.ndarray:
    """Batched 2x3 projection Jacobians (no depth validity checks)."""
    p_cam = np.asarray(p_cam, dtype=float)
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    out = np.zeros(p_cam.shape[:-1] + (2, 3))
    out[..., 0, 0] = cam.fx / z
    out[..., 0, 2] = -cam.fx * x / (z * z)
    out[..., 1, 1] = cam.fy / z
    out[..., 1, 2] = -cam.fy * y / (z * z)
    return out
