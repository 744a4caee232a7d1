"""Tests for SO(3)/SE(3) primitives, the camera model, and analytic Jacobians."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statvio.errors import AngleNearPi, BehindCamera
from statvio.geometry import (
    PinholeCamera,
    Pose,
    Rotation3,
    project,
    project_points,
    projection_jacobian,
    projection_jacobians,
    reprojection_residual_and_jacobians,
    se3_act,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_log,
    so3_exp,
    so3_hat,
    so3_log,
)

RNG = np.random.default_rng(20240521)


def matrix_exponential_series(m: np.ndarray, terms: int = 30) -> np.ndarray:
    """Truncated power-series exponential; independent oracle for so3_exp."""
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ m / k
        out = out + term
    return out


def numeric_jacobian(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a vector function."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x))
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = eps
        jac[:, i] = (np.asarray(fn(x + dx)) - np.asarray(fn(x - dx))) / (2 * eps)
    return jac


def random_rotation(rng) -> Rotation3:
    return so3_exp(rng.uniform(-1.5, 1.5, 3))


def random_pose(rng) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-2.0, 2.0, 3))


def default_camera(**kw) -> PinholeCamera:
    args = dict(fx=450.0, fy=455.0, cx=320.0, cy=240.0, width=640, height=480)
    args.update(kw)
    return PinholeCamera(**args)


class TestSo3:
    def test_exp_zero_is_identity(self):
        np.testing.assert_allclose(so3_exp(np.zeros(3)).matrix, np.eye(3), atol=1e-15)

    def test_exp_matches_series_oracle(self):
        phi = np.array([math.pi / 2, 0.0, 0.0])
        expected = matrix_exponential_series(so3_hat(phi))
        np.testing.assert_allclose(so3_exp(phi).matrix, expected, atol=1e-12)
        # quarter turn about x maps +y onto +z
        np.testing.assert_allclose(so3_exp(phi).act([0.0, 1.0, 0.0]),
                                   [0.0, 0.0, 1.0], atol=1e-12)

    def test_exp_series_oracle_random(self):
        for _ in range(20):
            phi = RNG.uniform(-2.5, 2.5, 3)
            expected = matrix_exponential_series(so3_hat(phi))
            np.testing.assert_allclose(so3_exp(phi).matrix, expected, atol=1e-12)

    def test_exp_tiny_angle(self):
        r = so3_exp(np.array([1e-12, 0.0, 0.0]))
        np.testing.assert_allclose(r.matrix, np.eye(3), atol=1e-11)

    def test_log_identity(self):
        np.testing.assert_allclose(so3_log(Rotation3.identity()), np.zeros(3))

    def test_log_roundtrip(self):
        phi = np.array([0.3, -0.2, 0.1])
        np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-10)

    def test_log_near_pi(self):
        angle = math.pi - 1e-3
        r = so3_exp(np.array([0.0, 0.0, angle]))
        out = so3_log(r)
        assert abs(np.linalg.norm(out) - angle) < 1e-6

    def test_log_at_cut_locus_raises(self):
        r = Rotation3(np.diag([-1.0, -1.0, 1.0]))  # pi about z
        with pytest.raises(AngleNearPi):
            so3_log(r)

    @given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
    @settings(max_examples=100, deadline=None)
    def test_roundtrip_property(self, phi):
        phi = np.array(phi)
        n = np.linalg.norm(phi)
        if n >= math.pi - 1e-6:
            phi = phi * (math.pi - 1e-3) / n
        np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)

    def test_orthonormality_after_many_compositions(self):
        r = Rotation3.identity()
        step = so3_exp(np.array([1e-3, 2e-3, -1e-3]))
        for _ in range(10_000):
            r = r.compose(step)
        err = r.matrix @ r.matrix.T - np.eye(3)
        assert np.max(np.abs(err)) < 1e-9
        assert abs(np.linalg.det(r.matrix) - 1.0) < 1e-9

    def test_quaternion_roundtrip(self):
        for _ in range(50):
            r = random_rotation(RNG)
            r2 = Rotation3.from_quaternion(r.as_quaternion())
            np.testing.assert_allclose(r2.matrix, r.matrix, atol=1e-12)


class TestSe3:
    def test_exp_zero(self):
        t = se3_exp(np.zeros(6))
        np.testing.assert_allclose(t.matrix(), np.eye(4), atol=1e-15)

    def test_act_identity(self):
        np.testing.assert_allclose(se3_act(Pose.identity(), [1.0, 2.0, 3.0]),
                                   [1.0, 2.0, 3.0])

    def test_inverse_composition_random(self):
        for _ in range(100):
            t = random_pose(RNG)
            ident = se3_compose(t, se3_inverse(t))
            np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-9)

    def test_exp_log_roundtrip(self):
        for _ in range(100):
            xi = RNG.uniform(-1.5, 1.5, 6)
            np.testing.assert_allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)

    def test_log_exp_roundtrip_pose(self):
        for _ in range(50):
            t = random_pose(RNG)
            t2 = se3_exp(se3_log(t))
            np.testing.assert_allclose(t2.matrix(), t.matrix(), atol=1e-9)


class TestProjection:
    def test_optical_axis(self):
        cam = default_camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
        np.testing.assert_allclose(project(cam, [0.0, 0.0, 1.0]), [0.0, 0.0])

    def test_direct_substitution(self):
        cam = default_camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0)
        np.testing.assert_allclose(project(cam, [0.1, -0.2, 2.0]), [55.0, 40.0])

    def test_behind_camera(self):
        cam = default_camera()
        with pytest.raises(BehindCamera):
            project(cam, [0.0, 0.0, -1.0])

    def test_scale_covariance_in_depth(self):
        cam = default_camera()
        p = np.array([0.3, -0.1, 2.0])
        for s in (0.5, 2.0, 7.3):
            np.testing.assert_allclose(project(cam, s * p), project(cam, p), atol=1e-12)

    def test_jacobian_on_axis(self):
        cam = default_camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
        np.testing.assert_allclose(projection_jacobian(cam, [0.0, 0.0, 1.0]),
                                   [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    def test_jacobian_direct_substitution(self):
        cam = default_camera(fx=2.0, fy=3.0, cx=0.0, cy=0.0)
        np.testing.assert_allclose(projection_jacobian(cam, [1.0, 1.0, 2.0]),
                                   [[1.0, 0.0, -0.5], [0.0, 1.5, -0.75]])

    def test_jacobian_matches_finite_differences(self):
        cam = default_camera()
        for _ in range(100):
            p = RNG.uniform(-1.0, 1.0, 3)
            p[2] = RNG.uniform(0.5, 5.0)
            jac = projection_jacobian(cam, p)
            num = numeric_jacobian(lambda x: project(cam, x), p)
            np.testing.assert_allclose(jac, num, rtol=1e-5, atol=1e-5)

    def test_batched_matches_scalar(self):
        cam = default_camera()
        pts = RNG.uniform(-1.0, 1.0, (40, 3))
        pts[:, 2] = RNG.uniform(0.5, 5.0, 40)
        uv, valid = project_points(cam, pts)
        assert valid.all()
        jacs = projection_jacobians(cam, pts)
        for i in range(len(pts)):
            np.testing.assert_allclose(uv[i], project(cam, pts[i]), atol=1e-12)
            np.testing.assert_allclose(jacs[i], projection_jacobian(cam, pts[i]), atol=1e-12)


class TestReprojectionResidual:
    def _zero_residual_setup(self):
        cam = default_camera(T_cb=Pose(so3_exp([0.02, -0.01, 0.03]), np.array([0.05, 0.0, -0.02])))
        T_wb = random_pose(RNG)
        p_body = np.array([0.2, -0.1, 2.5])
        p_world = T_wb.act(p_body)
        p_cam = cam.T_cb.act(p_body)
        z = project(cam, p_cam)
        return cam, T_wb, p_world, z

    def test_zero_residual_at_exact_projection(self):
        cam, T_wb, p_world, z = self._zero_residual_setup()
        r, _, _ = reprojection_residual_and_jacobians(cam, T_wb, p_world, z)
        np.testing.assert_allclose(r, np.zeros(2), atol=1e-10)

    def test_translation_changes_residual_by_projection_difference(self):
        cam, T_wb, p_world, z = self._zero_residual_setup()
        shifted = Pose(T_wb.rotation, T_wb.translation + np.array([0.01, 0.0, 0.0]))
        r, _, _ = reprojection_residual_and_jacobians(cam, shifted, p_world, z)
        p_cam = cam.T_cb.act(shifted.rotation.matrix.T @ (p_world - shifted.translation))
        np.testing.assert_allclose(r, z - project(cam, p_cam), atol=1e-12)

    def test_jacobians_match_finite_differences(self):
        for _ in range(100):
            cam = default_camera(
                T_cb=Pose(so3_exp(RNG.uniform(-0.1, 0.1, 3)), RNG.uniform(-0.1, 0.1, 3)))
            T_wb = random_pose(RNG)
            p_body = np.array([RNG.uniform(-0.5, 0.5), RNG.uniform(-0.5, 0.5),
                               RNG.uniform(1.0, 6.0)])
            p_world = T_wb.act(p_body)
            z = RNG.uniform(0.0, 600.0, 2)

            r, j_pose, j_point = reprojection_residual_and_jacobians(cam, T_wb, p_world, z)

            def f_pose(delta):
                r_d, _, _ = reprojection_residual_and_jacobians(
                    cam, T_wb.compose(se3_exp(delta)), p_world, z)
                return r_d

            def f_point(p):
                r_d, _, _ = reprojection_residual_and_jacobians(cam, T_wb, p, z)
                return r_d

            num_pose = numeric_jacobian(f_pose, np.zeros(6))
            num_point = numeric_jacobian(f_point, p_world)
            scale = max(1.0, np.max(np.abs(num_pose)))
            np.testing.assert_allclose(j_pose, num_pose, atol=1e-5 * scale)
            scale = max(1.0, np.max(np.abs(num_point)))
            np.testing.assert_allclose(j_point, num_point, atol=1e-5 * scale)
