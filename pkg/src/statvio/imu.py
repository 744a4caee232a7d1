"""On-manifold IMU preintegration between keyframes and the 9-dof residual.

Preintegrated quantities are expressed in the body frame of the interval's
first state: ``alpha`` (relative displacement, m), ``beta`` (relative
velocity, m/s), and ``gamma`` (relative rotation). The accompanying 9x9
covariance is ordered (position, velocity, rotation) to match the residual
blocks, so its inverse can weight the residual directly.

Sign conventions (shared with the simulator): the world gravity vector points
down, ``g_world = (0, 0, -9.81)``, and the accelerometer measures specific
force ``R_wb^T (a_world - g_world) + b_a + noise``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyStream, NonMonotonicTime
from .geometry import Rotation3, so3_exp, so3_hat, so3_log, so3_right_jacobian_inverse


@dataclass
class ImuSample:
    """One IMU reading: gyro (rad/s) and accelerometer (m/s^2) at time t (s)."""

    t: float
    omega: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)


@dataclass
class ImuBias:
    """Accelerometer and gyroscope biases."""

    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.b_a = np.asarray(self.b_a, dtype=float)
        self.b_g = np.asarray(self.b_g, dtype=float)

    def distance(self, other: "ImuBias") -> float:
        return max(np.max(np.abs(self.b_a - other.b_a)),
                   np.max(np.abs(self.b_g - other.b_g)))


@dataclass
class ImuNoiseParams:
    """White-noise densities per sqrt(Hz): gyro (rad/s) and accel (m/s^2)."""

    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3


@dataclass
class GravityModel:
    """World-frame gravity vector."""

    g_world: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.g_world = np.asarray(self.g_world, dtype=float)
        norm = np.linalg.norm(self.g_world)
        if norm != 0.0 and not (9.7 <= norm <= 9.9):
            raise ValueError(f"gravity magnitude {norm:.4f} outside [9.7, 9.9]")


@dataclass
class PreintegratedImu:
    """Relative motion compounded from raw IMU samples over one interval."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: Rotation3
    Sigma_imu: np.ndarray
    dt_total: float
    bias_ref: ImuBias


def preintegrate(samples: list[ImuSample], bias: ImuBias,
                 noise: ImuNoiseParams) -> PreintegratedImu:
    """Midpoint-rule preintegration of an IMU stream.

    The rotation is maintained as a product of incremental exponentials; the
    9x9 covariance is propagated by first-order discrete linearization of the
    (position, velocity, rotation) error state.

    Raises:
        EmptyStream: fewer than two samples.
        NonMonotonicTime: timestamps not strictly increasing.
    """
    if len(samples) < 2:
        raise EmptyStream(f"need >= 2 samples, got {len(samples)}")

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = np.eye(3)
    cov = np.zeros((9, 9))
    dt_total = 0.0

    var_g = noise.sigma_g ** 2
    var_a = noise.sigma_a ** 2

    for k in range(len(samples) - 1):
        s0, s1 = samples[k], samples[k + 1]
        dt = s1.t - s0.t
        if dt <= 0.0:
            raise NonMonotonicTime(f"dt={dt:.6g} at sample {k + 1}")

        w_mid = 0.5 * (s0.omega + s1.omega) - bias.b_g
        d_rot = so3_exp(w_mid * dt).matrix
        gamma_next = gamma @ d_rot
        # rotate the midpoint specific force with the rotation midpoint
        a0 = gamma @ (s0.accel - bias.b_a)
        a1 = gamma_next @ (s1.accel - bias.b_a)
        a_mid = 0.5 * (a0 + a1)

        # error-state transition (delta_alpha, delta_beta, delta_theta)
        a_body = 0.5 * (s0.accel + s1.accel) - bias.b_a
        ra_hat = gamma @ so3_hat(a_body)
        f = np.eye(9)
        f[0:3, 3:6] = np.eye(3) * dt
        f[0:3, 6:9] = -0.5 * ra_hat * dt * dt
        f[3:6, 6:9] = -ra_hat * dt
        f[6:9, 6:9] = d_rot.T

        g_noise = np.zeros((9, 6))
        g_noise[0:3, 0:3] = 0.5 * gamma * dt * dt
        g_noise[3:6, 0:3] = gamma * dt
        g_noise[6:9, 3:6] = np.eye(3) * dt
        q_d = np.diag([var_a / dt] * 3 + [var_g / dt] * 3)
        cov = f @ cov @ f.T + g_noise @ q_d @ g_noise.T

        alpha = alpha + beta * dt + 0.5 * a_mid * dt * dt
        beta = beta + a_mid * dt
        gamma = gamma_next
        dt_total += dt

    cov = 0.5 * (cov + cov.T)
    return PreintegratedImu(alpha=alpha, beta=beta, gamma=Rotation3(gamma),
                            Sigma_imu=cov, dt_total=dt_total,
                            bias_ref=ImuBias(bias.b_a.copy(), bias.b_g.copy()))


def imu_residual(state_i, state_j, pre: PreintegratedImu,
                 gravity: GravityModel) -> np.ndarray:
    """9-vector inter-state residual: (position, velocity, rotation) blocks.

    Zero when the two states are consistent with the preintegrated motion
    under the shared gravity convention.
    """
    dt = pre.dt_total
    g = gravity.g_world
    r_i = state_i.T_wb.rotation.matrix
    p_i, p_j = state_i.T_wb.translation, state_j.T_wb.translation
    v_i, v_j = state_i.v_w, state_j.v_w

    r_pos = r_i.T @ (p_j - p_i - v_i * dt - 0.5 * g * dt * dt) - pre.alpha
    r_vel = r_i.T @ (v_j - v_i - g * dt) - pre.beta
    e_rot = Rotation3(pre.gamma.matrix.T @ r_i.T @ state_j.T_wb.rotation.matrix)
    r_rot = so3_log(e_rot)
    return np.concatenate([r_pos, r_vel, r_rot])


def imu_residual_jacobians(state_i, state_j, pre: PreintegratedImu,
                           gravity: GravityModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual plus 9x15 Jacobians for each state.

    Per-state tangent ordering is (pose rho, pose phi, velocity, b_a, b_g);
    pose perturbations are right-multiplied. The bias columns are zero because
    the residual is evaluated at the preintegration's reference bias
    (preintegration is recomputed when the bias estimate moves instead).
    """
    dt = pre.dt_total
    g = gravity.g_world
    r_i = state_i.T_wb.rotation.matrix
    r_j = state_j.T_wb.rotation.matrix
    p_i, p_j = state_i.T_wb.translation, state_j.T_wb.translation
    v_i, v_j = state_i.v_w, state_j.v_w

    u = p_j - p_i - v_i * dt - 0.5 * g * dt * dt
    w = v_j - v_i - g * dt
    residual = imu_residual(state_i, state_j, pre, gravity)
    theta = residual[6:9]
    jr_inv = so3_right_jacobian_inverse(theta)

    j_i = np.zeros((9, 15))
    j_j = np.zeros((9, 15))

    # position block
    j_i[0:3, 0:3] = -np.eye(3)                 # d rho_i (p_i moves by R_i rho)
    j_i[0:3, 3:6] = so3_hat(r_i.T @ u)
    j_i[0:3, 6:9] = -r_i.T * dt
    j_j[0:3, 0:3] = r_i.T @ r_j

    # velocity block
    j_i[3:6, 3:6] = so3_hat(r_i.T @ w)
    j_i[3:6, 6:9] = -r_i.T
    j_j[3:6, 6:9] = r_i.T

    # rotation block
    j_i[6:9, 3:6] = -jr_inv @ (r_j.T @ r_i)
    j_j[6:9, 3:6] = jr_inv

    return residual, j_i, j_j


def propagate_state(state, pre: PreintegratedImu, gravity: GravityModel):
    """Advance a nav state through a preintegrated interval (dead reckoning).

    Returns a new instance of the input state's type.
    """
    from .geometry import Pose

    dt = pre.dt_total
    g = gravity.g_world
    r_i = state.T_wb.rotation.matrix
    p = state.T_wb.translation + state.v_w * dt + 0.5 * g * dt * dt + r_i @ pre.alpha
    v = state.v_w + g * dt + r_i @ pre.beta
    rot = Rotation3(r_i @ pre.gamma.matrix)
    return type(state)(T_wb=Pose(rot, p), v_w=v,
                       bias=ImuBias(state.bias.b_a.copy(), state.bias.b_g.copy()),
                       t=state.t + dt)
