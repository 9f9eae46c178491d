"""Sliding-window least squares over IMU states.

Two constraint types tie consecutive keyframe states together:

* pre-integration residuals (15-dim: δp, δv, δθ, δb_a, δb_g), and
* LiDAR relative-pose residuals (6-dim: translation, rotation) that map both
  IMU states through the fixed IMU→LiDAR extrinsics.

The cost is the sum of squared residuals whitened by their covariances.  It
is minimized with Levenberg-Marquardt on the state manifold: positions,
velocities and biases update additively, orientations by right
multiplication with ``so3_exp``.  The first window state is held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky

from .geometry import (
    IDENTITY_QUAT,
    PoseSE3,
    qmul,
    quat_conjugate,
    quat_to_rotmat,
    right_jacobian,
    right_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
)
from .imu import ImuState, NoiseParams, propagate_state
from .preintegration import Pim

logger = logging.getLogger(__name__)

I3 = np.eye(3)
COV_FLOOR = 1e-12
DEFAULT_POSE_SIGMA = (0.02, 0.02, 0.02, 0.01, 0.01, 0.01)


class NumericalFailureError(RuntimeError):
    """Non-finite cost or Jacobian inside the optimizer."""


@dataclass(frozen=True, eq=False)
class Extrinsics:
    """Fixed pose of the LiDAR frame in the IMU frame."""

    q_IL: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    p_IL: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def pose(self) -> PoseSE3:
        return PoseSE3(self.q_IL, self.p_IL)

    @classmethod
    def from_pose(cls, pose: PoseSE3) -> "Extrinsics":
        return cls(pose.rotation, pose.translation)


@dataclass(eq=False)
class PimConstraint:
    i: int
    j: int
    pim: Pim


@dataclass(eq=False)
class LidarConstraint:
    """Measured pose of LiDAR frame ``j`` in LiDAR frame ``i``."""

    i: int
    j: int
    pose: PoseSE3
    sigma: tuple = DEFAULT_POSE_SIGMA
    sqrt_info: np.ndarray | None = None  # overrides ``sigma`` when given


@dataclass(eq=False)
class WindowProblem:
    states: list
    pim_constraints: list
    lidar_constraints: list = field(default_factory=list)
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    noise: NoiseParams = field(default_factory=NoiseParams)
    fixed: tuple = (0,)

    def validate(self):
        n = len(self.states)
        for c in [*self.pim_constraints, *self.lidar_constraints]:
            if not (0 <= c.i < c.j < n):
                raise ValueError(f"constraint ({c.i}, {c.j}) invalid for {n} states")
        pairs = sorted((c.i, c.j) for c in self.pim_constraints)
        if pairs != [(k, k + 1) for k in range(n - 1)]:
            raise ValueError("each consecutive state pair needs exactly one PIM constraint")


# ---------------------------------------------------------------------------
# pre-integration residual

def _corrected_increment(x_i: ImuState, pim: Pim):
    d_ba = x_i.b_a - pim.b_a_lin
    d_bg = x_i.b_g - pim.b_g_lin
    J = pim.jac_bias
    d_b = np.concatenate([d_ba, d_bg])
    dp = pim.dp + J[0:3] @ d_b
    dv = pim.dv + J[3:6] @ d_b
    corr = J[6:9, 3:6] @ d_bg
    dq = qmul(pim.dq, so3_exp(corr))
    return dp, dv, dq, corr


def pim_residual(x_i: ImuState, x_j: ImuState, pim: Pim, g):
    """Predicted-minus-actual discrepancy of ``x_j`` against ``x_i ⊕ pim``.

    Blocks: position in the frame of ``x_i``; velocity in the world frame;
    rotation as ``so3_log(q_j⁻¹ ⊗ q_i ⊗ ΔR)``; biases as ``b_j - b_i``.
    """
    return _pim_residual_and_jacobians(x_i, x_j, pim, np.asarray(g, float), False)[0]


def pim_residual_jacobians(x_i: ImuState, x_j: ImuState, pim: Pim, g):
    """``(r, ∂r/∂x_i, ∂r/∂x_j)`` with 15×15 blocks over the error state."""
    return _pim_residual_and_jacobians(x_i, x_j, pim, np.asarray(g, float), True)


def _pim_residual_and_jacobians(x_i, x_j, pim, g, jacobians):
    T = pim.dt
    dp, dv, dq, corr = _corrected_increment(x_i, pim)
    R_i = quat_to_rotmat(x_i.q)
    y = x_j.p - x_i.p - x_i.v * T + 0.5 * g * T * T
    r_p = dp - R_i.T @ y
    r_v = x_i.v - g * T + R_i @ dv - x_j.v
    e_q = qmul(qmul(quat_conjugate(x_j.q), x_i.q), dq)
    r_th = so3_log(e_q)
    r = np.concatenate([r_p, r_v, r_th, x_j.b_a - x_i.b_a, x_j.b_g - x_i.b_g])
    if not jacobians:
        return r, None, None
    J = pim.jac_bias
    dR = quat_to_rotmat(dq)
    E = quat_to_rotmat(e_q)
    Jr_inv = right_jacobian_inv(r_th)
    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    # position block
    Ji[0:3, 0:3] = R_i.T
    Ji[0:3, 3:6] = R_i.T * T
    Ji[0:3, 6:9] = -skew(R_i.T @ y)
    Ji[0:3, 9:15] = J[0:3]
    Jj[0:3, 0:3] = -R_i.T
    # velocity block
    Ji[3:6, 3:6] = I3
    Ji[3:6, 6:9] = -R_i @ skew(dv)
    Ji[3:6, 9:15] = R_i @ J[3:6]
    Jj[3:6, 3:6] = -I3
    # rotation block
    Ji[6:9, 6:9] = Jr_inv @ dR.T
    Ji[6:9, 12:15] = Jr_inv @ right_jacobian(corr) @ J[6:9, 3:6]
    Jj[6:9, 6:9] = -Jr_inv @ E.T
    # bias random walk
    Ji[9:15, 9:15] = -np.eye(6)
    Jj[9:15, 9:15] = np.eye(6)
    return r, Ji, Jj


def pim_sqrt_information(pim: Pim, noise: NoiseParams):
    """Upper factor ``U`` with ``UᵀU = Σ⁻¹`` for the frame-i residual."""
    cov = np.zeros((15, 15))
    cov[:9, :9] = pim.cov
    cov[9:12, 9:12] = I3 * noise.sigma_acc_bias**2 * pim.dt
    cov[12:15, 12:15] = I3 * noise.sigma_gyro_bias**2 * pim.dt
    cov += np.eye(15) * COV_FLOOR
    info = np.linalg.inv(cov)
    return cholesky(0.5 * (info + info.T), lower=False)


def _to_frame_i(r, Ji, Jj, R_i):
    """Rotate the world-frame velocity block into frame ``i`` for whitening."""
    r = r.copy()
    rv_w = r[3:6]
    r[3:6] = R_i.T @ rv_w
    if Ji is None:
        return r, None, None
    Ji = Ji.copy()
    Jj = Jj.copy()
    Ji[3:6] = R_i.T @ Ji[3:6]
    Ji[3:6, 6:9] += skew(R_i.T @ rv_w)
    Jj[3:6] = R_i.T @ Jj[3:6]
    return r, Ji, Jj


# ---------------------------------------------------------------------------
# LiDAR relative-pose residual

def lidar_pose_of(x: ImuState, ext: Extrinsics) -> PoseSE3:
    """World pose of the LiDAR attached to IMU state ``x``."""
    return PoseSE3(x.q, x.p).compose(ext.pose)


def pose_residual(x_i: ImuState, x_j: ImuState, meas: PoseSE3, ext: Extrinsics):
    """Measured-minus-predicted relative LiDAR pose (translation, 2·vec rotation)."""
    return _pose_residual_and_jacobians(x_i, x_j, meas, ext, False)[0]


def pose_residual_jacobians(x_i: ImuState, x_j: ImuState, meas: PoseSE3, ext: Extrinsics):
    return _pose_residual_and_jacobians(x_i, x_j, meas, ext, True)


def _pose_residual_and_jacobians(x_i, x_j, meas, ext, jacobians):
    q_IL = ext.q_IL
    p_IL = np.asarray(ext.p_IL, dtype=float)
    R_IL = quat_to_rotmat(q_IL)
    R_i = quat_to_rotmat(x_i.q)
    R_j = quat_to_rotmat(x_j.q)
    d = x_j.p + R_j @ p_IL - x_i.p - R_i @ p_IL
    u = R_i.T @ d
    P_hat = R_IL.T @ u
    q_Li = qmul(x_i.q, q_IL)
    q_Lj = qmul(x_j.q, q_IL)
    q_hat = qmul(quat_conjugate(q_Li), q_Lj)
    e = qmul(quat_conjugate(q_hat), meas.rotation)
    sign = -1.0 if e[0] < 0.0 else 1.0
    e = sign * e
    r = np.concatenate([meas.translation - P_hat, 2.0 * e[1:]])
    if not jacobians:
        return r, None, None
    w, v = e[0], e[1:]
    Ji = np.zeros((6, 15))
    Jj = np.zeros((6, 15))
    Ji[0:3, 0:3] = R_IL.T @ R_i.T
    Ji[0:3, 6:9] = -R_IL.T @ (skew(u) + skew(p_IL))
    Jj[0:3, 0:3] = -R_IL.T @ R_i.T
    Jj[0:3, 6:9] = R_IL.T @ R_i.T @ R_j @ skew(p_IL)
    R_m = quat_to_rotmat(meas.rotation)
    Ji[3:6, 6:9] = (w * I3 + skew(v)) @ R_m.T @ R_IL.T
    Jj[3:6, 6:9] = (-w * I3 + skew(v)) @ R_IL.T
    return r, Ji, Jj


def pose_sqrt_information(sigma):
    return np.diag(1.0 / np.asarray(sigma, dtype=float))


def registration_sqrt_information(hessian, meas: PoseSE3, variance, min_eigenvalue=0.0):
    """Square-root information of a registration result for :func:`pose_residual`.

    ``hessian`` is the point-to-plane Gauss-Newton matrix over (translation,
    left rotation) and ``variance`` the per-point residual variance.
    Directions with eigenvalue below ``min_eigenvalue`` carry no information.
    """
    evals, evecs = np.linalg.eigh(0.5 * (hessian + hessian.T))
    evals = np.where(evals < max(min_eigenvalue, 0.0), 0.0, evals)
    B = np.zeros((6, 6))
    B[:3, :3] = I3
    B[3:, 3:] = meas.R.T
    U = (np.sqrt(evals / variance)[:, None] * evecs.T) @ B.T
    return U


# ---------------------------------------------------------------------------
# cost and solver

def _whitened_terms(prob: WindowProblem, jacobians=True):
    """Yield ``(label, i, j, e, J_i, J_j)`` for every constraint."""
    g = prob.noise.g
    for c in prob.pim_constraints:
        x_i, x_j = prob.states[c.i], prob.states[c.j]
        r, Ji, Jj = _pim_residual_and_jacobians(x_i, x_j, c.pim, g, jacobians)
        r, Ji, Jj = _to_frame_i(r, Ji, Jj, quat_to_rotmat(x_i.q))
        U = pim_sqrt_information(c.pim, prob.noise)
        yield ("pim", c.i, c.j, U @ r,
               None if Ji is None else U @ Ji, None if Jj is None else U @ Jj)
    for c in prob.lidar_constraints:
        x_i, x_j = prob.states[c.i], prob.states[c.j]
        r, Ji, Jj = _pose_residual_and_jacobians(x_i, x_j, c.pose, prob.extrinsics, jacobians)
        U = pose_sqrt_information(c.sigma) if c.sqrt_info is None else c.sqrt_info
        yield ("lidar", c.i, c.j, U @ r,
               None if Ji is None else U @ Ji, None if Jj is None else U @ Jj)


def total_cost(prob: WindowProblem) -> float:
    """Sum of squared whitened residual norms."""
    return float(sum(e @ e for *_, e, _, _ in _whitened_terms(prob, jacobians=False)))


@dataclass
class OptimizerOptions:
    max_iterations: int = 100
    relative_decrease_tol: float = 1e-9
    gradient_tol: float = 1e-10
    step_tol: float = 1e-12
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e16


@dataclass
class OptimizationReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    cost_history: list = field(default_factory=list)


def _linearize(prob: WindowProblem, free: list):
    col = {k: 15 * n for n, k in enumerate(free)}
    rows_e, rows_J = [], []
    for label, i, j, e, Ji, Jj in _whitened_terms(prob):
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(Ji)) and np.all(np.isfinite(Jj))):
            raise NumericalFailureError(f"non-finite {label} residual/Jacobian between states {i} and {j}")
        J = np.zeros((e.size, 15 * len(free)))
        if i in col:
            J[:, col[i]:col[i] + 15] = Ji
        if j in col:
            J[:, col[j]:col[j] + 15] = Jj
        rows_e.append(e)
        rows_J.append(J)
    return np.concatenate(rows_e), np.vstack(rows_J)


def _retract(states, free, delta):
    out = list(states)
    for n, k in enumerate(free):
        out[k] = states[k].boxplus(delta[15 * n:15 * n + 15])
    return out


def optimize_window(prob: WindowProblem, opts: OptimizerOptions | None = None):
    """Levenberg-Marquardt over the non-fixed states.

    Returns ``(states, report)``; the input problem is not modified.
    """
    opts = opts or OptimizerOptions()
    prob.validate()
    if len(prob.states) < 2:
        raise ValueError("window needs at least two states")
    free = [k for k in range(len(prob.states)) if k not in set(prob.fixed)]
    states = list(prob.states)
    trial = WindowProblem(states, prob.pim_constraints, prob.lidar_constraints,
                          prob.extrinsics, prob.noise, prob.fixed)
    cost = total_cost(trial)
    if not np.isfinite(cost):
        raise NumericalFailureError("non-finite initial cost")
    report = OptimizationReport(0, cost, cost, "max_iterations", [cost])
    if not free:
        report.termination = "no_free_states"
        return states, report
    lam = opts.lambda_init
    e, J = _linearize(trial, free)
    it = 0
    while it < opts.max_iterations:
        H = J.T @ J
        grad = J.T @ e
        if np.max(np.abs(grad)) < opts.gradient_tol:
            report.termination = "gradient"
            break
        it += 1
        D = np.diag(np.diag(H)) + 1e-9 * np.eye(H.shape[0])
        try:
            delta = cho_solve(cho_factor(H + lam * D), -grad)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(H + lam * D, -grad, rcond=None)[0]
        if not np.all(np.isfinite(delta)):
            raise NumericalFailureError("non-finite LM step")
        candidate = _retract(states, free, delta)
        trial.states = candidate
        new_cost = total_cost(trial)
        if np.isfinite(new_cost) and new_cost < cost:
            rel = (cost - new_cost) / cost
            states, cost = candidate, new_cost
            report.cost_history.append(cost)
            lam = max(lam * opts.lambda_down, 1e-12)
            if rel < opts.relative_decrease_tol:
                report.termination = "relative_decrease"
                break
            if np.linalg.norm(delta) < opts.step_tol:
                report.termination = "step"
                break
            e, J = _linearize(trial, free)
        else:
            trial.states = states
            lam *= opts.lambda_up
            if np.linalg.norm(delta) < opts.step_tol:
                report.termination = "step"
                break
            if lam > opts.lambda_max:
                report.termination = "lambda"
                break
    report.iterations = it
    report.final_cost = cost
    logger.debug("LM: %d iterations, cost %.3e -> %.3e (%s)",
                 it, report.initial_cost, cost, report.termination)
    return states, report


def update_after_optimization(anchor: ImuState, pending, noise: NoiseParams) -> ImuState:
    """Re-propagate the high-rate state from an optimized anchor.

    ``pending`` holds the IMU samples from ``anchor.t`` onward; a first sample
    later than the anchor is held constant over the leading gap.
    """
    x = anchor
    pending = [s for s in pending if s.t >= anchor.t]
    if not pending:
        return anchor
    if pending[0].t > x.t:
        x = propagate_state(x, pending[0], pending[0].t - x.t, noise)
        x.t = pending[0].t
    for s0, s1 in zip(pending[:-1], pending[1:]):
        x = propagate_state(x, s0, s1.t - s0.t, noise, s_next=s1)
        x.t = s1.t
    return x


def remove_lidar_constraints(prob: WindowProblem) -> WindowProblem:
    return WindowProblem(list(prob.states), prob.pim_constraints, [],
                         prob.extrinsics, prob.noise, prob.fixed)


