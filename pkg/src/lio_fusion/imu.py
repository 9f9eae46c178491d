"""IMU measurement model, strapdown propagation and error-state covariance.

The navigation state evolves as::

    ṗ = v
    v̇ = R (a_m - b_a) - g
    q̇ = ½ q ⊗ (0, ω_m - b_g)

with ``g`` the gravity reaction vector, default ``(0, 0, 9.81)`` in a z-up
world, so a level IMU at rest reads ``a_m = (0, 0, 9.81)``.

Error-state ordering in every 15×15 matrix is ``(δp, δv, δθ, δb_a, δb_g)``
with ``δθ`` a body-frame (right) rotation perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .geometry import (
    IDENTITY_QUAT,
    qmul,
    quat_from_euler,
    quat_normalize,
    quat_to_rotmat,
    right_jacobian,
    skew,
    so3_exp,
)

DEFAULT_GRAVITY = (0.0, 0.0, 9.81)
MAX_PROPAGATION_DT = 0.1

I3 = np.eye(3)


class PropagationGapError(ValueError):
    """Raised when a propagation interval is non-positive or too long."""


@dataclass(frozen=True, eq=False)
class ImuSample:
    t: float
    acc: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "acc", np.asarray(self.acc, dtype=float))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float))


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities and gravity.

    ``sigma_acc`` [m/s²/√Hz], ``sigma_acc_bias`` [m/s³/√Hz],
    ``sigma_gyro`` [rad/s/√Hz], ``sigma_gyro_bias`` [rad/s²/√Hz].
    """

    sigma_acc: float = 6e-4
    sigma_acc_bias: float = 3e-5
    sigma_gyro: float = 1.7e-4
    sigma_gyro_bias: float = 2e-6
    gravity: tuple = DEFAULT_GRAVITY

    def __post_init__(self):
        for name in ("sigma_acc", "sigma_acc_bias", "sigma_gyro", "sigma_gyro_bias"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def g(self):
        return np.asarray(self.gravity, dtype=float)

    def continuous_cov(self):
        """Q_c over noise ordering (n_a, n_ba, n_ω, n_bω), 12×12."""
        return np.diag(np.repeat(
            [self.sigma_acc**2, self.sigma_acc_bias**2,
             self.sigma_gyro**2, self.sigma_gyro_bias**2], 3))


@dataclass(eq=False)
class ImuState:
    t: float
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    P: np.ndarray = field(default_factory=lambda: np.zeros((15, 15)))

    def copy(self, **changes) -> "ImuState":
        fields = dict(p=self.p.copy(), v=self.v.copy(), q=self.q.copy(),
                      b_a=self.b_a.copy(), b_g=self.b_g.copy(), P=self.P.copy())
        fields.update(changes)
        return replace(self, **fields)

    @property
    def R(self):
        return quat_to_rotmat(self.q)

    def boxplus(self, delta) -> "ImuState":
        """Apply a 15-vector error-state increment."""
        delta = np.asarray(delta, dtype=float)
        return self.copy(
            p=self.p + delta[0:3],
            v=self.v + delta[3:6],
            q=quat_normalize(qmul(self.q, so3_exp(delta[6:9]))),
            b_a=self.b_a + delta[9:12],
            b_g=self.b_g + delta[12:15],
        )


def correct_measurement(sample: ImuSample, b_a, b_g):
    """Deterministic part of the measurement model: remove the biases."""
    return sample.acc - b_a, sample.gyro - b_g


@dataclass
class _Step:
    """Quantities of one midpoint step, kept for Jacobian assembly."""

    R0: np.ndarray
    R1: np.ndarray
    dR: np.ndarray
    a0: np.ndarray
    a1: np.ndarray
    phi: np.ndarray


def midpoint_step(q0, p0, v0, a0, w0, a1, w1, dt, g):
    """One midpoint integration step with bias-corrected measurements.

    The gyro rate is averaged over the interval; the specific force is
    averaged after rotating each end into the reference frame.  Returns
    ``(q1, p1, v1, step)``.
    """
    phi = 0.5 * (w0 + w1) * dt
    dq = so3_exp(phi)
    q1 = quat_normalize(qmul(q0, dq))
    R0 = quat_to_rotmat(q0)
    R1 = quat_to_rotmat(q1)
    acc = 0.5 * (R0 @ a0 + R1 @ a1) - g
    p1 = p0 + v0 * dt + 0.5 * acc * dt * dt
    v1 = v0 + acc * dt
    return q1, p1, v1, _Step(R0, R1, quat_to_rotmat(dq), a0, a1, phi)


def step_jacobian(step: _Step, dt):
    """Exact Jacobian of :func:`midpoint_step` w.r.t. the 15-dim error state."""
    R0, R1, dR, a0, a1 = step.R0, step.R1, step.dR, step.a0, step.a1
    Jr = right_jacobian(step.phi)
    R1a1x = R1 @ skew(a1)
    dacc_dth = -0.5 * (R0 @ skew(a0) + R1a1x @ dR.T)
    dacc_dba = -0.5 * (R0 + R1)
    dacc_dbg = 0.5 * R1a1x @ Jr * dt
    F = np.eye(15)
    half_dt2 = 0.5 * dt * dt
    F[0:3, 3:6] = I3 * dt
    F[0:3, 6:9] = half_dt2 * dacc_dth
    F[0:3, 9:12] = half_dt2 * dacc_dba
    F[0:3, 12:15] = half_dt2 * dacc_dbg
    F[3:6, 6:9] = dt * dacc_dth
    F[3:6, 9:12] = dt * dacc_dba
    F[3:6, 12:15] = dt * dacc_dbg
    F[6:9, 6:9] = dR.T
    F[6:9, 12:15] = -Jr * dt
    return F


def noise_input_matrix(R):
    """G_c mapping (n_a, n_ba, n_ω, n_bω) into the error-state derivative."""
    G = np.zeros((15, 12))
    G[3:6, 0:3] = -R
    G[6:9, 6:9] = -I3
    G[9:12, 3:6] = I3
    G[12:15, 9:12] = I3
    return G


def continuous_error_dynamics(R, acc, omega):
    """F_c of the error state at a linearization point."""
    F = np.zeros((15, 15))
    F[0:3, 3:6] = I3
    F[3:6, 6:9] = -R @ skew(acc)
    F[3:6, 9:12] = -R
    F[6:9, 6:9] = -skew(omega)
    F[6:9, 12:15] = -I3
    return F


def discrete_noise(R, noise: NoiseParams, dt, acc=None, omega=None, exact=False):
    """Q_d for one interval.

    By default the first-order hold ``G Q_c Gᵀ dt``.  With ``exact=True`` the
    integral ``∫ Φ(τ) G Q_c Gᵀ Φ(τ)ᵀ dτ`` is evaluated with Van Loan's
    matrix-exponential construction around ``(acc, omega)``.
    """
    G = noise_input_matrix(R)
    GQG = G @ noise.continuous_cov() @ G.T
    if not exact:
        return GQG * dt
    Fc = continuous_error_dynamics(R, np.zeros(3) if acc is None else acc,
                                   np.zeros(3) if omega is None else omega)
    M = np.zeros((30, 30))
    M[:15, :15] = -Fc
    M[:15, 15:] = GQG
    M[15:, 15:] = Fc.T
    E = expm(M * dt)
    Phi = E[15:, 15:].T
    Qd = Phi @ E[:15, 15:]
    return 0.5 * (Qd + Qd.T)


def _check_dt(state, dt):
    if not (dt > 0.0 and dt <= MAX_PROPAGATION_DT):
        raise PropagationGapError(
            f"propagation interval {dt!r} s from t={state.t!r} to t={state.t + dt!r} "
            f"outside (0, {MAX_PROPAGATION_DT}]")


def _step_from_samples(x: ImuState, s: ImuSample, dt, g, s_next):
    a0, w0 = correct_measurement(s, x.b_a, x.b_g)
    if s_next is None:
        a1, w1 = a0, w0
    else:
        a1, w1 = correct_measurement(s_next, x.b_a, x.b_g)
    return midpoint_step(x.q, x.p, x.v, a0, w0, a1, w1, dt, g)


def propagate_state(x: ImuState, s: ImuSample, dt, noise: NoiseParams,
                    s_next: ImuSample | None = None) -> ImuState:
    """Noise-free propagation of ``x`` over ``dt`` seconds.

    ``s`` is the sample at the start of the interval.  When ``s_next`` (the
    sample at the end) is given the two are averaged, otherwise ``s`` is held
    over the interval.  Biases and covariance are carried over unchanged.
    """
    _check_dt(x, dt)
    q1, p1, v1, _ = _step_from_samples(x, s, dt, noise.g, s_next)
    return ImuState(t=x.t + dt, p=p1, v=v1, q=q1, b_a=x.b_a.copy(),
                    b_g=x.b_g.copy(), P=x.P)


def propagate_covariance(x: ImuState, s: ImuSample, dt, noise: NoiseParams,
                         s_next: ImuSample | None = None, exact_noise=False):
    """``F_d P F_dᵀ + Q_d`` for the step taken by :func:`propagate_state`."""
    _check_dt(x, dt)
    _, _, _, step = _step_from_samples(x, s, dt, noise.g, s_next)
    F = step_jacobian(step, dt)
    Qd = discrete_noise(step.R0, noise, dt, acc=0.5 * (step.a0 + step.a1),
                        omega=step.phi / dt, exact=exact_noise)
    P = F @ x.P @ F.T + Qd
    return 0.5 * (P + P.T)


def propagate(x: ImuState, s: ImuSample, dt, noise: NoiseParams,
              s_next: ImuSample | None = None, exact_noise=False) -> ImuState:
    """State and covariance propagation in one call."""
    _check_dt(x, dt)
    q1, p1, v1, step = _step_from_samples(x, s, dt, noise.g, s_next)
    F = step_jacobian(step, dt)
    Qd = discrete_noise(step.R0, noise, dt, acc=0.5 * (step.a0 + step.a1),
                        omega=step.phi / dt, exact=exact_noise)
    P = F @ x.P @ F.T + Qd
    return ImuState(t=x.t + dt, p=p1, v=v1, q=q1, b_a=x.b_a.copy(),
                    b_g=x.b_g.copy(), P=0.5 * (P + P.T))


def interpolate_sample(s0: ImuSample, s1: ImuSample, t) -> ImuSample:
    """Linear interpolation of a sample at ``s0.t <= t <= s1.t``."""
    span = s1.t - s0.t
    alpha = 0.0 if span <= 0 else (t - s0.t) / span
    return ImuSample(t, (1 - alpha) * s0.acc + alpha * s1.acc,
                     (1 - alpha) * s0.gyro + alpha * s1.gyro)


def align_gravity(samples, duration=1.0):
    """Roll/pitch from averaged stationary accelerometer data; yaw is zero."""
    if not samples:
        raise ValueError("no IMU samples for alignment")
    t0 = samples[0].t
    acc = np.array([s.acc for s in samples if s.t <= t0 + duration])
    f = acc.mean(axis=0)
    roll = np.arctan2(f[1], f[2])
    pitch = np.arctan2(-f[0], np.hypot(f[1], f[2]))
    return quat_from_euler(roll, pitch, 0.0)


def integrate_stream(x: ImuState, samples, noise: NoiseParams, with_covariance=False):
    """Propagate through consecutive samples with midpoint averaging.

    ``samples[0].t`` must equal ``x.t``.  Returns every intermediate state,
    starting with ``x``.
    """
    out = [x]
    step = propagate if with_covariance else propagate_state
    for s0, s1 in zip(samples[:-1], samples[1:]):
        x = step(x, s0, s1.t - s0.t, noise, s_next=s1)
        x.t = s1.t
        out.append(x)
    return out
