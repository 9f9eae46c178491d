"""Pre-integrated IMU motion increments between two keyframe times.

Increments are expressed in the body frame at the start of the interval and
exclude gravity; :func:`pim_predict` adds it back.  They use the same
midpoint scheme as :mod:`lio_fusion.imu`, so chaining an increment onto a
state reproduces direct propagation up to rounding.

Covariance and Jacobian row ordering is ``(δp, δv, δθ)``; bias Jacobian
columns are ``(b_a, b_g)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import IDENTITY_QUAT, qmul, quat_normalize, quat_to_rotmat, so3_exp
from .imu import (
    ImuSample,
    ImuState,
    NoiseParams,
    correct_measurement,
    interpolate_sample,
    midpoint_step,
    noise_input_matrix,
    step_jacobian,
)

BIAS_CORRECTION_WARN = 0.1

_ZERO_G = np.zeros(3)


@dataclass(eq=False)
class Pim:
    dp: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dv: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dq: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    dt: float = 0.0
    cov: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))
    b_a_lin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g_lin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    jac_bias: np.ndarray = field(default_factory=lambda: np.zeros((9, 6)))

    @classmethod
    def start(cls, b_a=None, b_g=None) -> "Pim":
        """Identity increment linearized at the given biases."""
        pim = cls()
        if b_a is not None:
            pim.b_a_lin = np.array(b_a, dtype=float)
        if b_g is not None:
            pim.b_g_lin = np.array(b_g, dtype=float)
        return pim

    @property
    def dR(self):
        return quat_to_rotmat(self.dq)

    def copy(self, **changes) -> "Pim":
        fields = dict(dp=self.dp.copy(), dv=self.dv.copy(), dq=self.dq.copy(),
                      cov=self.cov.copy(), b_a_lin=self.b_a_lin.copy(),
                      b_g_lin=self.b_g_lin.copy(), jac_bias=self.jac_bias.copy())
        fields.update(changes)
        return replace(self, **fields)


def pim_integrate(pim: Pim, s: ImuSample, dt, noise: NoiseParams,
                  s_next: ImuSample | None = None) -> Pim:
    """Add one interval of IMU data to ``pim``.

    ``s``/``s_next`` follow :func:`lio_fusion.imu.propagate_state`.
    """
    if not dt > 0.0:
        raise ValueError(f"pre-integration interval must be positive, got {dt!r}")
    a0, w0 = correct_measurement(s, pim.b_a_lin, pim.b_g_lin)
    if s_next is None:
        a1, w1 = a0, w0
    else:
        a1, w1 = correct_measurement(s_next, pim.b_a_lin, pim.b_g_lin)
    dq, dp, dv, step = midpoint_step(pim.dq, pim.dp, pim.dv, a0, w0, a1, w1, dt, _ZERO_G)
    F = step_jacobian(step, dt)
    A = F[:9, :9]
    B = noise_input_matrix(step.R0)[:9]
    cov = A @ pim.cov @ A.T + B @ noise.continuous_cov() @ B.T * dt
    return Pim(
        dp=dp, dv=dv, dq=dq, dt=pim.dt + dt,
        cov=0.5 * (cov + cov.T),
        b_a_lin=pim.b_a_lin, b_g_lin=pim.b_g_lin,
        jac_bias=A @ pim.jac_bias + F[:9, 9:],
    )


def preintegrate(samples, t0, t1, noise: NoiseParams, b_a=None, b_g=None) -> Pim:
    """Build the increment over ``[t0, t1]`` from a sample stream.

    Samples straddling either boundary are split by linear interpolation.
    """
    pim = Pim.start(b_a, b_g)
    for s0, s1 in split_interval(samples, t0, t1):
        pim = pim_integrate(pim, s0, s1.t - s0.t, noise, s_next=s1)
    return pim


def split_interval(samples, t0, t1, eps=1e-9):
    """Consecutive sample pairs covering exactly ``[t0, t1]``."""
    pts = []
    for a, b in zip(samples[:-1], samples[1:]):
        if b.t <= t0 + eps or a.t >= t1 - eps:
            continue
        lo = a if a.t >= t0 - eps else interpolate_sample(a, b, t0)
        hi = b if b.t <= t1 + eps else interpolate_sample(a, b, t1)
        if not pts:
            pts.append(lo)
        pts.append(hi)
    return list(zip(pts[:-1], pts[1:]))


def pim_correct_bias(pim: Pim, d_ba, d_bg) -> Pim:
    """First-order update of the increments for a bias change."""
    d_ba = np.asarray(d_ba, dtype=float)
    d_bg = np.asarray(d_bg, dtype=float)
    if max(np.linalg.norm(d_ba), np.linalg.norm(d_bg)) > BIAS_CORRECTION_WARN:
        warnings.warn("bias correction outside the first-order regime; re-integrate",
                      RuntimeWarning, stacklevel=2)
    d_b = np.concatenate([d_ba, d_bg])
    J = pim.jac_bias
    return pim.copy(
        dp=pim.dp + J[0:3] @ d_b,
        dv=pim.dv + J[3:6] @ d_b,
        dq=quat_normalize(qmul(pim.dq, so3_exp(J[6:9, 3:6] @ d_bg))),
        b_a_lin=pim.b_a_lin + d_ba,
        b_g_lin=pim.b_g_lin + d_bg,
    )


def pim_predict(x_i: ImuState, pim: Pim, g):
    """Predict ``(p_j, v_j, q_j)`` by applying the increment to ``x_i``."""
    g = np.asarray(g, dtype=float)
    T = pim.dt
    R_i = quat_to_rotmat(x_i.q)
    p_j = x_i.p + x_i.v * T - 0.5 * g * T * T + R_i @ pim.dp
    v_j = x_i.v - g * T + R_i @ pim.dv
    q_j = quat_normalize(qmul(x_i.q, pim.dq))
    return p_j, v_j, q_j
