import numpy as np
import pytest

from lio_fusion.geometry import qmul, quat_conjugate, quat_from_euler, quat_normalize, quat_to_rotmat, so3_log
from lio_fusion.imu import (
    MAX_PROPAGATION_DT,
    ImuSample,
    ImuState,
    NoiseParams,
    PropagationGapError,
    _step_from_samples,
    align_gravity,
    discrete_noise,
    integrate_stream,
    interpolate_sample,
    propagate,
    propagate_covariance,
    propagate_state,
    step_jacobian,
)

NOISE = NoiseParams()
G = np.array([0.0, 0.0, 9.81])


def boxminus(a: ImuState, b: ImuState):
    """Error state taking ``b`` to ``a``."""
    return np.concatenate([a.p - b.p, a.v - b.v, so3_log(qmul(quat_conjugate(b.q), a.q)),
                           a.b_a - b.b_a, a.b_g - b.b_g])


def random_state(rng):
    return ImuState(0.0, p=rng.normal(size=3), v=rng.normal(size=3),
                    q=quat_normalize(rng.normal(size=4)),
                    b_a=0.1 * rng.normal(size=3), b_g=0.01 * rng.normal(size=3))


def test_level_imu_at_rest_stays_put():
    x = ImuState(0.0)
    s = ImuSample(0.0, G.copy(), np.zeros(3))
    for _ in range(100):
        x = propagate_state(x, s, 0.01, NOISE)
    np.testing.assert_allclose(x.p, 0.0, atol=1e-12)
    np.testing.assert_allclose(x.v, 0.0, atol=1e-12)
    assert x.t == pytest.approx(1.0)


def test_constant_acceleration_is_exact():
    x = ImuState(0.0, v=np.array([0.5, 0.0, 0.0]))
    s = ImuSample(0.0, G + [1.0, -2.0, 0.0], np.zeros(3))
    for _ in range(50):
        x = propagate_state(x, s, 0.02, NOISE)
    np.testing.assert_allclose(x.v, [1.5, -2.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(x.p, [0.5 + 0.5, -1.0, 0.0], atol=1e-12)


def test_constant_rate_rotation():
    w = np.array([0.1, -0.2, 0.3])
    x = ImuState(0.0)
    s = ImuSample(0.0, np.zeros(3), w)
    for _ in range(100):
        x = propagate_state(x, s, 0.01, NOISE)
    np.testing.assert_allclose(so3_log(x.q), w, atol=1e-12)


def test_biases_are_subtracted():
    x = ImuState(0.0, b_a=np.array([0.1, 0.0, 0.0]), b_g=np.array([0.0, 0.0, 0.05]))
    s = ImuSample(0.0, G + [0.1, 0.0, 0.0], np.array([0.0, 0.0, 0.05]))
    x = propagate_state(x, s, 0.05, NOISE)
    np.testing.assert_allclose(x.v, 0.0, atol=1e-15)
    np.testing.assert_allclose(x.q, [1, 0, 0, 0], atol=1e-15)


@pytest.mark.parametrize("dt", [0.0, -0.01, MAX_PROPAGATION_DT + 1e-6, np.nan])
def test_bad_interval_raises(dt):
    with pytest.raises(PropagationGapError):
        propagate_state(ImuState(0.0), ImuSample(0.0, G, np.zeros(3)), dt, NOISE)


def test_boxplus_roundtrip(rng):
    x = random_state(rng)
    d = 0.1 * rng.normal(size=15)
    np.testing.assert_allclose(boxminus(x.boxplus(d), x), d, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_step_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = random_state(rng)
    s0 = ImuSample(0.0, rng.normal(size=3) + G, rng.normal(size=3))
    s1 = ImuSample(0.01, rng.normal(size=3) + G, rng.normal(size=3))
    dt, h = 0.01, 1e-6
    y0 = propagate_state(x, s0, dt, NOISE, s_next=s1)
    J = np.empty((15, 15))
    for k in range(15):
        e = np.zeros(15)
        e[k] = h
        yp = propagate_state(x.boxplus(e), s0, dt, NOISE, s_next=s1)
        ym = propagate_state(x.boxplus(-e), s0, dt, NOISE, s_next=s1)
        J[:, k] = (boxminus(yp, y0) - boxminus(ym, y0)) / (2 * h)
    _, _, _, step = _step_from_samples(x, s0, dt, NOISE.g, s1)
    np.testing.assert_allclose(step_jacobian(step, dt), J, atol=1e-7)


def test_exact_noise_matches_first_order_for_short_steps():
    R = np.eye(3)
    q1 = discrete_noise(R, NOISE, 1e-3, acc=G, omega=np.array([0.1, 0.0, 0.2]))
    q2 = discrete_noise(R, NOISE, 1e-3, acc=G, omega=np.array([0.1, 0.0, 0.2]), exact=True)
    np.testing.assert_allclose(q2, q1, rtol=0, atol=1e-3 * np.abs(q1).max())
    assert np.all(np.linalg.eigvalsh(q2) > -1e-18)


def test_propagate_combines_state_and_covariance(rng):
    x = random_state(rng)
    x.P = np.eye(15) * 1e-4
    s = ImuSample(0.0, G + rng.normal(size=3), rng.normal(size=3))
    y = propagate(x, s, 0.005, NOISE)
    y_state = propagate_state(x, s, 0.005, NOISE)
    np.testing.assert_array_equal(y.p, y_state.p)
    np.testing.assert_array_equal(y.P, propagate_covariance(x, s, 0.005, NOISE))


def test_covariance_stays_symmetric_psd_over_long_runs():
    x = ImuState(0.0)
    rng = np.random.default_rng(2)
    samples = [ImuSample(0.0, G + 0.5 * rng.normal(size=3), 0.3 * rng.normal(size=3))
               for _ in range(64)]
    for k in range(20000):
        x = propagate(x, samples[k % 64], 0.005, NOISE)
        if k % 500 == 0:
            assert np.array_equal(x.P, x.P.T)
            assert np.linalg.eigvalsh(x.P).min() >= -1e-12 * np.abs(x.P).max()


def test_interpolate_sample_midpoint():
    s0 = ImuSample(0.0, np.zeros(3), np.ones(3))
    s1 = ImuSample(1.0, np.full(3, 2.0), np.zeros(3))
    s = interpolate_sample(s0, s1, 0.25)
    np.testing.assert_allclose(s.acc, 0.5)
    np.testing.assert_allclose(s.gyro, 0.75)


@pytest.mark.parametrize("roll,pitch", [(0.0, 0.0), (0.1, -0.05), (-0.3, 0.2)])
def test_align_gravity_recovers_tilt(roll, pitch):
    q = quat_from_euler(roll, pitch, 0.0)
    acc = quat_to_rotmat(q).T @ G
    samples = [ImuSample(0.01 * k, acc, np.zeros(3)) for k in range(100)]
    q_est = align_gravity(samples)
    np.testing.assert_allclose(q_est, q, atol=1e-12)


def test_align_gravity_rejects_empty():
    with pytest.raises(ValueError):
        align_gravity([])


def test_integrate_stream_returns_every_state():
    samples = [ImuSample(0.01 * k, G.copy(), np.zeros(3)) for k in range(11)]
    xs = integrate_stream(ImuState(0.0), samples, NOISE, with_covariance=True)
    assert len(xs) == 11
    assert xs[-1].t == pytest.approx(0.1)
    assert np.trace(xs[-1].P) > 0


def test_integrate_stream_rejects_gaps():
    samples = [ImuSample(0.0, G, np.zeros(3)), ImuSample(0.5, G, np.zeros(3))]
    with pytest.raises(PropagationGapError):
        integrate_stream(ImuState(0.0), samples, NOISE)
