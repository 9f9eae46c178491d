"""Deterministic ground-truth worlds, trajectories and sensor synthesis.

Worlds are short lists of analytic primitives intersected exactly by the
ray caster.  Trajectories are quintic splines through waypoints with zero
velocity and acceleration at both ends, so velocity, acceleration and body
angular rate are available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .geometry import PoseSE3, quat_from_euler, quat_to_rotmat
from .imu import ImuSample, NoiseParams
from .lidar import RingedScan
from .optimizer import Extrinsics

DEGRADATIONS = ("none", "vertical-clip", "half-block")
HORIZONTAL_NORMAL_Z = 0.9
_EPS = 1e-9


# ---------------------------------------------------------------------------
# primitives

@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple

    def intersect(self, o, d):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point, float) - o) @ n) / denom
        t = np.where((np.abs(denom) > _EPS) & (t > _EPS), t, np.inf)
        normals = np.where((denom < 0)[:, None], n, -n)
        return t, np.broadcast_to(normals, d.shape)

    def contains(self, p):
        return False


@dataclass(frozen=True)
class Box:
    """Axis-aligned box.  ``solid=False`` makes it a room seen from inside."""

    lo: tuple
    hi: tuple
    solid: bool = True

    def intersect(self, o, d):
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        t1 = np.where(np.abs(d) < _EPS, np.where((o >= lo) & (o <= hi), -np.inf, np.inf), t1)
        t2 = np.where(np.abs(d) < _EPS, np.where((o >= lo) & (o <= hi), np.inf, np.inf), t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        n = len(d)
        rows = np.arange(n)
        normals = np.zeros_like(d)
        if self.solid:
            axis = tmin.argmax(axis=1)
            ok = (t_near <= t_far) & (t_near > _EPS)
            t = np.where(ok, t_near, np.inf)
            normals[rows, axis] = -np.sign(d[rows, axis])
        else:
            axis = tmax.argmin(axis=1)
            ok = (t_near <= t_far) & (t_far > _EPS)
            t = np.where(ok, t_far, np.inf)
            normals[rows, axis] = -np.sign(d[rows, axis])
        return t, normals

    def contains(self, p):
        inside = np.all((np.asarray(p) > self.lo) & (np.asarray(p) < self.hi))
        return inside if self.solid else not inside


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder side wall between ``z_min`` and ``z_max``."""

    center: tuple
    radius: float
    z_min: float
    z_max: float
    solid: bool = True

    def intersect(self, o, d):
        c = np.asarray(self.center, float)
        ox = o[:, 0] - c[0] if o.ndim == 2 else np.full(len(d), o[0] - c[0])
        oy = o[:, 1] - c[1] if o.ndim == 2 else np.full(len(d), o[1] - c[1])
        oz = o[:, 2] if o.ndim == 2 else np.full(len(d), o[2])
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2.0 * (ox * d[:, 0] + oy * d[:, 1])
        cc = ox**2 + oy**2 - self.radius**2
        disc = b * b - 4 * a * cc
        good = (a > _EPS) & (disc >= 0)
        sq = np.sqrt(np.where(good, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = (-b - sq) / (2 * a)
            r2 = (-b + sq) / (2 * a)
        t = np.full(len(d), np.inf)
        for root in ((r1, r2) if self.solid else (r2,)):
            z = oz + root * d[:, 2]
            ok = good & (root > _EPS) & (z >= self.z_min) & (z <= self.z_max) & np.isinf(t)
            t = np.where(ok, root, t)
        hit_x = ox + np.where(np.isfinite(t), t, 0) * d[:, 0]
        hit_y = oy + np.where(np.isfinite(t), t, 0) * d[:, 1]
        radial = np.stack([hit_x, hit_y, np.zeros_like(hit_x)], axis=1) / self.radius
        facing = np.sign(np.einsum("ij,ij->i", radial, d))
        normals = -facing[:, None] * radial
        return t, normals

    def contains(self, p):
        p = np.asarray(p, float)
        r2 = (p[0] - self.center[0]) ** 2 + (p[1] - self.center[1]) ** 2
        inside = r2 < self.radius**2 and self.z_min < p[2] < self.z_max
        return inside if self.solid else not inside


@dataclass
class World:
    primitives: list = field(default_factory=list)
    name: str = "custom"

    def cast(self, origin, directions, max_range=np.inf):
        """First-hit range and surface normal per ray (``inf`` for no hit)."""
        o = np.asarray(origin, float)
        d = np.asarray(directions, float)
        best = np.full(len(d), np.inf)
        normals = np.zeros_like(d)
        for prim in self.primitives:
            t, n = prim.intersect(o, d)
            closer = t < best
            best = np.where(closer, t, best)
            normals[closer] = n[closer]
        best[best > max_range] = np.inf
        return best, normals

    def in_free_space(self, p) -> bool:
        return not any(prim.contains(p) for prim in self.primitives)


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class TrajectorySpec:
    """Waypoint trajectory, at rest during ``[t_begin, times[0]]`` and
    ``[times[-1], t_end]``."""

    times: np.ndarray
    positions: np.ndarray
    rpy: np.ndarray
    t_begin: float | None = None
    t_end: float | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.positions = np.asarray(self.positions, float)
        self.rpy = np.unwrap(np.asarray(self.rpy, float), axis=0)
        if self.t_begin is None:
            self.t_begin = float(self.times[0])
        if self.t_end is None:
            self.t_end = float(self.times[-1])
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("waypoint times must be strictly increasing (>= 2 waypoints)")
        bc = [(1, np.zeros(3)), (2, np.zeros(3))]
        k = min(5, len(self.times) - 1)
        if k == 5:
            self._pos = make_interp_spline(self.times, self.positions, k=5, bc_type=(bc, bc))
            self._ang = make_interp_spline(self.times, self.rpy, k=5, bc_type=(bc, bc))
        else:
            # too few waypoints for boundary conditions: smoothstep blend
            self._pos = _SmoothStep(self.times, self.positions)
            self._ang = _SmoothStep(self.times, self.rpy)

    @property
    def span(self):
        return self.t_begin, self.t_end

    @classmethod
    def stationary(cls, position, rpy=(0.0, 0.0, 0.0), duration=10.0):
        p = np.asarray(position, float)
        a = np.asarray(rpy, float)
        return cls([0.0, duration], [p, p], [a, a])


class _SmoothStep:
    """Piecewise quintic smoothstep between waypoints (zero vel/acc at knots)."""

    def __init__(self, times, values):
        self.times = times
        self.values = values

    def __call__(self, t, nu=0):
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        t0, t1 = self.times[k], self.times[k + 1]
        h = t1 - t0
        s = (t - t0) / h
        dv = self.values[k + 1] - self.values[k]
        if nu == 0:
            return self.values[k] + dv * (10 * s**3 - 15 * s**4 + 6 * s**5)
        if nu == 1:
            return dv * (30 * s**2 - 60 * s**3 + 30 * s**4) / h
        return dv * (60 * s - 180 * s**2 + 120 * s**3) / h**2


def _euler_rates_to_body(rpy, rpy_dot):
    roll, pitch, _ = rpy
    dr, dp, dy = rpy_dot
    sr, cr = np.sin(roll), np.cos(roll)
    sp, cp = np.sin(pitch), np.cos(pitch)
    return np.array([
        dr - dy * sp,
        dp * cr + dy * cp * sr,
        -dp * sr + dy * cp * cr,
    ])


def sample_ground_truth(traj: TrajectorySpec, t):
    """``(pose, v_world, a_world, ω_body)`` at time ``t``."""
    if t < traj.t_begin - 1e-12 or t > traj.t_end + 1e-12:
        raise ValueError(f"t={t} outside trajectory span [{traj.t_begin}, {traj.t_end}]")
    tc = min(max(t, traj.times[0]), traj.times[-1])
    moving = traj.times[0] < t < traj.times[-1]
    p = np.asarray(traj._pos(tc), float)
    rpy = np.asarray(traj._ang(tc), float)
    if moving:
        v = np.asarray(traj._pos(tc, 1), float)
        a = np.asarray(traj._pos(tc, 2), float)
        omega = _euler_rates_to_body(rpy, np.asarray(traj._ang(tc, 1), float))
    else:
        v = np.zeros(3)
        a = np.zeros(3)
        omega = np.zeros(3)
    pose = PoseSE3(quat_from_euler(*rpy), p)
    return pose, v, a, omega


# ---------------------------------------------------------------------------
# IMU synthesis

@dataclass(frozen=True)
class BiasSpec:
    acc0: tuple = (0.0, 0.0, 0.0)
    gyro0: tuple = (0.0, 0.0, 0.0)
    random_walk: bool = True


def synth_imu(traj: TrajectorySpec, rate, noise: NoiseParams, bias: BiasSpec | None = None,
              seed=0, add_noise=True):
    """Sample an IMU stream along ``traj``.

    Returns ``(samples, true_biases)`` where ``true_biases`` is an
    ``(n, 6)`` array of ``(b_a, b_g)`` per sample.
    """
    if rate < 50:
        raise ValueError(f"IMU rate must be >= 50 Hz, got {rate}")
    bias = bias or BiasSpec()
    rng = np.random.default_rng(seed)
    dt = 1.0 / rate
    n = int(np.floor((traj.t_end - traj.t_begin) * rate + 1e-9)) + 1
    times = traj.t_begin + dt * np.arange(n)
    b_a = np.array(bias.acc0, float)
    b_g = np.array(bias.gyro0, float)
    g = noise.g
    samples, biases = [], []
    sd_a = noise.sigma_acc / np.sqrt(dt)
    sd_g = noise.sigma_gyro / np.sqrt(dt)
    for t in times:
        pose, _, a_w, omega = sample_ground_truth(traj, t)
        acc = pose.R.T @ (a_w + g) + b_a
        gyro = omega + b_g
        if add_noise:
            acc = acc + sd_a * rng.standard_normal(3)
            gyro = gyro + sd_g * rng.standard_normal(3)
        samples.append(ImuSample(float(t), acc, gyro))
        biases.append(np.concatenate([b_a, b_g]))
        if bias.random_walk:
            b_a = b_a + noise.sigma_acc_bias * np.sqrt(dt) * rng.standard_normal(3)
            b_g = b_g + noise.sigma_gyro_bias * np.sqrt(dt) * rng.standard_normal(3)
    return samples, np.array(biases)


# ---------------------------------------------------------------------------
# LiDAR synthesis

@dataclass(frozen=True)
class LidarModel:
    n_rings: int = 16
    fov_low_deg: float = -15.0
    fov_high_deg: float = 15.0
    azimuth_step_deg: float = 1.0
    max_range: float = 100.0
    min_range: float = 0.3
    range_noise: float = 0.005
    rate: float = 10.0

    def __post_init__(self):
        if self.n_rings < 2:
            raise ValueError("LiDAR needs at least two rings")
        if self.max_range <= 0:
            raise ValueError("max range must be positive")

    @property
    def elevations(self):
        """Ring elevation angles (rad), ring 0 lowest."""
        return np.deg2rad(np.linspace(self.fov_low_deg, self.fov_high_deg, self.n_rings))

    @property
    def azimuths(self):
        n = int(round(360.0 / self.azimuth_step_deg))
        return np.deg2rad(np.arange(n) * self.azimuth_step_deg)

    def ray_directions(self):
        """Unit ray directions in the sensor frame with their ring index."""
        el, az = np.meshgrid(self.elevations, self.azimuths, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        rings = np.repeat(np.arange(self.n_rings), len(self.azimuths))
        return d.reshape(-1, 3), rings


def synth_scan(world: World, pose: PoseSE3, model: LidarModel, degradation="none",
               seed=0, t=0.0) -> RingedScan:
    """One instantaneous sweep from the LiDAR at world pose ``pose``.

    Points are returned in the sensor frame.
    """
    if degradation not in DEGRADATIONS:
        raise ValueError(f"unknown degradation {degradation!r}; expected one of {DEGRADATIONS}")
    if not world.in_free_space(pose.translation):
        raise ValueError(f"sensor position {pose.translation} is inside solid geometry")
    rng = np.random.default_rng(seed)
    d_local, rings = model.ray_directions()
    d_world = d_local @ pose.R.T
    ranges, normals = world.cast(pose.translation, d_world, model.max_range)
    keep = np.isfinite(ranges) & (ranges >= model.min_range)
    if degradation == "vertical-clip":
        keep &= np.abs(normals[:, 2]) < HORIZONTAL_NORMAL_Z
    elif degradation == "half-block":
        keep &= d_local[:, 0] >= 0.0
    if model.range_noise > 0:
        ranges = ranges + model.range_noise * rng.standard_normal(len(ranges))
    pts = d_local[keep] * ranges[keep, None]
    return RingedScan(t=float(t), points=pts, rings=rings[keep].astype(int))


def corrupt_scan(scan: RingedScan, seed=0, extent=10.0) -> RingedScan:
    """Replace points by uniform clutter, keeping count and ring channel."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-extent, extent, size=scan.points.shape)
    return RingedScan(t=scan.t, points=pts, rings=scan.rings.copy())


# ---------------------------------------------------------------------------
# presets

def eased_time(t, t0, t1, ramp):
    """Elapsed time under a speed profile that ramps smoothly from and to rest.

    The speed factor follows a quintic smoothstep over ``ramp`` seconds at
    both ends of ``[t0, t1]`` and is 1 in between, so the warped clock runs
    from 0 to ``t1 - t0 - ramp``.
    """
    t = float(np.clip(t, t0, t1))
    ramp = min(ramp, 0.5 * (t1 - t0))
    if ramp <= 0.0:
        return t - t0

    def ramp_integral(x):
        return ramp * (x**6 - 3 * x**5 + 2.5 * x**4)

    total = (t1 - t0) - ramp
    if t <= t0 + ramp:
        return ramp_integral((t - t0) / ramp)
    if t <= t1 - ramp:
        return 0.5 * ramp + (t - t0 - ramp)
    return total - ramp_integral((t1 - t) / ramp)


def _waypoints(fn, t0, t1, step):
    ts = np.arange(t0, t1 + 1e-9, step)
    pos, rpy = zip(*(fn(t) for t in ts))
    return ts, np.array(pos), np.array(rpy)


def room_preset(duration=12.0):
    world = World([
        Box((-5.0, -4.0, 0.0), (5.0, 4.0, 3.0), solid=False),
        Box((2.5, 2.0, 0.0), (3.5, 3.0, 1.2)),
        Box((-4.0, -3.5, 0.0), (-3.0, -2.0, 2.0)),
        Cylinder((-2.5, 2.5), 0.3, 0.0, 3.0),
        Cylinder((3.0, -2.5), 0.4, 0.0, 3.0),
    ], name="room")

    t0, t1, ramp = 1.0, duration - 1.0, 1.5

    def fn(t):
        s = 2 * np.pi * eased_time(t, t0, t1, ramp) / (t1 - t0 - ramp)
        return ((1.8 * np.sin(s), 1.2 * (1 - np.cos(s)) - 1.0, 1.0 + 0.1 * np.sin(2 * s)),
                (0.03 * np.sin(s), 0.02 * np.sin(2 * s), 0.6 * np.sin(s)))

    ts, pos, rpy = _waypoints(fn, t0, t1, 0.5)
    return world, TrajectorySpec(ts, pos, rpy, t_begin=0.0, t_end=duration)


def corridor_preset(duration=23.0, length=50.0, width=2.4, height=3.0,
                    pilaster_spacing=3.0, pilaster_depth=0.25):
    """Long narrow corridor with floor-to-ceiling pilasters on both walls."""
    half = width / 2
    d = pilaster_depth
    prims = [Box((-5.0, -half, 0.0), (length, half, height), solid=False)]
    for k, x in enumerate(np.arange(2.0, length - 2.0, pilaster_spacing)):
        side = 1 if k % 2 == 0 else -1
        y_lo, y_hi = (half - d, half + 0.1) if side > 0 else (-half - 0.1, -half + d)
        prims.append(Box((x, y_lo, -0.1), (x + 0.4, y_hi, height + 0.1)))
    world = World(prims, name="corridor")
    t0, t1, ramp = 1.0, duration - 0.5, 2.0

    def fn(t):
        s = eased_time(t, t0, t1, ramp)
        x = 1.0 * s
        y = 0.25 * np.sin(2 * np.pi * s / 9.0)
        z = 1.5 + 0.3 * np.sin(2 * np.pi * s / 7.0)
        yaw = 0.08 * np.sin(2 * np.pi * s / 9.0)
        roll = 0.02 * np.sin(2 * np.pi * s / 5.0)
        return (x, y, z), (roll, 0.0, yaw)

    ts, pos, rpy = _waypoints(fn, t0, t1, 0.5)
    return world, TrajectorySpec(ts, pos, rpy, t_begin=0.0, t_end=duration)


def staircase_preset(duration=14.0):
    prims = [Box((-2.0, -1.5, 0.0), (12.0, 1.5, 8.0), solid=False)]
    for k in range(16):
        x0 = 1.0 + 0.6 * k
        prims.append(Box((x0, -1.5, -0.1), (x0 + 0.6, 1.5, 0.2 * (k + 1))))
    world = World(prims, name="staircase")

    t0, t1, ramp = 1.0, duration - 1.0, 1.5

    def fn(t):
        s = eased_time(t, t0, t1, ramp) / (t1 - t0 - ramp)
        x = 0.0 + 9.0 * s
        z_floor = np.clip((x - 1.0) / 0.6 * 0.2 + 0.2, 0.0, 3.2)
        return (x, 0.2 * np.sin(2 * np.pi * s), 1.4 + z_floor), (0.0, -0.05 * np.sin(np.pi * s), 0.1 * np.sin(2 * np.pi * s))

    ts, pos, rpy = _waypoints(fn, t0, t1, 0.5)
    return world, TrajectorySpec(ts, pos, rpy, t_begin=0.0, t_end=duration)


def outdoor_turn_preset(duration=22.0):
    prims = [Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))]
    for x in np.arange(-10.0, 20.0, 8.0):
        prims.append(Box((x, 6.0, 0.0), (x + 6.0, 12.0, 8.0)))
        if x < 14.0:
            prims.append(Box((x, -12.0, 0.0), (x + 6.0, -6.0, 6.0)))
    for y in np.arange(-4.0, 40.0, 8.0):
        prims.append(Box((26.0, y + 8.0, 0.0), (32.0, y + 14.0, 10.0)))
    prims.append(Box((14.0, 10.0 + 8.0, 0.0), (20.0, 40.0, 7.0)))
    world = World(prims, name="outdoor-turn")

    t0, t1, ramp = 1.0, duration - 1.0, 1.5

    def fn(t):
        s = eased_time(t, t0, t1, ramp) / (t1 - t0 - ramp)
        ang = np.clip((s - 0.4) / 0.3, 0.0, 1.0) * np.pi / 2
        if s < 0.4:
            pos = (-5.0 + 50.0 * s, 0.0, 1.8)
        elif s < 0.7:
            r = 8.0
            a = ang
            pos = (15.0 + r * np.sin(a), r * (1 - np.cos(a)), 1.8)
        else:
            pos = (23.0, 8.0 + 50.0 * (s - 0.7), 1.8)
        return pos, (0.0, 0.0, ang)

    ts, pos, rpy = _waypoints(fn, t0, t1, 0.5)
    return world, TrajectorySpec(ts, pos, rpy, t_begin=0.0, t_end=duration)


PRESETS = {
    "room": room_preset,
    "corridor": corridor_preset,
    "staircase": staircase_preset,
    "outdoor-turn": outdoor_turn_preset,
}


def make_preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    imu: list
    scans: list
    ground_truth: list  # (t, PoseSE3) of the IMU body
    meta: dict = field(default_factory=dict)


DEFAULT_EXTRINSICS = Extrinsics(np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.05, 0.0, 0.1]))


def simulate_dataset(preset="corridor", seed=0, degradation="none", *,
                     world=None, traj=None, imu_rate=200.0, model: LidarModel | None = None,
                     noise: NoiseParams | None = None, bias: BiasSpec | None = None,
                     extrinsics: Extrinsics = DEFAULT_EXTRINSICS, imu_noise=True,
                     corrupt=()):
    """Generate IMU stream, scans and ground truth for a preset world.

    ``corrupt`` lists scan indices replaced by clutter (fault injection).
    """
    if world is None or traj is None:
        world, traj = make_preset(preset)
    model = model or LidarModel()
    noise = noise or NoiseParams()
    imu, _ = synth_imu(traj, imu_rate, noise, bias, seed=seed, add_noise=imu_noise)
    gt = [(s.t, sample_ground_truth(traj, s.t)[0]) for s in imu]
    scans = []
    ext_pose = extrinsics.pose
    n_scans = int(np.floor((traj.t_end - traj.t_begin) * model.rate + 1e-9)) + 1
    for k in range(n_scans):
        t = traj.t_begin + k / model.rate
        body = sample_ground_truth(traj, t)[0]
        scan = synth_scan(world, body.compose(ext_pose), model, degradation,
                          seed=seed * 100003 + k + 1, t=t)
        if k in set(corrupt):
            scan = corrupt_scan(scan, seed=seed + k)
        scans.append(scan)
    meta = {
        "preset": world.name,
        "seed": seed,
        "degradation": degradation,
        "imu.rate": imu_rate,
        "imu.sigma_acc": noise.sigma_acc,
        "imu.sigma_acc_bias": noise.sigma_acc_bias,
        "imu.sigma_gyro": noise.sigma_gyro,
        "imu.sigma_gyro_bias": noise.sigma_gyro_bias,
        "imu.gravity": tuple(float(v) for v in noise.gravity),
        "lidar.rings": model.n_rings,
        "lidar.fov_low_deg": model.fov_low_deg,
        "lidar.fov_high_deg": model.fov_high_deg,
        "lidar.azimuth_step_deg": model.azimuth_step_deg,
        "lidar.max_range": model.max_range,
        "lidar.range_noise": model.range_noise,
        "lidar.rate": model.rate,
        "extrinsics.q_IL": tuple(float(v) for v in extrinsics.q_IL),
        "extrinsics.p_IL": tuple(float(v) for v in extrinsics.p_IL),
        "corrupt": " ".join(str(k) for k in corrupt),
    }
    return Dataset(imu, scans, gt, meta)
