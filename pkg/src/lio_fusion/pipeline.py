"""Offline replay of IMU and LiDAR streams through the odometry engine.

Per scan: the IMU state is propagated to the scan time and provides the
matching initial guess; the frontend aligns the scan; on success the
sliding window gains a state with one pre-integration and one relative-pose
constraint and is re-optimized.  Mismatched scans leave the window and the
frontend untouched while IMU propagation continues across them.

Without fusion the frontend runs on a constant-velocity initial guess and
its map poses are the output.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PoseSE3, quat_normalize
from .imu import (
    MAX_PROPAGATION_DT,
    ImuState,
    NoiseParams,
    align_gravity,
    interpolate_sample,
    propagate,
)
from .io import read_dataset, read_kv, write_kv, write_trajectory
from .lidar import IcpOptions, LidarFrontend, MatchOptions
from .optimizer import (
    Extrinsics,
    LidarConstraint,
    NumericalFailureError,
    OptimizerOptions,
    PimConstraint,
    WindowProblem,
    lidar_pose_of,
    optimize_window,
    registration_sqrt_information,
)
from .preintegration import Pim, pim_integrate

logger = logging.getLogger(__name__)

_TIME_EPS = 1e-9


class ConfigError(ValueError):
    """Unknown key, bad value or missing path in a pipeline configuration."""


class StreamGapError(RuntimeError):
    """Sensor streams have a hole longer than the allowed gap."""


# ---------------------------------------------------------------------------
# configuration

@dataclass
class PipelineConfig:
    """Flat pipeline settings; the file key of ``imu_sigma_acc`` is ``imu.sigma_acc``."""

    data_dir: str = ""
    output_dir: str = "out"
    fusion_enabled: bool = True
    window_size: int = 5
    imu_sigma_acc: float = 6e-4
    imu_sigma_acc_bias: float = 3e-5
    imu_sigma_gyro: float = 1.7e-4
    imu_sigma_gyro_bias: float = 2e-6
    imu_gravity: tuple = (0.0, 0.0, 9.81)
    imu_align_duration: float = 1.0
    imu_max_gap: float = 0.5
    extrinsics_q_IL: tuple = (1.0, 0.0, 0.0, 0.0)
    extrinsics_p_IL: tuple = (0.0, 0.0, 0.0)
    match_mismatch_translation: float = 0.5
    match_mismatch_rotation_deg: float = 5.0
    match_min_inlier_ratio: float = 0.5
    match_max_rms: float = 0.1
    icp_max_iterations: int = 50
    icp_tolerance: float = 1e-6
    icp_max_correspondence_distance: float = 1.0
    icp_trim_fraction: float = 0.9
    icp_normal_compat_deg: float = 60.0
    icp_min_correspondences: int = 20
    icp_degenerate_eps: float = 1e-4
    normals_k: int = 5
    normals_line_ratio: float = 0.01
    map_voxel_size: float = 0.2
    map_crop_radius: float = 60.0
    optimizer_pose_sigma: tuple = (0.02, 0.02, 0.02, 0.01, 0.01, 0.01)
    optimizer_max_iterations: int = 100
    optimizer_pose_weighting: str = "hessian"
    optimizer_hessian_scale: float = 1.0
    seed: int = 0

    # -- key mapping -------------------------------------------------------
    @staticmethod
    def key_of(name: str) -> str:
        return name.replace("_", ".", 1) if "_" in name and name != "seed" else name

    @classmethod
    def keys(cls):
        return {cls.key_of(f.name): f for f in dataclasses.fields(cls)}

    @classmethod
    def from_mapping(cls, values: dict, strict=True) -> "PipelineConfig":
        known = cls.keys()
        kwargs = {}
        for key, value in values.items():
            f = known.get(key)
            if f is None:
                if strict:
                    raise ConfigError(f"unknown config key {key!r}")
                continue
            kwargs[f.name] = _coerce(key, value, f.default)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_mapping(self) -> dict:
        return {self.key_of(f.name): getattr(self, f.name) for f in dataclasses.fields(self)}

    def replace(self, **changes) -> "PipelineConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self, check_paths=False):
        positive = [
            "window_size", "imu_align_duration", "imu_max_gap",
            "match_mismatch_translation", "match_mismatch_rotation_deg", "match_max_rms",
            "icp_max_iterations", "icp_tolerance", "icp_max_correspondence_distance",
            "icp_trim_fraction", "icp_normal_compat_deg", "icp_min_correspondences",
            "icp_degenerate_eps", "normals_k", "normals_line_ratio", "map_voxel_size",
            "map_crop_radius", "optimizer_max_iterations", "optimizer_hessian_scale",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{self.key_of(name)} must be positive, got {getattr(self, name)!r}")
        for name in ("imu_sigma_acc", "imu_sigma_acc_bias", "imu_sigma_gyro", "imu_sigma_gyro_bias"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{self.key_of(name)} must be non-negative")
        if self.optimizer_pose_weighting not in ("fixed", "hessian"):
            raise ConfigError("optimizer.pose_weighting must be 'fixed' or 'hessian'")
        if self.window_size < 2:
            raise ConfigError("window.size must be at least 2")
        if self.icp_trim_fraction > 1:
            raise ConfigError("icp.trim_fraction must be in (0, 1]")
        if not 0 <= self.match_min_inlier_ratio <= 1:
            raise ConfigError("match.min_inlier_ratio must be in [0, 1]")
        if len(self.optimizer_pose_sigma) != 6 or min(self.optimizer_pose_sigma) <= 0:
            raise ConfigError("optimizer.pose_sigma needs six positive values")
        if len(self.extrinsics_q_IL) != 4 or len(self.extrinsics_p_IL) != 3 or len(self.imu_gravity) != 3:
            raise ConfigError("extrinsics.q_IL needs 4 values, extrinsics.p_IL and imu.gravity 3")
        if check_paths and not Path(self.data_dir).is_dir():
            raise ConfigError(f"data.dir {self.data_dir!r} does not exist")

    # -- derived objects ---------------------------------------------------
    @property
    def noise(self) -> NoiseParams:
        return NoiseParams(self.imu_sigma_acc, self.imu_sigma_acc_bias, self.imu_sigma_gyro,
                           self.imu_sigma_gyro_bias, tuple(self.imu_gravity))

    @property
    def extrinsics(self) -> Extrinsics:
        return Extrinsics(quat_normalize(np.array(self.extrinsics_q_IL, float)),
                          np.array(self.extrinsics_p_IL, float))

    @property
    def match_options(self) -> MatchOptions:
        icp = IcpOptions(
            max_iterations=self.icp_max_iterations, tolerance=self.icp_tolerance,
            max_correspondence_distance=self.icp_max_correspondence_distance,
            trim_fraction=self.icp_trim_fraction, normal_compat_deg=self.icp_normal_compat_deg,
            min_correspondences=self.icp_min_correspondences,
            degenerate_eps=self.icp_degenerate_eps,
        )
        return MatchOptions(self.match_mismatch_translation, self.match_mismatch_rotation_deg,
                            self.match_min_inlier_ratio, self.match_max_rms, icp)

    def frontend(self) -> LidarFrontend:
        return LidarFrontend(self.match_options, normal_k=self.normals_k,
                             line_ratio=self.normals_line_ratio,
                             voxel_size=self.map_voxel_size, crop_radius=self.map_crop_radius)


def _coerce(key, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = value.split()
            vals = value if isinstance(value, (tuple, list)) else (value,)
            return tuple(float(v) for v in vals)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for config key {key!r}") from None


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the dataset's ``meta.txt``, then the file, then ``overrides``.

    Relative ``data.dir``/``output.dir`` in the file resolve against its folder.
    """
    values = {}
    if path is not None:
        path = Path(path)
        values = read_kv(path)
        for key in ("data.dir", "output.dir"):
            if key in values and not Path(str(values[key])).is_absolute():
                values[key] = str(path.parent / str(values[key]))
    values.update(overrides or {})
    merged = {}
    data_dir = values.get("data.dir")
    if data_dir and (Path(str(data_dir)) / "meta.txt").is_file():
        meta = read_kv(Path(str(data_dir)) / "meta.txt")
        merged.update({k: v for k, v in meta.items() if k in PipelineConfig.keys() and k != "seed"})
    merged.update(values)
    cfg = PipelineConfig.from_mapping(merged)
    cfg.validate(check_paths=True)
    return cfg


# ---------------------------------------------------------------------------
# report

@dataclass
class ScanRecord:
    t: float
    status: str  # init | matched | skipped
    rms: float = float("nan")
    iterations: int = 0
    degenerate_dims: int = 0
    cause: str = ""
    opt_iterations: int = 0
    opt_initial_cost: float = float("nan")
    opt_final_cost: float = float("nan")


@dataclass
class RunReport:
    mode: str
    scans: list = field(default_factory=list)
    optimizations: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=lambda: {"imu": 0.0, "lidar": 0.0, "optimization": 0.0})

    @property
    def n_scans(self):
        return len(self.scans)

    @property
    def n_matched(self):
        return sum(r.status == "matched" for r in self.scans)

    @property
    def n_skipped(self):
        return sum(r.status == "skipped" for r in self.scans)

    @property
    def skipped_times(self):
        return [r.t for r in self.scans if r.status == "skipped"]

    def check(self):
        if self.scans and self.n_scans != self.n_matched + self.n_skipped + 1:
            raise AssertionError("scan count != matches + skips + 1")

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "scans": self.n_scans,
            "matched": self.n_matched,
            "skipped": self.n_skipped,
            "optimizations": len(self.optimizations),
            "optimizer_iterations": sum(r.iterations for r in self.optimizations),
            **{f"output.{k}": v for k, v in self.outputs.items()},
        }

    def write(self, out_dir):
        out = Path(out_dir)
        write_kv(out / "report.txt", self.summary())
        lines = ["t,status,rms,icp_iterations,degenerate_dims,opt_iterations,"
                 "opt_initial_cost,opt_final_cost,cause"]
        for r in self.scans:
            lines.append(f"{r.t:.9f},{r.status},{r.rms:.9g},{r.iterations},{r.degenerate_dims},"
                         f"{r.opt_iterations},{r.opt_initial_cost:.9g},{r.opt_final_cost:.9g},"
                         f"\"{r.cause}\"")
        (out / "scans.csv").write_text("\n".join(lines) + "\n")


@dataclass
class RunResult:
    trajectory: list          # (t, body PoseSE3) per scan
    lidar_trajectory: list    # frontend map poses, body frame
    imu_trajectory: list      # (t, body PoseSE3) per IMU sample
    report: RunReport


# ---------------------------------------------------------------------------
# IMU stream cursor

class _ImuCursor:
    """High-rate state advanced through the sample stream.

    Every step also feeds the running pre-integrated increment.
    """

    def __init__(self, samples, state: ImuState, noise: NoiseParams):
        self.samples = samples
        self.x = state
        self.noise = noise
        self.k = 0
        self.pim = Pim.start(state.b_a, state.b_g)
        self.history = [(state.t, _pose(state))]

    def reset_anchor(self, state: ImuState):
        """Replace the current state (same time) and restart pre-integration."""
        self.x = state
        self.pim = Pim.start(state.b_a, state.b_g)

    def _sample_at(self, t):
        s = self.samples
        if self.k + 1 >= len(s):
            last = s[-1]
            return type(last)(t, last.acc, last.gyro)
        if abs(t - s[self.k].t) <= _TIME_EPS:
            return s[self.k]
        if abs(t - s[self.k + 1].t) <= _TIME_EPS:
            return s[self.k + 1]
        return interpolate_sample(s[self.k], s[self.k + 1], t)

    def _step(self, s0, s1, dt):
        n = max(1, math.ceil(dt / MAX_PROPAGATION_DT - 1e-12))
        for m in range(n):
            a = s0 if n == 1 else interpolate_sample(s0, s1, s0.t + dt * m / n)
            b = s1 if n == 1 else interpolate_sample(s0, s1, s0.t + dt * (m + 1) / n)
            h = b.t - a.t
            t_end = b.t
            self.x = propagate(self.x, a, h, self.noise, s_next=b)
            self.x.t = t_end
            self.pim = pim_integrate(self.pim, a, h, self.noise, s_next=b)

    def advance(self, t_target):
        s = self.samples
        while self.x.t < t_target - _TIME_EPS:
            while self.k + 1 < len(s) and s[self.k + 1].t <= self.x.t + _TIME_EPS:
                self.k += 1
            if self.k + 1 < len(s):
                t_next = min(s[self.k + 1].t, t_target)
            else:
                t_next = t_target
            s0 = self._sample_at(self.x.t)
            s1 = self._sample_at(t_next)
            s0 = type(s0)(self.x.t, s0.acc, s0.gyro)
            s1 = type(s1)(t_next, s1.acc, s1.gyro)
            self._step(s0, s1, t_next - self.x.t)
            self.x.t = t_next
            if self.k + 1 < len(s) and abs(t_next - s[self.k + 1].t) <= _TIME_EPS:
                self.k += 1
                self.history.append((s[self.k].t, _pose(self.x)))
        return self.x


def _pose(x: ImuState) -> PoseSE3:
    return PoseSE3(x.q.copy(), x.p.copy())


def check_stream_gaps(imu, scans, max_gap):
    times = np.array([s.t for s in imu])
    if len(times) < 2:
        raise StreamGapError("IMU stream needs at least two samples")
    gaps = np.diff(times)
    if np.any(gaps <= 0):
        k = int(np.argmax(gaps <= 0))
        raise StreamGapError(f"IMU timestamps not increasing at t={times[k]!r} -> t={times[k + 1]!r}")
    if np.any(gaps > max_gap):
        k = int(np.argmax(gaps > max_gap))
        raise StreamGapError(f"IMU gap of {gaps[k]:.3f} s between t={times[k]!r} and t={times[k + 1]!r}")
    if scans:
        st = np.array([s.t for s in scans])
        if st[0] > times[-1] or st[-1] < times[0]:
            raise StreamGapError(f"scan times [{st[0]!r}, {st[-1]!r}] do not overlap IMU "
                                 f"times [{times[0]!r}, {times[-1]!r}]")
        d = np.diff(st)
        if np.any(d > max_gap):
            k = int(np.argmax(d > max_gap))
            raise StreamGapError(f"scan gap of {d[k]:.3f} s between t={st[k]!r} and t={st[k + 1]!r}")
        if st[-1] - times[-1] > max_gap:
            raise StreamGapError(f"scan at t={st[-1]!r} is {st[-1] - times[-1]:.3f} s after the "
                                 f"last IMU sample t={times[-1]!r}")


# ---------------------------------------------------------------------------
# sliding window

class _Window:
    def __init__(self, size, extrinsics, noise, pose_sigma, opt_options):
        self.size = size
        self.extrinsics = extrinsics
        self.noise = noise
        self.pose_sigma = tuple(pose_sigma)
        self.opt_options = opt_options
        self.states: list = []
        self.pims: list = []
        self.poses: list = []
        self.finalized: list = []

    def start(self, state):
        self.states = [state]

    def add(self, state, pim, rel_pose, sqrt_info=None):
        self.states.append(state)
        self.pims.append(pim)
        self.poses.append((rel_pose, sqrt_info))
        while len(self.states) > self.size:
            self.finalized.append(self.states.pop(0))
            self.pims.pop(0)
            self.poses.pop(0)

    def problem(self) -> WindowProblem:
        n = len(self.states)
        pims = [PimConstraint(k, k + 1, self.pims[k]) for k in range(n - 1)]
        lids = [LidarConstraint(k, k + 1, pose, self.pose_sigma, U)
                for k, (pose, U) in enumerate(self.poses)]
        return WindowProblem(list(self.states), pims, lids, self.extrinsics, self.noise, fixed=(0,))

    def optimize(self):
        states, rep = optimize_window(self.problem(), self.opt_options)
        self.states = states
        return rep

    @property
    def last(self) -> ImuState:
        return self.states[-1]


# ---------------------------------------------------------------------------
# runs

def _initial_state(imu, cfg: PipelineConfig) -> ImuState:
    q0 = align_gravity(imu, cfg.imu_align_duration)
    P0 = np.diag(np.concatenate([np.zeros(3), np.full(3, 1e-4), np.full(3, 1e-4),
                                 np.full(3, 1e-4), np.full(3, 1e-6)]))
    return ImuState(t=imu[0].t, q=q0, P=P0)


def run_fused(dataset, cfg: PipelineConfig) -> RunResult:
    noise, ext = cfg.noise, cfg.extrinsics
    T_IL, T_LI = ext.pose, ext.pose.inverse()
    check_stream_gaps(dataset.imu, dataset.scans, cfg.imu_max_gap)
    report = RunReport(mode="fused")
    cursor = _ImuCursor(dataset.imu, _initial_state(dataset.imu, cfg), noise)
    frontend = cfg.frontend()
    window = _Window(cfg.window_size, ext, noise, cfg.optimizer_pose_sigma,
                     OptimizerOptions(max_iterations=cfg.optimizer_max_iterations))
    out_pose: dict = {}     # scan index -> final body pose
    lidar_traj = []
    win_index: list = []    # scan index of each window state
    t_imu0 = dataset.imu[0].t

    for idx, scan in enumerate(dataset.scans):
        if scan.t < t_imu0 - _TIME_EPS:
            if frontend.initialized:
                raise StreamGapError(f"scan at t={scan.t!r} precedes the IMU stream")
            report.scans.append(ScanRecord(scan.t, "skipped", cause="before IMU stream"))
            continue
        tic = time.perf_counter()
        x_pred = cursor.advance(scan.t).copy()
        report.timings["imu"] += time.perf_counter() - tic

        tic = time.perf_counter()
        L_pred = lidar_pose_of(x_pred, ext)
        if not frontend.initialized:
            res = frontend.initialize(scan, L_pred)
            report.timings["lidar"] += time.perf_counter() - tic
            window.start(x_pred)
            win_index.append(idx)
            cursor.reset_anchor(x_pred)
            report.scans.append(ScanRecord(scan.t, "init", rms=0.0, cause="initialization"))
            lidar_traj.append((scan.t, res.T_local_curr.compose(T_LI)))
            continue
        L_last = lidar_pose_of(window.last, ext)
        T_map_last = frontend.T_local_last
        res = frontend.process(scan, L_last.between(L_pred))
        report.timings["lidar"] += time.perf_counter() - tic
        rec = ScanRecord(scan.t, "skipped" if res.mismatch else "matched", rms=res.rms,
                         iterations=res.iterations, degenerate_dims=res.degenerate_dims,
                         cause=res.cause or "")
        report.scans.append(rec)
        if res.mismatch:
            logger.info("scan t=%.3f skipped: %s", scan.t, res.cause)
            out_pose[idx] = _pose(x_pred)
            continue
        lidar_traj.append((scan.t, res.T_local_curr.compose(T_LI)))

        tic = time.perf_counter()
        # relative motion between map-refined poses: consecutive constraints
        # telescope to the map pose instead of accumulating odometry error
        T_rel = T_map_last.between(res.T_local_curr)
        U = None
        if cfg.optimizer_pose_weighting == "hessian":
            mp = res.mapping
            G = np.kron(np.eye(2), T_map_last.R.T)
            U = registration_sqrt_information(
                G @ mp.hessian @ G.T, T_rel,
                cfg.optimizer_hessian_scale * max(mp.rms, 1e-3) ** 2,
                min_eigenvalue=cfg.icp_degenerate_eps * mp.n_correspondences)
        window.add(x_pred, cursor.pim, T_rel, U)
        win_index.append(idx)
        if len(win_index) > len(window.states):
            out_pose[win_index.pop(0)] = _pose(window.finalized[-1])
        try:
            rep = window.optimize()
            report.optimizations.append(rep)
            rec.opt_iterations = rep.iterations
            rec.opt_initial_cost, rec.opt_final_cost = rep.initial_cost, rep.final_cost
        except NumericalFailureError as exc:
            rec.cause = f"optimization failed: {exc}"
            logger.warning("scan t=%.3f: %s", scan.t, rec.cause)
        x_new = window.last.copy(P=x_pred.P)
        window.states[-1] = x_new
        cursor.reset_anchor(x_new.copy())
        report.timings["optimization"] += time.perf_counter() - tic

    for idx, x in zip(win_index, window.states):
        out_pose[idx] = _pose(x)
    tic = time.perf_counter()
    if dataset.imu and cursor.x.t < dataset.imu[-1].t:
        cursor.advance(dataset.imu[-1].t)
    report.timings["imu"] += time.perf_counter() - tic
    traj = [(dataset.scans[i].t, out_pose[i]) for i in sorted(out_pose)]
    report.check()
    return RunResult(traj, lidar_traj, cursor.history, report)


def _scale_motion(T: PoseSE3, factor) -> PoseSE3:
    """Constant-twist extrapolation of ``T`` by ``factor``."""
    if abs(factor - 1.0) < 1e-12:
        return T
    return PoseSE3.from_rotvec(T.log()[3:] * factor, T.translation * factor)


def run_laser_only(dataset, cfg: PipelineConfig) -> RunResult:
    T_LI = cfg.extrinsics.pose.inverse()
    report = RunReport(mode="laser-only")
    frontend = cfg.frontend()
    traj, velocity, t_last = [], PoseSE3.identity(), None
    dt_vel = None
    for scan in dataset.scans:
        tic = time.perf_counter()
        if not frontend.initialized:
            res = frontend.initialize(scan, PoseSE3.identity())
            report.scans.append(ScanRecord(scan.t, "init", rms=0.0, cause="initialization"))
            traj.append((scan.t, res.T_local_curr.compose(T_LI)))
            t_last = scan.t
            report.timings["lidar"] += time.perf_counter() - tic
            continue
        T_init = velocity if dt_vel is None else _scale_motion(velocity, (scan.t - t_last) / dt_vel)
        res = frontend.process(scan, T_init)
        report.timings["lidar"] += time.perf_counter() - tic
        report.scans.append(ScanRecord(scan.t, "skipped" if res.mismatch else "matched",
                                       rms=res.rms, iterations=res.iterations,
                                       degenerate_dims=res.degenerate_dims, cause=res.cause or ""))
        if res.mismatch:
            traj.append((scan.t, frontend.T_local_last.compose(T_init).compose(T_LI)))
            continue
        velocity, dt_vel, t_last = res.T_last_curr, scan.t - t_last, scan.t
        traj.append((scan.t, res.T_local_curr.compose(T_LI)))
    report.check()
    return RunResult(traj, list(traj), [], report)


def run(dataset, cfg: PipelineConfig) -> RunResult:
    """Run on an in-memory dataset without writing anything."""
    if not dataset.scans:
        raise ValueError("dataset has no scans")
    return run_fused(dataset, cfg) if cfg.fusion_enabled else run_laser_only(dataset, cfg)


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Read ``cfg.data_dir``, run, and write trajectories plus the report."""
    cfg.validate(check_paths=True)
    dataset = read_dataset(cfg.data_dir)
    result = run(dataset, cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = result.report
    write_trajectory(out / "trajectory.txt", result.trajectory)
    rep.outputs["trajectory"] = str(out / "trajectory.txt")
    if cfg.fusion_enabled:
        write_trajectory(out / "lidar_trajectory.txt", result.lidar_trajectory)
        write_trajectory(out / "imu_trajectory.txt", result.imu_trajectory)
        rep.outputs["lidar_trajectory"] = str(out / "lidar_trajectory.txt")
        rep.outputs["imu_trajectory"] = str(out / "imu_trajectory.txt")
    rep.write(out)
    return rep
