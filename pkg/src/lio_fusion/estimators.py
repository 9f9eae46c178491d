"""scikit-learn style wrappers around the normal, ICP and odometry stages."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation, Slerp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import Trajectory, evaluate
from .lidar import IcpOptions, RingedScan, compute_normals, icp_point_to_plane
from .pipeline import PipelineConfig, run
from .validation import (
    check_fraction,
    check_points,
    check_pose,
    check_positive,
    check_scan,
    check_times,
)


def _wxyz_to_xyzw(q):
    return np.asarray(q)[..., [1, 2, 3, 0]]


def _xyzw_to_wxyz(q):
    return np.asarray(q)[..., [3, 0, 1, 2]]


class RingNormalEstimator(TransformerMixin, BaseEstimator):
    """Per-point surface normals of a ringed scan.

    ``X`` is a :class:`RingedScan` or an ``(n, 4)`` array ``x, y, z, ring``.
    ``transform`` returns ``(n, 3)`` unit normals with NaN rows where no
    reliable normal exists.
    """

    def __init__(self, k=5, line_ratio=0.01, flatness=0.1, gate_scale=0.1,
                 cross_gate_scale=0.3, gate_min=0.3, min_neighbors=4):
        self.k = k
        self.line_ratio = line_ratio
        self.flatness = flatness
        self.gate_scale = gate_scale
        self.cross_gate_scale = cross_gate_scale
        self.gate_min = gate_min
        self.min_neighbors = min_neighbors

    def _check_params(self):
        check_positive(self.k, "k", integer=True)
        if self.k < 2:
            raise ValueError("k must be >= 2")
        check_fraction(self.line_ratio, "line_ratio")
        if self.flatness is not None:
            check_fraction(self.flatness, "flatness")
        for name in ("gate_scale", "cross_gate_scale", "gate_min"):
            check_positive(getattr(self, name), name)
        check_positive(self.min_neighbors, "min_neighbors", integer=True)

    def fit(self, X, y=None):
        self._check_params()
        check_scan(X)
        self.n_features_in_ = 4
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        scan = check_scan(X)
        out = compute_normals(
            RingedScan(scan.t, scan.points, scan.rings), k=self.k, line_ratio=self.line_ratio,
            min_neighbors=self.min_neighbors, gate_scale=self.gate_scale, gate_min=self.gate_min,
            flatness=self.flatness, cross_gate_scale=self.cross_gate_scale)
        return out.normals


class PointToPlaneICP(BaseEstimator):
    """Point-to-plane registration onto a fixed target.

    ``fit`` stores the target scan and its normals.  ``transform`` registers
    a source and returns its points in the target frame; the estimated pose
    and diagnostics are kept in ``pose_`` and ``diagnostics_``.
    """

    def __init__(self, max_iterations=50, tolerance=1e-6, max_correspondence_distance=1.0,
                 trim_fraction=0.9, normal_compat_deg=60.0, min_correspondences=20,
                 degenerate_eps=1e-4, normal_estimator=None):
        self.max_iterations = max_iterations
        self.tolerance = tolerance
        self.max_correspondence_distance = max_correspondence_distance
        self.trim_fraction = trim_fraction
        self.normal_compat_deg = normal_compat_deg
        self.min_correspondences = min_correspondences
        self.degenerate_eps = degenerate_eps
        self.normal_estimator = normal_estimator

    def _options(self) -> IcpOptions:
        check_positive(self.max_iterations, "max_iterations", integer=True)
        check_positive(self.tolerance, "tolerance")
        check_positive(self.max_correspondence_distance, "max_correspondence_distance")
        check_fraction(self.trim_fraction, "trim_fraction")
        check_positive(self.normal_compat_deg, "normal_compat_deg")
        check_positive(self.min_correspondences, "min_correspondences", integer=True)
        check_positive(self.degenerate_eps, "degenerate_eps")
        return IcpOptions(self.max_iterations, self.tolerance, self.max_correspondence_distance,
                          self.trim_fraction, self.normal_compat_deg, self.min_correspondences,
                          self.degenerate_eps)

    def _normals(self):
        return (self.normal_estimator or RingNormalEstimator()).fit(self.target_)

    def fit(self, X, y=None):
        self.options_ = self._options()
        scan = check_scan(X)
        self.target_ = scan
        normals = scan.normals if scan.normals is not None else self._normals().transform(scan)
        self.target_normals_ = normals
        self.n_features_in_ = 4
        return self

    def register(self, X, init=None):
        """``(pose, diagnostics)`` mapping source ``X`` into the target frame."""
        check_is_fitted(self, "target_")
        if isinstance(X, RingedScan) or np.asarray(X).shape[-1] == 4:
            src = check_scan(X)
            src_n = src.normals
            if src_n is None:
                src_n = self._normals().transform(src)
            pts = src.points
        else:
            pts, src_n = check_points(X, "source"), None
        target = RingedScan(self.target_.t, self.target_.points, self.target_.rings,
                            self.target_normals_)
        pose, diag = icp_point_to_plane(pts, target, check_pose(init, "init"), self.options_,
                                        source_normals=src_n)
        self.pose_, self.diagnostics_ = pose, diag
        return pose, diag

    def transform(self, X, init=None):
        pose, _ = self.register(X, init)
        pts = X.points if isinstance(X, RingedScan) else np.asarray(X, float)[:, :3]
        return pose.apply(pts)


class LidarInertialOdometry(BaseEstimator):
    """Whole-trajectory estimator over a :class:`~lio_fusion.simulator.Dataset`.

    ``fit`` runs the pipeline (fused or laser-only).  ``predict`` returns
    ``(n, 7)`` rows ``x, y, z, qw, qx, qy, qz`` interpolated at the query
    times (clamped to the estimated span).  ``score`` is the negative pooled
    relative translation error against the dataset's ground truth.
    Dataset ``meta`` entries act as defaults; ``config`` holds further
    dotted-key overrides.
    """

    def __init__(self, fusion_enabled=True, window_size=5, pose_weighting="hessian",
                 degenerate_eps=1e-4, voxel_size=0.2, config=None):
        self.fusion_enabled = fusion_enabled
        self.window_size = window_size
        self.pose_weighting = pose_weighting
        self.degenerate_eps = degenerate_eps
        self.voxel_size = voxel_size
        self.config = config

    def _config(self, dataset) -> PipelineConfig:
        keys = PipelineConfig.keys()
        values = {k: v for k, v in (dataset.meta or {}).items() if k in keys and k != "seed"}
        values.update(self.config or {})
        cfg = PipelineConfig.from_mapping(values)
        return cfg.replace(fusion_enabled=bool(self.fusion_enabled), window_size=self.window_size,
                           optimizer_pose_weighting=self.pose_weighting,
                           icp_degenerate_eps=self.degenerate_eps, map_voxel_size=self.voxel_size)

    def fit(self, X, y=None):
        self.config_ = self._config(X)
        result = run(X, self.config_)
        self.result_ = result
        self.report_ = result.report
        self.trajectory_ = Trajectory.from_pairs(result.trajectory)
        return self

    def predict(self, X):
        check_is_fitted(self, "trajectory_")
        t = np.clip(check_times(X), self.trajectory_.times[0], self.trajectory_.times[-1])
        times = self.trajectory_.times
        P = np.array([p.translation for p in self.trajectory_.poses])
        Q = np.array([p.rotation for p in self.trajectory_.poses])
        xyz = np.column_stack([np.interp(t, times, P[:, k]) for k in range(3)])
        if len(times) == 1:
            quats = np.repeat(Q, len(t), axis=0)
        else:
            slerp = Slerp(times, Rotation.from_quat(_wxyz_to_xyzw(Q)))
            quats = _xyzw_to_wxyz(slerp(t).as_quat())
        return np.column_stack([xyz, quats])

    def score(self, X, y=None):
        check_is_fitted(self, "trajectory_")
        gt = Trajectory.from_pairs(X.ground_truth)
        return -evaluate(self.trajectory_, gt).pooled.e_trans
