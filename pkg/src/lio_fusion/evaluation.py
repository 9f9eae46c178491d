"""Relative pose error metrics and per-axis error series."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PoseSE3, euler_from_quat, quat_angle

DEFAULT_GAPS = (1, 5, 10)


class EmptyAssociationError(ValueError):
    """No estimated sample could be paired with ground truth."""


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray
    poses: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        if len(self.times) != len(self.poses):
            raise ValueError("one pose per timestamp required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def subset(self, idx) -> "Trajectory":
        return Trajectory(self.times[idx], [self.poses[i] for i in idx])

    @classmethod
    def from_pairs(cls, pairs) -> "Trajectory":
        pairs = list(pairs)
        return cls([t for t, _ in pairs], [p for _, p in pairs])


def associate(est: Trajectory, gt: Trajectory, max_dt=0.02):
    """Nearest-timestamp pairs ``(i_est, i_gt)`` within ``max_dt``.

    Estimated samples are visited in time order; each ground-truth sample is
    used at most once.
    """
    if len(est) == 0 or len(gt) == 0:
        raise EmptyAssociationError("empty trajectory")
    used = np.zeros(len(gt), dtype=bool)
    pairs = []
    for i, t in enumerate(est.times):
        k = int(np.searchsorted(gt.times, t))
        best, best_dt = -1, np.inf
        for j in (k - 1, k):
            if 0 <= j < len(gt) and not used[j]:
                d = abs(gt.times[j] - t)
                if d < best_dt:
                    best, best_dt = j, d
        if best >= 0 and best_dt <= max_dt:
            used[best] = True
            pairs.append((i, best))
    if not pairs:
        raise EmptyAssociationError(f"no samples associate within {max_dt} s")
    return pairs


def aligned(est: Trajectory, gt: Trajectory, max_dt=0.02):
    """Equal-length (est, gt) trajectories restricted to associated samples."""
    pairs = associate(est, gt, max_dt)
    return est.subset([i for i, _ in pairs]), gt.subset([j for _, j in pairs])


def frame_pairs(n, gaps=DEFAULT_GAPS):
    """Index pairs ``(i, i + gap)`` for every gap."""
    return {g: [(i, i + g) for i in range(n - g)] for g in gaps}


def relative_pose_error(est_i: PoseSE3, est_j: PoseSE3, gt_i: PoseSE3, gt_j: PoseSE3) -> PoseSE3:
    """``(gt_i⁻¹ gt_j)⁻¹ (est_i⁻¹ est_j)``."""
    return gt_i.between(gt_j).between(est_i.between(est_j))


def relative_errors(est: Trajectory, gt: Trajectory, pairs):
    """Mean translation norm (m) and rotation angle (rad) of relative errors.

    ``est`` and ``gt`` are already associated sample by sample.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty frame-pair set")
    n = len(est)
    if len(gt) != n:
        raise ValueError("est and gt must be associated (equal length)")
    trans, rot = [], []
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"frame pair ({i}, {j}) out of range for {n} samples")
        d = relative_pose_error(est.poses[i], est.poses[j], gt.poses[i], gt.poses[j])
        trans.append(np.linalg.norm(d.translation))
        rot.append(quat_angle(d.rotation))
    return float(np.mean(trans)), float(np.mean(rot))


@dataclass
class GapErrors:
    gap: int | str
    n_pairs: int
    e_trans: float
    e_rot: float


@dataclass
class EvaluationResult:
    per_gap: list = field(default_factory=list)
    pooled: GapErrors | None = None

    def rows(self):
        return [*self.per_gap, self.pooled]


def evaluate(est: Trajectory, gt: Trajectory, gaps=DEFAULT_GAPS, max_dt=0.02) -> EvaluationResult:
    """Relative errors per frame gap and pooled over all gaps."""
    e, g = aligned(est, gt, max_dt)
    sets = frame_pairs(len(e), gaps)
    result = EvaluationResult()
    pooled = []
    for gap, pairs in sets.items():
        if not pairs:
            continue
        et, er = relative_errors(e, g, pairs)
        result.per_gap.append(GapErrors(gap, len(pairs), et, er))
        pooled.extend(pairs)
    if not pooled:
        raise ValueError("trajectory too short for any frame pair")
    et, er = relative_errors(e, g, pooled)
    result.pooled = GapErrors("pooled", len(pooled), et, er)
    return result


def per_axis_error_series(est: Trajectory, gt: Trajectory, align_first=False):
    """``(t, δx, δy, δz, δroll, δpitch, δyaw)`` rows for associated samples.

    Translation errors are world-frame differences; rotation errors are the
    roll/pitch/yaw of ``R_est R_gtᵀ``.  With ``align_first`` the estimate is
    first moved so that its first pose coincides with the ground truth's.
    """
    if len(est) != len(gt):
        est, gt = aligned(est, gt)
    poses = est.poses
    if align_first and poses:
        offset = gt.poses[0].compose(poses[0].inverse())
        poses = [offset.compose(p) for p in poses]
    rows = []
    for t, pe, pg in zip(gt.times, poses, gt.poses):
        dq = pe.compose(pg.inverse()).rotation
        rows.append([t, *(pe.translation - pg.translation), *euler_from_quat(dq)])
    return np.array(rows).reshape(-1, 7)


def axis_error_means(series):
    """Mean absolute error per axis column of a series (6 values)."""
    return np.abs(np.asarray(series)[:, 1:]).mean(axis=0)
