"""Spinning-LiDAR frontend: rings, surface normals, point-to-plane ICP.

Normals use the ring structure of the sensor: the neighbourhood of a point is
its k nearest neighbours in its own ring and in each vertically adjacent ring,
which avoids the single-ring neighbourhoods a plain 3-D KNN tends to return on
vertically sparse scans.

Matching runs in two stages per scan, scan-to-scan ("odometry") and
scan-to-map ("mapping").  A scan whose mapping result disagrees with its
odometry-derived initial guess, or whose match quality is poor, is reported
as a mismatch and leaves all frontend buffers untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PoseSE3, quat_normalize, qmul, so3_exp

logger = logging.getLogger(__name__)


class NoOverlapError(RuntimeError):
    """Too few correspondences survive rejection."""


class IcpNumericalError(RuntimeError):
    """The ICP normal equations produced a non-finite update."""


@dataclass(eq=False)
class RingedScan:
    """One sweep in the sensor frame.

    ``normals`` rows are NaN for points without a reliable normal.
    """

    t: float
    points: np.ndarray
    rings: np.ndarray
    normals: np.ndarray | None = None
    dropped: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.rings = np.asarray(self.rings, dtype=int).reshape(-1)
        if len(self.rings) != len(self.points):
            raise ValueError("one ring index per point required")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.points)

    @property
    def has_normal(self):
        if self.normals is None:
            return np.zeros(len(self.points), dtype=bool)
        return np.all(np.isfinite(self.normals), axis=1)

    def with_normals(self):
        """Points and normals of the normal-bearing subset."""
        m = self.has_normal
        return self.points[m], self.normals[m]

    def transformed(self, pose: PoseSE3) -> "RingedScan":
        normals = None if self.normals is None else self.normals @ pose.R.T
        return RingedScan(self.t, pose.apply(self.points), self.rings.copy(), normals)

    def copy(self) -> "RingedScan":
        return RingedScan(self.t, self.points.copy(), self.rings.copy(),
                          None if self.normals is None else self.normals.copy(), self.dropped)


# ---------------------------------------------------------------------------
# rings and normals

def assign_rings(points, n_rings=16, fov_low_deg=-15.0, fov_high_deg=15.0,
                 channel=None, t=0.0, margin_deg=0.5) -> RingedScan:
    """Ring index per point, from the sensor channel or from elevation.

    Elevation is snapped to the nearest of ``n_rings`` uniformly spaced beam
    elevations, ring 0 lowest.  Points more than ``margin_deg`` outside the
    field of view are dropped and counted in ``RingedScan.dropped``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty scan")
    if channel is not None:
        rings = np.asarray(channel, dtype=int)
        keep = (rings >= 0) & (rings < n_rings)
        return RingedScan(t, pts[keep], rings[keep], dropped=int((~keep).sum()))
    elev = np.rad2deg(np.arctan2(pts[:, 2], np.hypot(pts[:, 0], pts[:, 1])))
    spacing = (fov_high_deg - fov_low_deg) / (n_rings - 1)
    keep = (elev >= fov_low_deg - margin_deg) & (elev <= fov_high_deg + margin_deg)
    rings = np.clip(np.rint((elev - fov_low_deg) / spacing), 0, n_rings - 1).astype(int)
    return RingedScan(t, pts[keep], rings[keep], dropped=int((~keep).sum()))


def _ring_knn(points, rings, k, gate_scale, gate_min, cross_gate_scale=None):
    """Neighbour index matrix (n, 3k+1) with -1 for missing entries."""
    n = len(points)
    out = np.full((n, 3 * k + 1), -1, dtype=int)
    members = {r: np.flatnonzero(rings == r) for r in np.unique(rings)}
    trees = {r: cKDTree(points[idx]) for r, idx in members.items()}
    rng = np.linalg.norm(points, axis=1)
    gate = np.maximum(gate_min, gate_scale * rng)
    if cross_gate_scale is None:
        cross_gate_scale = gate_scale
    cross_gate = np.maximum(gate_min, cross_gate_scale * rng)
    for r, idx in members.items():
        q = points[idx]
        col = 0
        for rr, kk in ((r, k + 1), (r - 1, k), (r + 1, k)):
            if rr not in trees:
                col += kk
                continue
            kq = min(kk, len(members[rr]))
            dist, nb = trees[rr].query(q, k=kq)
            dist = dist.reshape(len(q), kq)
            nb = members[rr][nb.reshape(len(q), kq)]
            g = gate if rr == r else cross_gate
            nb = np.where(dist <= g[idx, None], nb, -1)
            out[idx, col:col + kq] = nb
            col += kk
    return out


def compute_normals(scan: RingedScan, k=5, line_ratio=0.01, min_neighbors=4,
                    gate_scale=0.1, gate_min=0.3, flatness=0.1,
                    cross_gate_scale=0.3) -> RingedScan:
    """Surface normals from ring-adjacent neighbourhoods.

    The neighbourhood of a point is itself plus its ``k`` nearest points in
    its own ring and ``k`` in each adjacent ring, restricted to a distance
    gate ``max(gate_min, scale * range)``.  The scale is ``gate_scale``
    within the ring and ``cross_gate_scale`` across rings, which must bridge
    the wide ring spacing on grazing surfaces such as the ground.  The normal is the covariance
    eigenvector of the smallest eigenvalue, oriented toward the sensor.
    Points with fewer than ``min_neighbors`` neighbours, whose middle to
    largest eigenvalue ratio is at most ``line_ratio`` (a line, not a
    surface), or whose smallest to middle ratio exceeds ``flatness`` (an edge
    or corner straddling two surfaces) get NaN.  ``flatness=None`` disables
    the last test.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    pts = scan.points
    normals = np.full_like(pts, np.nan)
    if len(pts) == 0:
        return RingedScan(scan.t, pts, scan.rings, normals, scan.dropped)
    nb = _ring_knn(pts, scan.rings, k, gate_scale, gate_min, cross_gate_scale)
    valid = nb >= 0
    count = valid.sum(axis=1)
    # the point itself is in its own neighbour list
    enough = count - 1 >= min_neighbors
    idx = np.where(valid, nb, 0)
    P = pts[idx]
    w = valid[..., None].astype(float)
    mean = (P * w).sum(axis=1) / np.maximum(count, 1)[:, None]
    D = (P - mean[:, None, :]) * w
    C = np.einsum("nki,nkj->nij", D, D) / np.maximum(count, 1)[:, None, None]
    evals, evecs = np.linalg.eigh(C[enough])
    n = evecs[:, :, 0]
    planar = evals[:, 1] > line_ratio * np.maximum(evals[:, 2], 1e-300)
    if flatness is not None:
        planar &= evals[:, 0] <= flatness * evals[:, 1]
    flip = np.einsum("ij,ij->i", n, pts[enough]) > 0
    n[flip] *= -1
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    n[~planar] = np.nan
    normals[enough] = n
    return RingedScan(scan.t, pts, scan.rings, normals, scan.dropped)


# ---------------------------------------------------------------------------
# ICP

@dataclass
class IcpOptions:
    max_iterations: int = 50
    tolerance: float = 1e-6
    max_correspondence_distance: float = 1.0
    trim_fraction: float = 0.9
    normal_compat_deg: float = 60.0
    min_correspondences: int = 20
    degenerate_eps: float = 1e-4


@dataclass
class IcpDiagnostics:
    iterations: int
    converged: bool
    rms: float
    rms_history: list
    hessian: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    degenerate: np.ndarray
    n_correspondences: int
    inlier_ratio: float
    termination: str

    @property
    def condition_ratio(self) -> float:
        """Smallest over largest Hessian eigenvalue."""
        return float(self.eigenvalues[0] / self.eigenvalues[-1]) if self.eigenvalues[-1] > 0 else 0.0


def _as_target(target, target_normals=None):
    if isinstance(target, RingedScan):
        return target.with_normals()
    if isinstance(target, LocalMap):
        return target.points, target.normals
    return np.asarray(target, float), np.asarray(target_normals, float)


def icp_point_to_plane(source, target, T_init: PoseSE3 | None = None, options: IcpOptions | None = None,
                       target_normals=None, source_normals=None, tree=None):
    """Register ``source`` onto ``target`` by point-to-plane ICP.

    The pose maps source coordinates into the target frame.  Updates are
    additive in translation and rotate about the target-frame origin.
    Hessian directions whose eigenvalue falls below ``degenerate_eps`` times
    the correspondence count are not updated, so unobservable motion stays at
    the initial guess.

    Returns ``(pose, diagnostics)``.
    """
    opts = options or IcpOptions()
    if isinstance(source, RingedScan):
        src = source.points
        src_n = source.normals if source_normals is None else source_normals
    else:
        src = np.asarray(source, float)
        src_n = source_normals
    tgt, tgt_n = _as_target(target, target_normals)
    if len(tgt) < opts.min_correspondences:
        raise NoOverlapError(f"target has only {len(tgt)} normal-bearing points")
    tree = tree if tree is not None else cKDTree(tgt)
    T = T_init if T_init is not None else PoseSE3.identity()
    if not (np.all(np.isfinite(T.rotation)) and np.all(np.isfinite(T.translation))):
        raise IcpNumericalError("non-finite initial pose")
    cos_compat = np.cos(np.deg2rad(opts.normal_compat_deg))
    rms_hist = []
    H = np.zeros((6, 6))
    evals = np.zeros(6)
    evecs = np.eye(6)
    degenerate = np.zeros(6, dtype=bool)
    n_corr = 0
    inlier_ratio = 0.0
    converged = False
    termination = "max_iterations"
    it = 0
    prev_T = T
    for it in range(1, opts.max_iterations + 1):
        Rp = src @ T.R.T
        moved = Rp + T.translation
        dist, nn = tree.query(moved, distance_upper_bound=opts.max_correspondence_distance)
        ok = np.isfinite(dist)
        inlier_ratio = float(ok.mean()) if len(ok) else 0.0
        nn_ok = np.where(ok, nn, 0)
        n = tgt_n[nn_ok]
        if src_n is not None:
            sn = src_n @ T.R.T
            ok &= ~(np.einsum("ij,ij->i", sn, n) < cos_compat)  # NaN source normals pass
        r = np.einsum("ij,ij->i", n, moved - tgt[nn_ok])
        sel = np.flatnonzero(ok)
        if len(sel) > 0 and opts.trim_fraction < 1.0:
            keep = max(int(np.ceil(opts.trim_fraction * len(sel))), 1)
            order = np.argsort(np.abs(r[sel]), kind="stable")
            sel = np.sort(sel[order[:keep]])
        n_corr = len(sel)
        if n_corr < opts.min_correspondences:
            raise NoOverlapError(f"only {n_corr} correspondences after rejection")
        rr = r[sel]
        rms = float(np.sqrt(np.mean(rr * rr)))
        if rms_hist and rms > rms_hist[-1]:
            T = prev_T
            converged = True
            termination = "rms_increase"
            it -= 1
            break
        rms_hist.append(rms)
        nsel = n[sel]
        J = np.hstack([nsel, np.cross(Rp[sel], nsel)])
        H = J.T @ J
        b = -J.T @ rr
        evals, evecs = np.linalg.eigh(H)
        degenerate = evals < opts.degenerate_eps * n_corr
        inv = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, evals))
        delta = evecs @ (inv * (evecs.T @ b))
        if not np.all(np.isfinite(delta)):
            raise IcpNumericalError("non-finite ICP update")
        prev_T = T
        T = PoseSE3(quat_normalize(qmul(so3_exp(delta[3:]), T.rotation)), T.translation + delta[:3])
        if np.linalg.norm(delta) < opts.tolerance:
            converged = True
            termination = "tolerance"
            break
    diag = IcpDiagnostics(
        iterations=it, converged=converged, rms=rms_hist[-1] if rms_hist else np.nan,
        rms_history=rms_hist, hessian=H, eigenvalues=evals, eigenvectors=evecs,
        degenerate=degenerate, n_correspondences=n_corr, inlier_ratio=inlier_ratio,
        termination=termination,
    )
    return T, diag


def point_to_plane_hessian(source_points, target_points, target_normals, pose: PoseSE3,
                           max_distance=1.0):
    """6×6 Gauss-Newton Hessian (translation, rotation) at ``pose``."""
    tree = cKDTree(target_points)
    Rp = np.asarray(source_points, float) @ pose.R.T
    dist, nn = tree.query(Rp + pose.translation, distance_upper_bound=max_distance)
    ok = np.isfinite(dist)
    n = np.asarray(target_normals, float)[nn[ok]]
    J = np.hstack([n, np.cross(Rp[ok], n)])
    return J.T @ J


# ---------------------------------------------------------------------------
# local map

@dataclass(eq=False)
class LocalMap:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    origin: PoseSE3 = field(default_factory=PoseSE3.identity)
    crop_radius: float = 60.0
    voxel_size: float = 0.2
    _tree: cKDTree | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.points)
        return self._tree

    def copy(self) -> "LocalMap":
        return LocalMap(self.points.copy(), self.normals.copy(), self.origin,
                        self.crop_radius, self.voxel_size, self._tree)


def maintain_local_map(local_map: LocalMap, points, normals, current_pose: PoseSE3) -> LocalMap:
    """Merge map-frame points, voxel-deduplicate and crop around the pose.

    Existing map points keep their voxel; new points only fill empty voxels.
    """
    points = np.asarray(points, float).reshape(-1, 3)
    normals = np.asarray(normals, float).reshape(-1, 3)
    ok = np.all(np.isfinite(normals), axis=1)
    allp = np.vstack([local_map.points, points[ok]])
    alln = np.vstack([local_map.normals, normals[ok]])
    keys = np.floor(allp / local_map.voxel_size).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    allp, alln = allp[first], alln[first]
    near = np.linalg.norm(allp - current_pose.translation, axis=1) <= local_map.crop_radius
    return LocalMap(allp[near], alln[near], current_pose, local_map.crop_radius,
                    local_map.voxel_size)


# ---------------------------------------------------------------------------
# two-stage matching

@dataclass
class MatchOptions:
    mismatch_translation: float = 0.5
    mismatch_rotation_deg: float = 5.0
    min_inlier_ratio: float = 0.5
    max_rms: float = 0.1
    icp: IcpOptions = field(default_factory=IcpOptions)


@dataclass
class MatchResult:
    T_last_curr: PoseSE3
    T_local_curr: PoseSE3
    converged: bool
    mismatch: bool
    rms: float
    iterations: int
    cause: str | None = None
    degenerate_dims: int = 0
    odometry: IcpDiagnostics | None = None
    mapping: IcpDiagnostics | None = None

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "mismatch": self.mismatch,
            "rms": self.rms,
            "iterations": self.iterations,
            "cause": self.cause or "",
            "degenerate_dims": self.degenerate_dims,
        }


def pose_discrepancy(a: PoseSE3, b: PoseSE3):
    """Translation norm (m) and rotation angle (rad) of ``a⁻¹ b``."""
    d = a.between(b)
    return float(np.linalg.norm(d.translation)), d.angle()


def match_scan(T_init: PoseSE3, T_local_last: PoseSE3, curr: RingedScan, last: RingedScan,
               local_map: LocalMap, options: MatchOptions | None = None, last_tree=None):
    """Odometry then mapping ICP for one scan (both scans carry normals).

    Returns ``(result, new_map)``; ``new_map`` is ``None`` on mismatch and
    the inputs are never modified.
    """
    opts = options or MatchOptions()
    src_pts, src_n = curr.points, curr.normals
    fail = dict(T_last_curr=T_init, T_local_curr=T_local_last.compose(T_init),
                converged=False, mismatch=True, rms=np.nan, iterations=0)
    try:
        T_last_curr, odo = icp_point_to_plane(src_pts, last, T_init, opts.icp,
                                              source_normals=src_n, tree=last_tree)
        map_init = T_local_last.compose(T_last_curr)
        T_local_curr, mp = icp_point_to_plane(src_pts, local_map, map_init, opts.icp,
                                              source_normals=src_n, tree=local_map.tree)
    except (NoOverlapError, IcpNumericalError) as exc:
        return MatchResult(**fail, cause=f"{type(exc).__name__}: {exc}"), None
    dt, dr = pose_discrepancy(map_init, T_local_curr)
    cause = None
    if dt > opts.mismatch_translation or dr > np.deg2rad(opts.mismatch_rotation_deg):
        cause = f"pose discrepancy {dt:.3f} m / {np.rad2deg(dr):.2f} deg"
    elif min(odo.inlier_ratio, mp.inlier_ratio) < opts.min_inlier_ratio:
        cause = f"inlier ratio {min(odo.inlier_ratio, mp.inlier_ratio):.2f}"
    elif max(odo.rms, mp.rms) > opts.max_rms:
        cause = f"rms {max(odo.rms, mp.rms):.3f} m"
    result = MatchResult(
        T_last_curr=T_last_curr, T_local_curr=T_local_curr,
        converged=odo.converged and mp.converged, mismatch=cause is not None,
        rms=mp.rms, iterations=odo.iterations + mp.iterations, cause=cause,
        degenerate_dims=int(odo.degenerate.sum()), odometry=odo, mapping=mp,
    )
    if result.mismatch:
        return result, None
    pts, nrm = curr.with_normals()
    new_map = maintain_local_map(local_map, T_local_curr.apply(pts), nrm @ T_local_curr.R.T,
                                 T_local_curr)
    return result, new_map


class LidarFrontend:
    """Stateful wrapper holding the last scan, its map pose and the local map."""

    def __init__(self, match_options: MatchOptions | None = None, normal_k=5,
                 line_ratio=0.01, voxel_size=0.2, crop_radius=60.0):
        self.options = match_options or MatchOptions()
        self.normal_k = normal_k
        self.line_ratio = line_ratio
        self.voxel_size = voxel_size
        self.crop_radius = crop_radius
        self.local_map: LocalMap | None = None
        self.last: RingedScan | None = None
        self.last_tree = None
        self.T_local_last: PoseSE3 | None = None

    @property
    def initialized(self) -> bool:
        return self.last is not None

    def prepare(self, scan: RingedScan) -> RingedScan:
        if scan.normals is None:
            scan = compute_normals(scan, k=self.normal_k, line_ratio=self.line_ratio)
        return scan

    def initialize(self, scan: RingedScan, pose: PoseSE3 | None = None) -> MatchResult:
        scan = self.prepare(scan)
        pose = pose or PoseSE3.identity()
        pts, nrm = scan.with_normals()
        empty = LocalMap(crop_radius=self.crop_radius, voxel_size=self.voxel_size)
        self.local_map = maintain_local_map(empty, pose.apply(pts), nrm @ pose.R.T, pose)
        self._set_last(scan, pose)
        return MatchResult(PoseSE3.identity(), pose, True, False, 0.0, 0, cause="initialization")

    def _set_last(self, scan, pose):
        self.last = scan
        pts, _ = scan.with_normals()
        self.last_tree = cKDTree(pts)
        self.T_local_last = pose

    def process(self, scan: RingedScan, T_init: PoseSE3) -> MatchResult:
        scan = self.prepare(scan)
        result, new_map = match_scan(T_init, self.T_local_last, scan, self.last,
                                     self.local_map, self.options, last_tree=self.last_tree)
        if not result.mismatch:
            self.local_map = new_map
            self._set_last(scan, result.T_local_curr)
        return result
