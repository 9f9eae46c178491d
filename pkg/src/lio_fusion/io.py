"""Plain-text dataset and trajectory formats.

Dataset directory layout::

    imu.csv            t,ax,ay,az,wx,wy,wz
    scans/<t_ns>.csv   x,y,z,ring   (sensor frame, one file per sweep)
    gt.txt             t x y z qx qy qz qw   (IMU body pose in the world)
    meta.txt           key = value
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .geometry import PoseSE3, quat_normalize
from .imu import ImuSample
from .lidar import RingedScan

IMU_HEADER = "t,ax,ay,az,wx,wy,wz"
SCAN_HEADER = "x,y,z,ring"
SERIES_HEADER = "t,dx,dy,dz,droll,dpitch,dyaw"


class DataFormatError(ValueError):
    """A data file is missing, malformed or inconsistent."""


def _first_bad_line(path, n_cols, skip_header):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno <= skip_header or not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != n_cols:
                return lineno, f"expected {n_cols} fields, got {len(parts)}"
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                return lineno, str(exc)
            if not all(np.isfinite(vals)):
                return lineno, "non-finite value"
    return None, "unreadable"


def _load_table(path, n_cols, header=None, delimiter=","):
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    skip = 0
    if header is not None:
        with open(path) as fh:
            first = fh.readline().strip()
        if first.replace(" ", "") != header:
            raise DataFormatError(f"{path}:1: expected header {header!r}, got {first!r}")
        skip = 1
    try:
        data = np.loadtxt(path, delimiter=delimiter, skiprows=skip, comments="#", ndmin=2)
    except ValueError:
        lineno, why = _first_bad_line(path, n_cols, skip)
        raise DataFormatError(f"{path}:{lineno}: malformed line ({why})") from None
    if data.size == 0:
        return np.zeros((0, n_cols))
    if data.shape[1] != n_cols or not np.all(np.isfinite(data)):
        lineno, why = _first_bad_line(path, n_cols, skip)
        raise DataFormatError(f"{path}:{lineno}: malformed line ({why})")
    return data


# ---------------------------------------------------------------------------
# IMU

def write_imu_csv(path, samples):
    rows = np.array([[s.t, *s.acc, *s.gyro] for s in samples]).reshape(-1, 7)
    np.savetxt(path, rows, fmt="%.17g", delimiter=",", header=IMU_HEADER, comments="")


def read_imu_csv(path):
    data = _load_table(path, 7, IMU_HEADER)
    if np.any(np.diff(data[:, 0]) <= 0):
        k = int(np.argmax(np.diff(data[:, 0]) <= 0))
        raise DataFormatError(f"{path}:{k + 3}: IMU timestamps not strictly increasing")
    return [ImuSample(float(r[0]), r[1:4].copy(), r[4:7].copy()) for r in data]


# ---------------------------------------------------------------------------
# scans

def scan_filename(t) -> str:
    return f"{int(round(t * 1e9))}.csv"


def write_scan_csv(path, scan: RingedScan):
    rows = np.column_stack([scan.points, scan.rings])
    np.savetxt(path, rows, fmt=["%.5f", "%.5f", "%.5f", "%d"], delimiter=",",
               header=SCAN_HEADER, comments="")


def read_scan_csv(path, t=None) -> RingedScan:
    path = Path(path)
    if t is None:
        try:
            t = int(path.stem) * 1e-9
        except ValueError:
            raise DataFormatError(f"{path}: scan file name must be an integer nanosecond stamp") from None
    data = _load_table(path, 4, SCAN_HEADER)
    rings = data[:, 3]
    if np.any(rings != np.round(rings)) or np.any(rings < 0):
        raise DataFormatError(f"{path}: ring indices must be non-negative integers")
    return RingedScan(t=t, points=data[:, :3], rings=rings.astype(int))


def list_scan_files(scan_dir):
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise DataFormatError(f"{scan_dir}: scan directory not found")
    files = []
    for f in scan_dir.glob("*.csv"):
        try:
            files.append((int(f.stem), f))
        except ValueError:
            raise DataFormatError(f"{f}: scan file name must be an integer nanosecond stamp") from None
    return [f for _, f in sorted(files)]


# ---------------------------------------------------------------------------
# trajectories

def write_trajectory(path, traj):
    """``traj`` is an iterable of ``(t, PoseSE3)``."""
    rows = []
    for t, pose in traj:
        w, x, y, z = pose.rotation
        rows.append([t, *pose.translation, x, y, z, w])
    rows = np.array(rows).reshape(-1, 8)
    np.savetxt(path, rows, fmt="%.9f", delimiter=" ", header="t x y z qx qy qz qw")


def read_trajectory(path):
    data = _load_table(path, 8, delimiter=None)
    out = []
    for r in data:
        q = quat_normalize(np.array([r[7], r[4], r[5], r[6]]))
        out.append((float(r[0]), PoseSE3(q, r[1:4].copy())))
    return out


# ---------------------------------------------------------------------------
# key = value files

def parse_value(text: str):
    """int, float, bool, whitespace-separated float vector or string."""
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    parts = text.split()
    if not parts:
        return text
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        return text
    if len(nums) == 1:
        return int(parts[0]) if parts[0].lstrip("+-").isdigit() else nums[0]
    return tuple(nums)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list, np.ndarray)):
        return " ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_kv(path):
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise DataFormatError(f"{path}:{lineno}: empty key")
            out[key] = parse_value(value)
    return out


def write_kv(path, values: dict):
    with open(path, "w") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {format_value(values[key])}\n")


# ---------------------------------------------------------------------------
# datasets

def write_dataset(out_dir, dataset):
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    write_imu_csv(out / "imu.csv", dataset.imu)
    for scan in dataset.scans:
        write_scan_csv(out / "scans" / scan_filename(scan.t), scan)
    write_trajectory(out / "gt.txt", dataset.ground_truth)
    write_kv(out / "meta.txt", dataset.meta)
    return out


def read_dataset(data_dir):
    from .simulator import Dataset

    d = Path(data_dir)
    if not d.is_dir():
        raise DataFormatError(f"{d}: dataset directory not found")
    imu = read_imu_csv(d / "imu.csv")
    scans = [read_scan_csv(f) for f in list_scan_files(d / "scans")]
    gt = read_trajectory(d / "gt.txt") if (d / "gt.txt").is_file() else []
    meta = read_kv(d / "meta.txt") if (d / "meta.txt").is_file() else {}
    return Dataset(imu, scans, gt, meta)


# ---------------------------------------------------------------------------
# evaluation outputs

def write_error_series(path, series):
    np.savetxt(path, np.asarray(series).reshape(-1, 7), fmt="%.9f", delimiter=",",
               header=SERIES_HEADER, comments="")


def write_metrics(path, result):
    lines = ["gap,n_pairs,e_trans_m,e_rot_rad,e_rot_deg"]
    for row in result.rows():
        lines.append(f"{row.gap},{row.n_pairs},{row.e_trans:.9f},{row.e_rot:.9f},"
                     f"{np.rad2deg(row.e_rot):.9f}")
    Path(path).write_text("\n".join(lines) + "\n")


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
