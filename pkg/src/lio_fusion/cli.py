"""Command line: ``simulate``, ``run`` and ``evaluate``.

Exit status is 0 on success, 1 on a data or configuration error and 2 on a
usage error; failures print one ``error:`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .evaluation import DEFAULT_GAPS, Trajectory, aligned, evaluate, per_axis_error_series
from .io import (
    DataFormatError,
    ensure_dir,
    read_kv,
    read_trajectory,
    write_dataset,
    write_error_series,
    write_kv,
    write_metrics,
)
from .pipeline import ConfigError, StreamGapError, load_config, run_pipeline
from .simulator import DEGRADATIONS, PRESETS, LidarModel, simulate_dataset

logger = logging.getLogger("lio_fusion")

SIM_KEYS = {
    "preset": str,
    "seed": int,
    "degradation": str,
    "imu.rate": float,
    "lidar.range_noise": float,
    "corrupt": str,
}


def _simulation_settings(args):
    settings = {"preset": "corridor", "seed": 0, "degradation": "none", "imu.rate": 200.0,
                "lidar.range_noise": LidarModel().range_noise, "corrupt": ""}
    if args.config:
        values = read_kv(args.config)
        unknown = sorted(set(values) - set(SIM_KEYS))
        if unknown:
            raise ConfigError(f"{args.config}: unknown simulation key(s) {', '.join(unknown)}")
        for key, value in values.items():
            settings[key] = value
    for key, value in (("preset", args.preset), ("seed", args.seed),
                       ("degradation", args.degradation)):
        if value is not None:
            settings[key] = value
    try:
        settings = {k: SIM_KEYS[k](v) for k, v in settings.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad simulation setting: {exc}") from None
    if settings["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {settings['preset']!r}; expected one of {sorted(PRESETS)}")
    if settings["degradation"] not in DEGRADATIONS:
        raise ConfigError(f"unknown degradation {settings['degradation']!r}")
    return settings


def cmd_simulate(args) -> int:
    s = _simulation_settings(args)
    corrupt = tuple(int(c) for c in str(s["corrupt"]).replace(",", " ").split())
    ds = simulate_dataset(s["preset"], seed=s["seed"], degradation=s["degradation"],
                          imu_rate=s["imu.rate"],
                          model=LidarModel(range_noise=s["lidar.range_noise"]), corrupt=corrupt)
    out = write_dataset(args.out, ds)
    write_kv(out / "config.txt", {"data.dir": ".", "output.dir": "run", "seed": s["seed"]})
    print(f"wrote {len(ds.scans)} scans, {len(ds.imu)} IMU samples to {out}")
    return 0


def cmd_run(args) -> int:
    overrides = {}
    if args.out:
        overrides["output.dir"] = str(args.out)
    if args.no_imu_fusion:
        overrides["fusion.enabled"] = False
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    report = run_pipeline(cfg)
    for key, value in report.summary().items():
        print(f"{key} = {value}")
    return 0


def cmd_evaluate(args) -> int:
    est = Trajectory.from_pairs(read_trajectory(args.est))
    gt = Trajectory.from_pairs(read_trajectory(args.gt))
    result = evaluate(est, gt, DEFAULT_GAPS)
    series = per_axis_error_series(*aligned(est, gt), align_first=True)
    out = ensure_dir(args.out or Path(args.est).parent)
    write_metrics(out / "metrics.csv", result)
    write_error_series(out / "axis_errors.csv", series)
    for row in result.rows():
        print(f"gap={row.gap} pairs={row.n_pairs} E_trans={row.e_trans:.6f} m "
              f"E_rot={np.rad2deg(row.e_rot):.6f} deg")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lio-fusion",
                                description="LiDAR-inertial odometry on simulated or recorded data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-scan progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset directory")
    s.add_argument("--out", required=True, help="dataset directory to create")
    s.add_argument("--config", help="key = value file with simulation settings")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--seed", type=int)
    s.add_argument("--degradation", choices=DEGRADATIONS)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="estimate a trajectory from a dataset")
    r.add_argument("--config", required=True, help="pipeline key = value file")
    r.add_argument("--out", help="output directory (overrides output.dir)")
    r.add_argument("--no-imu-fusion", action="store_true", help="laser-only baseline")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="relative pose errors of a trajectory")
    e.add_argument("--est", required=True, help="estimated trajectory file")
    e.add_argument("--gt", required=True, help="ground-truth trajectory file")
    e.add_argument("--out", help="directory for metrics.csv and axis_errors.csv")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataFormatError, ConfigError, StreamGapError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
