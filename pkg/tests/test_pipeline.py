import dataclasses

import numpy as np
import pytest

from lio_fusion.evaluation import Trajectory, evaluate
from lio_fusion.io import read_kv, read_trajectory, write_dataset, write_kv
from lio_fusion.pipeline import (
    ConfigError,
    PipelineConfig,
    RunReport,
    ScanRecord,
    StreamGapError,
    load_config,
    run,
    run_pipeline,
)
from lio_fusion.simulator import room_preset, simulate_dataset


@pytest.fixture(scope="module")
def fused(short_room, base_config):
    return run(short_room, base_config)


@pytest.fixture(scope="module")
def laser(short_room, base_config):
    return run(short_room, base_config.replace(fusion_enabled=False))


def pooled(result, dataset):
    gt = Trajectory.from_pairs(dataset.ground_truth)
    return evaluate(Trajectory.from_pairs(result.trajectory), gt).pooled


@pytest.mark.parametrize("mode", ["fused", "laser"])
def test_room_run_tracks_ground_truth(request, short_room, mode):
    result = request.getfixturevalue(mode)
    rep = result.report
    assert rep.n_scans == len(short_room.scans)
    assert rep.n_skipped == 0 and rep.n_matched == rep.n_scans - 1
    assert len(result.trajectory) == len(short_room.scans)
    err = pooled(result, short_room)
    assert err.e_trans < 0.02
    assert np.rad2deg(err.e_rot) < 0.2


def test_fused_outputs(fused, short_room):
    assert fused.report.mode == "fused"
    assert len(fused.imu_trajectory) == len(short_room.imu)
    assert len(fused.lidar_trajectory) == len(short_room.scans)
    assert len(fused.report.optimizations) == len(short_room.scans) - 1
    for rep in fused.report.optimizations:
        assert rep.final_cost <= rep.initial_cost


def test_laser_only_has_no_imu_outputs(laser):
    assert laser.report.mode == "laser-only"
    assert laser.imu_trajectory == [] and laser.report.optimizations == []


@pytest.mark.parametrize("fusion", [True, False])
def test_corrupted_scan_is_skipped(fusion, base_config):
    world, traj = room_preset(duration=4.0)
    ds = simulate_dataset(world=world, traj=traj, seed=2, corrupt=(12,))
    result = run(ds, base_config.replace(fusion_enabled=fusion))
    assert result.report.skipped_times == [ds.scans[12].t]
    assert len(result.trajectory) == len(ds.scans)
    assert result.report.scans[12].cause


def test_imu_gap_raises(base_config):
    world, traj = room_preset(duration=4.0)
    ds = simulate_dataset(world=world, traj=traj, seed=2)
    ds.imu = ds.imu[:300] + ds.imu[500:]
    with pytest.raises(StreamGapError, match="IMU gap"):
        run(ds, base_config)


def test_scans_outside_imu_stream_raise(base_config):
    world, traj = room_preset(duration=4.0)
    ds = simulate_dataset(world=world, traj=traj, seed=2)
    ds.imu = ds.imu[:200]
    with pytest.raises(StreamGapError):
        run(ds, base_config)


def test_empty_dataset_rejected(short_room, base_config):
    empty = dataclasses.replace(short_room, scans=[])
    with pytest.raises(ValueError):
        run(empty, base_config)


def test_report_invariant():
    rep = RunReport("fused", [ScanRecord(0.0, "init"), ScanRecord(0.1, "matched"),
                              ScanRecord(0.2, "skipped")])
    rep.check()
    assert rep.summary()["skipped"] == 1
    rep.scans.append(ScanRecord(0.3, "init"))
    with pytest.raises(AssertionError):
        rep.check()


class TestConfig:
    def test_key_mapping(self):
        keys = PipelineConfig.keys()
        assert {"imu.sigma_acc", "window.size", "fusion.enabled", "seed", "data.dir"} <= set(keys)

    def test_roundtrip(self):
        cfg = PipelineConfig(window_size=7, extrinsics_p_IL=(0.1, 0.0, 0.0))
        assert PipelineConfig.from_mapping(cfg.to_mapping()) == cfg

    @pytest.mark.parametrize("values", [
        {"no.such": 1}, {"window.size": 1}, {"window.size": 2.5}, {"fusion.enabled": "maybe"},
        {"optimizer.pose_weighting": "magic"}, {"icp.trim_fraction": 1.5},
        {"extrinsics.p_IL": (1.0, 2.0)}, {"imu.sigma_acc": -1.0},
    ])
    def test_invalid_values(self, values):
        with pytest.raises(ConfigError):
            PipelineConfig.from_mapping(values)

    def test_load_precedence(self, tmp_path, short_room):
        data = tmp_path / "data"
        write_dataset(data, short_room)
        cfg_path = tmp_path / "cfg.txt"
        write_kv(cfg_path, {"data.dir": "data", "output.dir": "out", "window.size": 4,
                            "imu.sigma_gyro": 2e-4})
        cfg = load_config(cfg_path, {"window.size": 6})
        assert cfg.window_size == 6
        assert cfg.imu_sigma_gyro == 2e-4
        # taken from the dataset's meta.txt
        assert cfg.extrinsics_p_IL == (0.05, 0.0, 0.1)
        assert cfg.data_dir == str(tmp_path / "data")

    def test_missing_data_dir(self, tmp_path):
        p = tmp_path / "cfg.txt"
        write_kv(p, {"data.dir": "absent"})
        with pytest.raises(ConfigError, match="does not exist"):
            load_config(p)


def test_run_pipeline_writes_outputs(tmp_path, short_room):
    data = tmp_path / "data"
    write_dataset(data, short_room)
    cfg = load_config(None, {"data.dir": str(data), "output.dir": str(tmp_path / "out")})
    rep = run_pipeline(cfg)
    out = tmp_path / "out"
    for name in ("trajectory.txt", "lidar_trajectory.txt", "imu_trajectory.txt",
                 "report.txt", "scans.csv"):
        assert (out / name).is_file()
    assert len(read_trajectory(out / "trajectory.txt")) == rep.n_scans
    summary = read_kv(out / "report.txt")
    assert summary["matched"] == rep.n_matched and summary["mode"] == "fused"
    assert len((out / "scans.csv").read_text().splitlines()) == rep.n_scans + 1
