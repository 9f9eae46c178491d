"""LiDAR-inertial odometry: IMU pre-integration fused with point-to-plane scan matching."""

from .estimators import LidarInertialOdometry, PointToPlaneICP, RingNormalEstimator
from .evaluation import Trajectory, evaluate, per_axis_error_series
from .geometry import PoseSE3
from .imu import ImuSample, ImuState, NoiseParams
from .pipeline import PipelineConfig, RunReport, load_config, run, run_pipeline
from .simulator import make_preset, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "ImuSample",
    "ImuState",
    "LidarInertialOdometry",
    "NoiseParams",
    "PipelineConfig",
    "PointToPlaneICP",
    "PoseSE3",
    "RingNormalEstimator",
    "RunReport",
    "Trajectory",
    "evaluate",
    "load_config",
    "make_preset",
    "per_axis_error_series",
    "run",
    "run_pipeline",
    "simulate_dataset",
]
