import sys

import numpy as np
import pytest

from lio_fusion.geometry import PoseSE3, quat_normalize
from lio_fusion.simulator import DEFAULT_EXTRINSICS, room_preset, simulate_dataset
from lio_fusion.pipeline import PipelineConfig


def random_quat(rng):
    return quat_normalize(rng.standard_normal(4))


def random_pose(rng, t_scale=1.0):
    return PoseSE3(random_quat(rng), t_scale * rng.standard_normal(3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def short_room():
    """Five seconds of the room preset: 51 scans."""
    world, traj = room_preset(duration=5.0)
    return simulate_dataset(world=world, traj=traj, seed=4)


@pytest.fixture(scope="session")
def base_config():
    return PipelineConfig(extrinsics_q_IL=tuple(DEFAULT_EXTRINSICS.q_IL),
                          extrinsics_p_IL=tuple(DEFAULT_EXTRINSICS.p_IL))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
