import numpy as np
import pytest

from lio_fusion.geometry import PoseSE3
from lio_fusion.lidar import RingedScan
from lio_fusion.validation import (
    check_fraction,
    check_points,
    check_pose,
    check_positive,
    check_quaternion,
    check_scan,
    check_times,
)


def test_check_points():
    assert check_points([[1, 2, 3]]).dtype == float
    for bad in ([[1, 2]], [[np.inf, 0, 0]], [1, 2, 3]):
        with pytest.raises(ValueError):
            check_points(bad)


def test_check_scan():
    s = check_scan(np.array([[1.0, 0, 0, 3]]), t=2.0)
    assert isinstance(s, RingedScan) and s.t == 2.0 and s.rings[0] == 3
    ringed = RingedScan(0.0, np.zeros((1, 3)), [0])
    assert check_scan(ringed) is ringed
    with pytest.raises(ValueError):
        check_scan(np.array([[1.0, 0, 0, -1]]))


def test_check_quaternion():
    np.testing.assert_allclose(check_quaternion([2, 0, 0, 0]), [1, 0, 0, 0])
    for bad in ([0, 0, 0, 0], [1, 0, 0], [np.nan, 0, 0, 1]):
        with pytest.raises(ValueError):
            check_quaternion(bad)


def test_check_pose_forms():
    T = PoseSE3.from_rotvec([0, 0, 0.3], [1, 2, 3])
    assert check_pose(None).allclose(PoseSE3.identity())
    assert check_pose(T) is T
    assert check_pose(T.as_matrix()).allclose(T, atol=1e-12)
    assert check_pose(np.r_[T.translation, T.rotation]).allclose(T, atol=1e-12)
    with pytest.raises(ValueError):
        check_pose(np.eye(3))
    with pytest.raises(ValueError):
        check_pose(np.full((4, 4), np.nan))


@pytest.mark.parametrize("value,integer,ok", [(1, True, True), (1.5, False, True), (0, False, False),
                                              (2.0, True, False), (True, True, False), (-1, False, False)])
def test_check_positive(value, integer, ok):
    if ok:
        assert check_positive(value, "x", integer) == value
    else:
        with pytest.raises(ValueError):
            check_positive(value, "x", integer)


@pytest.mark.parametrize("value,ok", [(0.5, True), (1.0, True), (0.0, False), (1.1, False)])
def test_check_fraction(value, ok):
    if ok:
        assert check_fraction(value, "f") == value
    else:
        with pytest.raises(ValueError):
            check_fraction(value, "f")


def test_check_times():
    np.testing.assert_array_equal(check_times([0, 1, 2]), [0.0, 1.0, 2.0])
    for bad in ([0, 0], [1, 0], [0, np.nan]):
        with pytest.raises(ValueError):
            check_times(bad)
