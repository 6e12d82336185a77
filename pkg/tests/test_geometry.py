import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anchor_policy.errors import BehindCamera, DegenerateRotation6D, GripperOutOfRange, NonPositiveDepth
from anchor_policy.geometry import (
    EXECUTED_DIM,
    GRIPPER_INDICES,
    LEFT_POS,
    STATE_DIM,
    axis_angle,
    decode_state,
    fk,
    fk_consistency_error,
    is_rotation,
    look_at_camera,
    make_dual_arm,
    project_pixel,
    rot_from_6d,
    rot_to_6d,
    state_from_joints,
    world_to_pixel,
)

ROBOT = make_dual_arm()

angles = st.floats(min_value=-np.pi, max_value=np.pi, allow_nan=False)
unit = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)


def test_state_layout_constants() -> None:
    assert STATE_DIM == 32
    assert EXECUTED_DIM == 14
    assert GRIPPER_INDICES == (6, 13)


@given(ax=unit, ay=unit, az=unit, angle=angles)
def test_rot6d_round_trip(ax: float, ay: float, az: float, angle: float) -> None:
    axis = np.array([ax, ay, az])
    if np.linalg.norm(axis) < 1e-3:
        axis = np.array([1.0, 0.0, 0.0])
    R = axis_angle(axis / np.linalg.norm(axis), angle)
    assert is_rotation(R)
    assert np.allclose(rot_from_6d(rot_to_6d(R)), R, atol=1e-9)


def test_rot6d_is_first_two_columns() -> None:
    R = axis_angle((0, 0, 1), np.pi / 2)
    assert np.allclose(rot_to_6d(R), np.concatenate([R[:, 0], R[:, 1]]))


def test_rot_from_6d_orthonormalizes() -> None:
    R = rot_from_6d([2.0, 0.0, 0.0, 1.0, 3.0, 0.0])
    assert is_rotation(R)
    assert np.allclose(R[:, 0], [1.0, 0.0, 0.0])
    assert np.allclose(R[:, 1], [0.0, 1.0, 0.0])


@pytest.mark.parametrize(
    "r6",
    [
        [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0, 2.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    ],
)
def test_degenerate_6d_raises(r6: list[float]) -> None:
    with pytest.raises(DegenerateRotation6D):
        rot_from_6d(r6)


def _camera():
    return look_at_camera((1.0, 0.5, 0.8), (0.3, 0.0, 0.0), width=64, height=48, focal_px=60.0)


@given(
    u=st.floats(min_value=0.0, max_value=63.0),
    v=st.floats(min_value=0.0, max_value=47.0),
    d=st.floats(min_value=0.05, max_value=5.0),
)
def test_projection_round_trip(u: float, v: float, d: float) -> None:
    cam = _camera()
    p = project_pixel(cam, u, v, d)
    u2, v2, d2 = world_to_pixel(cam, p)
    assert u2 == pytest.approx(u, abs=1e-6)
    assert v2 == pytest.approx(v, abs=1e-6)
    assert d2 == pytest.approx(d, rel=1e-9)


def test_principal_point_projects_along_the_optical_axis() -> None:
    cam = _camera()
    p = project_pixel(cam, cam.cx, cam.cy, 1.0)
    forward = np.array([0.3, 0.0, 0.0]) - np.array([1.0, 0.5, 0.8])
    forward /= np.linalg.norm(forward)
    assert np.allclose(p, np.array([1.0, 0.5, 0.8]) + forward)
    assert np.allclose(cam.center, [1.0, 0.5, 0.8])


def test_projection_errors() -> None:
    cam = _camera()
    with pytest.raises(NonPositiveDepth):
        project_pixel(cam, 10.0, 10.0, 0.0)
    with pytest.raises(BehindCamera):
        world_to_pixel(cam, cam.center - (np.array([0.3, 0.0, 0.0]) - cam.center))


@given(q=st.lists(angles, min_size=12, max_size=12), lg=st.floats(0.0, 1.0), rg=st.floats(0.0, 1.0))
def test_state_from_joints_is_fk_consistent(q: list[float], lg: float, rg: float) -> None:
    v = state_from_joints(ROBOT, np.array(q[:6]), lg, np.array(q[6:]), rg)
    assert v.shape == (STATE_DIM,)
    assert fk_consistency_error(ROBOT, v) < 1e-9
    assert np.allclose(v[LEFT_POS], fk(ROBOT.left, q[:6]).position)

    decoded = decode_state(v)
    assert np.allclose(decoded.left_q, q[:6])
    assert decoded.right_grip == pytest.approx(rg)


def test_fk_consistency_detects_tampering() -> None:
    v = state_from_joints(ROBOT, np.zeros(6), 1.0, np.zeros(6), 0.0)
    v[LEFT_POS] += 0.01
    assert fk_consistency_error(ROBOT, v) == pytest.approx(0.01)


@pytest.mark.parametrize("grip", [-0.1, 1.5])
def test_gripper_out_of_range(grip: float) -> None:
    with pytest.raises(GripperOutOfRange):
        state_from_joints(ROBOT, np.zeros(6), grip, np.zeros(6), 0.5)
