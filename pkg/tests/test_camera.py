"""
test_camera.py
==============
포즈 → 회전, 투영, 가시성, 포즈 격자, 포즈 오차 검증.

동작:
1. 임의 각도의 회전 행렬이 직교/행렬식 +1 인지 (hypothesis)
2. pose_error 의 대칭성, 범위, 알려진 값
3. project 결과의 전경/대응 불변식과 야코비안의 유한차분 일치
4. 144개 기본 포즈 격자와 bin 인덱싱
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.camera import (
    CameraIntrinsics,
    Pose,
    PoseGridSpec,
    camera_points,
    pinhole,
    pose_error,
    pose_grid,
    project,
    project_with_jacobian,
    rotation_from_pose,
)
from utils.errors import InvalidArgumentError

angle = st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(angle, angle, angle)
def test_rotation_is_proper(a, e, t):
    r = rotation_from_pose(Pose(a, e, t, 5.0))
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-10)
    assert np.linalg.det(r) == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(angle, angle, angle, angle, angle, angle)
def test_pose_error_symmetric_and_bounded(a1, e1, t1, a2, e2, t2):
    r1 = rotation_from_pose(Pose(a1, e1, t1, 5.0))
    r2 = rotation_from_pose(Pose(a2, e2, t2, 5.0))
    d = pose_error(r1, r2)
    assert 0.0 <= d <= math.pi
    assert d == pytest.approx(pose_error(r2, r1), abs=1e-6)
    assert pose_error(r1, r1) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("phi", [0.1, math.pi / 6, 1.0, 3.0])
def test_pose_error_of_inplane_rotation_is_its_angle(phi):
    r0 = rotation_from_pose(Pose(0.3, 0.2, 0.0, 5.0))
    r1 = rotation_from_pose(Pose(0.3, 0.2, phi, 5.0))
    assert pose_error(r0, r1) == pytest.approx(phi, abs=1e-9)


def test_pose_error_rejects_non_rotation():
    with pytest.raises(InvalidArgumentError):
        pose_error(np.eye(3) * 2.0, np.eye(3))
    with pytest.raises(InvalidArgumentError):
        pose_error(np.diag([1.0, 1.0, -1.0]), np.eye(3))


def test_pose_rejects_bad_values():
    with pytest.raises(InvalidArgumentError):
        rotation_from_pose(Pose(float("nan"), 0.0, 0.0, 5.0))
    with pytest.raises(InvalidArgumentError):
        Pose(0.0, 0.0, 0.0, 0.0).validate()


def test_wrapped_pose_keeps_rotation():
    pose = Pose(7.0, 0.2, 4.0, 5.0)
    wrapped = pose.wrapped()
    assert 0.0 <= wrapped.azimuth < 2 * math.pi
    assert -math.pi <= wrapped.theta < math.pi
    assert np.allclose(rotation_from_pose(pose), rotation_from_pose(wrapped))


def test_points_behind_camera_have_no_projection(lattice_cam):
    pts = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -1.0]])
    uv, depth = pinhole(pts, lattice_cam)
    assert np.all(np.isfinite(uv[0]))
    assert np.all(np.isnan(uv[1]))
    assert depth[1] < 0


def test_projection_invariants(tiny_bank, lattice_cam, gt_pose):
    model = tiny_bank.models[0]
    proj = project(model, gt_pose, lattice_cam)
    assert proj.grid == lattice_cam.grid
    assert 0 < proj.foreground_count < proj.fg_mask.size
    assert proj.foreground_count + proj.background_count == proj.fg_mask.size
    # 배경은 -1, 전경은 가시 정점으로만 대응
    assert np.all(proj.correspondence[~proj.fg_mask] == -1)
    assert np.all(proj.visible[proj.correspondence[proj.fg_mask]])
    # 뒷면 정점은 가려짐
    assert 0 < proj.visible.sum() < model.n_vertices
    cells = proj.vertex_cell[proj.visible]
    assert np.all(cells >= 0)
    assert np.all(proj.fg_mask.reshape(-1)[cells])
    assert np.all(proj.vertex_cell[~proj.visible] == -1)


def test_nearer_face_is_visible(lattice_cam):
    # 정면 자세에서 카메라 쪽 면(z = -0.5) 중앙 정점만 보이고 반대 면은 가려짐
    vertices = np.array([[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]])
    proj = project(vertices, Pose(0.0, 0.0, 0.0, 5.0), lattice_cam)
    assert proj.visible.tolist() == [True, False]


def test_image_camera_matches_lattice_scaling(tiny_settings, tiny_bank, gt_pose):
    lattice = tiny_settings.lattice_camera()
    image = tiny_settings.image_camera()
    s = tiny_settings.stride
    pts = camera_points(tiny_bank.models[1].vertices, gt_pose)
    uv_lat, _ = pinhole(pts, lattice)
    uv_img, _ = pinhole(pts, image)
    # 입력 픽셀 k 는 특징 셀 (k − (s−1)/2)/s 에 대응
    assert np.allclose((uv_img - (s - 1) / 2.0) / s, uv_lat)


def test_jacobian_matches_finite_differences(tiny_bank, lattice_cam):
    vertices = tiny_bank.models[0].vertices[:20]
    pose = Pose(0.7, 0.3, -0.2, 5.0)
    uv, jac = project_with_jacobian(vertices, pose, lattice_cam)
    eps = 1e-6
    for k in range(3):
        step = np.zeros(3)
        step[k] = eps
        up, _ = project_with_jacobian(vertices, pose.with_angles(pose.angles() + step), lattice_cam)
        down, _ = project_with_jacobian(vertices, pose.with_angles(pose.angles() - step), lattice_cam)
        assert np.allclose((up - down) / (2 * eps), jac[:, :, k], atol=1e-5)
    ref, _ = pinhole(camera_points(vertices, pose), lattice_cam)
    assert np.allclose(uv, ref)


def test_default_pose_grid():
    poses = pose_grid(12, 4, 3, 5.0)
    assert len(poses) == 144
    azimuths = sorted({round(p.azimuth, 9) for p in poses})
    assert azimuths == pytest.approx([2 * math.pi * k / 12 for k in range(12)])
    spec = PoseGridSpec()
    lo, hi = spec.elevation_band
    assert all(lo < p.elevation < hi for p in poses)
    assert all(abs(p.theta) < math.pi / 6 for p in poses)


def test_bin_index_inverts_bin_center():
    spec = PoseGridSpec()
    for i in range(spec.n_bins):
        assert spec.bin_index(spec.bin_center(i, 5.0)) == i
    assert [spec.bin_index(p) for p in spec.poses(5.0)] == list(range(spec.n_bins))


def test_grid_counts_must_be_positive():
    with pytest.raises(InvalidArgumentError):
        PoseGridSpec(0, 4, 3).poses(5.0)
    with pytest.raises(InvalidArgumentError):
        CameraIntrinsics(0.0, (0.0, 0.0), (4, 4)).validate()
