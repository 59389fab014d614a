"""
camera.py
=========
포즈 파라미터화, 회전 행렬 구성, 특징맵 격자로의 원근 투영 및 가시성 판정 모듈.

주요 기능:
- Pose / CameraIntrinsics / ProjectedMesh 타입
- rotation_from_pose: R = R_inplane(θ)·R_elev(e)·R_azim(a)
- project: 핀홀 투영 + 격자 해상도 depth buffer 가시성 + 전경 마스크 + 최근접 정점 대응
- pose_grid / PoseGridSpec: 144개(12×4×3) 초기 포즈 격자와 포즈 bin 인덱싱
- pose_error: 측지 회전 오차 ‖log(R_predᵀ R_gt)‖_F / √2

규약: 카메라는 +z 방향을 바라보며 물체 중심은 (0, 0, distance) 에 놓인다.
u = 열(column), v = 행(row), 픽셀 중심은 정수 격자 좌표.
모든 함수는 입력에 대한 순수 함수이므로 병렬 호출에 안전하다.
"""

import itertools
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from core.mesh import NeuralMeshModel
from utils.errors import InvalidArgumentError

TWO_PI = 2.0 * math.pi
DEFAULT_ELEVATION_BAND = (-math.pi / 18.0, math.pi / 3.0)
DEFAULT_THETA_BAND = (-math.pi / 6.0, math.pi / 6.0)
_ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    azimuth: float
    elevation: float
    theta: float
    distance: float

    def validate(self) -> None:
        values = (self.azimuth, self.elevation, self.theta, self.distance)
        if not all(math.isfinite(x) for x in values):
            raise InvalidArgumentError(f"pose has non-finite entries: {self}")
        if self.distance <= 0:
            raise InvalidArgumentError(f"pose distance must be > 0, got {self.distance}")

    def angles(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.theta])

    def with_angles(self, angles: np.ndarray) -> "Pose":
        return Pose(float(angles[0]), float(angles[1]), float(angles[2]), self.distance)

    def with_distance(self, distance: float) -> "Pose":
        return Pose(self.azimuth, self.elevation, self.theta, float(distance))

    def wrapped(self) -> "Pose":
        """azimuth → [0, 2π), theta → [−π, π)."""
        az = self.azimuth % TWO_PI
        th = (self.theta + math.pi) % TWO_PI - math.pi
        return Pose(az, self.elevation, th, self.distance)

    def to_dict(self) -> dict:
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "theta": self.theta,
            "distance": self.distance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(float(d["azimuth"]), float(d["elevation"]), float(d["theta"]), float(d["distance"]))


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    principal_point: Tuple[float, float]
    grid: Tuple[int, int]

    def validate(self) -> None:
        if not self.focal > 0:
            raise InvalidArgumentError(f"focal must be > 0, got {self.focal}")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise InvalidArgumentError(f"grid must be at least 1x1, got {self.grid}")

    @classmethod
    def centered(cls, focal: float, grid: Tuple[int, int]) -> "CameraIntrinsics":
        height, width = grid
        return cls(float(focal), ((width - 1) / 2.0, (height - 1) / 2.0), (int(height), int(width)))

    def upsampled(self, stride: int) -> "CameraIntrinsics":
        """특징 격자 카메라 → 입력 이미지 해상도 카메라 (stride×stride 평균 풀링의 역)."""
        offset = (stride - 1) / 2.0
        u0, v0 = self.principal_point
        return CameraIntrinsics(
            self.focal * stride,
            (u0 * stride + offset, v0 * stride + offset),
            (self.grid[0] * stride, self.grid[1] * stride),
        )

    def shifted(self, du: float, dv: float) -> "CameraIntrinsics":
        u0, v0 = self.principal_point
        return CameraIntrinsics(self.focal, (u0 + du, v0 + dv), self.grid)


@dataclass(frozen=True, eq=False)
class ProjectedMesh:
    """
    uv: (R, 2) 연속 픽셀 좌표, depth: (R,), visible: (R,) bool,
    fg_mask: (H, W) bool, correspondence: (H, W) int (배경은 -1),
    vertex_cell: (R,) 가시 정점이 떨어지는 격자 셀의 flat index (비가시 -1).
    """

    uv: np.ndarray
    depth: np.ndarray
    visible: np.ndarray
    fg_mask: np.ndarray
    correspondence: np.ndarray
    vertex_cell: np.ndarray

    @property
    def grid(self) -> Tuple[int, int]:
        return self.fg_mask.shape

    @property
    def foreground_count(self) -> int:
        return int(self.fg_mask.sum())

    @property
    def background_count(self) -> int:
        return int(self.fg_mask.size - self.foreground_count)

    @property
    def is_empty(self) -> bool:
        return self.foreground_count == 0


# ===== Rotation =====
def _rot_azimuth(a: float) -> Tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(a), math.sin(a)
    r = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    dr = np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
    return r, dr


def _rot_elevation(e: float) -> Tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(e), math.sin(e)
    r = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    dr = np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    return r, dr


def _rot_inplane(t: float) -> Tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(t), math.sin(t)
    r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    dr = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    return r, dr


def rotation_from_pose(pose: Pose) -> np.ndarray:
    """R = R_inplane(θ)·R_elev(e)·R_azim(a) (3×3, det +1)."""
    pose.validate()
    ra, _ = _rot_azimuth(pose.azimuth)
    re, _ = _rot_elevation(pose.elevation)
    rt, _ = _rot_inplane(pose.theta)
    return rt @ re @ ra


def rotation_derivatives(pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    """(R, dR). dR 는 (3, 3, 3): azimuth/elevation/theta 에 대한 편미분."""
    ra, dra = _rot_azimuth(pose.azimuth)
    re, dre = _rot_elevation(pose.elevation)
    rt, drt = _rot_inplane(pose.theta)
    rot = rt @ re @ ra
    d_rot = np.stack([rt @ re @ dra, rt @ dre @ ra, drt @ re @ ra])
    return rot, d_rot


def _check_rotation(r: np.ndarray, name: str) -> None:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise InvalidArgumentError(f"{name} must be a finite 3x3 matrix")
    if not np.allclose(r.T @ r, np.eye(3), atol=_ROTATION_TOL):
        raise InvalidArgumentError(f"{name} is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > _ROTATION_TOL:
        raise InvalidArgumentError(f"{name} has determinant != +1")


def pose_error(r_pred: np.ndarray, r_gt: np.ndarray) -> float:
    """측지 거리 Δ(R_pred, R_gt) ∈ [0, π] (trace 기반 axis-angle, arccos 인자 clamp)."""
    _check_rotation(r_pred, "R_pred")
    _check_rotation(r_gt, "R_gt")
    cos_angle = 0.5 * (np.trace(np.asarray(r_pred).T @ np.asarray(r_gt)) - 1.0)
    return float(math.acos(min(1.0, max(-1.0, cos_angle))))


# ===== Projection =====
def _transform(vertices: np.ndarray, rot: np.ndarray, distance: float) -> np.ndarray:
    cam = vertices @ rot.T
    cam[:, 2] += distance
    return cam


def camera_points(vertices: np.ndarray, pose: Pose) -> np.ndarray:
    """물체 좌표 → 카메라 좌표 (R·V + (0, 0, distance))."""
    pose.validate()
    return _transform(np.asarray(vertices, dtype=np.float64), rotation_from_pose(pose), pose.distance)


def pinhole(cam_points: np.ndarray, cam: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """카메라 좌표 → (uv, depth). 카메라 뒤의 점은 uv 가 NaN."""
    depth = cam_points[:, 2]
    in_front = depth > 1e-9
    safe = np.where(in_front, depth, 1.0)
    u0, v0 = cam.principal_point
    uv = np.stack(
        [cam.focal * cam_points[:, 0] / safe + u0, cam.focal * cam_points[:, 1] / safe + v0], axis=1
    )
    uv[~in_front] = np.nan
    return uv, depth


def _inside(uv: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    height, width = grid
    with np.errstate(invalid="ignore"):
        return (
            (uv[:, 0] >= 0) & (uv[:, 0] <= width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= height - 1)
        )


def depth_test(
    uv: np.ndarray, depth: np.ndarray, grid: Tuple[int, int], depth_tolerance: float
) -> Tuple[np.ndarray, np.ndarray]:
    """
    격자 해상도 depth buffer 로 가시성 판정.

    Returns
    -------
    visible : (R,) bool
    cell : (R,) int  가시 정점의 flat 셀 인덱스, 나머지 -1
    """
    height, width = grid
    inside = _inside(uv, grid) & (depth > 1e-9)
    cell = np.full(len(uv), -1, dtype=np.int64)
    if not inside.any():
        return inside, cell
    cols = np.rint(uv[inside, 0]).astype(np.int64)
    rows = np.rint(uv[inside, 1]).astype(np.int64)
    flat = rows * width + cols
    zbuf = np.full(height * width, np.inf)
    np.minimum.at(zbuf, flat, depth[inside])
    visible_inside = depth[inside] <= zbuf[flat] + depth_tolerance
    visible = np.zeros(len(uv), dtype=bool)
    visible[np.flatnonzero(inside)[visible_inside]] = True
    cell[np.flatnonzero(inside)] = flat
    cell[~visible] = -1
    return visible, cell


def rasterize(
    uv: np.ndarray, visible: np.ndarray, grid: Tuple[int, int], dilation: int = 1
) -> Tuple[np.ndarray, np.ndarray]:
    """
    가시 정점 투영으로 전경 마스크와 픽셀→정점 대응 생성.

    전경 = 가시 정점이 떨어진 셀을 3×3 구조요소로 `dilation` 회 팽창한 영역.
    대응 = 각 전경 픽셀 중심에서 이미지 공간 최근접 가시 정점.
    """
    height, width = grid
    fg = np.zeros(grid, dtype=bool)
    corr = np.full(grid, -1, dtype=np.int64)
    vis_idx = np.flatnonzero(visible)
    if len(vis_idx) == 0:
        return fg, corr
    pts = uv[vis_idx]
    fg[np.rint(pts[:, 1]).astype(np.int64), np.rint(pts[:, 0]).astype(np.int64)] = True
    if dilation > 0:
        fg = ndimage.binary_dilation(fg, structure=np.ones((3, 3), dtype=bool), iterations=dilation)
    rows, cols = np.nonzero(fg)
    _, nearest = cKDTree(pts).query(np.stack([cols, rows], axis=1).astype(np.float64))
    corr[rows, cols] = vis_idx[nearest]
    return fg, corr


def project(
    mesh: Union[NeuralMeshModel, np.ndarray],
    pose: Pose,
    cam: CameraIntrinsics,
    depth_tolerance: float = 0.25,
    dilation: int = 1,
) -> ProjectedMesh:
    """
    메쉬 정점을 핀홀 투영하고 가시성/전경/대응을 계산.

    물체 전체가 카메라 뒤에 있으면 에러 대신 빈 전경 결과를 반환한다.
    """
    pose.validate()
    cam.validate()
    vertices = mesh.vertices if isinstance(mesh, NeuralMeshModel) else np.asarray(mesh, float)
    rot = rotation_from_pose(pose)
    uv, depth = pinhole(_transform(vertices, rot, pose.distance), cam)
    visible, cell = depth_test(uv, depth, cam.grid, depth_tolerance)
    fg, corr = rasterize(uv, visible, cam.grid, dilation)
    return ProjectedMesh(uv=uv, depth=depth, visible=visible, fg_mask=fg, correspondence=corr, vertex_cell=cell)


def project_with_jacobian(
    vertices: np.ndarray, pose: Pose, cam: CameraIntrinsics, index: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    선택된 정점들의 투영 uv (N, 2) 와 각 각도에 대한 야코비안 (N, 2, 3).
    """
    pts = vertices if index is None else vertices[index]
    rot, d_rot = rotation_derivatives(pose)
    cam_pts = _transform(pts, rot, pose.distance)
    x, y, z = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
    u0, v0 = cam.principal_point
    f = cam.focal
    uv = np.stack([f * x / z + u0, f * y / z + v0], axis=1)
    # d(cam point)/d(angle_k) = dR_k · V
    d_cam = np.einsum("kij,nj->nki", d_rot, pts)  # (N, 3 angles, 3 coords)
    du = f * (d_cam[:, :, 0] / z[:, None] - x[:, None] * d_cam[:, :, 2] / z[:, None] ** 2)
    dv = f * (d_cam[:, :, 1] / z[:, None] - y[:, None] * d_cam[:, :, 2] / z[:, None] ** 2)
    return uv, np.stack([du, dv], axis=1)


# ===== Pose grid =====
@dataclass(frozen=True)
class PoseGridSpec:
    n_azimuth: int = 12
    n_elevation: int = 4
    n_theta: int = 3
    elevation_band: Tuple[float, float] = DEFAULT_ELEVATION_BAND
    theta_band: Tuple[float, float] = DEFAULT_THETA_BAND

    def validate(self) -> None:
        if min(self.n_azimuth, self.n_elevation, self.n_theta) < 1:
            raise InvalidArgumentError(
                f"pose grid counts must be >= 1, got "
                f"({self.n_azimuth}, {self.n_elevation}, {self.n_theta})"
            )

    @property
    def n_bins(self) -> int:
        return self.n_azimuth * self.n_elevation * self.n_theta

    def azimuths(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n_azimuth) / self.n_azimuth

    def elevations(self) -> np.ndarray:
        return _band_centers(self.elevation_band, self.n_elevation)

    def thetas(self) -> np.ndarray:
        return _band_centers(self.theta_band, self.n_theta)

    def poses(self, distance: float) -> List[Pose]:
        self.validate()
        return [
            Pose(float(a), float(e), float(t), float(distance))
            for a, e, t in itertools.product(self.azimuths(), self.elevations(), self.thetas())
        ]

    def bin_index(self, pose: Pose) -> int:
        """포즈가 속하는 bin (pose_grid 와 같은 순서의 flat 인덱스)."""
        ia = int(round((pose.azimuth % TWO_PI) / (TWO_PI / self.n_azimuth))) % self.n_azimuth
        ie = _band_bin(pose.elevation, self.elevation_band, self.n_elevation)
        it = _band_bin(pose.theta, self.theta_band, self.n_theta)
        return (ia * self.n_elevation + ie) * self.n_theta + it

    def bin_center(self, index: int, distance: float) -> Pose:
        it = index % self.n_theta
        ie = (index // self.n_theta) % self.n_elevation
        ia = index // (self.n_theta * self.n_elevation)
        return Pose(
            float(self.azimuths()[ia]), float(self.elevations()[ie]), float(self.thetas()[it]), float(distance)
        )


def _band_centers(band: Tuple[float, float], n: int) -> np.ndarray:
    lo, hi = band
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def _band_bin(value: float, band: Tuple[float, float], n: int) -> int:
    lo, hi = band
    if hi <= lo:
        return 0
    return int(min(n - 1, max(0, math.floor((value - lo) / (hi - lo) * n))))


def pose_grid(
    n_azimuth: int,
    n_elevation: int,
    n_theta: int,
    distance: float,
    elevation_band: Tuple[float, float] = DEFAULT_ELEVATION_BAND,
    theta_band: Tuple[float, float] = DEFAULT_THETA_BAND,
) -> List[Pose]:
    """방위각 [0, 2π) 균등 × 고도/면내회전 band 균등 분할의 데카르트 곱."""
    spec = PoseGridSpec(n_azimuth, n_elevation, n_theta, tuple(elevation_band), tuple(theta_band))
    return spec.poses(distance)
