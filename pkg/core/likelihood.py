"""
likelihood.py
=============
포즈가 주어진 neural mesh 아래에서 특징맵의 음의 로그우도(NLL)를 계산하는 생성 모델 스코어링 모듈.

주요 기능:
- nll: 격자 형태의 정확한 NLL (전경은 C_r, 배경은 b 주변 단위분산 가우시안, 상수항 제외)
- vertex_sampled_nll: 가시 정점 위치에서 쌍선형 샘플링한 미분 가능한 대리 NLL
- pose_gradient: 투영 + 쌍선형 보간을 통한 (azimuth, elevation, theta) 해석적 기울기
- match_score: 전경 코사인 일치도 (1 + cos)/2 평균, [0, 1]
- render_feature_map: 포즈된 메쉬로 특징맵 렌더링 (합성 검증용)

가시성/전경 마스크는 기울기 계산 중 고정(frozen)된다. 배경 항은 포즈 기울기에서 제외된다.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from core.camera import (
    CameraIntrinsics,
    Pose,
    ProjectedMesh,
    camera_points,
    pinhole,
    project,
    project_with_jacobian,
)
from core.mesh import BackgroundModel, NeuralMeshModel
from features.utils import bilinear_sample, bilinear_sample_with_grad, safe_cosine
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

SOURCE_EXTRACTED = "extracted"
SOURCE_RENDERED = "rendered"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """ζ(I) = F ∈ R^{H×W×c}, 출처 태그(extracted / rendered) 포함."""

    grid: np.ndarray
    source: str = SOURCE_EXTRACTED

    def __post_init__(self):
        if self.grid.ndim != 3:
            raise InvalidArgumentError(f"feature map must be H×W×c, got shape {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise InvalidArgumentError("feature map has non-finite entries")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape[:2]

    @property
    def dim(self) -> int:
        return int(self.grid.shape[2])


@dataclass(frozen=True)
class ReconstructionReport:
    nll: float
    foreground_count: int
    background_count: int
    score: float


def _bg_mean(bg: Union[BackgroundModel, np.ndarray]) -> np.ndarray:
    return bg.mean if isinstance(bg, BackgroundModel) else np.asarray(bg, dtype=np.float64)


def _check_dims(F: FeatureMap, proj: ProjectedMesh, texture: np.ndarray, b: np.ndarray) -> None:
    if F.shape != proj.grid:
        raise InvalidArgumentError(f"feature lattice {F.shape} != projection lattice {proj.grid}")
    if texture.ndim != 2 or texture.shape[1] != F.dim:
        raise InvalidArgumentError(f"texture dim {texture.shape} does not match feature dim {F.dim}")
    if b.shape != (F.dim,):
        raise InvalidArgumentError(f"background dim {b.shape} does not match feature dim {F.dim}")


def _background_term(F: FeatureMap, fg_mask: np.ndarray, b: np.ndarray) -> float:
    diff = F.grid[~fg_mask] - b
    return 0.5 * float(np.sum(diff * diff))


def nll(
    F: FeatureMap,
    proj: ProjectedMesh,
    texture: np.ndarray,
    bg: Union[BackgroundModel, np.ndarray],
) -> float:
    """
    ½ Σ_{i∈FG} ‖f_i − C_{r(i)}‖² + ½ Σ_{i∈BG} ‖f_i − b‖².

    Parameters
    ----------
    F : FeatureMap
        관측 특징맵.
    proj : ProjectedMesh
        같은 격자에서 계산된 투영 결과.
    texture : np.ndarray
        (R, c) neural texture.
    bg : BackgroundModel or np.ndarray
        배경 평균 b.

    Returns
    -------
    float
        음의 로그우도 (>= 0).
    """
    b = _bg_mean(bg)
    _check_dims(F, proj, texture, b)
    fg = proj.fg_mask
    diff = F.grid[fg] - texture[proj.correspondence[fg]]
    return 0.5 * float(np.sum(diff * diff)) + _background_term(F, fg, b)


def match_score(F: FeatureMap, proj: ProjectedMesh, texture: np.ndarray) -> float:
    """전경 픽셀의 (1 + cos(f_i, C_{r(i)}))/2 평균. 전경이 비면 0."""
    fg = proj.fg_mask
    if not fg.any():
        return 0.0
    cos = safe_cosine(F.grid[fg], texture[proj.correspondence[fg]])
    return float(np.mean(0.5 * (1.0 + cos)))


def reconstruction_report(
    F: FeatureMap,
    proj: ProjectedMesh,
    texture: np.ndarray,
    bg: Union[BackgroundModel, np.ndarray],
) -> ReconstructionReport:
    return ReconstructionReport(
        nll=nll(F, proj, texture, bg),
        foreground_count=proj.foreground_count,
        background_count=proj.background_count,
        score=match_score(F, proj, texture),
    )


def _vertices(mesh: Union[NeuralMeshModel, np.ndarray]) -> np.ndarray:
    return mesh.vertices if isinstance(mesh, NeuralMeshModel) else np.asarray(mesh, dtype=np.float64)


def _texture(mesh: Union[NeuralMeshModel, np.ndarray], texture: Optional[np.ndarray]) -> np.ndarray:
    if texture is not None:
        return np.asarray(texture, dtype=np.float64)
    if isinstance(mesh, NeuralMeshModel):
        return mesh.texture
    raise InvalidArgumentError("texture is required when mesh is given as a vertex array")


def _frozen(
    mesh: Union[NeuralMeshModel, np.ndarray],
    pose: Pose,
    cam: CameraIntrinsics,
    frozen: Optional[ProjectedMesh],
) -> ProjectedMesh:
    return frozen if frozen is not None else project(_vertices(mesh), pose, cam)


def vertex_sampled_nll(
    F: FeatureMap,
    mesh: Union[NeuralMeshModel, np.ndarray],
    texture: Optional[np.ndarray],
    pose: Pose,
    cam: CameraIntrinsics,
    bg: Union[BackgroundModel, np.ndarray],
    frozen: Optional[ProjectedMesh] = None,
) -> float:
    """
    미분 가능한 대리 NLL.

    가시 정점 r 마다 현재 포즈의 연속 투영 위치에서 F 를 쌍선형 샘플링하여
    ½‖F(π_r) − C_r‖² 를 누적하고, 배경 항은 (고정된) 전경 마스크의 여집합에서 nll 과 같게 계산한다.
    frozen 이 주어지면 그 가시성/마스크를 그대로 사용한다.
    """
    tex = _texture(mesh, texture)
    b = _bg_mean(bg)
    proj = _frozen(mesh, pose, cam, frozen)
    _check_dims(F, proj, tex, b)
    idx = np.flatnonzero(proj.visible)
    total = _background_term(F, proj.fg_mask, b)
    if len(idx) == 0:
        return total
    uv, _ = pinhole(camera_points(_vertices(mesh)[idx], pose), cam)
    samples = bilinear_sample(F.grid, uv[:, 0], uv[:, 1])
    diff = samples - tex[idx]
    return total + 0.5 * float(np.sum(diff * diff))


def pose_gradient(
    F: FeatureMap,
    mesh: Union[NeuralMeshModel, np.ndarray],
    texture: Optional[np.ndarray],
    pose: Pose,
    cam: CameraIntrinsics,
    bg: Union[BackgroundModel, np.ndarray],
    frozen: Optional[ProjectedMesh] = None,
) -> np.ndarray:
    """
    vertex_sampled_nll 의 (∂/∂azimuth, ∂/∂elevation, ∂/∂theta).

    연쇄법칙: Σ_r (S_r − C_r)·(∂S/∂u ∂u/∂m + ∂S/∂v ∂v/∂m).
    가시성 경계에서는 현재 셀 기준 한쪽 미분이다.
    """
    tex = _texture(mesh, texture)
    b = _bg_mean(bg)
    proj = _frozen(mesh, pose, cam, frozen)
    _check_dims(F, proj, tex, b)
    idx = np.flatnonzero(proj.visible)
    if len(idx) == 0:
        return np.zeros(3)
    uv, jac = project_with_jacobian(_vertices(mesh), pose, cam, idx)
    samples, d_du, d_dv = bilinear_sample_with_grad(F.grid, uv[:, 0], uv[:, 1])
    residual = samples - tex[idx]
    g_u = np.einsum("nc,nc->n", residual, d_du)
    g_v = np.einsum("nc,nc->n", residual, d_dv)
    return g_u @ jac[:, 0, :] + g_v @ jac[:, 1, :]


def render_feature_map(
    proj: ProjectedMesh,
    texture: np.ndarray,
    bg: Union[BackgroundModel, np.ndarray],
) -> FeatureMap:
    """전경은 대응 정점의 텍스처, 배경은 b 로 채운 렌더링 특징맵."""
    b = _bg_mean(bg)
    height, width = proj.grid
    grid = np.broadcast_to(b, (height, width, len(b))).copy()
    fg = proj.fg_mask
    grid[fg] = texture[proj.correspondence[fg]]
    return FeatureMap(grid=grid, source=SOURCE_RENDERED)
