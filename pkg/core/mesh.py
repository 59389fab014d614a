"""
mesh.py
=======
클래스별 Cuboid Neural Mesh(정점 + 정점별 neural texture)와 배경 모델 정의 모듈.

주요 기능:
- build_cuboid: 직육면체 표면에 거의 균일한 밀도로 정점 배치 (모서리/꼭짓점 중복 제거)
- init_textures: 단위 노름 랜덤 텍스처 초기화 (시드 고정 시 결정적)
- texture_class_mean: 클래스 텍스처 평균 μ(y)
- ModelBank: 클래스 메쉬 + 공유 배경 모델 + 공유 특징 추출기

ModelBank 는 추론 중에는 읽기 전용으로 공유되며, 학습 중 갱신은 단일 writer 가 담당한다.
"""

import logging
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import InvalidArgumentError, InvalidStateError

if TYPE_CHECKING:
    from features.extractor import FeatureExtractor

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_SURFACE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class NeuralMeshModel:
    """One object category: cuboid vertices (R, 3) and neural texture (R, c)."""

    class_id: int
    vertices: np.ndarray
    texture: np.ndarray
    cuboid_dims: Tuple[float, float, float]

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def dim(self) -> int:
        return int(self.texture.shape[1])

    def with_texture(self, texture: np.ndarray) -> "NeuralMeshModel":
        return replace(self, texture=np.asarray(texture, dtype=np.float64))

    def validate(self) -> None:
        if self.n_vertices == 0 or self.texture.shape[0] != self.n_vertices:
            raise InvalidStateError(
                f"class {self.class_id}: vertex count {self.n_vertices} "
                f"!= texture length {self.texture.shape[0]}"
            )
        if not np.all(np.isfinite(self.texture)):
            raise InvalidStateError(f"class {self.class_id}: non-finite texture entries")
        half = np.asarray(self.cuboid_dims, dtype=np.float64) / 2.0
        on_face = np.abs(np.abs(self.vertices) - half) <= _SURFACE_TOL
        if not np.all(on_face.any(axis=1)):
            raise InvalidStateError(f"class {self.class_id}: vertex off the cuboid surface")


@dataclass(frozen=True, eq=False)
class BackgroundModel:
    """Shared background Gaussian N(b, σ²I)."""

    mean: np.ndarray
    sigma: float = 1.0

    def validate(self, dim: int) -> None:
        if self.mean.shape != (dim,):
            raise InvalidStateError(f"background dim {self.mean.shape} != texture dim {dim}")
        if not self.sigma > 0:
            raise InvalidStateError(f"background sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True, eq=False)
class ModelBank:
    models: List[NeuralMeshModel]
    background: BackgroundModel
    extractor: "FeatureExtractor"
    format_version: int = FORMAT_VERSION

    @property
    def n_classes(self) -> int:
        return len(self.models)

    @property
    def dim(self) -> int:
        return self.models[0].dim

    def validate(self) -> None:
        ids = [m.class_id for m in self.models]
        if ids != list(range(len(ids))):
            raise InvalidStateError(f"class ids must be contiguous 0..Y-1, got {ids}")
        dims = {m.dim for m in self.models}
        if len(dims) != 1:
            raise InvalidStateError(f"textures disagree on feature dimension: {sorted(dims)}")
        for m in self.models:
            m.validate()
        self.background.validate(self.dim)
        if self.extractor.out_dim != self.dim:
            raise InvalidStateError(
                f"extractor output dim {self.extractor.out_dim} != texture dim {self.dim}"
            )

    def with_models(self, models: Sequence[NeuralMeshModel]) -> "ModelBank":
        return replace(self, models=list(models))


def _surface_count(n: np.ndarray) -> int:
    nx, ny, nz = (int(k) for k in n)
    return (nx + 1) * (ny + 1) * (nz + 1) - (nx - 1) * (ny - 1) * (nz - 1)


def _segments(dims: np.ndarray, target: int) -> np.ndarray:
    area = 2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2])
    pitch = np.sqrt(area / target)
    best, best_err = None, None
    # 격자 간격 스케일을 훑어 목표 정점 수에 가장 가까운 분할을 선택 (결정적)
    for scale in np.linspace(0.7, 1.4, 141):
        n = np.maximum(1, np.rint(dims / (pitch * scale))).astype(np.int64)
        err = abs(_surface_count(n) - target)
        if best_err is None or err < best_err:
            best, best_err = n, err
    return best


def build_cuboid(dims: Sequence[float], target_vertex_count: int) -> np.ndarray:
    """
    직육면체 6개 면 위에 정점 배치.

    Parameters
    ----------
    dims : sequence of 3 float
        (width, height, depth) 양수 크기.
    target_vertex_count : int
        목표 정점 수 (>= 8).

    Returns
    -------
    np.ndarray
        (R, 3) 정점 좌표. 꼭짓점 8개 포함, 면별 정점 수는 면적에 비례.
    """
    dims_arr = np.asarray(dims, dtype=np.float64)
    if dims_arr.shape != (3,) or not np.all(dims_arr > 0):
        raise InvalidArgumentError(f"cuboid extents must be 3 positive values, got {dims}")
    if target_vertex_count < 8:
        raise InvalidArgumentError(f"target_vertex_count must be >= 8, got {target_vertex_count}")

    n = _segments(dims_arr, target_vertex_count)
    axes = [np.linspace(-d / 2.0, d / 2.0, k + 1) for d, k in zip(dims_arr, n)]
    idx = np.stack(
        np.meshgrid(*[np.arange(k + 1) for k in n], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    on_surface = np.any((idx == 0) | (idx == n[None, :]), axis=1)
    idx = idx[on_surface]
    vertices = np.stack([axes[a][idx[:, a]] for a in range(3)], axis=1)
    logger.debug(f"Cuboid {tuple(dims_arr)}: 분할={tuple(n)}, 정점 {len(vertices)}개")
    return vertices


def init_textures(vertex_count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """단위 노름 가우시안 랜덤 텍스처 (vertex_count, dim)."""
    if vertex_count <= 0 or dim <= 0:
        raise InvalidArgumentError(f"vertex_count and dim must be > 0, got ({vertex_count}, {dim})")
    raw = rng.standard_normal((vertex_count, dim))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def texture_class_mean(model: NeuralMeshModel) -> np.ndarray:
    """μ(y): 클래스 neural texture 의 산술 평균."""
    if model.texture.shape[0] == 0:
        raise InvalidStateError(f"class {model.class_id}: empty texture")
    return model.texture.mean(axis=0)


def build_model(
    class_id: int,
    dims: Sequence[float],
    target_vertex_count: int,
    dim: int,
    rng: np.random.Generator,
) -> NeuralMeshModel:
    vertices = build_cuboid(dims, target_vertex_count)
    texture = init_textures(len(vertices), dim, rng)
    model = NeuralMeshModel(
        class_id=class_id,
        vertices=vertices,
        texture=texture,
        cuboid_dims=tuple(float(d) for d in dims),
    )
    model.validate()
    return model


def build_bank(
    class_dims: Sequence[Sequence[float]],
    target_vertex_count: int,
    extractor: "FeatureExtractor",
    rng: np.random.Generator,
    background_mean: Optional[np.ndarray] = None,
) -> ModelBank:
    """클래스별 메쉬를 만들고 배경 모델/추출기와 묶어 ModelBank 생성."""
    dim = extractor.out_dim
    models = [
        build_model(y, dims, target_vertex_count, dim, rng) for y, dims in enumerate(class_dims)
    ]
    mean = np.zeros(dim) if background_mean is None else np.asarray(background_mean, float)
    bank = ModelBank(models=models, background=BackgroundModel(mean=mean, sigma=1.0), extractor=extractor)
    bank.validate()
    logger.info(
        f"ModelBank 생성: 클래스 {bank.n_classes}개, 정점 "
        f"{[m.n_vertices for m in models]}, 특징 차원 {dim}"
    )
    return bank


def dims_from_vertices(vertices: np.ndarray) -> Tuple[float, float, float]:
    """정점 집합에서 cuboid 크기 복원 (꼭짓점이 항상 포함되므로 2·max|V|)."""
    return tuple(float(2.0 * v) for v in np.abs(vertices).max(axis=0))
