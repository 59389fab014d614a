# 📜 features/extractor.py
# 🧠 [특징 추출기 ζ] 입력 외관 격자(H'×W'×c_in) → 1/stride 해상도 특징맵(H×W×c)
#
# 처리 순서: (선택) 3×3 박스 필터(uniform_filter, nearest) → stride×stride 평균 풀링 → 픽셀별 affine(W, bias)
#            → (선택) 픽셀별 L2 정규화
# 학습 시 손실 기울기는 backward() 로 정규화 단계까지 역전파합니다.

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from core.likelihood import FeatureMap
from features.utils import safe_normalize
from utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class FeatureExtractor:
    """
    Pointwise affine feature map shared by every class (ζ).

    smoothing=True 이면 풀링 전에 3×3 박스 필터(scipy.ndimage.uniform_filter, mode="nearest",
    채널 축은 그대로)를 적용합니다.
    """

    weight: np.ndarray  # (c_in, c)
    bias: np.ndarray  # (c,)
    stride: int = 8
    smoothing: bool = False
    normalize: bool = True

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[1])

    def validate(self) -> None:
        if self.stride < 1:
            raise InvalidArgumentError(f"stride must be >= 1, got {self.stride}")
        if self.bias.shape != (self.out_dim,):
            raise InvalidArgumentError(f"bias shape {self.bias.shape} != ({self.out_dim},)")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise InvalidArgumentError("extractor weights must be finite")

    def with_params(self, weight: np.ndarray, bias: np.ndarray) -> "FeatureExtractor":
        return replace(self, weight=np.asarray(weight, float), bias=np.asarray(bias, float))

    # ===== forward =====
    def pool(self, image: np.ndarray) -> np.ndarray:
        """(선택) 3×3 박스 필터(uniform_filter, 가장자리 복제) 후 stride×stride 평균 풀링한 P (H, W, c_in)."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != self.in_dim:
            raise InvalidArgumentError(
                f"image must be H'×W'×{self.in_dim}, got shape {image.shape}"
            )
        h_in, w_in, c_in = image.shape
        s = self.stride
        if h_in % s or w_in % s:
            raise InvalidArgumentError(f"image size {h_in}×{w_in} is not divisible by stride {s}")
        if self.smoothing:
            image = ndimage.uniform_filter(image, size=(3, 3, 1), mode="nearest")
        return image.reshape(h_in // s, s, w_in // s, s, c_in).mean(axis=(1, 3))

    def forward(self, pooled: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(z, f): affine 출력과 (정규화된) 최종 특징."""
        z = pooled @ self.weight + self.bias
        f = safe_normalize(z) if self.normalize else z
        return z, f

    def __call__(self, image: np.ndarray) -> FeatureMap:
        _, f = self.forward(self.pool(image))
        return FeatureMap(grid=f)

    # ===== backward =====
    def backward(
        self, pooled: np.ndarray, z: np.ndarray, d_f: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        dL/df → (dL/dW, dL/dbias).

        정규화 사용 시 dL/dz = (I − f fᵀ)/‖z‖ · dL/df.
        """
        if self.normalize:
            norm = np.linalg.norm(z, axis=-1, keepdims=True)
            f = np.where(norm < _EPS, 0.0, z / np.maximum(norm, _EPS))
            radial = np.sum(f * d_f, axis=-1, keepdims=True)
            d_z = np.where(norm < _EPS, 0.0, (d_f - f * radial) / np.maximum(norm, _EPS))
        else:
            d_z = d_f
        c_in = pooled.shape[-1]
        d_w = pooled.reshape(-1, c_in).T @ d_z.reshape(-1, self.out_dim)
        d_b = d_z.reshape(-1, self.out_dim).sum(axis=0)
        return d_w, d_b


def identity_extractor(
    dim: int, stride: int = 8, smoothing: bool = False, normalize: bool = True
) -> FeatureExtractor:
    """c_in = c 항등 초기화 (W = I, bias = 0)."""
    return FeatureExtractor(
        weight=np.eye(dim), bias=np.zeros(dim), stride=stride, smoothing=smoothing, normalize=normalize
    )


def init_extractor(
    in_dim: int,
    out_dim: int,
    stride: int = 8,
    smoothing: bool = False,
    normalize: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> FeatureExtractor:
    """
    추출기 초기화. in_dim == out_dim 이면 항등, 아니면 1/√c_in 스케일 가우시안.
    """
    if in_dim < 1 or out_dim < 1:
        raise InvalidArgumentError(f"extractor dims must be >= 1, got ({in_dim}, {out_dim})")
    if in_dim == out_dim:
        extractor = identity_extractor(in_dim, stride, smoothing, normalize)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        weight = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim)
        extractor = FeatureExtractor(
            weight=weight, bias=np.zeros(out_dim), stride=stride, smoothing=smoothing, normalize=normalize
        )
    extractor.validate()
    logger.debug(f"특징 추출기 초기화: c_in={in_dim}, c={out_dim}, stride={stride}")
    return extractor


def extract(image: np.ndarray, extractor: FeatureExtractor) -> FeatureMap:
    """
    ζ(I) 계산.

    Parameters
    ----------
    image : np.ndarray
        (H', W', c_in) 외관 격자. H', W' 는 stride 의 배수여야 함.
    extractor : FeatureExtractor

    Returns
    -------
    FeatureMap
        (H'/stride, W'/stride, c) 특징맵.
    """
    return extractor(image)
