# 📜 features/utils.py
# 🛠️ [유틸리티] 특징맵/텍스처 모듈에서 공통으로 사용하는 도우미 함수들

from typing import Tuple

import numpy as np
from scipy import special

_EPS = 1e-12


def safe_normalize(data: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    마지막 축 기준으로 L2 정규화합니다.
    노름이 0에 가까운 벡터는 NaN 대신 0 벡터 그대로 반환합니다.

    Args:
        data (np.ndarray): (..., c) 배열

    Returns:
        np.ndarray: 단위 노름 벡터 배열
    """
    norms = np.linalg.norm(data, axis=axis, keepdims=True)
    safe = np.where(norms < _EPS, 1.0, norms)
    return np.where(norms < _EPS, 0.0, data / safe)


def safe_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    행(row) 단위 코사인 유사도. 어느 한쪽이 0 벡터이면 0을 반환합니다.

    Args:
        a, b (np.ndarray): (N, c) 배열

    Returns:
        np.ndarray: (N,) 코사인 값
    """
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dots = np.einsum("ij,ij->i", a, b)
    out = np.zeros_like(dots)
    ok = denom > _EPS
    out[ok] = dots[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def _bilinear_corners(
    u: np.ndarray, v: np.ndarray, height: int, width: int
) -> Tuple[np.ndarray, ...]:
    # x0 <= W-2 so that the right/bottom border keeps a valid upper neighbour
    x0 = np.clip(np.floor(u), 0, max(width - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = u - x0
    wy = v - y0
    return x0, x1, y0, y1, wx, wy


def bilinear_sample(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """
    (H, W, c) 격자를 연속 좌표 (u=열, v=행)에서 쌍선형 보간합니다.

    Returns:
        np.ndarray: (N, c) 샘플
    """
    height, width = grid.shape[:2]
    x0, x1, y0, y1, wx, wy = _bilinear_corners(u, v, height, width)
    wx = wx[:, None]
    wy = wy[:, None]
    return (
        (1 - wx) * (1 - wy) * grid[y0, x0]
        + wx * (1 - wy) * grid[y0, x1]
        + (1 - wx) * wy * grid[y1, x0]
        + wx * wy * grid[y1, x1]
    )


def bilinear_sample_with_grad(
    grid: np.ndarray, u: np.ndarray, v: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    쌍선형 샘플과 좌표에 대한 편미분 (dS/du, dS/dv)을 함께 반환합니다.
    격자점(정수 좌표)에서는 한쪽 미분(오른쪽 셀 기준)이 됩니다.
    """
    height, width = grid.shape[:2]
    x0, x1, y0, y1, wx, wy = _bilinear_corners(u, v, height, width)
    f00 = grid[y0, x0]
    f01 = grid[y0, x1]
    f10 = grid[y1, x0]
    f11 = grid[y1, x1]
    wx = wx[:, None]
    wy = wy[:, None]
    sample = (1 - wx) * (1 - wy) * f00 + wx * (1 - wy) * f01 + (1 - wx) * wy * f10 + wx * wy * f11
    d_du = (1 - wy) * (f01 - f00) + wy * (f11 - f10)
    d_dv = (1 - wx) * (f10 - f00) + wx * (f11 - f01)
    return sample, d_du, d_dv


def calibrated_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """
    온도 스케일링된 softmax (마지막 축). scipy.special 로 수치 안정성 확보.

    Args:
        logits (np.ndarray): (..., K) 로짓
        temperature (float): > 0

    Returns:
        np.ndarray: 합이 1인 확률
    """
    return special.softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=-1)
