"""
test_features.py
================
특징 추출기 ζ 와 특징 유틸리티 검증.

동작:
1. 64×64 입력, stride 8 → 8×8 특징맵
2. 항등 추출기에 상수 이미지를 넣으면 모든 픽셀이 같은 (정규화된) 벡터
3. 정규화를 끄면 출력이 stride×stride 블록 평균과 같은지 (직접 계산한 값과 비교)
4. 3×3 박스 스무딩은 출력을 바꾸며, 가장자리 복제 패딩의 3×3 평균과 같은지
5. 잘못된 입력 크기/채널은 InvalidArgumentError
"""

import numpy as np
import pytest

from core.likelihood import FeatureMap
from features.extractor import extract, identity_extractor, init_extractor
from features.utils import calibrated_softmax, safe_normalize
from utils.errors import InvalidArgumentError


def _block_mean_oracle(image, stride):
    h, w, c = image.shape
    out = np.zeros((h // stride, w // stride, c))
    for i in range(h // stride):
        for j in range(w // stride):
            block = image[i * stride : (i + 1) * stride, j * stride : (j + 1) * stride]
            out[i, j] = block.reshape(-1, c).mean(axis=0)
    return out


def _box3_oracle(image):
    padded = np.pad(image, ((1, 1), (1, 1), (0, 0)), mode="edge")
    h, w, _ = image.shape
    out = np.zeros_like(image)
    for di in range(3):
        for dj in range(3):
            out += padded[di : di + h, dj : dj + w]
    return out / 9.0


def test_output_lattice_is_one_eighth():
    image = np.random.default_rng(0).normal(size=(64, 64, 16))
    extractor = init_extractor(16, 32, stride=8, rng=np.random.default_rng(1))
    F = extract(image, extractor)
    assert isinstance(F, FeatureMap)
    assert F.grid.shape == (8, 8, 32)
    assert np.allclose(np.linalg.norm(F.grid, axis=-1), 1.0)


def test_constant_image_gives_constant_features():
    value = np.array([0.5, -1.0, 2.0, 0.0])
    image = np.broadcast_to(value, (16, 16, 4)).copy()
    raw = identity_extractor(4, stride=4, normalize=False)(image)
    assert np.allclose(raw.grid, value)
    unit = identity_extractor(4, stride=4)(image)
    assert np.allclose(unit.grid, value / np.linalg.norm(value))


def test_pooling_matches_block_mean():
    image = np.random.default_rng(2).normal(size=(24, 16, 3))
    extractor = identity_extractor(3, stride=8, normalize=False)
    assert np.allclose(extractor(image).grid, _block_mean_oracle(image, 8), atol=1e-12)

    affine = extractor.with_params(np.random.default_rng(3).normal(size=(3, 5)), np.arange(5.0))
    expected = _block_mean_oracle(image, 8) @ affine.weight + affine.bias
    assert np.allclose(affine(image).grid, expected, atol=1e-12)


def test_box_smoothing_changes_output():
    image = np.random.default_rng(4).normal(size=(16, 16, 2))
    plain = identity_extractor(2, stride=4, normalize=False)
    smooth = identity_extractor(2, stride=4, smoothing=True, normalize=False)
    assert not np.allclose(plain(image).grid, smooth(image).grid)
    assert np.allclose(smooth.pool(image), _block_mean_oracle(_box3_oracle(image), 4), atol=1e-12)
    # 상수 이미지는 스무딩해도 그대로
    flat = np.ones((16, 16, 2))
    assert np.allclose(smooth(flat).grid, plain(flat).grid)


def test_extractor_rejects_bad_images():
    extractor = identity_extractor(3, stride=8)
    with pytest.raises(InvalidArgumentError):
        extractor(np.zeros((20, 16, 3)))
    with pytest.raises(InvalidArgumentError):
        extractor(np.zeros((16, 16, 4)))
    with pytest.raises(InvalidArgumentError):
        init_extractor(0, 4)


def test_safe_normalize_keeps_zero_vectors():
    data = np.array([[3.0, 4.0], [0.0, 0.0]])
    out = safe_normalize(data)
    assert np.allclose(out[0], [0.6, 0.8])
    assert np.array_equal(out[1], [0.0, 0.0])


def test_calibrated_softmax_temperature():
    logits = np.array([[2.0, 0.0, -1.0]])
    sharp = calibrated_softmax(logits, 0.5)
    flat = calibrated_softmax(logits, 4.0)
    assert np.allclose(sharp.sum(axis=-1), 1.0) and np.allclose(flat.sum(axis=-1), 1.0)
    assert sharp.max() > calibrated_softmax(logits).max() > flat.max()
