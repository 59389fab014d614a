"""
conftest.py
===========
테스트 공용 fixture: 작은 합성 설정, 작은 모델 뱅크, 렌더링된 특징맵.

모든 fixture 는 시드를 고정하므로 테스트 간 결과가 같습니다.
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# 프로젝트 루트를 sys.path에 추가
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from core.camera import PoseGridSpec, Pose, project  # noqa: E402
from core.likelihood import render_feature_map  # noqa: E402
from core.mesh import build_bank  # noqa: E402
from core_pipeline.m1_synth import SynthSettings  # noqa: E402
from core_pipeline.m4_infer import OptimizerOptions  # noqa: E402
from features.extractor import identity_extractor  # noqa: E402

TINY_DIMS = ((2.0, 1.0, 1.0), (1.0, 1.6, 1.0))


@pytest.fixture
def tiny_settings() -> SynthSettings:
    """32×32×8 입력, stride 2 → 16×16 특징 격자."""
    return SynthSettings(
        image_size=(32, 32),
        channels=8,
        stride=2,
        class_dims=TINY_DIMS,
        target_vertices=150,
    )


@pytest.fixture
def lattice_cam(tiny_settings):
    return tiny_settings.lattice_camera()


@pytest.fixture
def tiny_bank(tiny_settings):
    extractor = identity_extractor(tiny_settings.channels, stride=tiny_settings.stride)
    return build_bank(TINY_DIMS, 150, extractor, np.random.default_rng(0))


@pytest.fixture
def small_grid() -> PoseGridSpec:
    return PoseGridSpec(n_azimuth=4, n_elevation=2, n_theta=1)


@pytest.fixture
def fast_opts() -> OptimizerOptions:
    return OptimizerOptions(iterations=10, refresh_every=5)


@pytest.fixture
def gt_pose(small_grid) -> Pose:
    """격자 위의 포즈 (격자 초기화가 정확히 맞출 수 있음)."""
    return small_grid.poses(5.0)[3]


@pytest.fixture
def rendered(tiny_bank, lattice_cam, gt_pose):
    """클래스 0 을 gt_pose 로 렌더링한 특징맵과 그 투영."""
    model = tiny_bank.models[0]
    proj = project(model, gt_pose, lattice_cam)
    return render_feature_map(proj, model.texture, tiny_bank.background), proj


@pytest.fixture
def twin_bank(tiny_bank):
    """두 클래스가 같은 메쉬/텍스처를 가지는 뱅크 (동점 검사용)."""
    m0 = tiny_bank.models[0]
    return tiny_bank.with_models([m0, replace(m0, class_id=1)])
