"""
test_mesh.py
============
Cuboid neural mesh 와 모델 뱅크 검증.

동작:
1. build_cuboid 의 정점이 표면 위에 있고 꼭짓점 8개를 포함하며 중복이 없는지 확인
2. 텍스처 초기화의 단위 노름/결정성 확인
3. ModelBank.validate 가 잘못된 구성을 거부하는지 확인
"""

import itertools
from dataclasses import replace

import numpy as np
import pytest

from core.mesh import (
    BackgroundModel,
    build_cuboid,
    build_model,
    dims_from_vertices,
    init_textures,
    texture_class_mean,
)
from utils.errors import InvalidArgumentError, InvalidStateError


@pytest.mark.parametrize("dims", [(2.0, 1.0, 1.0), (1.0, 1.6, 1.0), (1.4, 1.4, 1.4)])
def test_cuboid_vertices_lie_on_surface(dims):
    vertices = build_cuboid(dims, 1100)
    half = np.asarray(dims) / 2.0
    on_face = np.isclose(np.abs(vertices), half).any(axis=1)
    assert on_face.all()
    assert np.all(np.abs(vertices) <= half + 1e-12)


def test_cuboid_contains_corners_without_duplicates():
    dims = (2.0, 1.0, 1.0)
    vertices = build_cuboid(dims, 300)
    assert len(np.unique(vertices, axis=0)) == len(vertices)
    for signs in itertools.product((-1.0, 1.0), repeat=3):
        corner = np.asarray(signs) * np.asarray(dims) / 2.0
        assert np.any(np.all(np.isclose(vertices, corner), axis=1)), corner


@pytest.mark.parametrize("target", [150, 600, 1100])
def test_cuboid_vertex_count_near_target(target):
    n = len(build_cuboid((1.4, 1.4, 1.4), target))
    assert abs(n - target) <= 0.1 * target


def test_cuboid_face_density_follows_area():
    # 긴 축 방향 면(4개)이 정사각 면(2개)보다 정점을 더 많이 가짐
    vertices = build_cuboid((3.0, 1.0, 1.0), 800)
    on_x_faces = np.isclose(np.abs(vertices[:, 0]), 1.5).sum()
    on_y_faces = np.isclose(np.abs(vertices[:, 1]), 0.5).sum()
    assert on_y_faces > on_x_faces


@pytest.mark.parametrize("dims,target", [((1.0, 0.0, 1.0), 100), ((1.0, 1.0), 100), ((1.0, 1.0, 1.0), 7)])
def test_cuboid_rejects_bad_arguments(dims, target):
    with pytest.raises(InvalidArgumentError):
        build_cuboid(dims, target)


def test_dims_recovered_from_vertices():
    dims = (2.0, 1.0, 1.6)
    assert dims_from_vertices(build_cuboid(dims, 200)) == pytest.approx(dims)


def test_init_textures_unit_norm_and_seeded():
    a = init_textures(50, 16, np.random.default_rng(3))
    b = init_textures(50, 16, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert np.allclose(np.linalg.norm(a, axis=1), 1.0)
    with pytest.raises(InvalidArgumentError):
        init_textures(0, 16, np.random.default_rng(0))


def test_texture_class_mean_is_vertex_mean():
    model = build_model(0, (1.0, 1.0, 1.0), 100, 4, np.random.default_rng(1))
    assert np.allclose(texture_class_mean(model), model.texture.mean(axis=0))


def test_bank_validate_rejects_inconsistent_models(tiny_bank):
    tiny_bank.validate()
    m0, m1 = tiny_bank.models

    with pytest.raises(InvalidStateError):
        tiny_bank.with_models([m1, m0]).validate()  # 클래스 id 순서

    wrong_dim = m1.with_texture(np.ones((m1.n_vertices, tiny_bank.dim + 1)))
    with pytest.raises(InvalidStateError):
        tiny_bank.with_models([m0, wrong_dim]).validate()

    short = m1.with_texture(m1.texture[:-1])
    with pytest.raises(InvalidStateError):
        tiny_bank.with_models([m0, short]).validate()

    off_surface = replace(m1, vertices=m1.vertices * 0.5)
    with pytest.raises(InvalidStateError):
        tiny_bank.with_models([m0, off_surface]).validate()

    with pytest.raises(InvalidStateError):
        replace(tiny_bank, background=BackgroundModel(np.zeros(tiny_bank.dim + 2))).validate()
